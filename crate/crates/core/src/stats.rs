//! Distributions, prior sets, interval and moment fitting, multivariate
//! normals and importance-sampling diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{domain, Error, Result};
use crate::nathist::{CALIBRATED_NAMES, N_CALIBRATED};
use crate::scalar::Scalar;

/// Two-sided 95% standard normal quantile used for interval fitting.
pub const Z_975: f64 = 1.96;

/// Smallest standard deviation accepted by [`fit_from_moments`], on the
/// scale of the family: absolute for beta and normal, relative to the mean
/// for lognormal.
pub const MIN_MOMENT_SD: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Beta,
    Lognormal,
    Normal,
    Uniform,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Beta { alpha: f64, beta: f64 },
    Lognormal { meanlog: f64, sdlog: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Fixed { value: f64 },
}

fn std_normal() -> StatrsNormal {
    StatrsNormal::standard()
}

fn phi_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

fn phi_inv(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

impl DistributionSpec {
    pub fn family(&self) -> Family {
        match self {
            Self::Beta { .. } => Family::Beta,
            Self::Lognormal { .. } => Family::Lognormal,
            Self::Normal { .. } => Family::Normal,
            Self::Uniform { .. } => Family::Uniform,
            Self::Fixed { .. } => Family::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |c: bool, what: &str| if c { Ok(()) } else { domain(format!("{what} in {self:?}")) };
        match *self {
            Self::Beta { alpha, beta } => ok(
                alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0,
                "beta shapes must be finite and > 0",
            ),
            Self::Lognormal { meanlog, sdlog } => ok(
                meanlog.is_finite() && sdlog.is_finite() && sdlog > 0.0,
                "lognormal needs finite meanlog and sdlog > 0",
            ),
            Self::Normal { mean, sd } => ok(mean.is_finite() && sd.is_finite() && sd > 0.0, "normal needs sd > 0"),
            Self::Uniform { lo, hi } => ok(lo.is_finite() && hi.is_finite() && lo < hi, "uniform needs lo < hi"),
            Self::Fixed { value } => ok(value.is_finite(), "fixed value must be finite"),
        }
    }

    /// Closed support `[lo, hi]`.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::Beta { .. } => (0.0, 1.0),
            Self::Lognormal { .. } => (0.0, f64::INFINITY),
            Self::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Uniform { lo, hi } => (lo, hi),
            Self::Fixed { value } => (value, value),
        }
    }

    /// Log-density; `-inf` outside the support. A fixed distribution has
    /// log-density 0 at its value.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Self::Beta { alpha, beta } => {
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (-x).ln_1p() - ln_beta(alpha, beta)
            }
            Self::Lognormal { meanlog, sdlog } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (x.ln() - meanlog) / sdlog;
                -0.5 * z * z - x.ln() - sdlog.ln() - LN_SQRT_2PI
            }
            Self::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Self::Uniform { lo, hi } => {
                if x < lo || x > hi {
                    f64::NEG_INFINITY
                } else {
                    -(hi - lo).ln()
                }
            }
            Self::Fixed { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Self::Beta { alpha, beta } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    beta_reg(alpha, beta, x)
                }
            }
            Self::Lognormal { meanlog, sdlog } => {
                if x <= 0.0 {
                    0.0
                } else {
                    phi_cdf((x.ln() - meanlog) / sdlog)
                }
            }
            Self::Normal { mean, sd } => phi_cdf((x - mean) / sd),
            Self::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Self::Fixed { value } => {
                if x >= value {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return domain(format!("quantile probability {p} outside (0, 1)"));
        }
        Ok(match *self {
            Self::Beta { alpha, beta } => beta_quantile(alpha, beta, p),
            Self::Lognormal { meanlog, sdlog } => (meanlog + sdlog * phi_inv(p)).exp(),
            Self::Normal { mean, sd } => mean + sd * phi_inv(p),
            Self::Uniform { lo, hi } => lo + p * (hi - lo),
            Self::Fixed { value } => value,
        })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Beta { alpha, beta } => alpha / (alpha + beta),
            Self::Lognormal { meanlog, sdlog } => (meanlog + 0.5 * sdlog * sdlog).exp(),
            Self::Normal { mean, .. } => mean,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
            Self::Fixed { value } => value,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            Self::Beta { alpha, beta } => {
                let s = alpha + beta;
                (alpha * beta / (s * s * (s + 1.0))).sqrt()
            }
            Self::Lognormal { meanlog, sdlog } => {
                let s2 = sdlog * sdlog;
                (s2.exp_m1() * (2.0 * meanlog + s2).exp()).sqrt()
            }
            Self::Normal { sd, .. } => sd,
            Self::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            Self::Fixed { .. } => 0.0,
        }
    }

    /// Mode, or `None` where the density is unbounded or flat.
    pub fn mode(&self) -> Option<f64> {
        match *self {
            Self::Beta { alpha, beta } if alpha > 1.0 && beta > 1.0 => Some((alpha - 1.0) / (alpha + beta - 2.0)),
            Self::Beta { .. } | Self::Uniform { .. } => None,
            Self::Lognormal { meanlog, sdlog } => Some((meanlog - sdlog * sdlog).exp()),
            Self::Normal { mean, .. } => Some(mean),
            Self::Fixed { value } => Some(value),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Beta { alpha, beta } => rand_distr::Beta::new(alpha, beta).expect("validated").sample(rng),
            Self::Lognormal { meanlog, sdlog } => {
                rand_distr::LogNormal::new(meanlog, sdlog).expect("validated").sample(rng)
            }
            Self::Normal { mean, sd } => rand_distr::Normal::new(mean, sd).expect("validated").sample(rng),
            Self::Uniform { lo, hi } => rng.random_range(lo..hi),
            Self::Fixed { value } => value,
        }
    }
}

/// Inverts the regularized incomplete beta function by bisection.
fn beta_quantile(alpha: f64, beta: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(alpha, beta, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Bisection for an increasing function on a log-scaled bracket.
fn bisect_log(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    (lo * hi).sqrt()
}

/// Fits `family` so that its 2.5% and 97.5% quantiles are `lb` and `ub`.
pub fn fit_from_interval(family: Family, lb: f64, ub: f64) -> Result<DistributionSpec> {
    if !(lb.is_finite() && ub.is_finite() && lb < ub) {
        return Err(Error::Fit(format!("interval ({lb}, {ub}) needs lb < ub")));
    }
    match family {
        Family::Lognormal => {
            if lb <= 0.0 {
                return Err(Error::Fit(format!("lognormal interval ({lb}, {ub}) needs lb > 0")));
            }
            Ok(DistributionSpec::Lognormal {
                meanlog: 0.5 * (lb.ln() + ub.ln()),
                sdlog: (ub.ln() - lb.ln()) / (2.0 * Z_975),
            })
        }
        Family::Normal => Ok(DistributionSpec::Normal {
            mean: 0.5 * (lb + ub),
            sd: (ub - lb) / (2.0 * Z_975),
        }),
        Family::Uniform => Ok(DistributionSpec::Uniform { lo: lb, hi: ub }),
        Family::Beta => fit_beta_interval(lb, ub),
        Family::Fixed => Err(Error::Fit("a fixed distribution has no interval".into())),
    }
}

fn fit_beta_interval(lb: f64, ub: f64) -> Result<DistributionSpec> {
    if !(lb > 0.0 && ub < 1.0) {
        return Err(Error::Fit(format!("beta interval ({lb}, {ub}) must lie inside (0, 1)")));
    }
    const BRACKET: (f64, f64) = (1e-4, 1e8);
    // For a given alpha, beta equalizes the two tail masses.
    let balance = |alpha: f64| {
        bisect_log(BRACKET.0, BRACKET.1, |beta| {
            beta_reg(alpha, beta, lb) - (1.0 - beta_reg(alpha, beta, ub))
        })
    };
    // Tail mass falls as alpha (and with it the concentration) grows.
    let alpha = bisect_log(BRACKET.0, BRACKET.1, |alpha| 0.025 - beta_reg(alpha, balance(alpha), lb));
    let beta = balance(alpha);
    let (lo_tail, hi_tail) = (beta_reg(alpha, beta, lb), 1.0 - beta_reg(alpha, beta, ub));
    if (lo_tail - 0.025).abs() > 1e-8 || (hi_tail - 0.025).abs() > 1e-8 {
        return Err(Error::Fit(format!(
            "no beta distribution has 95% interval ({lb}, {ub}); best tails {lo_tail:.3e}, {hi_tail:.3e}"
        )));
    }
    Ok(DistributionSpec::Beta { alpha, beta })
}

/// Moment matching for the given family.
pub fn fit_from_moments(family: Family, mean: f64, sd: f64) -> Result<DistributionSpec> {
    if !(mean.is_finite() && sd.is_finite()) {
        return Err(Error::Fit(format!("moments ({mean}, {sd}) must be finite")));
    }
    let scaled = if family == Family::Lognormal && mean > 0.0 { sd / mean } else { sd };
    if scaled < MIN_MOMENT_SD {
        return Err(Error::Fit(format!("sd {sd} below the conditioning floor {MIN_MOMENT_SD}")));
    }
    match family {
        Family::Beta => {
            if !(mean > 0.0 && mean < 1.0) {
                return Err(Error::Fit(format!("beta mean {mean} outside (0, 1)")));
            }
            let v = sd * sd;
            if v >= mean * (1.0 - mean) {
                return Err(Error::Fit(format!("beta variance {v} >= mean(1 - mean)")));
            }
            let common = mean * (1.0 - mean) / v - 1.0;
            Ok(DistributionSpec::Beta {
                alpha: mean * common,
                beta: (1.0 - mean) * common,
            })
        }
        Family::Lognormal => {
            if mean <= 0.0 {
                return Err(Error::Fit(format!("lognormal mean {mean} must be > 0")));
            }
            let s2 = (sd * sd / (mean * mean)).ln_1p();
            Ok(DistributionSpec::Lognormal {
                meanlog: mean.ln() - 0.5 * s2,
                sdlog: s2.sqrt(),
            })
        }
        Family::Normal => Ok(DistributionSpec::Normal { mean, sd }),
        Family::Uniform => {
            let half = 3f64.sqrt() * sd;
            Ok(DistributionSpec::Uniform {
                lo: mean - half,
                hi: mean + half,
            })
        }
        Family::Fixed => Err(Error::Fit("a fixed distribution has no spread".into())),
    }
}

/// Priors for the calibrated parameters, in calibrated-parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    names: Vec<String>,
    specs: Vec<DistributionSpec>,
}

impl PriorSet {
    /// Priors for the nine calibrated natural-history parameters.
    pub fn new(specs: Vec<DistributionSpec>) -> Result<Self> {
        if specs.len() != N_CALIBRATED {
            return domain(format!("{} priors given, {N_CALIBRATED} needed", specs.len()));
        }
        for (i, s) in specs.iter().enumerate() {
            let (lo, hi) = s.support();
            let name = CALIBRATED_NAMES[i];
            let ok = if i < 2 { lo >= 0.0 && hi <= 1.0 } else { lo >= 0.0 };
            if !ok {
                return domain(format!("prior for {name} ({s:?}) does not match the parameter's support"));
            }
        }
        Self::named(CALIBRATED_NAMES.iter().map(|n| n.to_string()).collect(), specs)
    }

    /// Priors over arbitrary named parameters.
    pub fn named(names: Vec<String>, specs: Vec<DistributionSpec>) -> Result<Self> {
        if names.len() != specs.len() || specs.is_empty() {
            return domain(format!("{} names for {} priors", names.len(), specs.len()));
        }
        for (name, s) in names.iter().zip(&specs) {
            s.validate()?;
            if matches!(s, DistributionSpec::Fixed { .. }) {
                return domain(format!("prior for {name} is fixed; fixed parameters are not calibrated"));
            }
        }
        Ok(Self { names, specs })
    }

    /// Beta priors for the two proportions and lognormal priors for the rates.
    pub fn reference() -> Self {
        use DistributionSpec::{Beta, Lognormal};
        let ln = |meanlog, sdlog| Lognormal { meanlog, sdlog };
        Self::new(vec![
            Beta { alpha: 3.0, beta: 8.0 },
            Beta { alpha: 6.0, beta: 3.0 },
            ln(-11.97, 0.59),
            ln(1.04, 0.18),
            ln(-3.45, 0.59),
            ln(-3.91, 0.35),
            ln(-1.15, 0.23),
            ln(-1.41, 0.10),
            ln(-0.78, 0.22),
        ])
        .expect("reference priors are valid")
    }

    pub fn specs(&self) -> &[DistributionSpec] {
        &self.specs
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.specs.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.specs.iter().map(|s| s.sample(rng)).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.specs.iter().map(DistributionSpec::mean).collect()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.specs.iter().map(DistributionSpec::sd).collect()
    }
}

/// Sum of the component log-densities; `-inf` if any is out of support.
pub fn prior_log_density(theta: &[f64], priors: &PriorSet) -> f64 {
    if theta.len() != priors.dim() {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for (x, s) in theta.iter().zip(priors.specs()) {
        let lp = s.ln_pdf(*x);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        total += lp;
    }
    total
}

/// A distribution with optional upper truncation, for external parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalParamSpec {
    pub dist: DistributionSpec,
    pub upper: Option<f64>,
}

impl ExternalParamSpec {
    pub fn new(dist: DistributionSpec, upper: Option<f64>) -> Result<Self> {
        dist.validate()?;
        if let Some(u) = upper {
            if !(u.is_finite() && dist.cdf(u) > 0.0) {
                return domain(format!("truncation at {u} leaves no mass for {dist:?}"));
            }
        }
        Ok(Self { dist, upper })
    }

    pub fn untruncated(dist: DistributionSpec) -> Self {
        Self { dist, upper: None }
    }

    fn upper_mass(&self) -> Option<(f64, f64)> {
        let u = self.upper?;
        let mass = self.dist.cdf(u);
        (mass < 1.0).then_some((u, mass))
    }

    /// Samples by inverting the CDF on the retained mass, which has the same
    /// law as redrawing until a value falls below the bound.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match (self.upper_mass(), self.dist) {
            (_, DistributionSpec::Fixed { value }) => value,
            (None, d) => d.sample(rng),
            (Some((u, mass)), d) => {
                let p: f64 = rng.random::<f64>() * mass;
                d.quantile(p.max(f64::MIN_POSITIVE)).map_or(u, |x| x.min(u))
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let Some((u, mass)) = self.upper_mass() else {
            return self.dist.mean();
        };
        match self.dist {
            DistributionSpec::Lognormal { meanlog, sdlog } => {
                let z = (u.ln() - meanlog) / sdlog;
                (meanlog + 0.5 * sdlog * sdlog).exp() * phi_cdf(z - sdlog) / mass
            }
            DistributionSpec::Normal { mean, sd } => {
                let z = (u - mean) / sd;
                let dens = (-0.5 * z * z - LN_SQRT_2PI).exp();
                mean - sd * dens / mass
            }
            DistributionSpec::Beta { alpha, beta } => {
                alpha / (alpha + beta) * beta_reg(alpha + 1.0, beta, u) / mass
            }
            DistributionSpec::Uniform { lo, .. } => 0.5 * (lo + u),
            DistributionSpec::Fixed { value } => value,
        }
    }
}

/// Effective sample size `(sum w)^2 / sum w^2`.
pub fn ess<T: Scalar>(weights: &[T]) -> Result<T> {
    let total: T = weights.iter().copied().sum();
    if !(total.is_finite() && total > T::zero()) || weights.iter().any(|w| *w < T::zero()) {
        return domain("weights must be non-negative with a positive finite sum");
    }
    let sq: T = weights.iter().map(|w| (*w / total) * (*w / total)).sum();
    Ok(T::one() / sq)
}

/// Expected number of distinct points in `j` multinomial draws.
pub fn expected_unique(weights: &[f64], j: usize) -> f64 {
    weights.iter().map(|&w| -((j as f64) * (-w).ln_1p()).exp_m1()).sum()
}

/// Points with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.is_empty() {
            return domain(format!("{} points with {} weights", points.len(), weights.len()));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return domain("points differ in dimension");
        }
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return domain("weights must be non-negative with a positive finite sum (all-zero weights?)");
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { points, weights })
    }

    /// Normalizes `exp(log_weights)` stably.
    pub fn from_log_weights(points: Vec<Vec<f64>>, log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return domain("all log-weights are -inf or non-finite");
        }
        let w = log_weights.iter().map(|lw| (lw - max).exp()).collect();
        Self::new(points, w)
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.weights).expect("weights normalized")
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (p, w) in self.points.iter().zip(&self.weights) {
            for (mk, pk) in m.iter_mut().zip(p) {
                *mk += w * pk;
            }
        }
        m
    }
}

/// Weighted covariance with the `1 / (1 - sum w^2)` reliability correction,
/// which reduces to the unbiased sample covariance for uniform weights.
pub fn weighted_cov(sample: &WeightedSample) -> DMatrix<f64> {
    let mean = sample.mean();
    let raw = weighted_cov_about(sample.points(), sample.weights(), &mean);
    let sq: f64 = sample.weights().iter().map(|w| w * w).sum();
    if 1.0 - sq <= 0.0 {
        return raw;
    }
    raw / (1.0 - sq)
}

/// `sum w_i (x_i - c)(x_i - c)^T / sum w_i` around a given center.
pub fn weighted_cov_about(points: &[Vec<f64>], weights: &[f64], center: &[f64]) -> DMatrix<f64> {
    let d = center.len();
    let mut cov = DMatrix::zeros(d, d);
    let total: f64 = weights.iter().sum();
    for (p, w) in points.iter().zip(weights) {
        let diff = DVector::from_iterator(d, p.iter().zip(center).map(|(x, c)| x - c));
        cov.ger(*w / total, &diff, &diff, 1.0);
    }
    cov
}

/// Indices of the `k` points closest to `center` in the Mahalanobis metric
/// of `metric_cov`, nearest first; ties go to the lower index.
pub fn nearest_neighbors(points: &[Vec<f64>], center: &[f64], k: usize, metric_cov: &DMatrix<f64>) -> Result<Vec<usize>> {
    if k > points.len() {
        return domain(format!("{k} neighbours requested from {} points", points.len()));
    }
    let chol = CholeskyFactor::new(metric_cov)?;
    let mut dist: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let diff: Vec<f64> = p.iter().zip(center).map(|(x, c)| x - c).collect();
            (chol.solve_norm_sq(&diff), i)
        })
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() && k > 0 {
        dist.select_nth_unstable_by(k - 1, by_dist);
    }
    dist.truncate(k);
    dist.sort_by(by_dist);
    Ok(dist.into_iter().map(|(_, i)| i).collect())
}

/// Multinomial resampling of `j` indices.
pub fn resample_indices<R: Rng + ?Sized>(weights: &[f64], j: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = rand_distr::weighted::WeightedIndex::new(weights)
        .map_err(|e| Error::Domain(format!("cannot resample: {e}")))?;
    Ok((0..j).map(|_| dist.sample(rng)).collect())
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lower Cholesky factor of a covariance, with diagonal jitter when needed.
#[derive(Debug, Clone)]
struct CholeskyFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    const JITTER_START: f64 = 1e-10;
    const JITTER_MAX: f64 = 1e-4;

    fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        if d == 0 || cov.ncols() != d {
            return Err(Error::Factorization(format!("covariance is {}x{}", cov.nrows(), cov.ncols())));
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::Factorization("covariance has non-finite entries".into()));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        if let Some(c) = sym.clone().cholesky() {
            return Ok(Self { l: c.unpack(), jitter: 0.0 });
        }
        let scale = sym.trace() / d as f64;
        if !(scale > 0.0) {
            return Err(Error::Factorization(format!("covariance trace {} is not positive", sym.trace())));
        }
        let mut rel = Self::JITTER_START;
        while rel <= Self::JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let m = &sym + DMatrix::identity(d, d) * jitter;
            if let Some(c) = m.cholesky() {
                log::debug!("covariance factorized with jitter {jitter:e}");
                return Ok(Self { l: c.unpack(), jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Factorization(format!(
            "covariance not positive definite after jitter {:e}",
            Self::JITTER_MAX * scale
        )))
    }

    /// `|L^{-1} v|^2`
    fn solve_norm_sq(&self, v: &[f64]) -> f64 {
        let d = v.len();
        let mut z = [0.0f64; 32];
        let mut heap;
        let z: &mut [f64] = if d <= 32 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut total = 0.0;
        for i in 0..d {
            let mut s = v[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
            total += z[i] * z[i];
        }
        total
    }

    fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }
}

/// Multivariate normal with a pre-factorized covariance.
#[derive(Debug, Clone)]
pub struct MvNormal {
    mean: Vec<f64>,
    chol: CholeskyFactor,
    ln_norm: f64,
}

impl MvNormal {
    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::Factorization(format!(
                "mean has dimension {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let chol = CholeskyFactor::new(cov)?;
        let ln_norm = -0.5 * chol.ln_det() - mean.len() as f64 * LN_SQRT_2PI;
        Ok(Self { mean, chol, ln_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// The covariance actually used, jitter included.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol.l * self.chol.l.transpose()
    }

    /// Diagonal jitter that was added before factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut buf = [0.0f64; 32];
        let diff: Vec<f64>;
        let diff: &[f64] = if x.len() <= 32 {
            for (b, (xi, mi)) in buf.iter_mut().zip(x.iter().zip(&self.mean)) {
                *b = xi - mi;
            }
            &buf[..x.len()]
        } else {
            diff = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            &diff
        };
        self.ln_norm - 0.5 * self.chol.solve_norm_sq(diff)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol.l[(i, k)] * z[k]).sum::<f64>())
            .collect()
    }
}

pub fn mvn_log_density(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    Ok(MvNormal::new(mean.to_vec(), cov)?.ln_pdf(x))
}

pub fn mvn_sample<R: Rng + ?Sized>(mean: &[f64], cov: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    Ok(MvNormal::new(mean.to_vec(), cov)?.sample(rng))
}

/// Numerically stable `ln(sum exp(x))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(exp(a) + exp(b))`
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microsim::rng::RngStreamKey;

    fn rng(i: u64) -> crate::microsim::rng::CounterStream {
        RngStreamKey::new(99, "stats-test", 0, i).stream()
    }

    fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn analytic_moments() {
        let b = DistributionSpec::Beta { alpha: 3.0, beta: 8.0 };
        assert!((b.mean() - 3.0 / 11.0).abs() < 1e-15);
        let ln = DistributionSpec::Lognormal { meanlog: -3.45, sdlog: 0.59 };
        assert!((ln.quantile(0.5).unwrap() - (-3.45f64).exp()).abs() < 1e-12);
        assert!((ln.quantile(0.5).unwrap() - 0.0317).abs() < 5e-5);
    }

    #[test]
    fn densities_integrate_to_one() {
        let cases = [
            DistributionSpec::Beta { alpha: 3.0, beta: 8.0 },
            DistributionSpec::Beta { alpha: 6.0, beta: 3.0 },
            DistributionSpec::Normal { mean: 2.0, sd: 0.3 },
            DistributionSpec::Uniform { lo: -1.0, hi: 2.0 },
        ];
        for d in cases {
            let (lo, hi) = match d {
                DistributionSpec::Normal { mean, sd } => (mean - 12.0 * sd, mean + 12.0 * sd),
                _ => d.support(),
            };
            let total = integrate(|x| d.pdf(x), lo, hi, 200_000);
            assert!((total - 1.0).abs() < 1e-4, "{d:?}: {total}");
        }
        for (m, s) in [(-11.97, 0.59), (1.04, 0.18), (-1.41, 0.10)] {
            let d = DistributionSpec::Lognormal { meanlog: m, sdlog: s };
            let total = integrate(|y| d.pdf(y.exp()) * y.exp(), m - 12.0 * s, m + 12.0 * s, 20_000);
            assert!((total - 1.0).abs() < 1e-4, "{d:?}: {total}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let cases = [
            DistributionSpec::Beta { alpha: 3.0, beta: 8.0 },
            DistributionSpec::Lognormal { meanlog: 1.04, sdlog: 0.18 },
            DistributionSpec::Normal { mean: 0.0, sd: 2.0 },
            DistributionSpec::Uniform { lo: 1.0, hi: 3.0 },
        ];
        for d in cases {
            for i in 1..100 {
                let p = i as f64 / 100.0;
                assert!((d.cdf(d.quantile(p).unwrap()) - p).abs() < 1e-9, "{d:?} at {p}");
            }
            assert!(d.quantile(0.0).is_err() && d.quantile(1.0).is_err());
        }
    }

    #[test]
    fn out_of_support_log_density() {
        let b = DistributionSpec::Beta { alpha: 3.0, beta: 8.0 };
        assert_eq!(b.ln_pdf(1.2), f64::NEG_INFINITY);
        assert_eq!(b.pdf(-0.1), 0.0);
        let ln = DistributionSpec::Lognormal { meanlog: 0.0, sdlog: 1.0 };
        assert_eq!(ln.ln_pdf(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn lognormal_interval_fits() {
        let DistributionSpec::Lognormal { meanlog, sdlog } = fit_from_interval(Family::Lognormal, 1.0, 3.0).unwrap() else {
            panic!()
        };
        assert!((meanlog - 0.5 * 3f64.ln()).abs() < 1e-12 && (meanlog - 0.5493).abs() < 1e-4);
        assert!((sdlog - 3f64.ln() / 3.92).abs() < 1e-12 && (sdlog - 0.2803).abs() < 1e-4);
        let std = fit_from_interval(Family::Lognormal, (-1.96f64).exp(), 1.96f64.exp()).unwrap();
        let DistributionSpec::Lognormal { meanlog, sdlog } = std else { panic!() };
        assert!(meanlog.abs() < 1e-12 && (sdlog - 1.0).abs() < 1e-12);
        assert!(fit_from_interval(Family::Lognormal, 0.0, 1.0).is_err());
        assert!(fit_from_interval(Family::Lognormal, 2.0, 1.0).is_err());
    }

    #[test]
    fn beta_interval_round_trips() {
        for (lb, ub) in [(0.734, 0.808), (0.855, 0.880), (0.920, 0.990), (0.05, 0.6), (0.001, 0.01)] {
            let d = fit_from_interval(Family::Beta, lb, ub).unwrap();
            let (q1, q2) = (d.quantile(0.025).unwrap(), d.quantile(0.975).unwrap());
            assert!((q1 - lb).abs() < 1e-6 && (q2 - ub).abs() < 1e-6, "({lb}, {ub}) -> {d:?}: {q1} {q2}");
        }
        assert!(fit_from_interval(Family::Beta, 0.5, 1.0).is_err());
        assert!(fit_from_interval(Family::Beta, 0.0, 0.5).is_err());
    }

    #[test]
    fn moment_fits() {
        let DistributionSpec::Lognormal { meanlog, sdlog } = fit_from_moments(Family::Lognormal, 0.035, 0.002).unwrap() else {
            panic!()
        };
        assert!((meanlog + 3.3540).abs() < 1e-4 && (sdlog - 0.0571).abs() < 1e-4);
        let b = fit_from_moments(Family::Beta, 0.264, 0.008).unwrap();
        assert!((b.mean() - 0.264).abs() < 1e-12 && (b.sd() - 0.008).abs() < 1e-12);
        assert!(fit_from_moments(Family::Beta, 0.5, 1e-7).is_err());
        assert!(fit_from_moments(Family::Beta, 0.5, 0.5).is_err());
        assert!(fit_from_moments(Family::Lognormal, -1.0, 0.1).is_err());
        assert!(fit_from_moments(Family::Lognormal, 6e-6, 3e-6).is_ok());
        assert!(fit_from_moments(Family::Lognormal, 6e-6, 1e-12).is_err());
    }

    #[test]
    fn moment_fit_monte_carlo_round_trip() {
        let mut r = rng(1);
        for (family, mean, sd) in [(Family::Beta, 0.706, 0.019), (Family::Lognormal, 0.457, 0.076)] {
            let d = fit_from_moments(family, mean, sd).unwrap();
            let n = 1_000_000;
            let xs: Vec<f64> = (0..n).map(|_| d.sample(&mut r)).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((m / mean - 1.0).abs() < 0.01 && (s / sd - 1.0).abs() < 0.01, "{family:?}: {m} {s}");
        }
    }

    #[test]
    fn prior_density() {
        let priors = PriorSet::reference();
        let truth = crate::nathist::NaturalHistoryParams::<f64>::reference().calibrated();
        let a = prior_log_density(&truth, &priors);
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), prior_log_density(&truth, &priors).to_bits());
        let oracle: f64 = truth.iter().zip(priors.specs()).map(|(x, s)| s.pdf(*x).ln()).sum();
        assert!((a - oracle).abs() < 1e-9);
        let mut bad = truth;
        bad[0] = 1.2;
        assert_eq!(prior_log_density(&bad, &priors), f64::NEG_INFINITY);

        let mode: Vec<f64> = priors.specs().iter().map(|s| s.mode().unwrap()).collect();
        let at_mode = prior_log_density(&mode, &priors);
        for i in 0..mode.len() {
            for f in [0.99, 1.01] {
                let mut p = mode.clone();
                p[i] *= f;
                assert!(prior_log_density(&p, &priors) < at_mode);
            }
        }
    }

    #[test]
    fn prior_set_validation() {
        let mut specs = PriorSet::reference().specs().to_vec();
        specs[0] = DistributionSpec::Lognormal { meanlog: 0.0, sdlog: 1.0 };
        assert!(PriorSet::new(specs).is_err());
        assert!(PriorSet::new(vec![]).is_err());
    }

    #[test]
    fn truncated_external_params() {
        let d = fit_from_interval(Family::Lognormal, 0.98, 1.0).unwrap();
        let e = ExternalParamSpec::new(d, Some(1.0)).unwrap();
        let mut r = rng(2);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| e.sample(&mut r)).collect();
        assert!(xs.iter().all(|x| *x <= 1.0));
        let m = xs.iter().sum::<f64>() / n as f64;
        assert!((m - e.mean()).abs() < 1e-4, "{m} vs {}", e.mean());
        // Untruncated mean exceeds 1's neighbourhood less than the truncated one.
        assert!(e.mean() < d.mean());

        let b = ExternalParamSpec::new(DistributionSpec::Beta { alpha: 2.0, beta: 2.0 }, Some(0.5)).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| b.sample(&mut r)).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        assert!((m - b.mean()).abs() < 2e-3, "{m} vs {}", b.mean());
        assert!((b.mean() - 0.3125).abs() < 1e-9);
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25f64; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert!((ess(&[0.5f64, 0.25, 0.25]).unwrap() - 1.0 / 0.375).abs() < 1e-12);
        assert!((ess(&[1.0f64, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((ess(&[0.5f32, 0.25, 0.25]).unwrap() - 2.6667).abs() < 1e-3);
        assert!(ess(&[0.0f64, 0.0]).is_err());
    }

    #[test]
    fn weighted_sample_checks() {
        assert!(WeightedSample::new(vec![vec![1.0]], vec![0.0]).is_err());
        let s = WeightedSample::from_log_weights(vec![vec![1.0], vec![2.0]], &[-1000.0, -1000.0 + 2f64.ln()]).unwrap();
        assert!((s.weights()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weighted_cov_is_sample_cov() {
        let mut r = rng(3);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| vec![r.random::<f64>(), r.random::<f64>() * 3.0]).collect();
        let s = WeightedSample::uniform(pts.clone()).unwrap();
        let cov = weighted_cov(&s);
        let n = pts.len() as f64;
        let m: Vec<f64> = (0..2).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        for a in 0..2 {
            for b in 0..2 {
                let c = pts.iter().map(|p| (p[a] - m[a]) * (p[b] - m[b])).sum::<f64>() / (n - 1.0);
                assert!((cov[(a, b)] - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mvn_identity_and_scalar_cases() {
        let cov = DMatrix::identity(3, 3);
        let v = mvn_log_density(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &cov).unwrap();
        assert!((v + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let one = DMatrix::from_element(1, 1, 0.25);
        let v = mvn_log_density(&[0.7], &[0.2], &one).unwrap();
        let scalar = DistributionSpec::Normal { mean: 0.2, sd: 0.5 }.ln_pdf(0.7);
        assert!((v - scalar).abs() < 1e-12);
    }

    #[test]
    fn mvn_sample_covariance() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.9, -0.3, 0.9, 1.0, 0.2, -0.3, 0.2, 0.5]);
        let mvn = MvNormal::new(vec![1.0, -1.0, 0.0], &cov).unwrap();
        let mut r = rng(4);
        let pts: Vec<Vec<f64>> = (0..100_000).map(|_| mvn.sample(&mut r)).collect();
        let est = weighted_cov(&WeightedSample::uniform(pts).unwrap());
        let rel = (&est - &cov).norm() / cov.norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn near_singular_covariance_gets_jitter() {
        // Rank-one covariance: perfectly correlated coordinates.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let mvn = MvNormal::new(vec![0.0, 0.0], &cov).unwrap();
        assert!(mvn.jitter() > 0.0 && mvn.jitter() <= 1e-4);
        assert!(mvn.ln_pdf(&[0.0, 0.0]).is_finite());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(MvNormal::new(vec![0.0, 0.0], &bad), Err(Error::Factorization(_))));
    }

    #[test]
    fn nearest_neighbours_use_metric() {
        let pts = vec![vec![3.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5], vec![0.0, 0.0]];
        let iso = DMatrix::identity(2, 2);
        assert_eq!(nearest_neighbors(&pts, &[0.0, 0.0], 3, &iso).unwrap(), vec![3, 2, 1]);
        // A wide first axis brings the far x-point closest.
        let stretched = DMatrix::from_diagonal(&DVector::from_vec(vec![100.0, 1.0]));
        assert_eq!(nearest_neighbors(&pts, &[0.0, 0.0], 3, &stretched).unwrap(), vec![3, 0, 2]);
        assert!(nearest_neighbors(&pts, &[0.0, 0.0], 5, &iso).is_err());
    }

    #[test]
    fn expected_unique_bounds() {
        assert!((expected_unique(&[1.0, 0.0], 10) - 1.0).abs() < 1e-12);
        let w = vec![0.01; 100];
        let oracle = 100.0 * (1.0 - 0.99f64.powi(50));
        assert!((expected_unique(&w, 50) - oracle).abs() < 1e-9);
    }

    #[test]
    fn resampling_frequencies() {
        let mut r = rng(5);
        let idx = resample_indices(&[0.2, 0.8, 0.0], 100_000, &mut r).unwrap();
        let ones = idx.iter().filter(|i| **i == 1).count() as f64 / 1e5;
        assert!((ones - 0.8).abs() < 0.01);
        assert!(idx.iter().all(|i| *i != 2));
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 2.5);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert!((quantile_sorted(&xs, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn log_sum_helpers() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 3.0), 3.0);
        assert!((log_add_exp(-1000.0, -1000.0) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn serde_tags() {
        let d: DistributionSpec = serde_json::from_str(r#"{"family":"lognormal","meanlog":1.0,"sdlog":0.5}"#).unwrap();
        assert_eq!(d, DistributionSpec::Lognormal { meanlog: 1.0, sdlog: 0.5 });
        assert!(serde_json::from_str::<DistributionSpec>(r#"{"family":"beta","alpha":1.0,"beta":2.0,"x":1}"#).is_err());
    }
}
