//! Bayesian calibration by incremental mixture importance sampling.
//!
//! The sampler starts from `n0` prior draws and, at each iteration, adds a
//! multivariate normal component centred on the current highest-weight point
//! with a covariance taken from its `b` nearest neighbours. Importance weights
//! are `L(theta) p(theta) / q(theta)` with `q` the defensive mixture of the
//! prior and every component so far. Proposals live in an unconstrained space
//! (log for positive parameters, logit for bounded ones) and all densities in
//! that space carry the Jacobian. Each likelihood is computed once per point
//! and kept.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::io::{csv_reader, num, peek_provenance, write_header, Provenance};
use crate::microsim::rng::{derive_seed, RngStreamKey};
use crate::microsim::{epi_outputs, expected_cohort, simulate_cohort, Horizon, ModelPrediction};
use crate::nathist::{LifeTable, NaturalHistoryParams, CALIBRATED_NAMES};
use crate::stats::{
    ess, expected_unique, log_add_exp, nearest_neighbors, prior_log_density, quantile_sorted, resample_indices,
    weighted_cov, weighted_cov_about, DistributionSpec, MvNormal, PriorSet, WeightedSample,
};
use crate::targets::{log_likelihood, TargetBinSpec, TargetKey, TargetSet};

/// Space in which mixture components are fitted and sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSpace {
    /// Log for positive parameters, logit for bounded ones.
    #[default]
    Transformed,
    /// The parameters themselves; proposals outside the prior support get
    /// zero weight.
    Natural,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Identity,
    Log,
    Logit { lo: f64, hi: f64 },
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Coordinate-wise bijection between parameters and proposal space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTransform {
    coords: Vec<Coord>,
}

impl ParamTransform {
    pub fn for_priors(priors: &PriorSet, space: ProposalSpace) -> Self {
        let coords = priors
            .specs()
            .iter()
            .map(|s| match (space, *s) {
                (ProposalSpace::Natural, _) => Coord::Identity,
                (_, DistributionSpec::Beta { .. }) => Coord::Logit { lo: 0.0, hi: 1.0 },
                (_, DistributionSpec::Uniform { lo, hi }) => Coord::Logit { lo, hi },
                (_, DistributionSpec::Lognormal { .. }) => Coord::Log,
                _ => Coord::Identity,
            })
            .collect();
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `None` when `theta` is outside the domain of the transform.
    pub fn to_z(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.coords
            .iter()
            .zip(theta)
            .map(|(c, &x)| {
                let z = match *c {
                    Coord::Identity => x,
                    Coord::Log => x.ln(),
                    Coord::Logit { lo, hi } => {
                        let u = (x - lo) / (hi - lo);
                        u.ln() - (-u).ln_1p()
                    }
                };
                z.is_finite().then_some(z)
            })
            .collect()
    }

    pub fn from_z(&self, z: &[f64]) -> Vec<f64> {
        self.coords
            .iter()
            .zip(z)
            .map(|(c, &z)| match *c {
                Coord::Identity => z,
                Coord::Log => z.exp(),
                Coord::Logit { lo, hi } => lo + (hi - lo) / (1.0 + (-z).exp()),
            })
            .collect()
    }

    /// `ln |d theta / d z|`
    pub fn ln_jacobian(&self, z: &[f64]) -> f64 {
        self.coords
            .iter()
            .zip(z)
            .map(|(c, &z)| match *c {
                Coord::Identity => 0.0,
                Coord::Log => z,
                Coord::Logit { lo, hi } => (hi - lo).ln() - softplus(-z) - softplus(z),
            })
            .sum()
    }

    /// Prior log-density of the point `z` in proposal space.
    pub fn ln_prior_z(&self, z: &[f64], priors: &PriorSet) -> f64 {
        let lp = prior_log_density(&self.from_z(z), priors);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        lp + self.ln_jacobian(z)
    }
}

/// Log-likelihood of a calibrated parameter vector.
///
/// `point` is the index of the point within the run; implementations may use
/// it to select random streams. Returning `-inf` marks a parameter set the
/// model cannot produce; an error marks a failed evaluation.
pub trait LogLikelihood: Sync {
    fn log_likelihood(&self, theta: &[f64], point: usize) -> Result<f64>;
}

/// Wraps a closure as a [`LogLikelihood`].
pub struct FnLikelihood<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> LogLikelihood for FnLikelihood<F> {
    fn log_likelihood(&self, theta: &[f64], _point: usize) -> Result<f64> {
        Ok((self.0)(theta))
    }
}

/// How the model output `phi(theta)` is computed for the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Microsimulation of `n_lik` individuals.
    Microsim,
    /// The exact expectation of the microsimulation outputs.
    #[default]
    Expected,
}

/// Which random streams the likelihood cohorts use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodStreams {
    /// Every parameter set is simulated with the same streams.
    #[default]
    Common,
    /// Each point gets its own streams.
    PerPoint,
}

/// Likelihood of the natural-history model against a target set.
pub struct CalibrationLikelihood<'a> {
    pub targets: &'a TargetSet,
    pub life_table: &'a LifeTable<f64>,
    /// Supplies the fixed parameters; its calibrated entries are replaced.
    pub base: NaturalHistoryParams<f64>,
    pub horizon: Horizon,
    pub estimator: EstimatorKind,
    pub n_lik: usize,
    pub streams: LikelihoodStreams,
    pub master_seed: u64,
}

impl CalibrationLikelihood<'_> {
    /// Model prediction at `theta`, or `None` if the parameters are infeasible.
    pub fn predict(&self, theta: &[f64], point: usize) -> Result<Option<ModelPrediction>> {
        let params = self.base.with_calibrated(theta)?;
        if params.validate().is_err() || crate::microsim::initial_state_distribution(&params).is_err() {
            return Ok(None);
        }
        let bins = &self.targets.metadata.bins;
        let pred = match self.estimator {
            EstimatorKind::Expected => epi_outputs(&expected_cohort(&params, self.life_table, self.horizon)?, bins)?,
            EstimatorKind::Microsim => {
                let draw = match self.streams {
                    LikelihoodStreams::Common => 0,
                    LikelihoodStreams::PerPoint => point as u64,
                };
                let seed = derive_seed(self.master_seed, "likelihood");
                let cohort = simulate_cohort(&params, self.life_table, self.horizon, self.n_lik, seed, draw)?;
                epi_outputs(&cohort, bins)?
            }
        };
        Ok(Some(pred))
    }
}

impl LogLikelihood for CalibrationLikelihood<'_> {
    fn log_likelihood(&self, theta: &[f64], point: usize) -> Result<f64> {
        Ok(match self.predict(theta, point)? {
            Some(pred) => log_likelihood(&pred, self.targets),
            None => f64::NEG_INFINITY,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImisConfig {
    pub n0: usize,
    pub b: usize,
    pub j: usize,
    pub max_iterations: usize,
    pub stop_fraction: f64,
    pub n_lik: usize,
    pub estimator: EstimatorKind,
    pub streams: LikelihoodStreams,
    pub space: ProposalSpace,
    pub master_seed: u64,
}

impl Default for ImisConfig {
    fn default() -> Self {
        Self::for_dim(CALIBRATED_NAMES.len())
    }
}

impl ImisConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            n0: (1000 * d / 9).max(250),
            b: (1000 * d / 9).max(d + 1),
            j: 5000,
            max_iterations: 200,
            stop_fraction: 1.0 - (-1.0f64).exp(),
            n_lik: 10_000,
            estimator: EstimatorKind::default(),
            streams: LikelihoodStreams::default(),
            space: ProposalSpace::default(),
            master_seed: 1,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.n0 >= self.b && self.b > d) {
            return domain(format!("need n0 >= b >= d + 1, got n0 = {}, b = {}, d = {d}", self.n0, self.b));
        }
        if self.j == 0 {
            return domain("j must be at least 1");
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction < 1.0) {
            return domain(format!("stop_fraction {} outside (0, 1)", self.stop_fraction));
        }
        if self.estimator == EstimatorKind::Microsim && self.n_lik == 0 {
            return domain("n_lik must be at least 1");
        }
        Ok(())
    }
}

/// A normal mixture component in proposal space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub count: usize,
}

impl MixtureComponent {
    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>, count: usize) -> Self {
        let cov = cov.row_iter().map(|r| r.iter().copied().collect()).collect();
        Self { mean, cov, count }
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| self.cov[i][j])
    }
}

/// Every point evaluated so far, with the pieces of its importance weight.
pub struct ImisState {
    pub z: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub ln_lik: Vec<f64>,
    /// Prior log-density in proposal space.
    pub ln_prior: Vec<f64>,
    /// `ln sum_s count_s H_s(z_i)` over the components so far.
    ln_components: Vec<f64>,
    components: Vec<(MixtureComponent, MvNormal)>,
    n0: usize,
}

impl ImisState {
    pub fn new(z: Vec<Vec<f64>>, theta: Vec<Vec<f64>>, ln_lik: Vec<f64>, ln_prior: Vec<f64>) -> Self {
        let n0 = z.len();
        Self {
            ln_components: vec![f64::NEG_INFINITY; n0],
            z,
            theta,
            ln_lik,
            ln_prior,
            components: Vec::new(),
            n0,
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn components(&self) -> impl Iterator<Item = &MixtureComponent> {
        self.components.iter().map(|(c, _)| c)
    }

    /// Adds a component; existing points get its density.
    pub fn add_component(&mut self, comp: MixtureComponent) -> Result<()> {
        let mvn = MvNormal::new(comp.mean.clone(), &comp.cov_matrix())?;
        let ln_count = (comp.count as f64).ln();
        for (z, acc) in self.z.iter().zip(self.ln_components.iter_mut()) {
            *acc = log_add_exp(*acc, ln_count + mvn.ln_pdf(z));
        }
        self.components.push((comp, mvn));
        Ok(())
    }

    /// Adds points drawn after the last component was added.
    pub fn add_points(&mut self, z: Vec<Vec<f64>>, theta: Vec<Vec<f64>>, ln_lik: Vec<f64>, ln_prior: Vec<f64>) {
        for zi in &z {
            let mut acc = f64::NEG_INFINITY;
            for (c, mvn) in &self.components {
                acc = log_add_exp(acc, (c.count as f64).ln() + mvn.ln_pdf(zi));
            }
            self.ln_components.push(acc);
        }
        self.z.extend(z);
        self.theta.extend(theta);
        self.ln_lik.extend(ln_lik);
        self.ln_prior.extend(ln_prior);
    }

    /// `ln q(z_i)` for the defensive mixture currently in use.
    pub fn ln_mixture(&self, i: usize) -> f64 {
        let ln_n = (self.len() as f64).ln();
        log_add_exp(
            (self.n0 as f64).ln() - ln_n + self.ln_prior[i],
            self.ln_components[i] - ln_n,
        )
    }

    /// Unnormalized log importance weights.
    pub fn log_weights(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let num = self.ln_lik[i] + self.ln_prior[i];
                if num == f64::NEG_INFINITY || num.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    num - self.ln_mixture(i)
                }
            })
            .collect()
    }

    /// Normalized importance weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let lw = self.log_weights();
        let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Calibration(
                "all importance weights are zero: the priors exclude all target-compatible regions".into(),
            ));
        }
        let w: Vec<f64> = lw.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / total).collect())
    }
}

/// Index of the largest weight; ties go to the lowest index.
pub fn select_center(weights: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[best] {
            best = i;
        }
    }
    best
}

/// Normal component centred at point `center` with the covariance of its `b`
/// nearest neighbours, weighted by `(w_i + 1/N) / 2`.
pub fn local_component(
    z: &[Vec<f64>],
    weights: &[f64],
    center: usize,
    b: usize,
    metric: &DMatrix<f64>,
) -> Result<MixtureComponent> {
    let nn = nearest_neighbors(z, &z[center], b, metric)?;
    let inv_n = 1.0 / z.len() as f64;
    let pts: Vec<Vec<f64>> = nn.iter().map(|&i| z[i].clone()).collect();
    let w: Vec<f64> = nn.iter().map(|&i| 0.5 * (weights[i] + inv_n)).collect();
    let cov = weighted_cov_about(&pts, &w, &z[center]);
    Ok(MixtureComponent::new(z[center].clone(), &cov, b))
}

pub fn should_stop(weights: &[f64], j: usize, stop_fraction: f64) -> bool {
    expected_unique(weights, j) >= stop_fraction * j as f64
}

/// Evaluates a batch in parallel, gathering by point index. A failed
/// evaluation is retried once before the run is aborted.
fn evaluate_batch(lik: &dyn LogLikelihood, thetas: &[Vec<f64>], skip: &[bool], first: usize) -> Result<Vec<f64>> {
    thetas
        .par_iter()
        .zip(skip)
        .enumerate()
        .map(|(k, (theta, &skip))| {
            if skip {
                return Ok(f64::NEG_INFINITY);
            }
            let point = first + k;
            let v = lik.log_likelihood(theta, point).or_else(|e| {
                log::warn!("likelihood at point {point} failed ({e}); retrying");
                lik.log_likelihood(theta, point)
            });
            match v {
                Ok(v) if v.is_nan() => Ok(f64::NEG_INFINITY),
                Ok(v) => Ok(v),
                Err(e) => Err(Error::Likelihood {
                    point,
                    message: e.to_string(),
                }),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PosteriorDiagnostics {
    pub ess: f64,
    pub unique_count: usize,
    pub expected_unique: f64,
    pub max_weight: f64,
    pub map: Vec<f64>,
    pub map_log_posterior: f64,
    pub iterations: usize,
    pub stopped_by_rule: bool,
    pub n_evaluated: usize,
    pub n0: usize,
    pub b: usize,
    pub j: usize,
    pub master_seed: u64,
    pub config_hash: Option<String>,
}

/// The resampled posterior draws: the persisted part of a calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub weight_preresample: Vec<f64>,
    pub diagnostics: PosteriorDiagnostics,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn map(&self) -> &[f64] {
        &self.diagnostics.map
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim()).map(|k| self.column(k).iter().sum::<f64>() / n).collect()
    }

    /// Sample standard deviations; zero for a single draw.
    pub fn sds(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.means()
            .iter()
            .enumerate()
            .map(|(k, m)| {
                if self.len() < 2 {
                    return 0.0;
                }
                (self.column(k).iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

pub struct PosteriorSample {
    pub draws: PosteriorDraws,
    /// Every evaluated point with its final normalized importance weight.
    pub weighted: WeightedSample,
    pub log_likelihoods: Vec<f64>,
    /// Prior log-density of each evaluated point in parameter space.
    pub log_priors: Vec<f64>,
    /// Evaluated-point index of each resampled row.
    pub source_index: Vec<usize>,
    pub components: Vec<MixtureComponent>,
}

impl PosteriorSample {
    pub fn ess(&self) -> f64 {
        self.draws.diagnostics.ess
    }

    pub fn unique_count(&self) -> usize {
        self.draws.diagnostics.unique_count
    }

    pub fn map_theta(&self) -> &[f64] {
        &self.draws.diagnostics.map
    }

    pub fn iterations_run(&self) -> usize {
        self.draws.diagnostics.iterations
    }
}

/// Fixed inputs of the natural-history model during calibration.
#[derive(Debug, Clone)]
pub struct FixedInputs {
    pub lam7: f64,
    pub lam8: f64,
    pub life_table: LifeTable<f64>,
    pub horizon: Horizon,
}

impl FixedInputs {
    pub fn reference(life_table: LifeTable<f64>) -> Self {
        let r = NaturalHistoryParams::<f64>::reference();
        Self {
            lam7: r.lam7,
            lam8: r.lam8,
            life_table,
            horizon: Horizon::default(),
        }
    }

    /// Full parameter set with calibrated values `theta`.
    pub fn params(&self, theta: &[f64]) -> Result<NaturalHistoryParams<f64>> {
        let mut base = NaturalHistoryParams::<f64>::reference();
        base.lam7 = self.lam7;
        base.lam8 = self.lam8;
        base.with_calibrated(theta)
    }
}

/// Calibrates the natural-history model to `targets`.
pub fn calibrate(priors: &PriorSet, targets: &TargetSet, fixed: &FixedInputs, cfg: &ImisConfig) -> Result<PosteriorSample> {
    if targets.is_empty() {
        return Err(Error::InvalidTargets("no targets to calibrate to".into()));
    }
    let lik = CalibrationLikelihood {
        targets,
        life_table: &fixed.life_table,
        base: fixed.params(&NaturalHistoryParams::<f64>::reference().calibrated())?,
        horizon: fixed.horizon,
        estimator: cfg.estimator,
        n_lik: cfg.n_lik,
        streams: cfg.streams,
        master_seed: cfg.master_seed,
    };
    calibrate_with(priors, &lik, cfg)
}

/// Runs the sampler against any likelihood.
pub fn calibrate_with(priors: &PriorSet, lik: &dyn LogLikelihood, cfg: &ImisConfig) -> Result<PosteriorSample> {
    let d = priors.dim();
    cfg.validate(d)?;
    let transform = ParamTransform::for_priors(priors, cfg.space);
    let seed = derive_seed(cfg.master_seed, "imis");

    let theta0: Vec<Vec<f64>> = (0..cfg.n0)
        .map(|i| priors.sample(&mut RngStreamKey::new(seed, "imis-prior", 0, i as u64).stream()))
        .collect();
    let (z0, prior0): (Vec<Vec<f64>>, Vec<f64>) = theta0
        .iter()
        .map(|t| match transform.to_z(t) {
            Some(z) => {
                let lp = transform.ln_prior_z(&z, priors);
                (z, lp)
            }
            None => (vec![f64::NAN; d], f64::NEG_INFINITY),
        })
        .unzip();
    let skip0: Vec<bool> = prior0.iter().map(|p| *p == f64::NEG_INFINITY).collect();
    let lik0 = evaluate_batch(lik, &theta0, &skip0, 0)?;
    let metric = {
        let finite: Vec<Vec<f64>> = z0.iter().filter(|z| z.iter().all(|x| x.is_finite())).cloned().collect();
        weighted_cov(&WeightedSample::uniform(finite)?)
    };
    let mut state = ImisState::new(z0, theta0, lik0, prior0);
    let mut weights = state.weights()?;
    let mut iterations = 0;
    let mut stopped = should_stop(&weights, cfg.j, cfg.stop_fraction);
    log::info!(
        "imis initial stage: n = {}, expected unique {:.0}, ess {:.1}",
        state.len(),
        expected_unique(&weights, cfg.j),
        ess(&weights)?
    );

    while !stopped && iterations < cfg.max_iterations {
        iterations += 1;
        let center = select_center(&weights);
        let comp = local_component(&state.z, &weights, center, cfg.b, &metric)?;
        let mvn = MvNormal::new(comp.mean.clone(), &comp.cov_matrix())?;
        let z_new: Vec<Vec<f64>> = (0..cfg.b)
            .map(|i| mvn.sample(&mut RngStreamKey::new(seed, "imis-mvn", iterations as u64, i as u64).stream()))
            .collect();
        let theta_new: Vec<Vec<f64>> = z_new.iter().map(|z| transform.from_z(z)).collect();
        let prior_new: Vec<f64> = z_new.iter().map(|z| transform.ln_prior_z(z, priors)).collect();
        let skip: Vec<bool> = prior_new.iter().map(|p| *p == f64::NEG_INFINITY).collect();
        let lik_new = evaluate_batch(lik, &theta_new, &skip, state.len())?;
        state.add_component(comp)?;
        state.add_points(z_new, theta_new, lik_new, prior_new);
        weights = state.weights()?;
        stopped = should_stop(&weights, cfg.j, cfg.stop_fraction);
        log::info!(
            "imis iteration {iterations}: n = {}, expected unique {:.0}, ess {:.1}",
            state.len(),
            expected_unique(&weights, cfg.j),
            ess(&weights)?
        );
    }
    if !stopped {
        log::warn!("imis stopped at max_iterations = {} before the stopping rule", cfg.max_iterations);
    }

    let source_index = resample_indices(&weights, cfg.j, &mut RngStreamKey::new(seed, "imis-resample", 0, 0).stream())?;
    let unique_count = source_index.iter().collect::<BTreeSet<_>>().len();
    let log_priors: Vec<f64> = state.theta.iter().map(|t| prior_log_density(t, priors)).collect();
    let mut map_idx = 0;
    let mut map_lp = f64::NEG_INFINITY;
    for (i, (lp, ll)) in log_priors.iter().zip(&state.ln_lik).enumerate() {
        let v = lp + ll;
        if v > map_lp {
            map_lp = v;
            map_idx = i;
        }
    }
    let diagnostics = PosteriorDiagnostics {
        ess: ess(&weights)?,
        unique_count,
        expected_unique: expected_unique(&weights, cfg.j),
        max_weight: weights.iter().copied().fold(0.0, f64::max),
        map: state.theta[map_idx].clone(),
        map_log_posterior: map_lp,
        iterations,
        stopped_by_rule: stopped,
        n_evaluated: state.len(),
        n0: cfg.n0,
        b: cfg.b,
        j: cfg.j,
        master_seed: cfg.master_seed,
        config_hash: None,
    };
    let draws = PosteriorDraws {
        names: priors.names().to_vec(),
        rows: source_index.iter().map(|&i| state.theta[i].clone()).collect(),
        weight_preresample: source_index.iter().map(|&i| weights[i]).collect(),
        diagnostics,
    };
    let components = state.components().cloned().collect();
    Ok(PosteriorSample {
        draws,
        weighted: WeightedSample::new(state.theta.clone(), weights)?,
        log_likelihoods: state.ln_lik,
        log_priors,
        source_index,
        components,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub map: f64,
    pub cri_lb: f64,
    pub cri_ub: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub params: Vec<ParamSummary>,
    pub correlation: DMatrix<f64>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn corr(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.params.iter().position(|p| p.name == a)?;
        let j = self.params.iter().position(|p| p.name == b)?;
        Some(self.correlation[(i, j)])
    }

    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        write_header(&mut w, provenance)?;
        writeln!(w, "parameter,mean,sd,map,cri_lb,cri_ub")?;
        for p in &self.params {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.name,
                num(p.mean),
                num(p.sd),
                num(p.map),
                num(p.cri_lb),
                num(p.cri_ub)
            )?;
        }
        Ok(())
    }

    pub fn write_correlation_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        write_header(&mut w, provenance)?;
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        writeln!(w, "parameter,{}", names.join(","))?;
        for (i, name) in names.iter().enumerate() {
            let row: Vec<String> = (0..names.len()).map(|j| num(self.correlation[(i, j)])).collect();
            writeln!(w, "{name},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Posterior mean, SD, MAP, 95% credible interval and correlation matrix.
pub fn posterior_summary(draws: &PosteriorDraws) -> PosteriorSummary {
    let d = draws.dim();
    let means = draws.means();
    let sds = draws.sds();
    let params = (0..d)
        .map(|k| {
            let mut col = draws.column(k);
            col.sort_by(f64::total_cmp);
            ParamSummary {
                name: draws.names[k].clone(),
                mean: means[k],
                sd: sds[k],
                map: draws.map().get(k).copied().unwrap_or(f64::NAN),
                cri_lb: quantile_sorted(&col, 0.025),
                cri_ub: quantile_sorted(&col, 0.975),
            }
        })
        .collect();
    let n = draws.len() as f64;
    let correlation = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            return 1.0;
        }
        if sds[i] == 0.0 || sds[j] == 0.0 {
            return 0.0;
        }
        let c: f64 = draws.rows.iter().map(|r| (r[i] - means[i]) * (r[j] - means[j])).sum::<f64>() / (n - 1.0);
        (c / (sds[i] * sds[j])).clamp(-1.0, 1.0)
    });
    PosteriorSummary { params, correlation }
}

/// One row of the prior-versus-posterior marginal density grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPoint {
    pub parameter: String,
    pub x: f64,
    pub prior: f64,
    pub posterior: f64,
}

/// Prior density and Gaussian-kernel posterior density on a grid per parameter.
pub fn density_grid(priors: &PriorSet, draws: &PosteriorDraws, n_grid: usize) -> Result<Vec<DensityPoint>> {
    let mut out = Vec::new();
    let sds = draws.sds();
    for (k, spec) in priors.specs().iter().enumerate() {
        let mut col = draws.column(k);
        col.sort_by(f64::total_cmp);
        let (pmin, pmax) = (col[0], col[col.len() - 1]);
        let lo = spec.quantile(0.001)?.min(pmin);
        let hi = spec.quantile(0.999)?.max(pmax);
        let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
        let spread = sds[k].min(iqr / 1.34);
        let spread = if spread > 0.0 { spread } else { sds[k].max((hi - lo) * 1e-3) };
        let bw = 0.9 * spread * (col.len() as f64).powf(-0.2);
        for g in 0..n_grid {
            let x = lo + (hi - lo) * g as f64 / (n_grid.max(2) - 1) as f64;
            let kde = col
                .iter()
                .map(|c| {
                    let u = (x - c) / bw;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                / (col.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
            out.push(DensityPoint {
                parameter: draws.names[k].clone(),
                x,
                prior: spec.pdf(x),
                posterior: kde,
            });
        }
    }
    Ok(out)
}

pub fn write_density_grid<W: Write>(grid: &[DensityPoint], mut w: W, provenance: Option<&Provenance>) -> Result<()> {
    write_header(&mut w, provenance)?;
    writeln!(w, "parameter,x,prior_density,posterior_density")?;
    for p in grid {
        writeln!(w, "{},{},{},{}", p.parameter, num(p.x), num(p.prior), num(p.posterior))?;
    }
    Ok(())
}

/// Posterior predictive band for one target bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBand {
    pub key: TargetKey,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Draws for which the output was defined.
    pub n_defined: usize,
}

impl PredictiveBand {
    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }
}

/// Simulates a cohort of `n_per_draw` per posterior row and reports the
/// mean and 2.5%/97.5% percentiles of each output.
pub fn posterior_predictive(
    draws: &PosteriorDraws,
    fixed: &FixedInputs,
    n_per_draw: usize,
    bins: &TargetBinSpec,
    master_seed: u64,
) -> Result<Vec<PredictiveBand>> {
    if n_per_draw == 0 {
        return domain("n_per_draw must be at least 1");
    }
    bins.validate(fixed.horizon)?;
    let seed = derive_seed(master_seed, "predictive");
    let preds: Vec<ModelPrediction> = draws
        .rows
        .par_iter()
        .enumerate()
        .map(|(r, theta)| {
            let params = fixed.params(theta)?;
            let cohort = simulate_cohort(&params, &fixed.life_table, fixed.horizon, n_per_draw, seed, r as u64)
                .map_err(|e| Error::Simulation {
                    draw: r,
                    message: e.to_string(),
                })?;
            epi_outputs(&cohort, bins)
        })
        .collect::<Result<_>>()?;
    Ok(bins
        .keys()
        .into_iter()
        .map(|key| {
            let mut vals: Vec<f64> = preds.iter().filter_map(|p| p.get(&key)).collect();
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            PredictiveBand {
                key,
                mean: if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 },
                lo: quantile_sorted(&vals, 0.025),
                hi: quantile_sorted(&vals, 0.975),
                n_defined: n,
            }
        })
        .collect())
}

/// Number of targets whose mean lies in its band, and the number of targets
/// with a band.
pub fn predictive_coverage(bands: &[PredictiveBand], targets: &TargetSet) -> (usize, usize) {
    let mut covered = 0;
    let mut total = 0;
    for t in &targets.targets {
        if let Some(b) = bands.iter().find(|b| b.key == t.key) {
            total += 1;
            if b.contains(t.mean) {
                covered += 1;
            }
        }
    }
    (covered, total)
}

/// Target-versus-prediction table: target mean with its normal 95% interval
/// next to the posterior predictive mean and band.
pub fn write_validation_csv<W: Write>(
    bands: &[PredictiveBand],
    targets: &TargetSet,
    mut w: W,
    provenance: Option<&Provenance>,
) -> Result<()> {
    write_header(&mut w, provenance)?;
    writeln!(w, "target_type,bin,target_mean,target_lb,target_ub,pred_mean,pi_lb,pi_ub")?;
    for t in &targets.targets {
        let Some(b) = bands.iter().find(|b| b.key == t.key) else {
            continue;
        };
        let bin = if t.key.lo == t.key.hi {
            t.key.lo.to_string()
        } else {
            format!("{}-{}", t.key.lo, t.key.hi)
        };
        writeln!(
            w,
            "{},{bin},{},{},{},{},{},{}",
            t.key.kind.name(),
            num(t.mean),
            num(t.mean - 1.96 * t.se),
            num(t.mean + 1.96 * t.se),
            num(b.mean),
            num(b.lo),
            num(b.hi)
        )?;
    }
    Ok(())
}

/// `posterior.csv` -> `posterior.diagnostics.json`
pub fn diagnostics_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("diagnostics.json")
}

pub fn write_posterior(draws: &PosteriorDraws, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, provenance)?;
    writeln!(w, "draw_index,{},weight_preresample", draws.names.join(","))?;
    for (i, (row, wt)) in draws.rows.iter().zip(&draws.weight_preresample).enumerate() {
        let vals: Vec<String> = row.iter().map(|x| num(*x)).collect();
        writeln!(w, "{i},{},{}", vals.join(","), num(*wt))?;
    }
    w.flush()?;
    let mut diag = draws.diagnostics.clone();
    if let Some(p) = provenance {
        diag.config_hash = Some(p.config_hash.clone());
    }
    let map: serde_json::Map<String, serde_json::Value> =
        draws.names.iter().zip(&diag.map).map(|(n, v)| (n.clone(), serde_json::json!(v))).collect();
    let mut value = serde_json::to_value(&diag)?;
    value["map_named"] = serde_json::Value::Object(map);
    let mut json = serde_json::to_string_pretty(&value)?;
    json.push('\n');
    std::fs::write(diagnostics_path(path), json)?;
    Ok(())
}

pub fn read_posterior(path: &Path) -> Result<PosteriorDraws> {
    let mut r = BufReader::new(File::open(path)?);
    peek_provenance(&mut r)?;
    let mut reader = csv_reader(r);
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 3 || cols[0] != "draw_index" || cols[cols.len() - 1] != "weight_preresample" {
        return Err(Error::Parse {
            location: format!("{} header", path.display()),
            message: "expected draw_index,<parameters...>,weight_preresample".into(),
        });
    }
    let names: Vec<String> = cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Parse {
            location: format!("{} row {}", path.display(), i + 2),
            message,
        };
        if rec.len() != cols.len() {
            return Err(bad(format!("expected {} fields, found {}", cols.len(), rec.len())));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(vals[..names.len()].to_vec());
        weights.push(vals[names.len()]);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: "no posterior draws".into(),
        });
    }
    let diag_path = diagnostics_path(path);
    let text = std::fs::read_to_string(&diag_path).map_err(|e| Error::Parse {
        location: diag_path.display().to_string(),
        message: format!("posterior diagnostics unavailable: {e}"),
    })?;
    let diagnostics: PosteriorDiagnostics = serde_json::from_str(&text)?;
    if diagnostics.map.len() != names.len() {
        return Err(Error::Parse {
            location: diag_path.display().to_string(),
            message: format!("MAP has {} entries for {} parameters", diagnostics.map.len(), names.len()),
        });
    }
    Ok(PosteriorDraws {
        names,
        rows,
        weight_preresample: weights,
        diagnostics,
    })
}
