//! Probabilistic sensitivity analysis under four characterizations of
//! calibrated-parameter uncertainty, and the expected value of perfect
//! information as a function of willingness to pay.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::imis::PosteriorDraws;
use crate::io::{csv_reader, num, write_header, Provenance};
use crate::microsim::rng::{derive_seed, RngStreamKey};
use crate::microsim::Horizon;
use crate::nathist::{LifeTable, NaturalHistoryParams, CALIBRATED_NAMES, N_CALIBRATED};
use crate::screening::{compare_strategies, incremental, CeaParams, ScreeningStrategy, EXTERNAL_NAMES};
use crate::stats::{fit_from_interval, fit_from_moments, ExternalParamSpec, Family};

pub const PURPOSE_CALIBRATED: &str = "psa-calibrated";
pub const PURPOSE_EXTERNAL: &str = "psa-external";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UncertaintyApproach {
    /// Posterior draws and external distributions.
    #[serde(rename = "a1_full")]
    A1Full,
    /// MAP point and external distributions.
    #[serde(rename = "a2_map")]
    A2Map,
    /// Posterior draws and external means.
    #[serde(rename = "a3_posterior_only")]
    A3PosteriorOnly,
    /// Independent moment-matched marginals and external distributions.
    #[serde(rename = "a4_moments_independent")]
    A4MomentsIndependent,
}

impl UncertaintyApproach {
    pub const ALL: [UncertaintyApproach; 4] = [
        UncertaintyApproach::A1Full,
        UncertaintyApproach::A2Map,
        UncertaintyApproach::A3PosteriorOnly,
        UncertaintyApproach::A4MomentsIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyApproach::A1Full => "a1_full",
            UncertaintyApproach::A2Map => "a2_map",
            UncertaintyApproach::A3PosteriorOnly => "a3_posterior_only",
            UncertaintyApproach::A4MomentsIndependent => "a4_moments_independent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn samples_external(self) -> bool {
        self != UncertaintyApproach::A3PosteriorOnly
    }
}

/// Distributions of the external (cost-effectiveness) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpecs {
    pub sens_small: ExternalParamSpec,
    pub sens_large_crc: ExternalParamSpec,
    pub spec: ExternalParamSpec,
    pub hr_low: ExternalParamSpec,
    pub hr_high: ExternalParamSpec,
    pub cost_colonoscopy: ExternalParamSpec,
    pub cost_early_annual: ExternalParamSpec,
    pub cost_late_annual: ExternalParamSpec,
    pub u_preclinical: ExternalParamSpec,
    pub u_clin_early: ExternalParamSpec,
    pub u_clin_late: ExternalParamSpec,
}

impl ExternalSpecs {
    /// Fits each parameter to its published 95% range; utilities are
    /// truncated at 1.
    pub fn reference() -> Result<Self> {
        let beta = |lb, ub| fit_from_interval(Family::Beta, lb, ub).map(ExternalParamSpec::untruncated);
        let logn = |lb, ub| fit_from_interval(Family::Lognormal, lb, ub).map(ExternalParamSpec::untruncated);
        let utility = |lb, ub| ExternalParamSpec::new(fit_from_interval(Family::Lognormal, lb, ub)?, Some(1.0));
        Ok(Self {
            sens_small: beta(0.734, 0.808)?,
            sens_large_crc: beta(0.920, 0.990)?,
            spec: beta(0.855, 0.880)?,
            hr_low: logn(1.0, 3.0)?,
            hr_high: logn(2.0, 4.0)?,
            cost_colonoscopy: logn(9_000.0, 11_000.0)?,
            cost_early_annual: logn(20_000.0, 23_000.0)?,
            cost_late_annual: logn(35_000.0, 39_000.0)?,
            u_preclinical: utility(0.980, 1.0)?,
            u_clin_early: utility(0.700, 0.900)?,
            u_clin_late: utility(0.200, 0.400)?,
        })
    }

    pub fn as_array(&self) -> [&ExternalParamSpec; 11] {
        [
            &self.sens_small,
            &self.sens_large_crc,
            &self.spec,
            &self.hr_low,
            &self.hr_high,
            &self.cost_colonoscopy,
            &self.cost_early_annual,
            &self.cost_late_annual,
            &self.u_preclinical,
            &self.u_clin_early,
            &self.u_clin_late,
        ]
    }

    /// Checks every distribution, and that probabilities and utilities cannot
    /// leave `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (name, s) in EXTERNAL_NAMES.iter().zip(self.as_array()) {
            ExternalParamSpec::new(s.dist, s.upper).map_err(|e| Error::Domain(format!("{name}: {e}")))?;
            let (lo, hi) = s.dist.support();
            let hi = s.upper.map_or(hi, |u| hi.min(u));
            let unit = !name.starts_with("hr_") && !name.starts_with("cost_");
            if lo < 0.0 || (unit && hi > 1.0) {
                return domain(format!("{name}: support [{lo}, {hi}] is outside the parameter range"));
            }
        }
        Ok(())
    }

    pub fn means(&self, discount_rate: f64) -> CeaParams {
        CeaParams::from_array(self.as_array().map(|s| s.mean()), discount_rate)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R, discount_rate: f64) -> CeaParams {
        CeaParams::from_array(self.as_array().map(|s| s.sample(rng)), discount_rate)
    }
}

/// One parameter set of a PSA.
#[derive(Debug, Clone, PartialEq)]
pub struct PsaDraw {
    pub draw_index: usize,
    pub nh: NaturalHistoryParams<f64>,
    pub cea: CeaParams,
}

/// Independent marginals matched to the posterior means and SDs: beta for the
/// two proportions, lognormal for the rates.
pub fn moment_marginals(posterior: &PosteriorDraws) -> Result<Vec<crate::stats::DistributionSpec>> {
    let (means, sds) = (posterior.means(), posterior.sds());
    (0..N_CALIBRATED)
        .map(|k| {
            let family = if k < 2 { Family::Beta } else { Family::Lognormal };
            fit_from_moments(family, means[k], sds[k])
                .map_err(|e| Error::Fit(format!("{}: {e}", CALIBRATED_NAMES[k])))
        })
        .collect()
}

/// Parameter sets for one approach.
///
/// Draw `i` reads the calibrated-parameter stream and the external-parameter
/// stream keyed by `i`, so approaches share external values draw by draw and
/// A1 and A3 share posterior rows.
pub fn build_draws(
    approach: UncertaintyApproach,
    posterior: &PosteriorDraws,
    base: &NaturalHistoryParams<f64>,
    external: &ExternalSpecs,
    discount_rate: f64,
    n_draws: usize,
    master_seed: u64,
) -> Result<Vec<PsaDraw>> {
    if n_draws == 0 {
        return domain("n_draws must be at least 1");
    }
    if posterior.is_empty() || posterior.dim() != N_CALIBRATED {
        return domain(format!(
            "posterior must hold {N_CALIBRATED} calibrated parameters per draw, got {} draws of {}",
            posterior.len(),
            posterior.dim()
        ));
    }
    let seed = derive_seed(master_seed, "psa");
    let marginals = match approach {
        UncertaintyApproach::A4MomentsIndependent => Some(moment_marginals(posterior)?),
        _ => None,
    };
    let means = external.means(discount_rate);
    (0..n_draws)
        .map(|i| {
            let mut cal = RngStreamKey::new(seed, PURPOSE_CALIBRATED, i as u64, 0).stream();
            let mut ext = RngStreamKey::new(seed, PURPOSE_EXTERNAL, i as u64, 0).stream();
            let theta: Vec<f64> = match approach {
                UncertaintyApproach::A1Full | UncertaintyApproach::A3PosteriorOnly => {
                    posterior.rows[rand::Rng::random_range(&mut cal, 0..posterior.len())].clone()
                }
                UncertaintyApproach::A2Map => posterior.map().to_vec(),
                UncertaintyApproach::A4MomentsIndependent => {
                    marginals.as_ref().unwrap().iter().map(|m| m.sample(&mut cal)).collect()
                }
            };
            let cea = if approach.samples_external() {
                external.sample(&mut ext, discount_rate)
            } else {
                means
            };
            Ok(PsaDraw {
                draw_index: i,
                nh: base.with_calibrated(&theta)?,
                cea,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaRecord {
    pub draw_index: usize,
    pub theta: Vec<f64>,
    pub external: Vec<f64>,
    pub cost_none: f64,
    pub qaly_none: f64,
    pub cost_screen: f64,
    pub qaly_screen: f64,
    pub d_cost: f64,
    pub d_qaly: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsaResult {
    pub approach: UncertaintyApproach,
    pub n_individuals: usize,
    pub master_seed: u64,
    pub records: Vec<PsaRecord>,
}

impl PsaResult {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.d_cost).collect()
    }

    pub fn d_qalys(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.d_qaly).collect()
    }

    /// Mean incremental cost and QALYs.
    pub fn mean_incremental(&self) -> (f64, f64) {
        let n = self.len() as f64;
        (self.d_costs().iter().sum::<f64>() / n, self.d_qalys().iter().sum::<f64>() / n)
    }

    /// Willingness to pay at which mean incremental net monetary benefit is
    /// zero, when screening adds QALYs on average.
    pub fn nmb_crossing(&self) -> Option<f64> {
        let (dc, dq) = self.mean_incremental();
        (dq > 0.0).then(|| dc / dq)
    }

    /// Net monetary benefit per draw, `[none, screen]`.
    pub fn nmb(&self, wtp: f64) -> Vec<[f64; 2]> {
        self.records
            .iter()
            .map(|r| [wtp * r.qaly_none - r.cost_none, wtp * r.qaly_screen - r.cost_screen])
            .collect()
    }

    /// `draw,approach,cost_none,qaly_none,cost_screen,qaly_screen,d_cost,d_qaly`
    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        write_header(&mut w, provenance)?;
        writeln!(w, "draw,approach,cost_none,qaly_none,cost_screen,qaly_screen,d_cost,d_qaly")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.draw_index,
                self.approach.name(),
                num(r.cost_none),
                num(r.qaly_none),
                num(r.cost_screen),
                num(r.qaly_screen),
                num(r.d_cost),
                num(r.d_qaly)
            )?;
        }
        Ok(())
    }

    /// `draw,approach,<calibrated names>,<external names>`
    pub fn write_params_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        write_header(&mut w, provenance)?;
        writeln!(w, "draw,approach,{},{}", CALIBRATED_NAMES.join(","), EXTERNAL_NAMES.join(","))?;
        for r in &self.records {
            let vals: Vec<String> = r.theta.iter().chain(&r.external).map(|x| num(*x)).collect();
            writeln!(w, "{},{},{}", r.draw_index, self.approach.name(), vals.join(","))?;
        }
        Ok(())
    }

    /// Reads the outcome CSV written by [`PsaResult::write_csv`]; parameter
    /// columns are not restored.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            draw: usize,
            approach: String,
            cost_none: f64,
            qaly_none: f64,
            cost_screen: f64,
            qaly_screen: f64,
            d_cost: f64,
            d_qaly: f64,
        }
        let mut approach = None;
        let mut records = Vec::new();
        for (i, row) in csv_reader(r).deserialize::<Row>().enumerate() {
            let parse_err = |message: String| Error::Parse {
                location: format!("row {}", i + 1),
                message,
            };
            let row = row.map_err(|e| parse_err(e.to_string()))?;
            let a = UncertaintyApproach::parse(&row.approach)
                .ok_or_else(|| parse_err(format!("unknown approach {:?}", row.approach)))?;
            if *approach.get_or_insert(a) != a {
                return Err(parse_err("rows mix approaches".into()));
            }
            records.push(PsaRecord {
                draw_index: row.draw,
                theta: Vec::new(),
                external: Vec::new(),
                cost_none: row.cost_none,
                qaly_none: row.qaly_none,
                cost_screen: row.cost_screen,
                qaly_screen: row.qaly_screen,
                d_cost: row.d_cost,
                d_qaly: row.d_qaly,
            });
        }
        let approach = approach.ok_or_else(|| Error::Parse {
            location: "body".into(),
            message: "no PSA rows".into(),
        })?;
        Ok(Self {
            approach,
            n_individuals: 0,
            master_seed: 0,
            records,
        })
    }
}

/// Simulates no screening and `strat` for every draw at common random
/// numbers. Draw `i` uses natural-history streams keyed by `i`, the same for
/// every approach.
#[allow(clippy::too_many_arguments)]
pub fn run_psa(
    approach: UncertaintyApproach,
    draws: &[PsaDraw],
    strat: &ScreeningStrategy,
    life_table: &LifeTable<f64>,
    horizon: Horizon,
    n_individuals: usize,
    master_seed: u64,
) -> Result<PsaResult> {
    if draws.is_empty() {
        return domain("no PSA draws");
    }
    let seed = derive_seed(master_seed, "psa-sim");
    let records = draws
        .par_iter()
        .map(|d| {
            let (none, screen) = compare_strategies(
                &d.nh,
                &d.cea,
                strat,
                life_table,
                horizon,
                n_individuals,
                seed,
                d.draw_index as u64,
            )
            .map_err(|e| Error::Simulation {
                draw: d.draw_index,
                message: e.to_string(),
            })?;
            let (d_cost, d_qaly) = incremental(&screen, &none);
            Ok(PsaRecord {
                draw_index: d.draw_index,
                theta: d.nh.calibrated().to_vec(),
                external: d.cea.to_array().to_vec(),
                cost_none: none.cost,
                qaly_none: none.qaly,
                cost_screen: screen.cost,
                qaly_screen: screen.qaly,
                d_cost,
                d_qaly,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PsaResult {
        approach,
        n_individuals,
        master_seed,
        records,
    })
}

/// Incremental outcomes at the MAP with external parameters at their means.
#[allow(clippy::too_many_arguments)]
pub fn map_reference(
    posterior: &PosteriorDraws,
    base: &NaturalHistoryParams<f64>,
    external: &ExternalSpecs,
    discount_rate: f64,
    strat: &ScreeningStrategy,
    life_table: &LifeTable<f64>,
    horizon: Horizon,
    n_individuals: usize,
    master_seed: u64,
) -> Result<(f64, f64)> {
    let nh = base.with_calibrated(posterior.map())?;
    let cea = external.means(discount_rate);
    let seed = derive_seed(master_seed, "psa-sim");
    let (none, screen) = compare_strategies(&nh, &cea, strat, life_table, horizon, n_individuals, seed, 0)?;
    Ok(incremental(&screen, &none))
}

/// Expected value of perfect information from per-draw net benefits,
/// `rows[draw][strategy]`.
pub fn evpi(rows: &[impl AsRef<[f64]>]) -> Result<f64> {
    let Some(first) = rows.first() else {
        return domain("no draws");
    };
    let k = first.as_ref().len();
    if k == 0 || rows.iter().any(|r| r.as_ref().len() != k) {
        return domain("every draw needs the same non-zero number of strategies");
    }
    let n = rows.len() as f64;
    let mut means = vec![0.0; k];
    let mut best = 0.0;
    for r in rows {
        let r = r.as_ref();
        best += r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        means.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    let max_mean = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) / n;
    Ok((best / n - max_mean).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvpiPoint {
    pub wtp: f64,
    pub evpi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvpiCurve {
    pub approach: UncertaintyApproach,
    pub points: Vec<EvpiPoint>,
}

/// Willingness-to-pay values `lo, lo + step, ..., hi`.
pub fn wtp_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && lo.is_finite() && hi >= lo) {
        return domain(format!("invalid WTP grid {lo}..{hi} by {step}"));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + step * i as f64).collect())
}

pub fn default_wtp_grid() -> Vec<f64> {
    wtp_grid(0.0, 150_000.0, 1_000.0).unwrap()
}

pub fn evpi_curve(psa: &PsaResult, wtp: &[f64]) -> Result<EvpiCurve> {
    if wtp.is_empty() || wtp.windows(2).any(|w| w[1] <= w[0]) {
        return domain("WTP grid must be non-empty and strictly ascending");
    }
    if psa.is_empty() {
        return domain("PSA result has no draws");
    }
    let points = wtp
        .iter()
        .map(|&l| Ok(EvpiPoint { wtp: l, evpi: evpi(&psa.nmb(l))? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvpiCurve {
        approach: psa.approach,
        points,
    })
}

impl EvpiCurve {
    /// Grid point with the largest EVPI; the first one on ties.
    pub fn peak(&self) -> EvpiPoint {
        self.points
            .iter()
            .copied()
            .fold(None, |best: Option<EvpiPoint>, p| match best {
                Some(b) if b.evpi >= p.evpi => Some(b),
                _ => Some(p),
            })
            .expect("curve has at least one point")
    }

    /// `wtp,evpi,approach`
    pub fn write_csv<W: Write>(&self, mut w: W, provenance: Option<&Provenance>) -> Result<()> {
        write_curves_csv(std::slice::from_ref(self), &mut w, provenance)
    }
}

/// Long format, one row per `(wtp, approach)`.
pub fn write_curves_csv<W: Write>(curves: &[EvpiCurve], mut w: W, provenance: Option<&Provenance>) -> Result<()> {
    write_header(&mut w, provenance)?;
    writeln!(w, "wtp,evpi,approach")?;
    for c in curves {
        for p in &c.points {
            writeln!(w, "{},{},{}", num(p.wtp), num(p.evpi), c.approach.name())?;
        }
    }
    Ok(())
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imis::PosteriorDiagnostics;
    use rand::SeedableRng;

    fn posterior(rows: Vec<Vec<f64>>) -> PosteriorDraws {
        let map = rows[0].clone();
        PosteriorDraws {
            names: CALIBRATED_NAMES.iter().map(|s| s.to_string()).collect(),
            weight_preresample: vec![1.0 / rows.len() as f64; rows.len()],
            diagnostics: PosteriorDiagnostics {
                map,
                ..PosteriorDiagnostics::default()
            },
            rows,
        }
    }

    /// Rows with a strong negative correlation between `l` and `gamma`.
    fn correlated_posterior(n: usize) -> PosteriorDraws {
        let truth = NaturalHistoryParams::<f64>::reference().calibrated();
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let rows = (0..n)
            .map(|_| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let mut t: Vec<f64> = truth
                    .iter()
                    .map(|x| {
                        let u: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                        x * (0.01 * u).exp()
                    })
                    .collect();
                t[2] *= (0.3 * z).exp();
                t[3] *= (-0.04 * z + 0.005 * e).exp();
                t
            })
            .collect();
        posterior(rows)
    }

    fn record(nmb_none: f64, nmb_screen: f64) -> PsaRecord {
        PsaRecord {
            draw_index: 0,
            theta: vec![],
            external: vec![],
            cost_none: -nmb_none,
            qaly_none: 0.0,
            cost_screen: -nmb_screen,
            qaly_screen: 0.0,
            d_cost: nmb_none - nmb_screen,
            d_qaly: 0.0,
        }
    }

    fn result(records: Vec<PsaRecord>) -> PsaResult {
        PsaResult {
            approach: UncertaintyApproach::A1Full,
            n_individuals: 1,
            master_seed: 0,
            records,
        }
    }

    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        sxy / (sample_variance(x) * sample_variance(y)).sqrt() / (n - 1.0)
    }

    #[test]
    fn approach_names_round_trip() {
        for a in UncertaintyApproach::ALL {
            assert_eq!(UncertaintyApproach::parse(a.name()), Some(a));
        }
        assert_eq!(UncertaintyApproach::parse("a5"), None);
    }

    #[test]
    fn reference_external_specs_fit_their_ranges() {
        let e = ExternalSpecs::reference().unwrap();
        e.validate().unwrap();
        let q = |s: &ExternalParamSpec, p| s.dist.quantile(p).unwrap();
        assert!((q(&e.sens_small, 0.025) - 0.734).abs() < 1e-4);
        assert!((q(&e.sens_small, 0.975) - 0.808).abs() < 1e-4);
        assert!((q(&e.hr_low, 0.025) - 1.0).abs() < 1e-4);
        let m = e.means(0.03);
        assert!(m.u_preclinical < 1.0 && m.u_preclinical > 0.98);
        assert!((m.cost_colonoscopy - 10_000.0).abs() < 100.0);
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        for _ in 0..2000 {
            e.sample(&mut rng, 0.03).validate().unwrap();
        }
    }

    #[test]
    fn utilities_without_truncation_are_rejected() {
        let mut e = ExternalSpecs::reference().unwrap();
        e.u_preclinical.upper = None;
        assert!(e.validate().is_err());
    }

    #[test]
    fn a2_draws_are_all_at_the_map() {
        let post = correlated_posterior(50);
        let ext = ExternalSpecs::reference().unwrap();
        let base = NaturalHistoryParams::reference();
        let d = build_draws(UncertaintyApproach::A2Map, &post, &base, &ext, 0.03, 10, 7).unwrap();
        assert_eq!(d.len(), 10);
        for x in &d {
            assert_eq!(x.nh.calibrated().to_vec(), post.map().to_vec());
        }
        assert_ne!(d[0].cea, d[1].cea);
    }

    #[test]
    fn a3_draws_fix_external_means() {
        let post = correlated_posterior(50);
        let ext = ExternalSpecs::reference().unwrap();
        let base = NaturalHistoryParams::reference();
        let d = build_draws(UncertaintyApproach::A3PosteriorOnly, &post, &base, &ext, 0.03, 10, 7).unwrap();
        for x in &d {
            assert_eq!(x.cea, ext.means(0.03));
            assert!(post.rows.iter().any(|r| r == &x.nh.calibrated().to_vec()));
        }
    }

    #[test]
    fn approaches_share_external_streams() {
        let post = correlated_posterior(50);
        let ext = ExternalSpecs::reference().unwrap();
        let base = NaturalHistoryParams::reference();
        let build = |a| build_draws(a, &post, &base, &ext, 0.03, 20, 9).unwrap();
        let (a1, a2, a3, a4) = (
            build(UncertaintyApproach::A1Full),
            build(UncertaintyApproach::A2Map),
            build(UncertaintyApproach::A3PosteriorOnly),
            build(UncertaintyApproach::A4MomentsIndependent),
        );
        for i in 0..20 {
            assert_eq!(a1[i].cea, a2[i].cea);
            assert_eq!(a1[i].cea, a4[i].cea);
            assert_eq!(a1[i].nh, a3[i].nh);
        }
    }

    #[test]
    fn a4_ignores_correlation() {
        let post = correlated_posterior(4000);
        let (l, g) = (post.column(2), post.column(3));
        assert!(corr(&l, &g) < -0.8);
        let ext = ExternalSpecs::reference().unwrap();
        let base = NaturalHistoryParams::reference();
        let d = build_draws(UncertaintyApproach::A4MomentsIndependent, &post, &base, &ext, 0.03, 10_000, 3).unwrap();
        let l4: Vec<f64> = d.iter().map(|x| x.nh.l).collect();
        let g4: Vec<f64> = d.iter().map(|x| x.nh.gamma).collect();
        let c = corr(&l4, &g4);
        assert!(c.abs() < 0.05, "corr {c}");
        let m = l4.iter().sum::<f64>() / l4.len() as f64;
        assert!((m / post.means()[2] - 1.0).abs() < 0.03);
    }

    #[test]
    fn a4_reports_infeasible_moments_by_name() {
        let mut rows = vec![NaturalHistoryParams::<f64>::reference().calibrated().to_vec(); 3];
        rows[1][0] = 0.001;
        rows[2][0] = 0.999;
        let post = posterior(rows);
        let err = moment_marginals(&post).unwrap_err();
        assert!(err.to_string().contains("p_adeno"), "{err}");
    }

    #[test]
    fn identical_draws_identical_records() {
        let base = NaturalHistoryParams::reference();
        let draw = PsaDraw {
            draw_index: 4,
            nh: base,
            cea: CeaParams::default(),
        };
        let lt = LifeTable::gompertz_synthetic();
        let s = ScreeningStrategy::default();
        let r = run_psa(UncertaintyApproach::A1Full, &[draw.clone(), draw], &s, &lt, Horizon::default(), 500, 1)
            .unwrap();
        assert_eq!(r.records[0], r.records[1]);
    }

    #[test]
    fn inert_test_gives_zero_qaly_gain() {
        let post = correlated_posterior(30);
        let ext = ExternalSpecs::reference().unwrap();
        let base = NaturalHistoryParams::reference();
        let mut d = build_draws(UncertaintyApproach::A1Full, &post, &base, &ext, 0.03, 4, 2).unwrap();
        d.iter_mut().for_each(|x| x.cea = x.cea.inert());
        let lt = LifeTable::gompertz_synthetic();
        let r = run_psa(UncertaintyApproach::A1Full, &d, &ScreeningStrategy::default(), &lt, Horizon::default(), 800, 5)
            .unwrap();
        for rec in &r.records {
            assert_eq!(rec.d_qaly, 0.0);
            assert!(rec.d_cost > 0.0);
        }
    }

    #[test]
    fn evpi_hand_cases() {
        assert_eq!(evpi(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), 0.5);
        assert_eq!(evpi(&[[3.0, 3.0], [-1.0, -1.0]]).unwrap(), 0.0);
        assert!(evpi(&Vec::<[f64; 2]>::new()).is_err());
        let same = result(vec![record(5.0, 5.0), record(2.0, 2.0)]);
        let c = evpi_curve(&same, &[0.0, 1.0, 2.0]).unwrap();
        assert!(c.points.iter().all(|p| p.evpi == 0.0));
    }

    #[test]
    fn evpi_equals_enumeration_over_decision_rules() {
        use proptest::prelude::*;
        let nmb = proptest::collection::vec((-50i32..50, -50i32..50), 1..=4);
        proptest!(|(rows in nmb)| {
            let rows: Vec<[f64; 2]> = rows.iter().map(|(a, b)| [f64::from(*a), f64::from(*b)]).collect();
            let n = rows.len();
            // Perfect information is the best of all 2^n per-draw choices.
            let mut informed = f64::NEG_INFINITY;
            for mask in 0..(1u32 << n) {
                let v: f64 = (0..n).map(|i| rows[i][((mask >> i) & 1) as usize]).sum::<f64>() / n as f64;
                informed = informed.max(v);
            }
            let current = (0..2).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64).fold(f64::NEG_INFINITY, f64::max);
            let e = evpi(&rows).unwrap();
            prop_assert!((e - (informed - current)).abs() < 1e-12);
            prop_assert!(e >= 0.0);
        });
    }

    #[test]
    fn evpi_curve_peaks_near_crossing() {
        // Screening costs 1000 more and gains 0.02 QALY with spread, so the
        // decision flips at 50,000 per QALY.
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let records = (0..400)
            .map(|i| {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                let dq = 0.02 * (1.0 + 0.3 * z);
                PsaRecord {
                    draw_index: i,
                    theta: vec![],
                    external: vec![],
                    cost_none: 100.0,
                    qaly_none: 20.0,
                    cost_screen: 1100.0,
                    qaly_screen: 20.0 + dq,
                    d_cost: 1000.0,
                    d_qaly: dq,
                }
            })
            .collect();
        let r = result(records);
        let c = evpi_curve(&r, &default_wtp_grid()).unwrap();
        assert!(c.points.iter().all(|p| p.evpi >= 0.0));
        assert_eq!(c.points[0].evpi, 0.0);
        let crossing = r.nmb_crossing().unwrap();
        assert!((c.peak().wtp - crossing).abs() <= 5_000.0, "{} vs {crossing}", c.peak().wtp);
    }

    #[test]
    fn grid_and_csv_schemas() {
        let g = wtp_grid(0.0, 3000.0, 1000.0).unwrap();
        assert_eq!(g, vec![0.0, 1000.0, 2000.0, 3000.0]);
        assert_eq!(default_wtp_grid().len(), 151);
        assert!(wtp_grid(0.0, 1.0, 0.0).is_err());
        let r = result(vec![record(1.0, 2.0), record(3.0, 0.5)]);
        let c1 = evpi_curve(&r, &g).unwrap();
        let mut c2 = c1.clone();
        c2.approach = UncertaintyApproach::A3PosteriorOnly;
        let mut buf = Vec::new();
        write_curves_csv(&[c1, c2], &mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "wtp,evpi,approach");
        assert_eq!(text.lines().count(), 1 + 2 * g.len());

        let mut buf = Vec::new();
        r.write_csv(&mut buf, Some(&Provenance::new("abc", 3))).unwrap();
        let back = PsaResult::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.approach, r.approach);
        assert_eq!(back.d_costs(), r.d_costs());
        assert_eq!(back.nmb(1.0), r.nmb(1.0));
    }

    #[test]
    fn evpi_curve_rejects_bad_grids() {
        let r = result(vec![record(1.0, 2.0)]);
        assert!(evpi_curve(&r, &[]).is_err());
        assert!(evpi_curve(&r, &[2.0, 1.0]).is_err());
    }
}
