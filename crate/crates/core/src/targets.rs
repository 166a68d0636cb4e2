//! Calibration targets: generation by repeated simulation at known parameter
//! values, persistence, and the normal log-likelihood of model predictions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, num, peek_provenance, write_header, Provenance};
use crate::microsim::{epi_outputs, rng::derive_seed, simulate_cohort, Horizon, ModelPrediction};
use crate::nathist::{LifeTable, NaturalHistoryParams};

/// Log-likelihood contribution of a target the model cannot predict.
pub const MISSING_PREDICTION_PENALTY: f64 = -1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetType {
    AdenomaPrevalence,
    ProportionSmall,
    IncidenceEarly,
    IncidenceLate,
}

impl TargetType {
    pub const ALL: [TargetType; 4] = [
        TargetType::AdenomaPrevalence,
        TargetType::ProportionSmall,
        TargetType::IncidenceEarly,
        TargetType::IncidenceLate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetType::AdenomaPrevalence => "adenoma_prevalence",
            TargetType::ProportionSmall => "proportion_small",
            TargetType::IncidenceEarly => "incidence_early",
            TargetType::IncidenceLate => "incidence_late",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn is_proportion(self) -> bool {
        matches!(self, TargetType::AdenomaPrevalence | TargetType::ProportionSmall)
    }

    pub fn is_adenoma(self) -> bool {
        self.is_proportion()
    }
}

/// A target type with its age bin; point-age targets have `lo == hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetKey {
    pub kind: TargetType,
    pub lo: u32,
    pub hi: u32,
}

impl TargetKey {
    pub fn new(kind: TargetType, lo: u32, hi: u32) -> Self {
        Self { kind, lo, hi }
    }

    pub fn at_age(kind: TargetType, age: u32) -> Self {
        Self::new(kind, age, age)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetBinSpec {
    pub adenoma_ages: Vec<u32>,
    pub incidence_bins: Vec<(u32, u32)>,
}

impl Default for TargetBinSpec {
    fn default() -> Self {
        Self {
            adenoma_ages: vec![55, 60, 65, 70, 75, 80],
            incidence_bins: (50..85).step_by(5).map(|lo| (lo, lo + 4)).collect(),
        }
    }
}

impl TargetBinSpec {
    pub fn validate(&self, horizon: Horizon) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTargets(m));
        if self.adenoma_ages.is_empty() || self.incidence_bins.is_empty() {
            return bad("bins need at least one adenoma age and one incidence bin".into());
        }
        if self.adenoma_ages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("adenoma ages must be strictly increasing".into());
        }
        for &a in &self.adenoma_ages {
            if a < horizon.age_min || a > horizon.age_max {
                return bad(format!("adenoma age {a} outside {}..={}", horizon.age_min, horizon.age_max));
            }
        }
        for &(lo, hi) in &self.incidence_bins {
            if lo > hi || lo < horizon.age_min || hi >= horizon.age_max {
                return bad(format!("incidence bin {lo}-{hi} outside {}..{}", horizon.age_min, horizon.age_max));
            }
        }
        if self.incidence_bins.windows(2).any(|w| w[0].1 >= w[1].0) {
            return bad("incidence bins must be ordered and non-overlapping".into());
        }
        Ok(())
    }

    pub fn keys(&self) -> Vec<TargetKey> {
        let mut keys = Vec::new();
        for &a in &self.adenoma_ages {
            keys.push(TargetKey::at_age(TargetType::AdenomaPrevalence, a));
            keys.push(TargetKey::at_age(TargetType::ProportionSmall, a));
        }
        for &(lo, hi) in &self.incidence_bins {
            keys.push(TargetKey::new(TargetType::IncidenceEarly, lo, hi));
            keys.push(TargetKey::new(TargetType::IncidenceLate, lo, hi));
        }
        keys.sort();
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub key: TargetKey,
    pub mean: f64,
    pub se: f64,
    pub cohort_size: usize,
}

impl CalibrationTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.se.is_finite() && self.se > 0.0) {
            return Err(Error::InvalidTargets(format!("{:?}: se {} must be > 0", self.key, self.se)));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidTargets(format!("{:?}: mean is not finite", self.key)));
        }
        if self.key.kind.is_proportion() && !(0.0..=1.0).contains(&self.mean) {
            return Err(Error::InvalidTargets(format!("{:?}: mean {} outside [0, 1]", self.key, self.mean)));
        }
        Ok(())
    }
}

/// How the per-target standard error is computed from replication values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeDefinition {
    /// Across-replication standard deviation: the sampling error of one cohort.
    #[default]
    Sd,
    /// Standard deviation divided by the square root of the replication count.
    Sem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetadata {
    pub bins: TargetBinSpec,
    pub true_params: Option<NaturalHistoryParams<f64>>,
    pub reps: usize,
    pub n_adenoma: usize,
    pub n_cancer: usize,
    pub master_seed: u64,
    pub se_definition: SeDefinition,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<CalibrationTarget>,
    pub metadata: TargetMetadata,
}

impl TargetSet {
    pub fn new(targets: Vec<CalibrationTarget>, metadata: TargetMetadata) -> Result<Self> {
        let ts = Self { targets, metadata };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.targets {
            t.validate()?;
        }
        for kind in TargetType::ALL {
            if !self.targets.iter().any(|t| t.key.kind == kind) {
                return Err(Error::InvalidTargets(format!("no {} target", kind.name())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// The same targets with every standard error multiplied by `factor`.
    pub fn with_scaled_se(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.targets.iter_mut().for_each(|t| t.se *= factor);
        out
    }

    pub fn get(&self, key: &TargetKey) -> Option<&CalibrationTarget> {
        self.targets.iter().find(|t| &t.key == key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGenConfig {
    pub reps: usize,
    pub n_adenoma: usize,
    pub n_cancer: usize,
    pub bins: TargetBinSpec,
    pub horizon: Horizon,
    pub master_seed: u64,
    pub se_definition: SeDefinition,
}

impl Default for TargetGenConfig {
    fn default() -> Self {
        Self {
            reps: 100,
            n_adenoma: 500,
            n_cancer: 100_000,
            bins: TargetBinSpec::default(),
            horizon: Horizon::default(),
            master_seed: 1,
            se_definition: SeDefinition::default(),
        }
    }
}

/// Mean and standard error of each target across replications.
///
/// `adenoma` and `cancer` hold one prediction per replication, from the
/// small and the large cohort respectively. Bins undefined in any replication
/// are dropped.
pub fn aggregate_replications(
    adenoma: &[ModelPrediction],
    cancer: &[ModelPrediction],
    cfg: &TargetGenConfig,
) -> Result<Vec<CalibrationTarget>> {
    let reps = adenoma.len();
    if reps < 2 || cancer.len() != reps {
        return Err(Error::InvalidTargets(format!(
            "need at least 2 paired replications, got {} and {}",
            adenoma.len(),
            cancer.len()
        )));
    }
    let mut out = Vec::new();
    for key in cfg.bins.keys() {
        let (source, cohort_size) = if key.kind.is_adenoma() {
            (adenoma, cfg.n_adenoma)
        } else {
            (cancer, cfg.n_cancer)
        };
        let values: Option<Vec<f64>> = source.iter().map(|p| p.get(&key)).collect();
        let Some(values) = values else {
            log::warn!("dropping target {} {}-{}: undefined in some replication", key.kind.name(), key.lo, key.hi);
            continue;
        };
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = match cfg.se_definition {
            SeDefinition::Sd => sd,
            SeDefinition::Sem => sd / n.sqrt(),
        };
        let target = CalibrationTarget {
            key,
            mean,
            se,
            cohort_size,
        };
        target.validate()?;
        out.push(target);
    }
    Ok(out)
}

/// Simulates `reps` replications at `true_params`: each replication runs one
/// cohort of `n_adenoma` for the adenoma targets and one of `n_cancer` for
/// the incidence targets.
pub fn generate_targets(
    true_params: &NaturalHistoryParams<f64>,
    life_table: &LifeTable<f64>,
    cfg: &TargetGenConfig,
) -> Result<TargetSet> {
    if cfg.reps < 2 {
        return Err(Error::InvalidTargets(format!("reps = {} leaves the standard error undefined", cfg.reps)));
    }
    cfg.bins.validate(cfg.horizon)?;
    let seed = derive_seed(cfg.master_seed, "targets");
    let preds: Vec<(ModelPrediction, ModelPrediction)> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let r = r as u64;
            let small = simulate_cohort(true_params, life_table, cfg.horizon, cfg.n_adenoma, seed, 2 * r)?;
            let large = simulate_cohort(true_params, life_table, cfg.horizon, cfg.n_cancer, seed, 2 * r + 1)?;
            Ok((epi_outputs(&small, &cfg.bins)?, epi_outputs(&large, &cfg.bins)?))
        })
        .collect::<Result<_>>()?;
    let (adenoma, cancer): (Vec<_>, Vec<_>) = preds.into_iter().unzip();
    let targets = aggregate_replications(&adenoma, &cancer, cfg)?;
    TargetSet::new(
        targets,
        TargetMetadata {
            bins: cfg.bins.clone(),
            true_params: Some(*true_params),
            reps: cfg.reps,
            n_adenoma: cfg.n_adenoma,
            n_cancer: cfg.n_cancer,
            master_seed: cfg.master_seed,
            se_definition: cfg.se_definition,
            config_hash: None,
        },
    )
}

/// `ln N(y | mu, sigma)`
pub fn normal_log_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Sum over targets of `ln N(y | phi, se)`.
///
/// Undefined predictions contribute [`MISSING_PREDICTION_PENALTY`]; a
/// non-finite prediction makes the whole value `-inf`.
pub fn log_likelihood(phi: &ModelPrediction, targets: &TargetSet) -> f64 {
    let mut ll = 0.0;
    for t in &targets.targets {
        match phi.get(&t.key) {
            Some(v) if !v.is_finite() => return f64::NEG_INFINITY,
            Some(v) => ll += normal_log_density(t.mean, v, t.se),
            None => ll += MISSING_PREDICTION_PENALTY,
        }
    }
    ll
}

/// `targets.csv` -> `targets.meta.json`
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetRow {
    target_type: String,
    bin_lo: u32,
    bin_hi: u32,
    mean: f64,
    se: f64,
    cohort_size: usize,
}

pub fn write_targets(ts: &TargetSet, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, provenance)?;
    writeln!(w, "target_type,bin_lo,bin_hi,mean,se,cohort_size")?;
    for t in &ts.targets {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            t.key.kind.name(),
            t.key.lo,
            t.key.hi,
            num(t.mean),
            num(t.se),
            t.cohort_size
        )?;
    }
    w.flush()?;
    let mut meta = ts.metadata.clone();
    if let Some(p) = provenance {
        meta.config_hash = Some(p.config_hash.clone());
    }
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    std::fs::write(metadata_path(path), json)?;
    Ok(())
}

/// Reads a target CSV. The metadata sidecar is optional; without it the bins
/// are reconstructed from the rows.
pub fn read_targets(path: &Path) -> Result<TargetSet> {
    let mut r = BufReader::new(File::open(path)?);
    let provenance = peek_provenance(&mut r)?;
    let mut reader = csv_reader(r);
    let mut targets = Vec::new();
    for (i, row) in reader.deserialize::<TargetRow>().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            location: format!("{} row {line}", path.display()),
            message,
        };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let kind = TargetType::parse(&row.target_type)
            .ok_or_else(|| parse_err(format!("unknown target type `{}`", row.target_type)))?;
        let t = CalibrationTarget {
            key: TargetKey::new(kind, row.bin_lo, row.bin_hi),
            mean: row.mean,
            se: row.se,
            cohort_size: row.cohort_size,
        };
        t.validate().map_err(|e| parse_err(e.to_string()))?;
        targets.push(t);
    }
    if targets.is_empty() {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: "no targets".into(),
        });
    }
    let meta_path = metadata_path(path);
    let metadata = if meta_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(meta_path)?)?
    } else {
        let mut adenoma_ages: Vec<u32> = targets.iter().filter(|t| t.key.kind.is_adenoma()).map(|t| t.key.lo).collect();
        adenoma_ages.sort();
        adenoma_ages.dedup();
        let mut incidence_bins: Vec<(u32, u32)> =
            targets.iter().filter(|t| !t.key.kind.is_adenoma()).map(|t| (t.key.lo, t.key.hi)).collect();
        incidence_bins.sort();
        incidence_bins.dedup();
        TargetMetadata {
            bins: TargetBinSpec {
                adenoma_ages,
                incidence_bins,
            },
            true_params: None,
            reps: 0,
            n_adenoma: 0,
            n_cancer: 0,
            master_seed: provenance.as_ref().map_or(0, |p| p.master_seed),
            se_definition: SeDefinition::default(),
            config_hash: provenance.map(|p| p.config_hash),
        }
    };
    TargetSet::new(targets, metadata)
}

/// Targets grouped by type, in key order.
pub fn by_type(ts: &TargetSet) -> BTreeMap<TargetType, Vec<&CalibrationTarget>> {
    let mut out: BTreeMap<TargetType, Vec<&CalibrationTarget>> = BTreeMap::new();
    for t in &ts.targets {
        out.entry(t.key.kind).or_default().push(t);
    }
    out
}
