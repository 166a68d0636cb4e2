//! Run configuration: one TOML document covering every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crcvoi::imis::{EstimatorKind, FixedInputs, ImisConfig, LikelihoodStreams, ProposalSpace};
use crcvoi::microsim::Horizon;
use crcvoi::nathist::{LifeTable, NaturalHistoryParams, CALIBRATED_NAMES};
use crcvoi::psa::{wtp_grid, ExternalSpecs, UncertaintyApproach};
use crcvoi::screening::ScreeningStrategy;
use crcvoi::stats::{DistributionSpec, PriorSet};
use crcvoi::targets::{SeDefinition, TargetBinSpec, TargetGenConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub model: Model,
    pub priors: Priors,
    pub targets: Targets,
    pub imis: Imis,
    pub cea: Cea,
    pub psa: Psa,
    pub validate: Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub master_seed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { master_seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Model {
    pub lam7: f64,
    pub lam8: f64,
    /// CSV with `age,rate`; the built-in Gompertz table when absent.
    pub life_table: Option<PathBuf>,
    pub age_max: u32,
}

impl Default for Model {
    fn default() -> Self {
        let r = NaturalHistoryParams::<f64>::reference();
        Self {
            lam7: r.lam7,
            lam8: r.lam8,
            life_table: None,
            age_max: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    pub p_adeno: DistributionSpec,
    pub p_small: DistributionSpec,
    pub l: DistributionSpec,
    pub gamma: DistributionSpec,
    pub lam2: DistributionSpec,
    pub lam3: DistributionSpec,
    pub lam4: DistributionSpec,
    pub lam5: DistributionSpec,
    pub lam6: DistributionSpec,
}

impl Default for Priors {
    fn default() -> Self {
        let s = PriorSet::reference().specs().to_vec();
        Self {
            p_adeno: s[0],
            p_small: s[1],
            l: s[2],
            gamma: s[3],
            lam2: s[4],
            lam3: s[5],
            lam4: s[6],
            lam5: s[7],
            lam6: s[8],
        }
    }
}

impl Priors {
    pub fn to_vec(&self) -> Vec<DistributionSpec> {
        vec![
            self.p_adeno,
            self.p_small,
            self.l,
            self.gamma,
            self.lam2,
            self.lam3,
            self.lam4,
            self.lam5,
            self.lam6,
        ]
    }
}

/// Values of the calibrated parameters, by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratedValues {
    pub p_adeno: f64,
    pub p_small: f64,
    pub l: f64,
    pub gamma: f64,
    pub lam2: f64,
    pub lam3: f64,
    pub lam4: f64,
    pub lam5: f64,
    pub lam6: f64,
}

impl Default for CalibratedValues {
    fn default() -> Self {
        let t = NaturalHistoryParams::<f64>::reference().calibrated();
        Self {
            p_adeno: t[0],
            p_small: t[1],
            l: t[2],
            gamma: t[3],
            lam2: t[4],
            lam3: t[5],
            lam4: t[6],
            lam5: t[7],
            lam6: t[8],
        }
    }
}

impl CalibratedValues {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.p_adeno,
            self.p_small,
            self.l,
            self.gamma,
            self.lam2,
            self.lam3,
            self.lam4,
            self.lam5,
            self.lam6,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Targets {
    pub reps: usize,
    pub n_adenoma: usize,
    pub n_cancer: usize,
    pub se_definition: SeDefinition,
    pub adenoma_ages: Vec<u32>,
    pub incidence_bins: Vec<[u32; 2]>,
    /// Data-generating values of the calibrated parameters.
    pub true_params: CalibratedValues,
}

impl Default for Targets {
    fn default() -> Self {
        let g = TargetGenConfig::default();
        Self {
            reps: g.reps,
            n_adenoma: g.n_adenoma,
            n_cancer: g.n_cancer,
            se_definition: g.se_definition,
            adenoma_ages: g.bins.adenoma_ages,
            incidence_bins: g.bins.incidence_bins.iter().map(|&(lo, hi)| [lo, hi]).collect(),
            true_params: CalibratedValues::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Imis {
    pub n0: usize,
    pub b: usize,
    pub j: usize,
    pub max_iterations: usize,
    pub stop_fraction: f64,
    pub n_lik: usize,
    pub estimator: EstimatorKind,
    pub streams: LikelihoodStreams,
    pub space: ProposalSpace,
    /// Grid points per parameter in the prior-versus-posterior density file.
    pub density_grid: usize,
}

impl Default for Imis {
    fn default() -> Self {
        let c = ImisConfig::default();
        Self {
            n0: c.n0,
            b: c.b,
            j: c.j,
            max_iterations: c.max_iterations,
            stop_fraction: c.stop_fraction,
            n_lik: c.n_lik,
            estimator: c.estimator,
            streams: c.streams,
            space: c.space,
            density_grid: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cea {
    pub discount_rate: f64,
    pub strategy: ScreeningStrategy,
    pub external: ExternalSpecs,
}

impl Default for Cea {
    fn default() -> Self {
        Self {
            discount_rate: 0.03,
            strategy: ScreeningStrategy::default(),
            external: ExternalSpecs::reference().expect("reference external specs fit"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Psa {
    pub approaches: Vec<UncertaintyApproach>,
    pub n_draws: usize,
    pub n_individuals: usize,
    pub wtp_min: f64,
    pub wtp_max: f64,
    pub wtp_step: f64,
}

impl Default for Psa {
    fn default() -> Self {
        Self {
            approaches: UncertaintyApproach::ALL.to_vec(),
            n_draws: 1000,
            n_individuals: 10_000,
            wtp_min: 0.0,
            wtp_max: 150_000.0,
            wtp_step: 1_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Validate {
    /// Cohort size simulated per posterior draw.
    pub n_per_draw: usize,
}

impl Default for Validate {
    fn default() -> Self {
        Self { n_per_draw: 10_000 }
    }
}

fn invalid(field: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {e}"))
}

impl RunConfig {
    /// Parses a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(&path.display().to_string(), e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(lt) = cfg.model.life_table.as_mut() {
            if lt.is_relative() {
                *lt = path.parent().unwrap_or(Path::new(".")).join(&*lt);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        self.horizon().validate().map_err(|e| invalid("model.age_max", e))?;
        for (name, v) in [("model.lam7", self.model.lam7), ("model.lam8", self.model.lam8)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} must be positive")));
            }
        }
        if let Some(p) = &self.model.life_table {
            if !p.is_file() {
                return Err(invalid("model.life_table", format!("{} does not exist", p.display())));
            }
        }
        self.priors().map_err(|e| invalid("priors", e))?;
        self.bins().validate(self.horizon()).map_err(|e| invalid("targets", e))?;
        if self.targets.reps < 2 {
            return Err(invalid("targets.reps", "at least 2 replications are needed for a standard error"));
        }
        if self.targets.n_adenoma == 0 || self.targets.n_cancer == 0 {
            return Err(invalid("targets", "cohort sizes must be at least 1"));
        }
        self.true_params().map_err(|e| invalid("targets.true_params", e))?;
        self.imis_config()
            .validate(CALIBRATED_NAMES.len())
            .map_err(|e| invalid("imis", e))?;
        if self.imis.density_grid < 2 {
            return Err(invalid("imis.density_grid", "need at least 2 points"));
        }
        if !(self.cea.discount_rate >= 0.0 && self.cea.discount_rate.is_finite()) {
            return Err(invalid("cea.discount_rate", "must be finite and non-negative"));
        }
        self.cea.strategy.validate().map_err(|e| invalid("cea.strategy", e))?;
        self.cea.external.validate().map_err(|e| invalid("cea.external", e))?;
        if self.psa.approaches.is_empty() {
            return Err(invalid("psa.approaches", "at least one approach is required"));
        }
        if self.psa.n_draws < 2 || self.psa.n_individuals == 0 {
            return Err(invalid("psa", "need n_draws >= 2 and n_individuals >= 1"));
        }
        self.wtp_grid().map_err(|e| invalid("psa.wtp", e))?;
        if self.validate.n_per_draw == 0 {
            return Err(invalid("validate.n_per_draw", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization, so formatting and comments do
    /// not change it.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn horizon(&self) -> Horizon {
        Horizon {
            age_min: 50,
            age_max: self.model.age_max,
        }
    }

    pub fn life_table(&self) -> Result<LifeTable<f64>, CliError> {
        match &self.model.life_table {
            Some(p) => LifeTable::from_path(p).map_err(|e| invalid("model.life_table", e)),
            None => Ok(LifeTable::gompertz_synthetic()),
        }
    }

    pub fn fixed_inputs(&self) -> Result<FixedInputs, CliError> {
        Ok(FixedInputs {
            lam7: self.model.lam7,
            lam8: self.model.lam8,
            life_table: self.life_table()?,
            horizon: self.horizon(),
        })
    }

    /// Natural-history parameters with the configured fixed rates and the
    /// reference calibrated values.
    pub fn base_params(&self) -> NaturalHistoryParams<f64> {
        let mut p = NaturalHistoryParams::reference();
        p.lam7 = self.model.lam7;
        p.lam8 = self.model.lam8;
        p
    }

    pub fn true_params(&self) -> crcvoi::Result<NaturalHistoryParams<f64>> {
        let p = self.base_params().with_calibrated(&self.targets.true_params.to_vec())?;
        p.validate()?;
        Ok(p)
    }

    pub fn priors(&self) -> crcvoi::Result<PriorSet> {
        PriorSet::new(self.priors.to_vec())
    }

    pub fn bins(&self) -> TargetBinSpec {
        TargetBinSpec {
            adenoma_ages: self.targets.adenoma_ages.clone(),
            incidence_bins: self.targets.incidence_bins.iter().map(|b| (b[0], b[1])).collect(),
        }
    }

    pub fn target_gen(&self) -> TargetGenConfig {
        TargetGenConfig {
            reps: self.targets.reps,
            n_adenoma: self.targets.n_adenoma,
            n_cancer: self.targets.n_cancer,
            bins: self.bins(),
            horizon: self.horizon(),
            master_seed: self.seeds.master_seed,
            se_definition: self.targets.se_definition,
        }
    }

    pub fn imis_config(&self) -> ImisConfig {
        ImisConfig {
            n0: self.imis.n0,
            b: self.imis.b,
            j: self.imis.j,
            max_iterations: self.imis.max_iterations,
            stop_fraction: self.imis.stop_fraction,
            n_lik: self.imis.n_lik,
            estimator: self.imis.estimator,
            streams: self.imis.streams,
            space: self.imis.space,
            master_seed: self.seeds.master_seed,
        }
    }

    pub fn wtp_grid(&self) -> crcvoi::Result<Vec<f64>> {
        wtp_grid(self.psa.wtp_min, self.psa.wtp_max, self.psa.wtp_step)
    }
}
