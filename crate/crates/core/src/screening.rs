//! Colonoscopy screening with surveillance overlaid on the natural-history
//! engine, and discounted cost and QALY accounting per strategy.
//!
//! Strategies share the natural-history streams of [`crate::microsim`], so an
//! individual whose course is not changed by screening follows the same
//! trajectory in every arm. Test outcomes use a separate stream.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::io::{num, write_header, Provenance};
use crate::microsim::rng::{CounterStream, RngStreamKey};
use crate::microsim::{
    initial_state, initial_state_distribution, nh_stream, CumulativeRow, CumulativeTable, Horizon, Stage, CHUNK,
};
use crate::nathist::{transition_table, HealthState, LifeTable, NaturalHistoryParams};
use crate::scalar::Scalar;

pub const PURPOSE_SCREEN: &str = "screen";

/// Names of the external parameters, in [`CeaParams::to_array`] order.
pub const EXTERNAL_NAMES: [&str; 11] = [
    "sens_small",
    "sens_large_crc",
    "spec",
    "hr_low",
    "hr_high",
    "cost_colonoscopy",
    "cost_early_annual",
    "cost_late_annual",
    "u_preclinical",
    "u_clin_early",
    "u_clin_late",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeaParams {
    pub sens_small: f64,
    pub sens_large_crc: f64,
    pub spec: f64,
    pub hr_low: f64,
    pub hr_high: f64,
    pub cost_colonoscopy: f64,
    pub cost_early_annual: f64,
    pub cost_late_annual: f64,
    pub u_preclinical: f64,
    pub u_clin_early: f64,
    pub u_clin_late: f64,
    pub discount_rate: f64,
}

impl Default for CeaParams {
    fn default() -> Self {
        Self {
            sens_small: 0.773,
            sens_large_crc: 0.95,
            spec: 0.868,
            hr_low: 2.0,
            hr_high: 3.0,
            cost_colonoscopy: 10_000.0,
            cost_early_annual: 21_524.0,
            cost_late_annual: 37_000.0,
            u_preclinical: 1.0,
            u_clin_early: 0.855,
            u_clin_late: 0.3,
            discount_rate: 0.03,
        }
    }
}

impl CeaParams {
    /// Test that never detects anything and never gives a false positive.
    pub fn inert(self) -> Self {
        Self {
            sens_small: 0.0,
            sens_large_crc: 0.0,
            spec: 1.0,
            ..self
        }
    }

    pub fn to_array(&self) -> [f64; 11] {
        [
            self.sens_small,
            self.sens_large_crc,
            self.spec,
            self.hr_low,
            self.hr_high,
            self.cost_colonoscopy,
            self.cost_early_annual,
            self.cost_late_annual,
            self.u_preclinical,
            self.u_clin_early,
            self.u_clin_late,
        ]
    }

    pub fn from_array(a: [f64; 11], discount_rate: f64) -> Self {
        Self {
            sens_small: a[0],
            sens_large_crc: a[1],
            spec: a[2],
            hr_low: a[3],
            hr_high: a[4],
            cost_colonoscopy: a[5],
            cost_early_annual: a[6],
            cost_late_annual: a[7],
            u_preclinical: a[8],
            u_clin_early: a[9],
            u_clin_late: a[10],
            discount_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("sens_small", self.sens_small),
            ("sens_large_crc", self.sens_large_crc),
            ("spec", self.spec),
            ("u_preclinical", self.u_preclinical),
            ("u_clin_early", self.u_clin_early),
            ("u_clin_late", self.u_clin_late),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return domain(format!("{name} = {v} outside [0, 1]"));
            }
        }
        let nonneg = [
            ("hr_low", self.hr_low),
            ("hr_high", self.hr_high),
            ("cost_colonoscopy", self.cost_colonoscopy),
            ("cost_early_annual", self.cost_early_annual),
            ("cost_late_annual", self.cost_late_annual),
            ("discount_rate", self.discount_rate),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn utility(&self, state: HealthState) -> f64 {
        match state {
            HealthState::Normal | HealthState::SmallAdenoma | HealthState::LargeAdenoma => 1.0,
            HealthState::PreclinicalEarlyCrc | HealthState::PreclinicalLateCrc => self.u_preclinical,
            HealthState::ClinicalEarlyCrc => self.u_clin_early,
            HealthState::ClinicalLateCrc => self.u_clin_late,
            HealthState::CrcDeath | HealthState::OtherDeath => 0.0,
        }
    }

    pub fn annual_cost(&self, state: HealthState) -> f64 {
        match state {
            HealthState::ClinicalEarlyCrc => self.cost_early_annual,
            HealthState::ClinicalLateCrc => self.cost_late_annual,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    None,
    Colonoscopy,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Colonoscopy => "colonoscopy",
        }
    }
}

/// Consequence of a positive colonoscopy in a lesion-free individual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FalsePositiveEffect {
    /// Low-risk surveillance schedule, natural history unchanged.
    #[default]
    Surveillance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurveillanceMode {
    /// Next exam is the last exam plus the interval of the current flag.
    #[default]
    Replace,
    /// Surveillance exams are added to the routine schedule.
    Supplement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningStrategy {
    pub kind: StrategyKind,
    pub start_age: u32,
    pub stop_age: u32,
    pub routine_interval: u32,
    pub surveillance_low: u32,
    pub surveillance_high: u32,
    pub fp_effect: FalsePositiveEffect,
    pub surveillance_mode: SurveillanceMode,
}

impl Default for ScreeningStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Colonoscopy,
            start_age: 50,
            stop_age: 85,
            routine_interval: 10,
            surveillance_low: 5,
            surveillance_high: 3,
            fp_effect: FalsePositiveEffect::Surveillance,
            surveillance_mode: SurveillanceMode::Replace,
        }
    }
}

impl ScreeningStrategy {
    pub fn none() -> Self {
        Self {
            kind: StrategyKind::None,
            ..Self::default()
        }
    }

    pub fn colonoscopy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_age >= self.stop_age {
            return domain(format!("start_age {} must be below stop_age {}", self.start_age, self.stop_age));
        }
        if self.routine_interval == 0 || self.surveillance_low == 0 || self.surveillance_high == 0 {
            return domain("screening intervals must be at least 1 year");
        }
        Ok(())
    }

    fn interval(&self, flag: RiskFlag) -> u32 {
        match flag {
            RiskFlag::None => self.routine_interval,
            RiskFlag::Low => self.surveillance_low,
            RiskFlag::High => self.surveillance_high,
        }
    }

    /// Age of the next exam after one at `last`, or `None` past the stop age.
    fn next_exam(&self, last: u32, flag: RiskFlag) -> Option<u32> {
        let surveillance = last + self.interval(flag);
        let next = match (self.surveillance_mode, flag) {
            (SurveillanceMode::Replace, _) => surveillance,
            (SurveillanceMode::Supplement, RiskFlag::None) => self.next_routine(last),
            (SurveillanceMode::Supplement, _) => surveillance.min(self.next_routine(last)),
        };
        (next <= self.stop_age).then_some(next)
    }

    fn next_routine(&self, last: u32) -> u32 {
        let k = (last - self.start_age) / self.routine_interval + 1;
        self.start_age + k * self.routine_interval
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum RiskFlag {
    None,
    Low,
    High,
}

/// `amount / (1 + rate)^(age - start_age)`.
pub fn discount<T: Scalar>(amount: T, age: T, start_age: T, rate: T) -> T {
    amount / (T::one() + rate).powf(age - start_age)
}

/// Per-person means of a strategy run, with cohort event counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: StrategyKind,
    pub n: usize,
    pub cost: f64,
    pub qaly: f64,
    /// Undiscounted person-years alive per person.
    pub life_years: f64,
    pub colonoscopies: u64,
    pub polypectomies: u64,
    pub screen_detected: u64,
    pub symptomatic: u64,
    pub crc_deaths: u64,
    /// Cancers diagnosed by stage, screen-detected and symptomatic combined.
    pub diagnoses: [u64; 2],
}

impl StrategyOutcome {
    pub fn late_fraction(&self) -> Option<f64> {
        let total = self.diagnoses[0] + self.diagnoses[1];
        (total > 0).then(|| self.diagnoses[1] as f64 / total as f64)
    }
}

/// `(Δcost, Δqaly)` of `screen` relative to `none`.
pub fn incremental(screen: &StrategyOutcome, none: &StrategyOutcome) -> (f64, f64) {
    (screen.cost - none.cost, screen.qaly - none.qaly)
}

#[derive(Debug, Clone, Default)]
struct Totals {
    cost: f64,
    qaly: f64,
    life_years: f64,
    colonoscopies: u64,
    polypectomies: u64,
    screen_detected: u64,
    symptomatic: u64,
    crc_deaths: u64,
    diagnoses: [u64; 2],
}

impl Totals {
    fn merge(&mut self, o: &Totals) {
        self.cost += o.cost;
        self.qaly += o.qaly;
        self.life_years += o.life_years;
        self.colonoscopies += o.colonoscopies;
        self.polypectomies += o.polypectomies;
        self.screen_detected += o.screen_detected;
        self.symptomatic += o.symptomatic;
        self.crc_deaths += o.crc_deaths;
        self.diagnoses[0] += o.diagnoses[0];
        self.diagnoses[1] += o.diagnoses[1];
    }
}

struct Engine<'a> {
    tables: [CumulativeTable; 3],
    init: CumulativeRow,
    cea: &'a CeaParams,
    strat: &'a ScreeningStrategy,
    horizon: Horizon,
    master_seed: u64,
    draw_index: u64,
}

impl Engine<'_> {
    fn table(&self, hr: RiskFlag) -> &CumulativeTable {
        &self.tables[hr as usize]
    }

    fn individual(&self, i: u64, t: &mut Totals) {
        let screening = self.strat.kind == StrategyKind::Colonoscopy;
        let nh = nh_stream(self.master_seed, self.draw_index, i);
        let test: CounterStream = RngStreamKey::new(self.master_seed, PURPOSE_SCREEN, self.draw_index, i).stream();
        let mut s = initial_state(&self.init, self.master_seed, self.draw_index, i);
        let mut hr = RiskFlag::None;
        let mut schedule = RiskFlag::None;
        let mut next_exam = (screening && self.strat.start_age >= self.horizon.age_min).then_some(self.strat.start_age);
        let rate = self.cea.discount_rate;
        let start = f64::from(self.horizon.age_min);
        for a in self.horizon.age_min..self.horizon.age_max {
            if s.is_absorbing() {
                break;
            }
            if next_exam == Some(a) && !s.is_clinical() {
                t.colonoscopies += 1;
                t.cost += discount(self.cea.cost_colonoscopy, f64::from(a), start, rate);
                let u = test.uniform_at(u64::from(a));
                match s {
                    HealthState::Normal => {
                        if u < 1.0 - self.cea.spec && self.strat.fp_effect == FalsePositiveEffect::Surveillance {
                            schedule = schedule.max(RiskFlag::Low);
                        }
                    }
                    HealthState::SmallAdenoma if u < self.cea.sens_small => {
                        t.polypectomies += 1;
                        s = HealthState::Normal;
                        hr = hr.max(RiskFlag::Low);
                        schedule = schedule.max(RiskFlag::Low);
                    }
                    HealthState::LargeAdenoma if u < self.cea.sens_large_crc => {
                        t.polypectomies += 1;
                        s = HealthState::Normal;
                        hr = RiskFlag::High;
                        schedule = RiskFlag::High;
                    }
                    HealthState::PreclinicalEarlyCrc | HealthState::PreclinicalLateCrc
                        if u < self.cea.sens_large_crc =>
                    {
                        s = if s == HealthState::PreclinicalEarlyCrc {
                            HealthState::ClinicalEarlyCrc
                        } else {
                            HealthState::ClinicalLateCrc
                        };
                        t.screen_detected += 1;
                        t.diagnoses[Stage::of(s).unwrap() as usize] += 1;
                    }
                    _ => {}
                }
                next_exam = self.strat.next_exam(a, schedule);
            }
            t.life_years += 1.0;
            t.qaly += discount(self.cea.utility(s), f64::from(a), start, rate);
            t.cost += discount(self.cea.annual_cost(s), f64::from(a), start, rate);
            let next = self.table(hr).step(a, s, nh.uniform_at(u64::from(a)));
            if !s.is_clinical() && next.is_clinical() {
                t.symptomatic += 1;
                t.diagnoses[Stage::of(next).unwrap() as usize] += 1;
            }
            if next == HealthState::CrcDeath {
                t.crc_deaths += 1;
            }
            s = next;
        }
    }
}

/// Simulates `n` individuals from `horizon.age_min` under a strategy.
///
/// Natural-history draws are keyed by `(master_seed, draw_index, individual)`
/// exactly as in [`crate::microsim::simulate_cohort`], so runs of different
/// strategies with the same seeds use common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn simulate_strategy(
    nh: &NaturalHistoryParams<f64>,
    cea: &CeaParams,
    strat: &ScreeningStrategy,
    life_table: &LifeTable<f64>,
    horizon: Horizon,
    n: usize,
    master_seed: u64,
    draw_index: u64,
) -> Result<StrategyOutcome> {
    if n == 0 {
        return domain("cohort size must be at least 1");
    }
    horizon.validate()?;
    nh.validate()?;
    cea.validate()?;
    strat.validate()?;
    let table = |hr: f64| -> Result<CumulativeTable> {
        Ok(CumulativeTable::new(&transition_table(nh, life_table, horizon.age_min, horizon.age_max, hr)?))
    };
    let base = table(1.0)?;
    let tables = if strat.kind == StrategyKind::Colonoscopy {
        [base, table(cea.hr_low)?, table(cea.hr_high)?]
    } else {
        [base.clone(), base.clone(), base]
    };
    let engine = Engine {
        tables,
        init: CumulativeRow::new(&initial_state_distribution(nh)?),
        cea,
        strat,
        horizon,
        master_seed,
        draw_index,
    };
    let chunks: Vec<Totals> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut t = Totals::default();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                engine.individual(i as u64, &mut t);
            }
            t
        })
        .collect();
    let mut t = Totals::default();
    for c in &chunks {
        t.merge(c);
    }
    let nf = n as f64;
    Ok(StrategyOutcome {
        strategy: strat.kind,
        n,
        cost: t.cost / nf,
        qaly: t.qaly / nf,
        life_years: t.life_years / nf,
        colonoscopies: t.colonoscopies,
        polypectomies: t.polypectomies,
        screen_detected: t.screen_detected,
        symptomatic: t.symptomatic,
        crc_deaths: t.crc_deaths,
        diagnoses: t.diagnoses,
    })
}

/// No screening and the given screening strategy at common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn compare_strategies(
    nh: &NaturalHistoryParams<f64>,
    cea: &CeaParams,
    strat: &ScreeningStrategy,
    life_table: &LifeTable<f64>,
    horizon: Horizon,
    n: usize,
    master_seed: u64,
    draw_index: u64,
) -> Result<(StrategyOutcome, StrategyOutcome)> {
    let none = ScreeningStrategy { kind: StrategyKind::None, ..*strat };
    let a = simulate_strategy(nh, cea, &none, life_table, horizon, n, master_seed, draw_index)?;
    let b = simulate_strategy(nh, cea, strat, life_table, horizon, n, master_seed, draw_index)?;
    Ok((a, b))
}

/// `strategy,cost,qaly,colonoscopies,polypectomies,screen_detected,symptomatic,crc_deaths`
pub fn write_outcomes_csv<W: Write>(
    outcomes: &[StrategyOutcome],
    mut w: W,
    provenance: Option<&Provenance>,
) -> Result<()> {
    write_header(&mut w, provenance)?;
    writeln!(w, "strategy,cost,qaly,colonoscopies,polypectomies,screen_detected,symptomatic,crc_deaths")?;
    for o in outcomes {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            o.strategy.name(),
            num(o.cost),
            num(o.qaly),
            o.colonoscopies,
            o.polypectomies,
            o.screen_detected,
            o.symptomatic,
            o.crc_deaths
        )?;
    }
    Ok(())
}
