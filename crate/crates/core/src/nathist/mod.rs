//! Natural history of colorectal cancer as an age-dependent continuous-time
//! Markov chain, discretized to annual transition probability matrices.
//!
//! Adenoma onset follows a Weibull hazard `lambda1(a) = l * gamma * a^(gamma - 1)`;
//! every other progression rate is constant, and other-cause mortality comes
//! from a [`LifeTable`]. The annual matrix for age `a` is `P(a) = exp(Q(a))`.

mod life_table;
mod matrix;

pub use life_table::{LifeTable, REQUIRED_AGES};
pub use matrix::{expm, SquareMatrix, EXPM_TAIL_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scalar::Scalar;

pub const N_STATES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthState {
    Normal = 0,
    SmallAdenoma = 1,
    LargeAdenoma = 2,
    PreclinicalEarlyCrc = 3,
    PreclinicalLateCrc = 4,
    ClinicalEarlyCrc = 5,
    ClinicalLateCrc = 6,
    CrcDeath = 7,
    OtherDeath = 8,
}

impl HealthState {
    pub const ALL: [HealthState; N_STATES] = [
        HealthState::Normal,
        HealthState::SmallAdenoma,
        HealthState::LargeAdenoma,
        HealthState::PreclinicalEarlyCrc,
        HealthState::PreclinicalLateCrc,
        HealthState::ClinicalEarlyCrc,
        HealthState::ClinicalLateCrc,
        HealthState::CrcDeath,
        HealthState::OtherDeath,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HealthState::Normal => "normal",
            HealthState::SmallAdenoma => "small_adenoma",
            HealthState::LargeAdenoma => "large_adenoma",
            HealthState::PreclinicalEarlyCrc => "preclinical_early_crc",
            HealthState::PreclinicalLateCrc => "preclinical_late_crc",
            HealthState::ClinicalEarlyCrc => "clinical_early_crc",
            HealthState::ClinicalLateCrc => "clinical_late_crc",
            HealthState::CrcDeath => "crc_death",
            HealthState::OtherDeath => "other_death",
        }
    }

    pub fn is_absorbing(self) -> bool {
        matches!(self, HealthState::CrcDeath | HealthState::OtherDeath)
    }

    pub fn is_alive(self) -> bool {
        !self.is_absorbing()
    }

    pub fn is_adenoma(self) -> bool {
        matches!(self, HealthState::SmallAdenoma | HealthState::LargeAdenoma)
    }

    pub fn is_preclinical(self) -> bool {
        matches!(self, HealthState::PreclinicalEarlyCrc | HealthState::PreclinicalLateCrc)
    }

    pub fn is_clinical(self) -> bool {
        matches!(self, HealthState::ClinicalEarlyCrc | HealthState::ClinicalLateCrc)
    }
}

/// Where symptomatic detection of early preclinical cancer (rate `lam5`) leads.
///
/// The parameter table labels `lam5` as going to clinical *late* CRC while the
/// model narrative describes early preclinical cancers becoming symptomatic;
/// the stage-preserving reading is used. Pass
/// `HealthState::ClinicalLateCrc` to [`build_intensity_matrix_routed`] for the other one.
pub const LAMBDA5_DESTINATION: HealthState = HealthState::ClinicalEarlyCrc;

/// The 11 natural-history parameters: the 9 calibrated ones followed by the
/// two clinical CRC mortality rates, which are treated as known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalHistoryParams<T> {
    /// Adenoma prevalence at age 50.
    pub p_adeno: T,
    /// Proportion of adenomas that are small at age 50.
    pub p_small: T,
    /// Weibull scale (1/year^gamma).
    pub l: T,
    /// Weibull shape.
    pub gamma: T,
    /// Small to large adenoma.
    pub lam2: T,
    /// Large adenoma to preclinical early CRC.
    pub lam3: T,
    /// Preclinical early to preclinical late CRC.
    pub lam4: T,
    /// Preclinical early CRC to symptomatic.
    pub lam5: T,
    /// Preclinical late to clinical late CRC.
    pub lam6: T,
    /// CRC mortality, early stage.
    pub lam7: T,
    /// CRC mortality, late stage.
    pub lam8: T,
}

pub const N_PARAMS: usize = 11;
pub const N_CALIBRATED: usize = 9;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "p_adeno", "p_small", "l", "gamma", "lam2", "lam3", "lam4", "lam5", "lam6", "lam7", "lam8",
];

/// Which of the 11 parameters are calibrated.
pub const CALIBRATED_MASK: [bool; N_PARAMS] =
    [true, true, true, true, true, true, true, true, true, false, false];

pub const CALIBRATED_NAMES: [&str; N_CALIBRATED] = [
    "p_adeno", "p_small", "l", "gamma", "lam2", "lam3", "lam4", "lam5", "lam6",
];

impl<T: Scalar> NaturalHistoryParams<T> {
    /// The data-generating values used for the confirmatory simulation.
    pub fn reference() -> Self {
        NaturalHistoryParams::<f64>::from_array([
            0.25, 0.71, 2.86e-6, 2.78, 0.0346, 0.0215, 0.3697, 0.2382, 0.4582, 0.0302, 0.2099,
        ])
        .map(T::lit)
    }

    pub fn map<U>(self, f: impl Fn(T) -> U) -> NaturalHistoryParams<U> {
        let a = self.to_array();
        NaturalHistoryParams::from_array(a.map(f))
    }

    pub fn to_array(&self) -> [T; N_PARAMS] {
        [
            self.p_adeno, self.p_small, self.l, self.gamma, self.lam2, self.lam3, self.lam4,
            self.lam5, self.lam6, self.lam7, self.lam8,
        ]
    }

    pub fn calibrated(&self) -> [T; N_CALIBRATED] {
        let a = self.to_array();
        std::array::from_fn(|i| a[i])
    }

    pub fn with_calibrated(&self, theta: &[T]) -> Result<Self> {
        if theta.len() != N_CALIBRATED {
            return domain(format!("expected {N_CALIBRATED} calibrated values, got {}", theta.len()));
        }
        let mut a = self.to_array();
        a[..N_CALIBRATED].copy_from_slice(theta);
        Ok(NaturalHistoryParams::from_array(a))
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        for (name, v) in PARAM_NAMES.iter().zip(a) {
            if !v.is_finite() {
                return domain(format!("{name} = {v} is not finite"));
            }
        }
        for (name, v) in [("p_adeno", self.p_adeno), ("p_small", self.p_small)] {
            if !(v > T::zero() && v < T::one()) {
                return domain(format!("{name} = {v} must lie in (0, 1)"));
            }
        }
        for (name, v) in PARAM_NAMES.iter().zip(a).skip(2) {
            if v <= T::zero() {
                return domain(format!("{name} = {v} must be > 0"));
            }
        }
        Ok(())
    }
}

impl<T> NaturalHistoryParams<T> {
    pub fn from_array(a: [T; N_PARAMS]) -> Self {
        let [p_adeno, p_small, l, gamma, lam2, lam3, lam4, lam5, lam6, lam7, lam8] = a;
        Self { p_adeno, p_small, l, gamma, lam2, lam3, lam4, lam5, lam6, lam7, lam8 }
    }
}

/// `l * gamma * a^(gamma - 1)`, the adenoma onset hazard at age `a`.
pub fn weibull_hazard<T: Scalar>(l: T, gamma: T, a: T) -> Result<T> {
    if !(l.is_finite() && l > T::zero()) {
        return domain(format!("Weibull scale {l} must be finite and > 0"));
    }
    if !(gamma.is_finite() && gamma > T::zero()) {
        return domain(format!("Weibull shape {gamma} must be finite and > 0"));
    }
    if !(a.is_finite() && a >= T::zero()) {
        return domain(format!("age {a} must be finite and >= 0"));
    }
    if gamma == T::one() {
        return Ok(l);
    }
    let h = l * gamma * a.powf(gamma - T::one());
    if !h.is_finite() {
        return domain(format!("hazard is infinite at age {a} with shape {gamma} < 1"));
    }
    Ok(h)
}

/// Generator `Q(a)`: non-negative off-diagonals, rows summing to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityMatrix<T>(SquareMatrix<T, N_STATES>);

impl<T: Scalar> IntensityMatrix<T> {
    /// Builds a generator from off-diagonal rates; the diagonal is overwritten.
    pub fn from_rates(rates: SquareMatrix<T, N_STATES>) -> Result<Self> {
        let mut q = rates;
        for i in 0..N_STATES {
            let mut out = T::zero();
            for j in 0..N_STATES {
                if i == j {
                    continue;
                }
                let r = q[(i, j)];
                if !(r.is_finite() && r >= T::zero()) {
                    return domain(format!("rate {r} from state {i} to {j} must be finite and >= 0"));
                }
                out = out + r;
            }
            q[(i, i)] = -out;
        }
        for s in HealthState::ALL.iter().filter(|s| s.is_absorbing()) {
            if out_rate(&q, s.index()) != T::zero() {
                return domain(format!("absorbing state {} has outgoing intensity", s.name()));
            }
        }
        Ok(Self(q))
    }

    pub fn matrix(&self) -> &SquareMatrix<T, N_STATES> {
        &self.0
    }

    pub fn rate(&self, from: HealthState, to: HealthState) -> T {
        self.0[(from.index(), to.index())]
    }
}

fn out_rate<T: Scalar>(q: &SquareMatrix<T, N_STATES>, i: usize) -> T {
    (0..N_STATES).filter(|&j| j != i).map(|j| q[(i, j)]).sum()
}

/// `Q(a)` with the onset hazard multiplied by `hr_lambda1` and `lam5` routed to
/// [`LAMBDA5_DESTINATION`].
pub fn build_intensity_matrix<T: Scalar>(
    params: &NaturalHistoryParams<T>,
    life_table: &LifeTable<T>,
    age: u32,
    hr_lambda1: T,
) -> Result<IntensityMatrix<T>> {
    build_intensity_matrix_routed(params, life_table, age, hr_lambda1, LAMBDA5_DESTINATION)
}

pub fn build_intensity_matrix_routed<T: Scalar>(
    params: &NaturalHistoryParams<T>,
    life_table: &LifeTable<T>,
    age: u32,
    hr_lambda1: T,
    lambda5_to: HealthState,
) -> Result<IntensityMatrix<T>> {
    use HealthState::*;
    if !(hr_lambda1.is_finite() && hr_lambda1 >= T::zero()) {
        return domain(format!("hazard ratio {hr_lambda1} must be finite and >= 0"));
    }
    if !lambda5_to.is_clinical() {
        return domain("lam5 must lead to a clinical state");
    }
    let mu = life_table.rate(age)?;
    // l = 0 switches onset off entirely, which the hazard function rejects.
    let onset = if params.l == T::zero() {
        T::zero()
    } else {
        weibull_hazard(params.l, params.gamma, T::from_u32(age).unwrap())?
    };
    let mut r = SquareMatrix::<T, N_STATES>::zeros();
    let mut set = |from: HealthState, to: HealthState, v: T| r[(from.index(), to.index())] = v;
    set(Normal, SmallAdenoma, hr_lambda1 * onset);
    set(SmallAdenoma, LargeAdenoma, params.lam2);
    set(LargeAdenoma, PreclinicalEarlyCrc, params.lam3);
    set(PreclinicalEarlyCrc, PreclinicalLateCrc, params.lam4);
    set(PreclinicalEarlyCrc, lambda5_to, params.lam5);
    set(PreclinicalLateCrc, ClinicalLateCrc, params.lam6);
    set(ClinicalEarlyCrc, CrcDeath, params.lam7);
    set(ClinicalLateCrc, CrcDeath, params.lam8);
    for s in HealthState::ALL.iter().filter(|s| s.is_alive()) {
        set(*s, OtherDeath, mu);
    }
    IntensityMatrix::from_rates(r)
}

/// Row-stochastic one-year transition matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix<T>(SquareMatrix<T, N_STATES>);

impl<T: Scalar> TransitionMatrix<T> {
    pub fn matrix(&self) -> &SquareMatrix<T, N_STATES> {
        &self.0
    }

    pub fn prob(&self, from: HealthState, to: HealthState) -> T {
        self.0[(from.index(), to.index())]
    }

    pub fn row(&self, from: HealthState) -> &[T; N_STATES] {
        self.0.row(from.index())
    }
}

/// `P = exp(Q)` for a one-year cycle.
///
/// Round-off can leave entries a few ulps outside `[0, 1]`; those are clamped.
/// Absorbing rows are exact unit vectors.
pub fn matrix_exponential<T: Scalar>(q: &IntensityMatrix<T>) -> Result<TransitionMatrix<T>> {
    let mut p = expm(&q.0)?;
    for row in p.0.iter_mut() {
        for x in row.iter_mut() {
            *x = x.max(T::zero()).min(T::one());
        }
    }
    for s in HealthState::ALL.iter().filter(|s| s.is_absorbing()) {
        let mut row = [T::zero(); N_STATES];
        row[s.index()] = T::one();
        p.0[s.index()] = row;
    }
    Ok(TransitionMatrix(p))
}

/// One annual transition matrix per integer age in `[age_min, age_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrixTable<T> {
    age_min: u32,
    matrices: Vec<TransitionMatrix<T>>,
}

impl<T: Scalar> TransitionMatrixTable<T> {
    pub fn age_min(&self) -> u32 {
        self.age_min
    }

    pub fn age_max(&self) -> u32 {
        self.age_min + self.matrices.len() as u32 - 1
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn at(&self, age: u32) -> Result<&TransitionMatrix<T>> {
        age.checked_sub(self.age_min)
            .and_then(|i| self.matrices.get(i as usize))
            .ok_or(Error::AgeOutOfRange {
                age,
                min: self.age_min,
                max: self.age_max(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &TransitionMatrix<T>)> {
        self.matrices.iter().enumerate().map(|(i, m)| (self.age_min + i as u32, m))
    }
}

pub fn transition_table<T: Scalar>(
    params: &NaturalHistoryParams<T>,
    life_table: &LifeTable<T>,
    age_min: u32,
    age_max: u32,
    hr_lambda1: T,
) -> Result<TransitionMatrixTable<T>> {
    if age_min > age_max {
        return domain(format!("age_min {age_min} exceeds age_max {age_max}"));
    }
    let matrices = (age_min..=age_max)
        .map(|a| matrix_exponential(&build_intensity_matrix(params, life_table, a, hr_lambda1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionMatrixTable { age_min, matrices })
}
