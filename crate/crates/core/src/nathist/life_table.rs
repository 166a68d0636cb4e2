//! Other-cause mortality by single year of age.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ages every life table must cover.
pub const REQUIRED_AGES: (u32, u32) = (50, 100);

/// Annual other-cause mortality rate `mu(a)` keyed by integer age.
#[derive(Debug, Clone, PartialEq)]
pub struct LifeTable<T> {
    rates: BTreeMap<u32, T>,
}

impl<T: Scalar> LifeTable<T> {
    pub fn new(rates: BTreeMap<u32, T>) -> Result<Self> {
        let invalid = |message: String| Error::Parse {
            location: "life table".into(),
            message,
        };
        let (&min, _) = rates
            .first_key_value()
            .ok_or_else(|| invalid("life table is empty".into()))?;
        let (&max, _) = rates.last_key_value().unwrap();
        if (max - min + 1) as usize != rates.len() {
            return Err(invalid(format!("ages {min}..{max} are not contiguous")));
        }
        if min > REQUIRED_AGES.0 || max < REQUIRED_AGES.1 {
            return Err(invalid(format!(
                "ages {min}..{max} do not cover {}..{}",
                REQUIRED_AGES.0, REQUIRED_AGES.1
            )));
        }
        if let Some((age, rate)) = rates.iter().find(|(_, r)| !(r.is_finite() && **r >= T::zero())) {
            return Err(invalid(format!("rate {rate} at age {age} is not a non-negative number")));
        }
        Ok(Self { rates })
    }

    /// Synthetic Gompertz table `mu(a) = 1e-4 * exp(0.085 (a - 30))` for ages 0..=110.
    pub fn gompertz_synthetic() -> Self {
        let rates = (0..=110u32)
            .map(|a| {
                let mu = 1e-4 * (0.085 * (f64::from(a) - 30.0)).exp();
                (a, T::lit(mu))
            })
            .collect();
        Self::new(rates).expect("synthetic table is valid")
    }

    /// Parses a two-column `age,rate` CSV with a header row.
    pub fn from_csv_reader<R: Read>(r: R) -> Result<Self> {
        let mut reader = crate::io::csv_reader(r);
        let headers = reader.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "age" || &headers[1] != "rate" {
            return Err(Error::Parse {
                location: "life table header".into(),
                message: format!("expected `age,rate`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut rates = BTreeMap::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let bad = |message: String| Error::Parse {
                location: format!("life table row {row}"),
                message,
            };
            if rec.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", rec.len())));
            }
            let age: u32 = rec[0].parse().map_err(|e| bad(format!("age: {e}")))?;
            let rate: f64 = rec[1].parse().map_err(|e| bad(format!("rate: {e}")))?;
            if rates.insert(age, T::lit(rate)).is_some() {
                return Err(bad(format!("duplicate age {age}")));
            }
        }
        Self::new(rates)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn min_age(&self) -> u32 {
        *self.rates.first_key_value().unwrap().0
    }

    pub fn max_age(&self) -> u32 {
        *self.rates.last_key_value().unwrap().0
    }

    pub fn rate(&self, age: u32) -> Result<T> {
        self.rates.get(&age).copied().ok_or(Error::AgeOutOfRange {
            age,
            min: self.min_age(),
            max: self.max_age(),
        })
    }

    /// Every rate multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            rates: self.rates.iter().map(|(a, r)| (*a, *r * factor)).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, T)> + '_ {
        self.rates.iter().map(|(a, r)| (*a, *r))
    }
}
