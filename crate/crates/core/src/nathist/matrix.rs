//! Small dense square matrices and the matrix exponential.

use std::ops::{Index, IndexMut};

use crate::error::{domain, Result};
use crate::scalar::Scalar;

/// Tail tolerance of the truncated Taylor core, before squaring.
pub const EXPM_TAIL_TOLERANCE: f64 = 1e-12;

/// Norm the scaled matrix must fall below before the series is summed.
const SCALING_TARGET_NORM: f64 = 0.5;

const MAX_SERIES_TERMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareMatrix<T, const N: usize>(pub [[T; N]; N]);

impl<T: Scalar, const N: usize> SquareMatrix<T, N> {
    pub fn zeros() -> Self {
        Self([[T::zero(); N]; N])
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            m.0[i][i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: [[T; N]; N]) -> Self {
        Self(rows)
    }

    pub fn rows(&self) -> &[[T; N]; N] {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[T; N] {
        &self.0[i]
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        let mut out = Self::zeros();
        for i in 0..N {
            for k in 0..N {
                let a = self.0[i][k];
                if a == T::zero() {
                    continue;
                }
                for j in 0..N {
                    out.0[i][j] = out.0[i][j] + a * rhs.0[k][j];
                }
            }
        }
        out
    }

    pub fn scale(&self, k: T) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|x| *x = *x * k);
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        let mut out = *self;
        for (o, r) in out.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *o = *o + *r;
        }
        out
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> T {
        self.0
            .iter()
            .map(|r| r.iter().map(|x| x.abs()).fold(T::zero(), |a, b| a + b))
            .fold(T::zero(), T::max)
    }

    pub fn row_sums(&self) -> [T; N] {
        let mut out = [T::zero(); N];
        for (o, r) in out.iter_mut().zip(self.0.iter()) {
            *o = r.iter().copied().fold(T::zero(), |a, b| a + b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}

impl<T, const N: usize> Index<(usize, usize)> for SquareMatrix<T, N> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.0[i][j]
    }
}

impl<T, const N: usize> IndexMut<(usize, usize)> for SquareMatrix<T, N> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.0[i][j]
    }
}

/// `exp(m)` by scaling and squaring around a truncated Taylor series.
///
/// The argument is halved `s` times until its infinity norm is at most 1/2,
/// the series is summed until its tail bound drops below
/// `EXPM_TAIL_TOLERANCE / 2^s` (or the precision floor of `T`), and the result
/// is squared `s` times.
pub fn expm<T: Scalar, const N: usize>(m: &SquareMatrix<T, N>) -> Result<SquareMatrix<T, N>> {
    if !m.is_finite() {
        return domain("matrix exponential of a non-finite matrix");
    }
    let norm = m.norm_inf();
    let target = T::lit(SCALING_TARGET_NORM);
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > target {
        scaled_norm = scaled_norm / T::lit(2.0);
        squarings += 1;
    }
    let a = m.scale(T::lit(0.5).powi(squarings as i32));
    let tol = (T::lit(EXPM_TAIL_TOLERANCE) * T::lit(0.5).powi(squarings as i32)).max(T::series_floor());

    let mut sum = SquareMatrix::identity();
    let mut term = SquareMatrix::identity();
    for k in 1..=MAX_SERIES_TERMS {
        term = term.mul(&a).scale(T::one() / T::from_usize(k).unwrap());
        sum = sum.add(&term);
        // Remaining terms are bounded by a geometric series with ratio norm/(k+1) <= 1/2.
        let tail = term.norm_inf() * scaled_norm / T::from_usize(k + 1).unwrap() * T::lit(2.0);
        if tail <= tol {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.mul(&sum);
    }
    Ok(sum)
}
