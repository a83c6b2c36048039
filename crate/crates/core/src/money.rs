//! Exact integer cent amounts. All cash arithmetic is integral; CNY floats
//! appear only in rendered text and regression design matrices.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub, SubAssign};

/// A cash amount in integer cents (0.01 CNY units).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MoneyCents(pub i64);

impl MoneyCents {
    pub const ZERO: MoneyCents = MoneyCents(0);

    #[inline]
    pub fn cents(self) -> i64 {
        self.0
    }

    /// Value in CNY as a float (for regressions and display only).
    #[inline]
    pub fn as_cny(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl Add for MoneyCents {
    type Output = MoneyCents;
    fn add(self, rhs: Self) -> Self {
        MoneyCents(self.0 + rhs.0)
    }
}

impl AddAssign for MoneyCents {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

impl Sub for MoneyCents {
    type Output = MoneyCents;
    fn sub(self, rhs: Self) -> Self {
        MoneyCents(self.0 - rhs.0)
    }
}

impl SubAssign for MoneyCents {
    fn sub_assign(&mut self, rhs: Self) {
        self.0 -= rhs.0;
    }
}

impl Sum for MoneyCents {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        MoneyCents(iter.map(|m| m.0).sum())
    }
}

impl fmt::Display for MoneyCents {
    /// Renders as CNY with two decimals, e.g. `12.34`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}
