//! Fixed-point cumulative frequency tables.

use super::gaussian::{normal_cdf, SIGMA_MIN};
use crate::error::CoderError;

pub const CDF_PRECISION: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_PRECISION;

/// Beyond this many standard deviations the CDF is taken as exactly 0 or 1;
/// the mass there is far below one fixed-point unit.
const TAIL_CUTOFF: f64 = 12.0;

/// `cum[0] = 0 < cum[1] < ... < cum[n] = CDF_TOTAL`: every symbol has mass >= 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    pub fn from_cumulative(cum: Vec<u32>) -> Result<Self, CoderError> {
        if cum.len() < 2 {
            return Err(CoderError::MalformedCdf("need at least one symbol".into()));
        }
        if cum[0] != 0 || *cum.last().unwrap() != CDF_TOTAL {
            return Err(CoderError::MalformedCdf("must start at 0 and end at total".into()));
        }
        if let Some(i) = cum.windows(2).position(|w| w[1] <= w[0]) {
            return Err(CoderError::ZeroMass(i));
        }
        Ok(Self { cum })
    }

    /// Quantizes a probability vector. Each symbol receives at least one unit;
    /// rounding leftovers go to the most probable symbol.
    pub fn from_pmf(pmf: &[f64]) -> Result<Self, CoderError> {
        let n = pmf.len();
        if n == 0 || n as u32 > CDF_TOTAL {
            return Err(CoderError::MalformedCdf(format!("alphabet of {n} symbols")));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CoderError::MalformedCdf("negative or non-finite mass".into()));
        }
        let sum: f64 = pmf.iter().sum();
        let spare = (CDF_TOTAL - n as u32) as f64;
        let mut freq: Vec<u32> = pmf
            .iter()
            .map(|&p| {
                let share = if sum > 0.0 { p / sum } else { 1.0 / n as f64 };
                1 + (share * spare).floor().min(spare) as u32
            })
            .collect();
        let assigned: u32 = freq.iter().sum();
        let peak = freq
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        freq[peak] += CDF_TOTAL - assigned;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cum.push(acc);
        }
        Self::from_cumulative(cum)
    }

    /// Discretized Gaussian over symbols `-bound..=bound`, tails folded into the edges.
    pub fn gaussian(mu: f64, sigma: f64, bound: i32) -> Result<Self, CoderError> {
        let sigma = sigma.max(SIGMA_MIN);
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(CoderError::MalformedCdf("non-finite distribution parameters".into()));
        }
        let n = (2 * bound + 1) as usize;
        let mut pmf = Vec::with_capacity(n);
        let mut prev = 0.0;
        for i in 0..n - 1 {
            let boundary = (-bound) as f64 + i as f64 + 0.5;
            let x = (boundary - mu) / sigma;
            let c = if x < -TAIL_CUTOFF {
                0.0
            } else if x > TAIL_CUTOFF {
                1.0
            } else {
                normal_cdf(x)
            };
            pmf.push((c - prev).max(0.0));
            prev = c;
        }
        pmf.push((1.0 - prev).max(0.0));
        Self::from_pmf(&pmf)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    /// `(start, end)` of `symbol`'s interval.
    pub fn interval(&self, symbol: usize) -> Option<(u32, u32)> {
        if symbol + 1 >= self.cum.len() {
            return None;
        }
        Some((self.cum[symbol], self.cum[symbol + 1]))
    }

    /// Symbol whose interval contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Code length in bits of `symbol` under this table.
    pub fn cost(&self, symbol: usize) -> f64 {
        let (s, e) = self.interval(symbol).expect("symbol in range");
        (CDF_TOTAL as f64 / (e - s) as f64).log2()
    }
}
