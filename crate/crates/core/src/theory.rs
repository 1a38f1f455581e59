//! Rule-coverage combinatorics: Stirling numbers of the second kind, the
//! probability that `N` draws cover all `T·k` rule slots, and a
//! Monte-Carlo estimate of the same quantity.

use std::fmt::Write as _;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, ExecMode};
use crate::rng;

/// `S(n, k)` by the row recurrence `S(n,k) = k·S(n−1,k) + S(n−1,k−1)`.
pub fn stirling2(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let mut row = vec![BigUint::ZERO; k + 1];
    row[0] = BigUint::from(1u32);
    for i in 1..=n {
        for j in (1..=k.min(i)).rev() {
            row[j] = &row[j] * j + &row[j - 1];
        }
        row[0] = BigUint::ZERO;
    }
    row[k].clone()
}

pub fn factorial(n: usize) -> BigUint {
    (1..=n).fold(BigUint::from(1u32), |acc, i| acc * i)
}

/// `(Tk)!·S(N, Tk) / (Tk)^N`: the chance that `N` uniform draws over `Tk`
/// slots hit every slot. Exact integers up to one final rounding.
pub fn p_unique(n: usize, k: usize, t: usize) -> f64 {
    let tk = t * k;
    assert!(tk >= 1 && n >= 1, "need Tk >= 1 and N >= 1");
    if tk > n {
        return 0.0;
    }
    let num = factorial(tk) * stirling2(n, tk);
    let den = BigUint::from(tk).pow(n as u32);
    let scaled: BigUint = (num << 64u32) / den;
    let q: u128 = scaled.try_into().expect("ratio is at most one");
    q as f64 / 2f64.powi(64)
}

/// Fraction of `trials` in which `n` uniform draws over `tk` slots cover
/// every slot. Each trial has its own counter-addressed stream.
pub fn mc_coverage_oracle(n: usize, tk: usize, trials: usize, seed: u64, mode: ExecMode) -> f64 {
    assert!(
        trials >= 1 && (1..=64).contains(&tk),
        "need trials >= 1 and 1 <= Tk <= 64"
    );
    if tk > n {
        return 0.0;
    }
    let full = if tk == 64 { u64::MAX } else { (1u64 << tk) - 1 };
    const CHUNK: usize = 8192;
    let chunks = trials.div_ceil(CHUNK);
    let hits: usize = par::map_range(mode, chunks, |c| {
        let lo = c * CHUNK;
        (lo..(lo + CHUNK).min(trials))
            .filter(|&trial| {
                let mut r = rng::stream(seed, &[n as u64, tk as u64, trial as u64]);
                let mut seen = 0u64;
                for _ in 0..n {
                    seen |= 1 << r.gen_range(0..tk);
                }
                seen == full
            })
            .count()
    })
    .into_iter()
    .sum();
    hits as f64 / trials as f64
}

/// Published `1 − P` grid for `N = 12..=16` and `Tk = 4, 6, 8, 10`.
pub const PUBLISHED_GRID: [[f64; 4]; 5] = [
    [0.13, 0.56, 0.91, 0.99],
    [0.09, 0.49, 0.86, 0.73],
    [0.07, 0.42, 0.81, 0.97],
    [0.05, 0.36, 0.75, 0.95],
    [0.04, 0.30, 0.69, 0.93],
];
pub const GRID_NS: [usize; 5] = [12, 13, 14, 15, 16];
pub const GRID_TKS: [usize; 4] = [4, 6, 8, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryTable {
    pub ns: Vec<usize>,
    pub tks: Vec<usize>,
    /// `cells[i][j] = 1 − P(ns[i], ·, tks[j])` at full precision.
    pub cells: Vec<Vec<f64>>,
}

/// `1 − P` for every `(N, Tk)`. Only the product `Tk` matters, so `k = 1`
/// and `T = Tk` are used.
pub fn theory_table(ns: &[usize], tks: &[usize]) -> TheoryTable {
    TheoryTable {
        ns: ns.to_vec(),
        tks: tks.to_vec(),
        cells: ns
            .iter()
            .map(|&n| tks.iter().map(|&tk| 1.0 - p_unique(n, 1, tk)).collect())
            .collect(),
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl TheoryTable {
    pub fn default_grid() -> Self {
        theory_table(&GRID_NS, &GRID_TKS)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N");
        for tk in &self.tks {
            let _ = write!(out, ",Tk={tk}");
        }
        out.push('\n');
        for (n, row) in self.ns.iter().zip(&self.cells) {
            let _ = write!(out, "{n}");
            for v in row {
                let _ = write!(out, ",{v:.17}");
            }
            out.push('\n');
        }
        out
    }

    /// Aligned 2-dp text table.
    pub fn to_text(&self) -> String {
        let mut out = String::from(" N \\ Tk");
        for tk in &self.tks {
            let _ = write!(out, "{tk:>7}");
        }
        out.push('\n');
        for (n, row) in self.ns.iter().zip(&self.cells) {
            let _ = write!(out, "{n:>7}");
            for v in row {
                let _ = write!(out, "{:>7.2}", round2(*v));
            }
            out.push('\n');
        }
        out
    }
}
