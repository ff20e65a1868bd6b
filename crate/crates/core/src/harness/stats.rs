//! Small statistics used by sweep reports.

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        f64::NAN
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpearmanTest {
    pub rho: f64,
    /// `P(ρ_perm ≥ ρ)` under exchangeability.
    pub p_greater: f64,
    /// `P(ρ_perm ≤ ρ)`.
    pub p_less: f64,
}

/// Largest sample enumerated exhaustively (10! permutations).
pub const MAX_EXACT: usize = 10;

/// Spearman rank correlation with exact permutation p-values.
pub fn spearman_exact(x: &[f64], y: &[f64]) -> Result<SpearmanTest> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} x values for {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if !(2..=MAX_EXACT).contains(&n) {
        return Err(Error::Config(format!("exact test needs 2..={MAX_EXACT} points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: 0 });
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let rho = pearson(&rx, &ry);
    let eps = 1e-12;
    let (mut ge, mut le, mut total) = (0u64, 0u64, 0u64);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let mut visit = |p: &[usize]| {
        let py: Vec<f64> = p.iter().map(|&i| ry[i]).collect();
        let r = pearson(&rx, &py);
        total += 1;
        if r >= rho - eps {
            ge += 1;
        }
        if r <= rho + eps {
            le += 1;
        }
    };
    // Heap's algorithm.
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(SpearmanTest {
        rho,
        p_greater: ge as f64 / total as f64,
        p_less: le as f64 / total as f64,
    })
}
