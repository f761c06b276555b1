//! Small statistics used when comparing training variants.

use crate::{CoreError, Result};

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::Invalid(format!("spearman needs two equal samples of at least 2, got {} and {}", x.len(), y.len())));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if wins > n {
        return 0.0;
    }
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// Pairs where `a` is strictly below `b`, and pairs that differ at all.
/// Ties are dropped as in the usual sign test.
pub fn paired_wins(a: &[f64], b: &[f64]) -> (usize, usize) {
    let mut wins = 0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            n += 1;
            wins += (x < y) as usize;
        }
    }
    (wins, n)
}
