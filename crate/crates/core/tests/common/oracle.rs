//! Straight-line reference implementations shared by the oracle suites and
//! the acceptance target.

use dsmt_core::losses::LossComponents;
use dsmt_core::model::Variant;

pub const DEPTHS: [usize; 3] = [2, 3, 4];

/// Each variant's objective written out in full, with no shared helpers.
pub fn oracle_total(v: Variant, a: f64, b: f64, g: f64, eta: &[f64; 3], c: &LossComponents) -> f64 {
    let ba_d: Vec<f64> = DEPTHS.iter().map(|d| c.l_ba_shallow[d]).collect();
    let gc_d: Vec<f64> = DEPTHS.iter().map(|d| c.l_gc_shallow.get(d).copied().unwrap_or(0.0)).collect();
    match v {
        Variant::Baseline => c.l_ba_final,
        Variant::Ae => a * c.l_ae + (1.0 - a) * c.l_ba_final,
        Variant::MtlAe => a * c.l_ae + (1.0 - a) * (b * c.l_ba_final + (1.0 - b) * c.l_gc_final),
        Variant::DsAe => {
            a * c.l_ae + (1.0 - a) * (g * c.l_ba_final + (1.0 - g) * (eta[0] * ba_d[0] + eta[1] * ba_d[1] + eta[2] * ba_d[2]))
        }
        Variant::DsmtAe => {
            let ba = g * c.l_ba_final + (1.0 - g) * (eta[0] * ba_d[0] + eta[1] * ba_d[1] + eta[2] * ba_d[2]);
            let gc = g * c.l_gc_final + (1.0 - g) * (eta[0] * gc_d[0] + eta[1] * gc_d[1] + eta[2] * gc_d[2]);
            a * c.l_ae + (1.0 - a) * (b * ba + (1.0 - b) * gc)
        }
    }
}

pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

pub fn oracle_mae(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn oracle_bce(t: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..t.len() {
        s -= if t[i] == 1.0 { p[i].ln() } else { (1.0 - p[i]).ln() };
    }
    s / t.len() as f64
}

// Oracles accumulate in a different order (reverse) and use two-pass forms.
pub fn o_mae(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in (0..y.len()).rev() {
        s += if y[i] > p[i] { y[i] - p[i] } else { p[i] - y[i] };
    }
    s / y.len() as f64
}

pub fn o_sd(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut m = 0.0;
    for i in (0..y.len()).rev() {
        m += y[i] - p[i];
    }
    m /= n;
    let mut v = 0.0;
    for i in (0..y.len()).rev() {
        let d = y[i] - p[i] - m;
        v += d * d;
    }
    (v / n).sqrt()
}

pub fn o_rmse(y: &[f64], p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in (0..y.len()).rev() {
        s += (y[i] - p[i]) * (y[i] - p[i]);
    }
    (s / y.len() as f64).sqrt()
}

pub fn o_r2(y: &[f64], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mut m = 0.0;
    for v in y.iter().rev() {
        m += v;
    }
    m /= n;
    let (mut res, mut tot) = (0.0, 0.0);
    for i in (0..y.len()).rev() {
        res += (y[i] - p[i]) * (y[i] - p[i]);
        tot += (y[i] - m) * (y[i] - m);
    }
    1.0 - res / tot
}

/// Spearman from the rank-difference formula, valid without ties.
pub fn o_spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect() };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

