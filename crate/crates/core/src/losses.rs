//! Composite training objective.
//!
//! The hierarchy is
//!
//! ```text
//! L_total = a * L_AE + (1 - a) * L_DST
//! L_DST   = b * L_BA + (1 - b) * L_GC
//! L_BA    = g * L_BA_final + (1 - g) * sum_d eta_d * L_BA_d
//! L_GC    = g * L_GC_final + (1 - g) * sum_d eta_d * L_GC_d
//! ```
//!
//! with mean-reduced MSE, MAE and binary cross-entropy as the base losses.
//! Variants without a term renormalise the remaining weights, see
//! [`effective_weights`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelOutputs, OutputGrads, Variant};
use crate::nn::Tensor;

/// Probability clamp for the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Mixing weights of the objective. An empty `eta` means uniform weights
/// over the model's supervised depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: BTreeMap<usize, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.5, gamma: 0.5, eta: BTreeMap::new() }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64, eta: BTreeMap<usize, f64>) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma, eta };
        w.validate()?;
        Ok(w)
    }

    /// Weights with `eta` spread evenly over `depths`.
    pub fn uniform(alpha: f64, beta: f64, gamma: f64, depths: &[usize]) -> Result<Self> {
        LossWeights::new(alpha, beta, gamma, uniform_eta(depths))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.eta.values().any(|&e| !e.is_finite() || e < 0.0) {
            return Err(Error::Parameter("eta weights must be finite and non-negative".into()));
        }
        if !self.eta.is_empty() {
            let s: f64 = self.eta.values().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("eta weights sum to {s}, expected 1")));
            }
        }
        Ok(())
    }

    /// `eta` restricted to `depths`; fills in uniform weights when unset.
    pub fn eta_for(&self, depths: &[usize]) -> Result<BTreeMap<usize, f64>> {
        if depths.is_empty() {
            return Ok(BTreeMap::new());
        }
        if self.eta.is_empty() {
            return Ok(uniform_eta(depths));
        }
        if !self.eta.keys().copied().eq(sorted(depths)) {
            return Err(Error::Parameter(format!(
                "eta depths {:?} do not match supervised depths {depths:?}",
                self.eta.keys().collect::<Vec<_>>()
            )));
        }
        Ok(self.eta.clone())
    }

    pub fn triple(&self) -> (f64, f64, f64) {
        (self.alpha, self.beta, self.gamma)
    }
}

fn sorted(depths: &[usize]) -> Vec<usize> {
    let mut d = depths.to_vec();
    d.sort_unstable();
    d
}

pub fn uniform_eta(depths: &[usize]) -> BTreeMap<usize, f64> {
    let n = depths.len() as f64;
    depths.iter().map(|&d| (d, 1.0 / n)).collect()
}

/// Base loss values, before mixing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_ae: f64,
    pub l_ba_final: f64,
    pub l_ba_shallow: BTreeMap<usize, f64>,
    pub l_gc_final: f64,
    pub l_gc_shallow: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ae: f64,
    pub l_ba_final: f64,
    pub l_ba_shallow: BTreeMap<usize, f64>,
    pub l_gc_final: f64,
    pub l_gc_shallow: BTreeMap<usize, f64>,
    pub l_ba: f64,
    pub l_gc: f64,
    pub l_dst: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ae, self.l_ba_final, self.l_gc_final, self.l_ba, self.l_gc, self.l_dst, self.l_total]
            .iter()
            .chain(self.l_ba_shallow.values())
            .chain(self.l_gc_shallow.values())
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_ae += b.l_ae / n;
            out.l_ba_final += b.l_ba_final / n;
            out.l_gc_final += b.l_gc_final / n;
            out.l_ba += b.l_ba / n;
            out.l_gc += b.l_gc / n;
            out.l_dst += b.l_dst / n;
            out.l_total += b.l_total / n;
            for (d, v) in &b.l_ba_shallow {
                *out.l_ba_shallow.entry(*d).or_default() += v / n;
            }
            for (d, v) in &b.l_gc_shallow {
                *out.l_gc_shallow.entry(*d).or_default() += v / n;
            }
        }
        out
    }
}

/// Mean squared error over every voxel of the batch.
pub fn reconstruction_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("reconstruction {:?} vs input {:?}", x_hat.shape(), x.shape())));
    }
    if x.is_empty() {
        return Err(Error::Parameter("empty reconstruction batch".into()));
    }
    let s: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / x.len() as f64)
}

fn check_pair(y: &[f64], pred: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    if y.len() != pred.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), pred.len())));
    }
    Ok(())
}

/// Mean absolute error in years.
pub fn age_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn sex_loss(y: &[f64], p_hat: &[f64]) -> Result<f64> {
    check_pair(y, p_hat)?;
    let s: f64 = y
        .iter()
        .zip(p_hat)
        .map(|(&t, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / y.len() as f64)
}

/// `gamma * final + (1 - gamma) * sum_d eta_d * shallow_d`.
pub fn ds_combine(final_loss: f64, shallow: &BTreeMap<usize, f64>, gamma: f64, eta: &BTreeMap<usize, f64>) -> Result<f64> {
    if !shallow.keys().eq(eta.keys()) {
        return Err(Error::Parameter("shallow loss depths do not match eta depths".into()));
    }
    let deep: f64 = shallow.iter().map(|(d, l)| eta[d] * l).sum();
    Ok(gamma * final_loss + (1.0 - gamma) * deep)
}

/// Weights after the variant's renormalisation: Baseline is the final age
/// loss alone, AE blends reconstruction with it, MTL-AE drops the shallow
/// terms and DS-AE the sex terms.
pub fn effective_weights(variant: Variant, w: &LossWeights) -> (f64, f64, f64) {
    let (a, b, g) = w.triple();
    match variant {
        Variant::Baseline => (0.0, 1.0, 1.0),
        Variant::Ae => (a, 1.0, 1.0),
        Variant::MtlAe => (a, b, 1.0),
        Variant::DsAe => (a, 1.0, g),
        Variant::DsmtAe => (a, b, g),
    }
}

/// Mixes base losses into the full breakdown.
pub fn total_loss(c: &LossComponents, w: &LossWeights, variant: Variant) -> Result<LossBreakdown> {
    w.validate()?;
    let (a, b, g) = effective_weights(variant, w);
    let empty = BTreeMap::new();
    let (ba_shallow, gc_shallow) = if variant.has_shallow_heads() {
        if c.l_ba_shallow.is_empty() {
            return Err(Error::Parameter(format!("{variant} needs shallow age losses")));
        }
        (&c.l_ba_shallow, &c.l_gc_shallow)
    } else {
        (&empty, &empty)
    };
    let depths: Vec<usize> = ba_shallow.keys().copied().collect();
    let eta = w.eta_for(&depths)?;
    let l_ba = ds_combine(c.l_ba_final, ba_shallow, g, &eta)?;
    let l_gc = if variant.has_sex_heads() { ds_combine(c.l_gc_final, gc_shallow, g, &eta)? } else { 0.0 };
    let l_dst = b * l_ba + (1.0 - b) * l_gc;
    let l_total = a * c.l_ae + (1.0 - a) * l_dst;
    Ok(LossBreakdown {
        l_ae: c.l_ae,
        l_ba_final: c.l_ba_final,
        l_ba_shallow: c.l_ba_shallow.clone(),
        l_gc_final: c.l_gc_final,
        l_gc_shallow: c.l_gc_shallow.clone(),
        l_ba,
        l_gc,
        l_dst,
        l_total,
    })
}

/// Labels of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub input: &'a Tensor,
    pub ages: &'a [f64],
    pub sexes: &'a [f64],
}

/// Evaluates the objective on one forward pass and its gradient with
/// respect to every model output. `depths` are the shallow head depths in
/// output order.
pub fn compute_loss(
    out: &ModelOutputs,
    t: Targets<'_>,
    depths: &[usize],
    w: &LossWeights,
    variant: Variant,
) -> Result<(LossBreakdown, OutputGrads)> {
    let n_shallow = if variant.has_shallow_heads() { depths.len() } else { 0 };
    if out.age_preds.len() != n_shallow + 1 {
        return Err(Error::Shape(format!("expected {} age heads, got {}", n_shallow + 1, out.age_preds.len())));
    }
    let n_sex = if variant.has_sex_heads() { n_shallow + 1 } else { 0 };
    if out.sex_probs.len() != n_sex {
        return Err(Error::Shape(format!("expected {n_sex} sex heads, got {}", out.sex_probs.len())));
    }
    if out.reconstruction.is_some() != variant.has_decoder() {
        return Err(Error::Shape("reconstruction presence does not match the variant".into()));
    }
    let shallow_depths = &depths[..n_shallow];

    let mut c = LossComponents::default();
    if let Some(r) = &out.reconstruction {
        c.l_ae = reconstruction_loss(t.input, r)?;
    }
    c.l_ba_final = age_loss(t.ages, &out.age_preds[0])?;
    for (i, &d) in shallow_depths.iter().enumerate() {
        c.l_ba_shallow.insert(d, age_loss(t.ages, &out.age_preds[i + 1])?);
    }
    if n_sex > 0 {
        c.l_gc_final = sex_loss(t.sexes, &out.sex_probs[0])?;
        for (i, &d) in shallow_depths.iter().enumerate() {
            c.l_gc_shallow.insert(d, sex_loss(t.sexes, &out.sex_probs[i + 1])?);
        }
    }
    let breakdown = total_loss(&c, w, variant)?;

    let eta = w.eta_for(shallow_depths)?;
    let (a, b, g) = effective_weights(variant, w);
    let head_weight = |i: usize| if i == 0 { g } else { (1.0 - g) * eta[&shallow_depths[i - 1]] };

    let reconstruction = out.reconstruction.as_ref().map(|r| {
        let k = a * 2.0 / r.len() as f64;
        Tensor::from_vec(r.shape(), r.data().iter().zip(t.input.data()).map(|(p, x)| k * (p - x)).collect())
    });
    let age = out
        .age_preds
        .iter()
        .enumerate()
        .map(|(i, preds)| {
            let k = (1.0 - a) * b * head_weight(i) / preds.len() as f64;
            preds.iter().zip(t.ages).map(|(p, y)| k * sign(p - y)).collect()
        })
        .collect();
    let sex = out
        .sex_probs
        .iter()
        .enumerate()
        .map(|(i, probs)| {
            let k = (1.0 - a) * (1.0 - b) * head_weight(i) / probs.len() as f64;
            probs.iter().zip(t.sexes).map(|(&p, &y)| k * bce_grad(y, p)).collect()
        })
        .collect();
    Ok((breakdown, OutputGrads { reconstruction, age, sex }))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// d/dp of the clamped cross-entropy; zero where the clamp is active.
fn bce_grad(y: f64, p: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}
