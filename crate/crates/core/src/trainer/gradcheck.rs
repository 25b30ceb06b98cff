use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{compute_loss, LossWeights, Targets};
use crate::model::Model;
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub n_params: usize,
    pub step: f64,
    pub seed: u64,
    /// Lower bound of the relative-error denominator, so that gradients that
    /// are zero up to round-off do not blow up the ratio.
    pub denom_floor: f64,
    /// Negative-control hook: scales every analytic gradient by this factor.
    pub corrupt_factor: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { n_params: 20, step: 1e-5, seed: 0, denom_floor: 1e-7, corrupt_factor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_sampled: usize,
    pub loss: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Compares the analytic gradient of the total loss with central finite
/// differences at randomly sampled weights. The model runs with batch
/// statistics and without dropout, so the loss is a smooth deterministic
/// function of the weights.
pub fn gradient_check(model: &Model, x: &Tensor, ages: &[f64], sexes: &[f64], w: &LossWeights, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let depths = model.depths();
    let variant = model.variant();
    let targets = Targets { input: x, ages, sexes };
    let loss_of = |m: &Model| -> Result<f64> {
        let (out, _) = m.forward_train(x, None)?;
        Ok(compute_loss(&out, targets, &depths, w, variant)?.0.l_total)
    };

    let (out, tape) = model.forward_train(x, None)?;
    let (breakdown, out_grads) = compute_loss(&out, targets, &depths, w, variant)?;
    let grads = model.backward(&tape, &out_grads)?;

    let mut r = rng::derived(cfg.seed, 0x6C, 0);
    let n_tensors = model.params().len();
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(cfg.n_params);
    for _ in 0..cfg.n_params {
        let t = r.random_range(0..n_tensors);
        let (id, name, len) = {
            let p = model.params()[t];
            (p.id, p.name.clone(), p.value.len())
        };
        let index = r.random_range(0..len);
        let mut analytic = grads.get(id).map_or(0.0, |g| g.data()[index]);
        if let Some(f) = cfg.corrupt_factor {
            analytic *= f;
        }
        let original = probe.params()[t].value.data()[index];
        probe.params_mut()[t].value.data_mut()[index] = original + cfg.step;
        let plus = loss_of(&probe)?;
        probe.params_mut()[t].value.data_mut()[index] = original - cfg.step;
        let minus = loss_of(&probe)?;
        probe.params_mut()[t].value.data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
        entries.push(GradCheckEntry { param: name, index, analytic, numeric, rel_error: (analytic - numeric).abs() / denom });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, n_sampled: entries.len(), loss: breakdown.l_total, entries })
}
