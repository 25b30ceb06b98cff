//! Self-ensemble of the final and shallow age heads.
//!
//! `y = rho * y_final + (1 - rho) * sum_d omega_d * y_d`, with `omega`
//! proportional to the inverse validation MAE of each shallow head and
//! `rho` picked from a 21-point grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::mae;
use crate::model::Model;
use crate::volume::VolumeSample;

/// Grid resolution for `rho`.
pub const RHO_STEPS: usize = 20;
/// MAE differences below this count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub rho: f64,
    pub omega: BTreeMap<usize, f64>,
}

impl EnsembleWeights {
    /// Final head only.
    pub fn final_only() -> Self {
        EnsembleWeights { rho: 1.0, omega: BTreeMap::new() }
    }

    pub fn new(rho: f64, omega: BTreeMap<usize, f64>) -> Result<Self> {
        let w = EnsembleWeights { rho, omega };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho = {} is outside [0, 1]", self.rho)));
        }
        if self.omega.values().any(|&o| !o.is_finite() || o < 0.0) {
            return Err(Error::Parameter("omega weights must be finite and non-negative".into()));
        }
        if self.omega.is_empty() {
            if self.rho != 1.0 {
                return Err(Error::Parameter("rho must be 1 without shallow heads".into()));
            }
        } else if (self.omega.values().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("omega weights must sum to 1".into()));
        }
        Ok(())
    }

    /// Combines one sample's predictions; `shallow` pairs depth with
    /// prediction and must cover exactly the depths of `omega`.
    pub fn combine(&self, final_pred: f64, shallow: &[(usize, f64)]) -> Result<f64> {
        if shallow.len() != self.omega.len() {
            return Err(Error::Parameter(format!("{} shallow predictions for {} ensemble depths", shallow.len(), self.omega.len())));
        }
        let mut deep = 0.0;
        for (d, y) in shallow {
            let w = self.omega.get(d).ok_or_else(|| Error::Parameter(format!("no ensemble weight for depth {d}")))?;
            deep += w * y;
        }
        if self.omega.is_empty() {
            return Ok(final_pred);
        }
        Ok(self.rho * final_pred + (1.0 - self.rho) * deep)
    }
}

/// Applies the ensemble to head-major predictions (`age_preds[0]` final,
/// then one vector per entry of `depths`). Returns one value per sample.
pub fn ensemble_predict(age_preds: &[Vec<f64>], depths: &[usize], w: &EnsembleWeights) -> Result<Vec<f64>> {
    if age_preds.len() != depths.len() + 1 {
        return Err(Error::Parameter(format!("{} head outputs for {} shallow depths", age_preds.len(), depths.len())));
    }
    let n = age_preds[0].len();
    if age_preds.iter().any(|p| p.len() != n) {
        return Err(Error::Shape("head outputs have different lengths".into()));
    }
    (0..n)
        .map(|i| {
            let shallow: Vec<(usize, f64)> = depths.iter().enumerate().map(|(h, &d)| (d, age_preds[h + 1][i])).collect();
            w.combine(age_preds[0][i], &shallow)
        })
        .collect()
}

/// Inverse-MAE weights; heads with zero MAE share all the mass.
pub fn inverse_mae_weights(maes: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let zeros: Vec<usize> = maes.iter().filter(|(_, &m)| m == 0.0).map(|(&d, _)| d).collect();
    if !zeros.is_empty() {
        let w = 1.0 / zeros.len() as f64;
        return maes.keys().map(|&d| (d, if zeros.contains(&d) { w } else { 0.0 })).collect();
    }
    let total: f64 = maes.values().map(|m| 1.0 / m).sum();
    maes.iter().map(|(&d, &m)| (d, (1.0 / m) / total)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSearch {
    pub weights: EnsembleWeights,
    pub ensemble_mae: f64,
    pub final_mae: f64,
    pub head_mae: BTreeMap<usize, f64>,
    /// `(rho, mae)` for every grid point.
    pub grid: Vec<(f64, f64)>,
}

/// Fits ensemble weights on validation predictions (head-major).
pub fn search_weights_from_predictions(y: &[f64], age_preds: &[Vec<f64>], depths: &[usize]) -> Result<EnsembleSearch> {
    search_weights_on_grid(y, age_preds, depths, RHO_STEPS)
}

/// As [`search_weights_from_predictions`] with `rho` on `steps + 1`
/// evenly spaced points of `[0, 1]`.
pub fn search_weights_on_grid(y: &[f64], age_preds: &[Vec<f64>], depths: &[usize], steps: usize) -> Result<EnsembleSearch> {
    if steps == 0 {
        return Err(Error::Parameter("rho grid needs at least one step".into()));
    }
    if y.is_empty() {
        return Err(Error::Parameter("empty validation set".into()));
    }
    if age_preds.len() != depths.len() + 1 {
        return Err(Error::Parameter(format!("{} head outputs for {} shallow depths", age_preds.len(), depths.len())));
    }
    let final_mae = mae(y, &age_preds[0])?;
    let mut head_mae = BTreeMap::new();
    for (h, &d) in depths.iter().enumerate() {
        head_mae.insert(d, mae(y, &age_preds[h + 1])?);
    }
    if depths.is_empty() {
        return Ok(EnsembleSearch {
            weights: EnsembleWeights::final_only(),
            ensemble_mae: final_mae,
            final_mae,
            head_mae,
            grid: vec![(1.0, final_mae)],
        });
    }
    let omega = inverse_mae_weights(&head_mae);
    let mut grid = Vec::with_capacity(steps + 1);
    let mut best: Option<(f64, f64)> = None;
    for i in (0..=steps).rev() {
        let rho = i as f64 / steps as f64;
        let w = EnsembleWeights { rho, omega: omega.clone() };
        let err = mae(y, &ensemble_predict(age_preds, depths, &w)?)?;
        grid.push((rho, err));
        if best.is_none_or(|(_, b)| err < b - TIE_TOLERANCE) {
            best = Some((rho, err));
        }
    }
    grid.reverse();
    let (rho, ensemble_mae) = best.expect("grid is non-empty");
    Ok(EnsembleSearch { weights: EnsembleWeights { rho, omega }, ensemble_mae, final_mae, head_mae, grid })
}

/// Runs the model over `val` and fits ensemble weights to its age heads.
pub fn search_weights(model: &Model, val: &[&VolumeSample], batch: usize) -> Result<EnsembleSearch> {
    if val.is_empty() {
        return Err(Error::Parameter("empty validation set".into()));
    }
    let preds = crate::evaluation::predict_heads(model, val, batch)?;
    let y: Vec<f64> = val.iter().map(|s| s.age).collect();
    search_weights_from_predictions(&y, &preds.age, &model.depths())
}
