use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{train, NoopObserver, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Model, ModelConfig};
use crate::volume::VolumeSample;

/// Values per axis for `(alpha, beta, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl GridSpec {
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.alpha.len() * self.beta.len() * self.gamma.len());
        for &a in &self.alpha {
            for &b in &self.beta {
                for &g in &self.gamma {
                    out.push((a, b, g));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.beta.is_empty() || self.gamma.is_empty() {
            return Err(Error::Parameter("grid axes must be non-empty".into()));
        }
        if self.alpha.iter().chain(&self.beta).chain(&self.gamma).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("grid values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub coarse_best: GridPoint,
    pub coarse: Vec<GridPoint>,
    pub fine: Vec<GridPoint>,
    pub fine_grid: GridSpec,
}

/// Refinement values for one axis: `fine_points` evenly spaced values over
/// `center +- step`, where `step` is the smallest gap between coarse values,
/// clamped to [0, 1] and deduplicated.
pub fn fine_axis(coarse: &[f64], center: f64, fine_points: usize) -> Vec<f64> {
    let mut sorted = coarse.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let step = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if !step.is_finite() || fine_points <= 1 {
        return vec![center];
    }
    let mut out: Vec<f64> = (0..fine_points)
        .map(|i| {
            let v = center - step + 2.0 * step * i as f64 / (fine_points - 1) as f64;
            (v.clamp(0.0, 1.0) * 1e12).round() / 1e12
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn key(p: (f64, f64, f64)) -> (u64, u64, u64) {
    (p.0.to_bits(), p.1.to_bits(), p.2.to_bits())
}

/// Lower MAE wins; equal MAE goes to the lexicographically smallest point.
fn better(a: &GridPoint, b: &GridPoint) -> bool {
    a.val_mae < b.val_mae || (a.val_mae == b.val_mae && (a.alpha, a.beta, a.gamma) < (b.alpha, b.beta, b.gamma))
}

/// Coarse-to-fine search minimising `objective(alpha, beta, gamma)`.
pub fn grid_search(coarse: &GridSpec, fine_points: usize, mut objective: impl FnMut(f64, f64, f64) -> Result<f64>) -> Result<GridResult> {
    coarse.validate()?;
    let mut seen: BTreeMap<(u64, u64, u64), f64> = BTreeMap::new();
    let mut eval = |p: (f64, f64, f64)| -> Result<GridPoint> {
        let val_mae = match seen.get(&key(p)) {
            Some(&m) => m,
            None => {
                let m = objective(p.0, p.1, p.2)?;
                seen.insert(key(p), m);
                m
            }
        };
        Ok(GridPoint { alpha: p.0, beta: p.1, gamma: p.2, val_mae })
    };
    let coarse_pts = coarse.points().into_iter().map(&mut eval).collect::<Result<Vec<_>>>()?;
    let coarse_best = pick(&coarse_pts);
    let fine_grid = GridSpec {
        alpha: fine_axis(&coarse.alpha, coarse_best.alpha, fine_points),
        beta: fine_axis(&coarse.beta, coarse_best.beta, fine_points),
        gamma: fine_axis(&coarse.gamma, coarse_best.gamma, fine_points),
    };
    let fine = fine_grid.points().into_iter().map(&mut eval).collect::<Result<Vec<_>>>()?;
    let best = pick(&fine);
    let best = if better(&coarse_best, &best) { coarse_best.clone() } else { best };
    Ok(GridResult { best, coarse_best, coarse: coarse_pts, fine, fine_grid })
}

fn pick(points: &[GridPoint]) -> GridPoint {
    let mut best = points[0].clone();
    for p in &points[1..] {
        if better(p, &best) {
            best = p.clone();
        }
    }
    best
}

/// Grid search where each point is a short training run scored by its best
/// final-head validation MAE.
pub fn grid_search_training(model_cfg: &ModelConfig, train_set: &[&VolumeSample], val: &[&VolumeSample], base: &TrainConfig) -> Result<GridResult> {
    let coarse = GridSpec { alpha: base.grid.alpha.clone(), beta: base.grid.beta.clone(), gamma: base.grid.gamma.clone() };
    grid_search(&coarse, base.grid.fine_points, |alpha, beta, gamma| {
        let cfg = TrainConfig {
            epochs: base.grid.epochs_per_point.max(1),
            patience: base.grid.epochs_per_point.max(1),
            loss_weights: LossWeights { alpha, beta, gamma, ..base.loss_weights.clone() },
            ..base.clone()
        };
        let model = Model::new(model_cfg, base.seed)?;
        let out = train(model, train_set, val, &cfg, &mut NoopObserver)?;
        log::info!("grid point ({alpha}, {beta}, {gamma}) -> {:?}", out.state.best_val_mae);
        Ok(out.state.best_val_mae.unwrap_or(f64::INFINITY))
    })
}
