use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, AgeBrackets, EvalResult, MetricsReport};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Variant};
use crate::trainer::{train, TrainConfig, TrainObserver, TrainOutcome};
use crate::volume::{Sex, VolumeSample};

pub const TABLE_COLUMNS: [&str; 9] = [
    "Overall MAE±SD",
    "Overall RMSE",
    "Overall R²",
    "Male MAE±SD",
    "Male RMSE",
    "Male R²",
    "Female MAE±SD",
    "Female RMSE",
    "Female R²",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: Option<EvalResult>,
    pub error: Option<String>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    /// Per-epoch mean training loss.
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"))
}

fn metric_cells(m: &MetricsReport) -> [String; 3] {
    let mae_sd = match (m.mae, m.sd) {
        (Some(a), Some(s)) => format!("{a:.2} ± {s:.2}"),
        _ => "n/a".into(),
    };
    [mae_sd, fmt_opt(m.rmse), fmt_opt(m.r2)]
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Overall MAE of a variant's reported prediction.
    pub fn overall_mae(&self, v: Variant) -> Option<f64> {
        self.row(v)?.result.as_ref()?.report.overall.mae
    }

    /// Nine cells per row: Overall, Male and Female MAE±SD, RMSE, R².
    pub fn cells(&self) -> Vec<(String, Vec<String>)> {
        self.rows
            .iter()
            .map(|r| {
                let cells = match &r.result {
                    Some(res) => {
                        let mut c = metric_cells(&res.report.overall).to_vec();
                        c.extend(metric_cells(res.report.sex(Sex::Male)));
                        c.extend(metric_cells(res.report.sex(Sex::Female)));
                        c
                    }
                    None => vec![format!("error: {}", r.error.as_deref().unwrap_or("unknown")); 9],
                };
                (r.variant.label().to_string(), cells)
            })
            .collect()
    }

    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let rows = self.cells();
        let mut widths: Vec<usize> = std::iter::once("Model").chain(TABLE_COLUMNS).map(|c| c.chars().count()).collect();
        for (label, cells) in &rows {
            widths[0] = widths[0].max(label.chars().count());
            for (w, c) in widths[1..].iter_mut().zip(cells) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |items: Vec<&str>| -> String {
            let padded: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count()))).collect();
            format!("| {} |\n", padded.join(" | "))
        };
        let mut out = line(std::iter::once("Model").chain(TABLE_COLUMNS).collect());
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        for (label, cells) in &rows {
            out.push_str(&line(std::iter::once(label.as_str()).chain(cells.iter().map(String::as_str)).collect()));
        }
        out
    }

    /// Machine-readable numbers, one row per variant.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,group,n,mae,sd,rmse,r2,error\n");
        let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            match &r.result {
                Some(res) => {
                    let groups = [("overall", &res.report.overall), ("male", res.report.sex(Sex::Male)), ("female", res.report.sex(Sex::Female))];
                    for (g, m) in groups {
                        let _ = writeln!(out, "{},{g},{},{},{},{},{},", r.variant.key(), m.n, num(m.mae), num(m.sd), num(m.rmse), num(m.r2));
                    }
                }
                None => {
                    let _ = writeln!(out, "{},overall,0,,,,,{:?}", r.variant.key(), r.error.as_deref().unwrap_or(""));
                }
            }
        }
        out
    }
}

/// Trains and evaluates each variant on the same split with the same seed
/// and protocol. A variant that fails is reported as an error row.
/// `observer` supplies a per-variant observer (logging, checkpoints).
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_set: &[&VolumeSample],
    val: &[&VolumeSample],
    cfg: &TrainConfig,
    variants: &[Variant],
    brackets: &AgeBrackets,
    observer: &mut dyn FnMut(Variant) -> Box<dyn TrainObserver>,
) -> AblationTable {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        log::info!("ablation: training {variant}");
        let mut run = || -> Result<(TrainOutcome, EvalResult)> {
            let model = Model::new(&model_cfg.with_variant(variant), cfg.seed)?;
            let mut obs = observer(variant);
            let out = train(model, train_set, val, cfg, obs.as_mut())?;
            let res = evaluate_model(&out.model, val, cfg.batch_val, brackets)?;
            Ok((out, res))
        };
        rows.push(match run() {
            Ok((out, res)) => AblationRow {
                variant,
                result: Some(res),
                error: None,
                epochs_run: out.state.epoch,
                best_epoch: out.state.best_epoch,
                train_loss: out.state.history.iter().map(|h| h.train.l_total).collect(),
            },
            Err(e) => {
                log::warn!("ablation: {variant} failed: {e}");
                AblationRow { variant, result: None, error: Some(e.to_string()), epochs_run: 0, best_epoch: None, train_loss: Vec::new() }
            }
        });
    }
    AblationTable { rows }
}
