//! Metrics, stratified reports, prediction dumps, ablation tables and plots.

mod ablation;
mod plots;

pub use ablation::{run_ablation, AblationRow, AblationTable, TABLE_COLUMNS};
pub use plots::{bracket_bars_svg, emit_bracket_bars, emit_plots, scatter_svg, BracketSeries, PlotFiles, BAND_Z};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_predict, search_weights_on_grid, EnsembleSearch, EnsembleWeights, RHO_STEPS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::volume::{batch_tensor, Sex, VolumeSample};

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Parameter("metrics need at least one sample".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Population standard deviation of the signed residuals `y - y_hat`.
pub fn error_sd(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    let n = y.len() as f64;
    let res: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let mean = res.iter().sum::<f64>() / n;
    Ok((res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok((y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Coefficient of determination about the mean of `y`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::DegenerateTarget("R² needs at least two samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::DegenerateTarget("targets have zero variance".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check(x, y)?;
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateTarget("constant input has no rank correlation".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
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

/// Metrics for one group. Empty groups have `n = 0` and no values; R² is
/// absent when it is undefined for the group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: Option<f64>,
    pub sd: Option<f64>,
    pub rmse: Option<f64>,
    pub r2: Option<f64>,
}

impl MetricsReport {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        if y.len() != y_hat.len() {
            return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
        }
        if y.is_empty() {
            return Ok(MetricsReport { n: 0, mae: None, sd: None, rmse: None, r2: None });
        }
        Ok(MetricsReport {
            n: y.len(),
            mae: Some(mae(y, y_hat)?),
            sd: Some(error_sd(y, y_hat)?),
            rmse: Some(rmse(y, y_hat)?),
            r2: r2(y, y_hat).ok(),
        })
    }
}

/// Age brackets `<= e0, (e0, e1], ..., > e_last`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeBrackets {
    pub edges: Vec<f64>,
}

impl Default for AgeBrackets {
    fn default() -> Self {
        AgeBrackets { edges: vec![25.0, 35.0, 45.0, 55.0, 65.0, 75.0] }
    }
}

impl AgeBrackets {
    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() || self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bracket edges must be non-empty and strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, age: f64) -> usize {
        self.edges.iter().take_while(|&&e| age > e).count()
    }

    pub fn labels(&self) -> Vec<String> {
        let e = &self.edges;
        let mut out = vec![format!("<={}", e[0])];
        for w in e.windows(2) {
            out.push(format!("{}-{}", w[0] + 1.0, w[1]));
        }
        out.push(format!(">{}", e[e.len() - 1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub overall: MetricsReport,
    pub by_sex: BTreeMap<Sex, MetricsReport>,
    /// In bracket order.
    pub by_age_bracket: Vec<(String, MetricsReport)>,
}

impl StratifiedReport {
    pub fn sex(&self, sex: Sex) -> &MetricsReport {
        &self.by_sex[&sex]
    }
}

/// Groups by sex and by the bracket of the true age.
pub fn stratify(y: &[f64], y_hat: &[f64], sexes: &[Sex], brackets: &AgeBrackets) -> Result<StratifiedReport> {
    if y.len() != y_hat.len() || y.len() != sexes.len() {
        return Err(Error::Shape("stratification inputs have different lengths".into()));
    }
    let subset = |keep: &dyn Fn(usize) -> bool| -> Result<MetricsReport> {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| keep(i)).collect();
        let a: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| y_hat[i]).collect();
        MetricsReport::compute(&a, &b)
    };
    let mut by_sex = BTreeMap::new();
    for sex in [Sex::Female, Sex::Male] {
        by_sex.insert(sex, subset(&|i| sexes[i] == sex)?);
    }
    let by_age_bracket = brackets
        .labels()
        .into_iter()
        .enumerate()
        .map(|(k, label)| Ok((label, subset(&|i| brackets.index(y[i]) == k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StratifiedReport { overall: MetricsReport::compute(y, y_hat)?, by_sex, by_age_bracket })
}

/// Head-major predictions: `age[0]` is the final head, then one vector per
/// shallow depth; `sex` likewise (empty for variants without sex heads).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPredictions {
    pub age: Vec<Vec<f64>>,
    pub sex: Vec<Vec<f64>>,
}

/// Evaluation-mode predictions over `samples` in batches of `batch`.
pub fn predict_heads(model: &Model, samples: &[&VolumeSample], batch: usize) -> Result<HeadPredictions> {
    let mut age = vec![Vec::with_capacity(samples.len()); model.n_age_heads()];
    let mut sex = vec![Vec::with_capacity(samples.len()); model.n_sex_heads()];
    for chunk in samples.chunks(batch.max(1)) {
        let out = model.forward(&batch_tensor(chunk)?)?;
        for (acc, p) in age.iter_mut().zip(out.age_preds) {
            acc.extend(p);
        }
        for (acc, p) in sex.iter_mut().zip(out.sex_probs) {
            acc.extend(p);
        }
    }
    Ok(HeadPredictions { age, sex })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub y_true: f64,
    pub y_pred_final: f64,
    pub y_pred_d: BTreeMap<usize, f64>,
    pub y_pred_ensemble: f64,
    pub sex: Sex,
    pub sex_prob: Option<f64>,
}

/// Per-subject predictions with the ensemble applied.
pub fn prediction_rows(model: &Model, samples: &[&VolumeSample], batch: usize, ensemble: &EnsembleWeights) -> Result<Vec<PredictionRow>> {
    let preds = predict_heads(model, samples, batch)?;
    let depths = model.depths();
    let ens = if ensemble.omega.is_empty() { preds.age[0].clone() } else { ensemble_predict(&preds.age, &depths, ensemble)? };
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| PredictionRow {
            subject_id: s.subject_id.clone(),
            y_true: s.age,
            y_pred_final: preds.age[0][i],
            y_pred_d: depths.iter().enumerate().map(|(h, &d)| (d, preds.age[h + 1][i])).collect(),
            y_pred_ensemble: ens[i],
            sex: s.sex,
            sex_prob: preds.sex.first().map(|p| p[i]),
        })
        .collect())
}

/// Writes `subject_id, y_true, y_pred_final, y_pred_d<k>..., y_pred_ensemble, sex[, p_male]`.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let depths: Vec<usize> = rows.first().map(|r| r.y_pred_d.keys().copied().collect()).unwrap_or_default();
    let with_prob = rows.first().is_some_and(|r| r.sex_prob.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string(), "y_true".into(), "y_pred_final".into()];
    header.extend(depths.iter().map(|d| format!("y_pred_d{d}")));
    header.extend(["y_pred_ensemble".to_string(), "sex".into()]);
    if with_prob {
        header.push("p_male".into());
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.subject_id.clone(), r.y_true.to_string(), r.y_pred_final.to_string()];
        rec.extend(depths.iter().map(|d| r.y_pred_d[d].to_string()));
        rec.extend([r.y_pred_ensemble.to_string(), r.sex.code().to_string()]);
        if with_prob {
            rec.push(r.sex_prob.map(|p| p.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::format(path, format!("missing column {name}")));
    let (c_id, c_true, c_final, c_ens, c_sex) =
        (need("subject_id")?, need("y_true")?, need("y_pred_final")?, need("y_pred_ensemble")?, need("sex")?);
    let c_prob = col("p_male");
    let depth_cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("y_pred_d").and_then(|d| d.parse().ok()).map(|d| (d, i)))
        .collect();
    let num = |rec: &csv::StringRecord, i: usize| -> Result<f64> {
        rec[i].trim().parse::<f64>().map_err(|_| Error::format(path, format!("bad number {:?}", &rec[i])))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(PredictionRow {
            subject_id: rec[c_id].to_string(),
            y_true: num(&rec, c_true)?,
            y_pred_final: num(&rec, c_final)?,
            y_pred_d: depth_cols.iter().map(|&(d, i)| Ok((d, num(&rec, i)?))).collect::<Result<_>>()?,
            y_pred_ensemble: num(&rec, c_ens)?,
            sex: rec[c_sex].parse()?,
            sex_prob: c_prob.filter(|&i| !rec[i].is_empty()).map(|i| num(&rec, i)).transpose()?,
        })
    }
    Ok(rows)
}

/// Everything produced by evaluating one model on one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: crate::model::Variant,
    /// Present for variants with shallow heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSearch>,
    pub report: StratifiedReport,
    pub final_head: MetricsReport,
    pub sex_accuracy: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<PredictionRow>,
}

/// Fits the ensemble (when the variant has shallow heads) and reports
/// metrics of the variant's prediction: the ensemble for deeply supervised
/// variants, the final head otherwise.
pub fn evaluate_model(model: &Model, samples: &[&VolumeSample], batch: usize, brackets: &AgeBrackets) -> Result<EvalResult> {
    evaluate_model_with(model, samples, batch, brackets, RHO_STEPS)
}

/// [`evaluate_model`] with a custom resolution of the `rho` grid.
pub fn evaluate_model_with(model: &Model, samples: &[&VolumeSample], batch: usize, brackets: &AgeBrackets, rho_steps: usize) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Parameter("nothing to evaluate".into()));
    }
    let preds = predict_heads(model, samples, batch)?;
    let y: Vec<f64> = samples.iter().map(|s| s.age).collect();
    let ensemble = if model.variant().has_shallow_heads() {
        Some(search_weights_on_grid(&y, &preds.age, &model.depths(), rho_steps)?)
    } else {
        None
    };
    let weights = ensemble.as_ref().map_or_else(EnsembleWeights::final_only, |e| e.weights.clone());
    let rows = prediction_rows(model, samples, batch, &weights)?;
    let y_hat: Vec<f64> = rows.iter().map(|r| r.y_pred_ensemble).collect();
    let sexes: Vec<Sex> = rows.iter().map(|r| r.sex).collect();
    let sex_accuracy = preds.sex.first().map(|p| {
        let hits = p.iter().zip(&sexes).filter(|(&p, &s)| (p >= 0.5) == (s == Sex::Male)).count();
        hits as f64 / p.len() as f64
    });
    Ok(EvalResult {
        variant: model.variant(),
        ensemble,
        report: stratify(&y, &y_hat, &sexes, brackets)?,
        final_head: MetricsReport::compute(&y, &preds.age[0])?,
        sex_accuracy,
        rows,
    })
}
