//! One function per subcommand. Each loads everything it needs (dataset,
//! checkpoint) and checks it before creating the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dsmt_core::ensemble::{search_weights_on_grid, EnsembleSearch, EnsembleWeights};
use dsmt_core::evaluation::{
    emit_bracket_bars, emit_plots, evaluate_model_with, predict_heads, prediction_rows, run_ablation, write_predictions, BracketSeries,
    EvalResult, MetricsReport,
};
use dsmt_core::losses::effective_weights;
use dsmt_core::model::{Checkpoint, Model, ModelConfig, Variant};
use dsmt_core::trainer::{age_scaling_for, gradient_check, grid_search_training, GradCheckConfig, TrainObserver, Trainer};
use dsmt_core::volume::{batch_tensor, synthesize_dataset, write_label_table, write_manifest, write_phantom, LabelRow, ManifestEntry, Sex};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{code, CliError};
use crate::run::{check_writable, create_output, output_dir, write_json, Dataset, RunLogger};
use crate::Cli;

/// Relative-error thresholds of the gradient check.
pub const GRADCHECK_TOL: f64 = 1e-3;
pub const GRADCHECK_TOL_RECONSTRUCTION: f64 = 1e-4;

pub fn synth(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.data.manifest.is_some() {
        return Err(CliError::config("synth generates phantoms; remove data.manifest"));
    }
    let dir = cli.out.clone().or_else(|| cfg.data.dir.clone()).ok_or_else(|| CliError::config("synth needs --out or data.dir"))?;
    check_writable(&dir, cli.force)?;
    let seed = cfg.seed();
    let samples = synthesize_dataset(cfg.data.n_phantoms, &cfg.data.phantom, seed)?;
    let split = dsmt_core::volume::make_split(&samples, cfg.data.val_fraction, &cfg.data.age_bins, seed)?;
    let val: std::collections::HashSet<&str> = split.val_ids.iter().map(String::as_str).collect();

    create_output(&dir, cfg)?;
    let mut manifest = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in &samples {
        let file = format!("{}.dsmt", s.subject_id);
        write_phantom(&dir.join(&file), s)?;
        let part = if val.contains(s.subject_id.as_str()) { "val" } else { "train" };
        manifest.push(ManifestEntry { path: file, subject_id: s.subject_id.clone(), split: Some(part.into()) });
        labels.push(LabelRow {
            subject_id: s.subject_id.clone(),
            age: s.age,
            sex: s.sex.to_string(),
            site: s.site_id.clone(),
            split: Some(part.into()),
        });
    }
    write_manifest(&dir.join("manifest.csv"), &manifest)?;
    write_label_table(&dir.join("labels.csv"), &labels)?;
    println!("synth: wrote {} phantoms ({} train / {} val) to {}", samples.len(), split.train_ids.len(), split.val_ids.len(), dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    variant: Variant,
    config_hash: String,
    resumed_from_epoch: Option<usize>,
    epochs_run: usize,
    best_epoch: Option<usize>,
    best_val_mae: Option<f64>,
    stopped_early: bool,
    loss_weights: dsmt_core::losses::LossWeights,
    ensemble: Option<EnsembleSearch>,
}

pub fn train(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let resume = cli.checkpoint.as_deref().map(load_resume).transpose()?;
    if let Some((ckpt, _)) = &resume {
        ckpt.check_compatible(&cfg.model)?;
    }
    let data = Dataset::load(cfg)?;
    let (train_set, val) = data.partition()?;
    let dir = output_dir(cli, cfg);
    check_writable(&dir, cli.force)?;
    create_output(&dir, cfg)?;

    let mut tc = cfg.train.core.clone();
    if cfg.train.grid_search && resume.is_none() {
        let grid = grid_search_training(&cfg.model, &train_set, &val, &tc)?;
        write_json(&dir.join("grid.json"), &grid)?;
        tc.loss_weights.alpha = grid.best.alpha;
        tc.loss_weights.beta = grid.best.beta;
        tc.loss_weights.gamma = grid.best.gamma;
        log::info!("grid search picked alpha {} beta {} gamma {}", grid.best.alpha, grid.best.beta, grid.best.gamma);
    }

    let (trainer, resumed_from_epoch) = match resume {
        Some((ckpt, best)) => {
            let state = ckpt.train_state.expect("checked by load_resume");
            let from = state.epoch;
            log::info!("resuming at epoch {from}");
            (Trainer::resume(ckpt.model, ckpt.optimizer.expect("checked by load_resume"), state, best, tc.clone())?, Some(from))
        }
        None => (Trainer::new(Model::new(&cfg.model, tc.seed)?, tc.clone())?, None),
    };
    let mut logger = RunLogger::create(&dir.join("train_log.jsonl"), Some(dir.join("best.ckpt")), cfg.model.variant.label())?;
    let out = trainer.fit(&train_set, &val, &mut logger)?;

    let ensemble = fit_ensemble(&out.model, &val, cfg)?;
    let best = Checkpoint {
        model: out.model.clone(),
        optimizer: None,
        train_state: Some(out.state.clone()),
        ensemble: ensemble.as_ref().map(|e| e.weights.clone()),
    };
    best.save(&dir.join("best.ckpt"))?;
    let last = Checkpoint { model: out.last, optimizer: Some(out.adam), train_state: Some(out.state.clone()), ensemble: None };
    last.save(&dir.join("final.ckpt"))?;

    let summary = TrainSummary {
        variant: cfg.model.variant,
        config_hash: cfg.hash(),
        resumed_from_epoch,
        epochs_run: out.state.epoch,
        best_epoch: out.state.best_epoch,
        best_val_mae: out.state.best_val_mae,
        stopped_early: out.state.stopped_early,
        loss_weights: tc.loss_weights,
        ensemble,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "train: {} epochs, best val MAE {} at epoch {}; outputs in {}",
        summary.epochs_run,
        summary.best_val_mae.map_or("n/a".into(), |m| format!("{m:.4}")),
        summary.best_epoch.map_or("n/a".into(), |e| e.to_string()),
        dir.display()
    );
    Ok(())
}

/// A resumable checkpoint plus the best weights saved next to it.
fn load_resume(path: &Path) -> Result<(Checkpoint, Option<Model>), CliError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.optimizer.is_none() || ckpt.train_state.is_none() {
        return Err(CliError::new(code::COMPATIBILITY, format!("{} has no optimizer or training state to resume from", path.display())));
    }
    let sibling = path.with_file_name("best.ckpt");
    let best = if sibling.is_file() && sibling != path {
        let b = Checkpoint::load(&sibling)?;
        (b.model.config() == ckpt.model.config()).then_some(b.model)
    } else {
        None
    };
    Ok((ckpt, best))
}

fn fit_ensemble(model: &Model, val: &[&dsmt_core::volume::VolumeSample], cfg: &ExperimentConfig) -> Result<Option<EnsembleSearch>, CliError> {
    if !model.variant().has_shallow_heads() {
        return Ok(None);
    }
    let preds = predict_heads(model, val, cfg.train.core.batch_val)?;
    let y: Vec<f64> = val.iter().map(|s| s.age).collect();
    Ok(Some(search_weights_on_grid(&y, &preds.age, &model.depths(), cfg.ensemble.rho_steps)?))
}

fn load_checked(cli: &Cli, cfg: &ExperimentConfig) -> Result<Checkpoint, CliError> {
    let path = cli.checkpoint.as_deref().expect("validated");
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_compatible(&cfg.model)?;
    Ok(ckpt)
}

pub fn eval(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = load_checked(cli, cfg)?;
    let data = Dataset::load(cfg)?;
    let (_, val) = data.partition()?;
    let dir = output_dir(cli, cfg);
    check_writable(&dir, cli.force)?;
    let brackets = cfg.brackets();
    let result = evaluate_model_with(&ckpt.model, &val, cfg.train.core.batch_val, &brackets, cfg.ensemble.rho_steps)?;

    create_output(&dir, cfg)?;
    write_json(&dir.join("report.json"), &result)?;
    write_predictions(&dir.join("predictions.csv"), &result.rows)?;
    fs::write(dir.join("report.txt"), report_text(&result))?;
    if cfg.eval.plots {
        let title = format!("{} predicted vs true age", result.variant);
        emit_plots(&result.rows, &dir, "scatter", &title)?;
        let series = vec![bracket_series(result.variant.label(), &result)];
        emit_bracket_bars(&series, &dir, "brackets", "MAE by age bracket")?;
    }
    print!("{}", report_text(&result));
    Ok(())
}

fn bracket_series(name: &str, r: &EvalResult) -> BracketSeries {
    BracketSeries {
        model: name.to_string(),
        values: r.report.by_age_bracket.iter().map(|(label, m)| (label.clone(), m.mae.zip(m.sd))).collect(),
    }
}

fn metric_line(out: &mut String, name: &str, m: &MetricsReport) {
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    let _ = writeln!(out, "{name:<12} n={:<4} MAE {}  SD {}  RMSE {}  R2 {}", m.n, f(m.mae), f(m.sd), f(m.rmse), f(m.r2));
}

fn report_text(r: &EvalResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "variant: {}", r.variant);
    if let Some(e) = &r.ensemble {
        let omega: Vec<String> = e.weights.omega.iter().map(|(d, w)| format!("d{d}={w:.4}")).collect();
        let _ = writeln!(out, "ensemble: rho {:.2}  omega [{}]  MAE {:.3} (final head {:.3})", e.weights.rho, omega.join(", "), e.ensemble_mae, e.final_mae);
    }
    metric_line(&mut out, "overall", &r.report.overall);
    for (sex, m) in &r.report.by_sex {
        metric_line(&mut out, &sex.to_string(), m);
    }
    for (label, m) in &r.report.by_age_bracket {
        metric_line(&mut out, label, m);
    }
    metric_line(&mut out, "final head", &r.final_head);
    if let Some(acc) = r.sex_accuracy {
        let _ = writeln!(out, "sex accuracy {acc:.3}");
    }
    out
}

pub fn predict(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = load_checked(cli, cfg)?;
    let weights = match &ckpt.ensemble {
        Some(w) if ckpt.model.variant().has_shallow_heads() => {
            w.validate()?;
            w.clone()
        }
        _ => EnsembleWeights::final_only(),
    };
    let data = Dataset::load(cfg)?;
    let dir = output_dir(cli, cfg);
    check_writable(&dir, cli.force)?;
    let all: Vec<_> = data.samples.iter().collect();
    let rows = prediction_rows(&ckpt.model, &all, cfg.train.core.batch_val, &weights)?;
    create_output(&dir, cfg)?;
    write_predictions(&dir.join("predictions.csv"), &rows)?;
    println!("predict: {} rows written to {}", rows.len(), dir.join("predictions.csv").display());
    Ok(())
}

pub fn ensemble_search(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut ckpt = load_checked(cli, cfg)?;
    if !ckpt.model.variant().has_shallow_heads() {
        return Err(CliError::config(format!("{} has no shallow heads to ensemble", ckpt.model.variant())));
    }
    let data = Dataset::load(cfg)?;
    let (_, val) = data.partition()?;
    let dir = output_dir(cli, cfg);
    check_writable(&dir, cli.force)?;
    let search = fit_ensemble(&ckpt.model, &val, cfg)?.expect("variant has shallow heads");
    create_output(&dir, cfg)?;
    write_json(&dir.join("ensemble.json"), &search)?;
    ckpt.ensemble = Some(search.weights.clone());
    ckpt.save(&dir.join("ensemble.ckpt"))?;
    println!(
        "ensemble-search: rho {:.2}, ensemble MAE {:.4} vs final head {:.4}",
        search.weights.rho, search.ensemble_mae, search.final_mae
    );
    Ok(())
}

pub fn ablate(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let data = Dataset::load(cfg)?;
    let (train_set, val) = data.partition()?;
    let dir = output_dir(cli, cfg);
    check_writable(&dir, cli.force)?;
    create_output(&dir, cfg)?;
    let mut log_error = None;
    let mut observer = |v: Variant| -> Box<dyn TrainObserver> {
        match RunLogger::create(&dir.join(format!("train_log_{}.jsonl", v.key().to_ascii_lowercase())), None, v.label()) {
            Ok(l) => Box::new(l),
            Err(e) => {
                log_error.get_or_insert(e);
                Box::new(dsmt_core::trainer::NoopObserver)
            }
        }
    };
    let table = run_ablation(&cfg.model, &train_set, &val, &cfg.train.core, &Variant::ALL, &cfg.brackets(), &mut observer);
    if let Some(e) = log_error {
        return Err(e);
    }
    fs::write(dir.join("ablation.txt"), table.to_text())?;
    fs::write(dir.join("ablation.csv"), table.to_csv())?;
    write_json(&dir.join("ablation.json"), &table)?;
    for row in &table.rows {
        if let Some(r) = &row.result {
            write_predictions(&dir.join(format!("predictions_{}.csv", row.variant.key().to_ascii_lowercase())), &r.rows)?;
        }
    }
    if cfg.eval.plots {
        let series: Vec<BracketSeries> =
            table.rows.iter().filter_map(|row| row.result.as_ref().map(|r| bracket_series(row.variant.label(), r))).collect();
        if !series.is_empty() {
            emit_bracket_bars(&series, &dir, "brackets", "MAE by age bracket")?;
        }
    }
    print!("{}", table.to_text());
    for row in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("ablate: {} failed: {}", row.variant, row.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

/// Tiny model used by `gradcheck`; only the variant, supervision depths and
/// dropout rate come from the config.
pub fn gradcheck_model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        side: 16,
        in_channels: 1,
        block_channels: vec![2, 3, 4, 5, 6],
        latent_dim: 8,
        head_hidden: vec![6, 5],
        ..cfg.model.clone()
    }
}

#[derive(Debug, Serialize)]
struct GradCheckSummary {
    passed: bool,
    threshold: f64,
    #[serde(flatten)]
    report: dsmt_core::trainer::GradCheckReport,
}

pub fn gradcheck(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mc = gradcheck_model_config(cfg);
    mc.validate().map_err(CliError::as_config)?;
    let seed = cfg.seed();
    let phantom = dsmt_core::volume::PhantomConfig { side: mc.side, ..cfg.data.phantom.clone() };
    let samples = synthesize_dataset(4, &phantom, seed)?;
    let refs: Vec<_> = samples.iter().collect();
    let mut model = Model::new(&mc, seed)?;
    model.set_age_scaling(age_scaling_for(&refs));
    let x = batch_tensor(&refs)?;
    let ages: Vec<f64> = refs.iter().map(|s| s.age).collect();
    let sexes: Vec<f64> = refs.iter().map(|s| if s.sex == Sex::Male { 1.0 } else { 0.0 }).collect();
    let w = &cfg.train.core.loss_weights;
    let gc = GradCheckConfig { seed, corrupt_factor: cli.corrupt_factor, ..Default::default() };
    let report = gradient_check(&model, &x, &ages, &sexes, w, &gc)?;
    let threshold = if effective_weights(mc.variant, w).0 == 1.0 { GRADCHECK_TOL_RECONSTRUCTION } else { GRADCHECK_TOL };
    let passed = report.max_rel_error < threshold;
    println!(
        "gradcheck: {} sampled parameters, max relative error {:.3e} (threshold {threshold:.0e}): {}",
        report.n_sampled,
        report.max_rel_error,
        if passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = &cli.out {
        check_writable(dir, cli.force)?;
        create_output(dir, cfg)?;
        write_json(&dir.join("gradcheck.json"), &GradCheckSummary { passed, threshold, report })?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::new(code::CHECK_FAILED, "gradient check failed"))
    }
}
