//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 1-7 are quick re-checks against the shared oracles; 8-10 train
//! all five variants on 200 side-32 phantoms, twice.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::oracle::{o_mae, o_r2, o_rmse, o_sd, oracle_bce, oracle_mae, oracle_mse, oracle_total, DEPTHS};
use common::{phantoms, random_batch, targets, tiny};
use dsmt_core::ensemble::{ensemble_predict, inverse_mae_weights, search_weights_from_predictions, EnsembleWeights};
use dsmt_core::evaluation::*;
use dsmt_core::losses::{compute_loss, LossComponents, LossWeights, Targets};
use dsmt_core::model::{AgeScaling, Model, ModelConfig, ModelOutputs, Variant};
use dsmt_core::nn::{GradStore, Tensor};
use dsmt_core::rng;
use dsmt_core::trainer::*;
use dsmt_core::volume::{make_split, synthesize_dataset, PhantomConfig};
use rand::Rng;

const ORACLE_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-3;
const GRAD_TOL_RECON: f64 = 1e-4;
const ABLATED_TOL: f64 = 1e-9;
const RESTORE_TOL: f64 = 1e-6;
const MAE_GAIN: f64 = 0.8;
const SEX_ACC: f64 = 0.8;

const BINS: [f64; 7] = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion_1() -> Outcome {
    let mut r = rng::seeded(101);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let v = Variant::ALL[case % 5];
        let n = 3;
        let (a, b, g) = (r.random::<f64>(), r.random::<f64>(), r.random::<f64>());
        let e: Vec<f64> = (0..3).map(|_| r.random_range(0.01..1.0)).collect();
        let s: f64 = e.iter().sum();
        let eta = [e[0] / s, e[1] / s, 1.0 - e[0] / s - e[1] / s];
        let x: Vec<f64> = (0..n * 8).map(|_| r.random()).collect();
        let x_hat: Vec<f64> = (0..n * 8).map(|_| r.random_range(0.01..0.99)).collect();
        let ages: Vec<f64> = (0..n).map(|_| r.random_range(20.0..80.0)).collect();
        let sexes: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let age_preds: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| r.random_range(10.0..90.0)).collect()).collect();
        let sex_probs: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| r.random_range(0.02..0.98)).collect()).collect();

        let heads = if v.has_shallow_heads() { 4 } else { 1 };
        let out = ModelOutputs {
            reconstruction: v.has_decoder().then(|| Tensor::from_vec(&[n, 1, 2, 2, 2], x_hat.clone())),
            age_preds: age_preds[..heads].to_vec(),
            sex_probs: if v.has_sex_heads() { sex_probs[..heads].to_vec() } else { Vec::new() },
            latent: Tensor::zeros(&[n, 4]),
        };
        let input = Tensor::from_vec(&[n, 1, 2, 2, 2], x.clone());
        let w = LossWeights::new(a, b, g, DEPTHS.iter().copied().zip(eta).collect()).unwrap();
        let t = Targets { input: &input, ages: &ages, sexes: &sexes };
        let (got, _) = compute_loss(&out, t, &DEPTHS, &w, v).unwrap();
        let c = LossComponents {
            l_ae: if v.has_decoder() { oracle_mse(&x, &x_hat) } else { 0.0 },
            l_ba_final: oracle_mae(&ages, &age_preds[0]),
            l_ba_shallow: (0..3).map(|i| (DEPTHS[i], oracle_mae(&ages, &age_preds[i + 1]))).collect(),
            l_gc_final: oracle_bce(&sexes, &sex_probs[0]),
            l_gc_shallow: (0..3).map(|i| (DEPTHS[i], oracle_bce(&sexes, &sex_probs[i + 1]))).collect(),
        };
        let want = oracle_total(v, a, b, g, &eta, &c);
        worst = worst.max((got.l_total - want).abs() / (1.0 + want.abs()));
    }
    outcome(worst <= ORACLE_TOL, format!("100 cases, max rel diff {worst:.2e} (tol {ORACLE_TOL:.0e})"))
}

fn criterion_2() -> Outcome {
    let samples = phantoms(4, 16, 3);
    let refs: Vec<_> = samples.iter().collect();
    let (x, ages, sexes) = targets(&refs);
    let model = Model::new(&tiny(Variant::DsmtAe), 1).unwrap();
    let cfg = GradCheckConfig::default();
    let full = gradient_check(&model, &x, &ages, &sexes, &LossWeights::default(), &cfg).unwrap();
    let recon = gradient_check(&model, &x, &ages, &sexes, &LossWeights { alpha: 1.0, ..Default::default() }, &cfg).unwrap();
    outcome(
        full.n_sampled == 20 && full.max_rel_error < GRAD_TOL && recon.max_rel_error < GRAD_TOL_RECON,
        format!(
            "{} weights, max rel err {:.2e} (tol {GRAD_TOL:.0e}), alpha=1 {:.2e} (tol {GRAD_TOL_RECON:.0e})",
            full.n_sampled, full.max_rel_error, recon.max_rel_error
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut r = rng::seeded(303);
    let mut worst: f64 = 0.0;
    let mut ordered = true;
    for _ in 0..100 {
        let n = r.random_range(2..60);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(18.0..90.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| r.random_range(10.0..95.0)).collect();
        for (got, want) in [
            (mae(&y, &p).unwrap(), o_mae(&y, &p)),
            (error_sd(&y, &p).unwrap(), o_sd(&y, &p)),
            (rmse(&y, &p).unwrap(), o_rmse(&y, &p)),
            (r2(&y, &p).unwrap(), o_r2(&y, &p)),
        ] {
            worst = worst.max((got - want).abs() / (1.0 + want.abs()));
        }
        ordered &= rmse(&y, &p).unwrap() >= mae(&y, &p).unwrap();
    }
    let y = [22.0, 37.0, 41.5, 60.0, 78.25];
    let m = y.iter().sum::<f64>() / 5.0;
    let exact = r2(&y, &y).unwrap() == 1.0 && r2(&y, &[m; 5]).unwrap() == 0.0;
    outcome(
        worst <= ORACLE_TOL && ordered && exact,
        format!("100 vectors, max rel diff {worst:.2e} (tol {ORACLE_TOL:.0e}), rmse>=mae {ordered}, degenerate R2 exact {exact}"),
    )
}

/// Trains the tiny DSMT model used by criteria 4 and 7.
fn tiny_training() -> (TrainOutcome, Vec<dsmt_core::volume::VolumeSample>, Vec<String>) {
    let samples = phantoms(30, 16, 4);
    let split = make_split(&samples, 0.2, &BINS, 4).unwrap();
    let (tr, va) = split.partition(&samples);
    let cfg = TrainConfig { epochs: 5, patience: 5, lr0: 3e-3, seed: 11, augmentation: None, ..Default::default() };
    let out = train(Model::new(&tiny(Variant::DsmtAe), 11).unwrap(), &tr, &va, &cfg, &mut NoopObserver).unwrap();
    let val = split.val_ids.clone();
    (out, samples, val)
}

fn criterion_4(model: &Model, val: &[&dsmt_core::volume::VolumeSample]) -> Outcome {
    let y: Vec<f64> = val.iter().map(|s| s.age).collect();
    let preds = predict_heads(model, val, 2).unwrap().age;
    let collapse = ensemble_predict(&preds, &DEPTHS, &EnsembleWeights::new(1.0, BTreeMap::from([(2, 0.2), (3, 0.3), (4, 0.5)])).unwrap()).unwrap() == preds[0];

    let mut bounded = true;
    for rho in [0.0, 0.25, 0.5, 0.75] {
        let w = EnsembleWeights::new(rho, BTreeMap::from([(2, 0.5), (3, 0.25), (4, 0.25)])).unwrap();
        let e = ensemble_predict(&preds, &DEPTHS, &w).unwrap();
        for (i, v) in e.iter().enumerate() {
            let lo = preds.iter().map(|h| h[i]).fold(f64::INFINITY, f64::min);
            let hi = preds.iter().map(|h| h[i]).fold(f64::NEG_INFINITY, f64::max);
            bounded &= *v >= lo && *v <= hi;
        }
    }

    let s = search_weights_from_predictions(&y, &preds, &DEPTHS).unwrap();
    let omega = inverse_mae_weights(&DEPTHS.iter().enumerate().map(|(k, &d)| (d, o_mae(&y, &preds[k + 1]))).collect());
    let (mut best, mut best_rho) = (f64::INFINITY, f64::NAN);
    for i in (0..=20).rev() {
        let rho = i as f64 / 20.0;
        let e: Vec<f64> = (0..y.len())
            .map(|j| rho * preds[0][j] + (1.0 - rho) * DEPTHS.iter().enumerate().map(|(k, d)| omega[d] * preds[k + 1][j]).sum::<f64>())
            .collect();
        let m = o_mae(&y, &e);
        if m < best - 1e-12 {
            (best, best_rho) = (m, rho);
        }
    }
    let matches = s.weights.rho == best_rho && (s.ensemble_mae - best).abs() < ORACLE_TOL;
    outcome(
        collapse && bounded && s.ensemble_mae <= s.final_mae && matches,
        format!(
            "rho=1 collapse {collapse}, convex bounds {bounded}, ensemble {:.3} <= final {:.3}, rho {} matches enumeration {matches}",
            s.ensemble_mae, s.final_mae, s.weights.rho
        ),
    )
}

fn criterion_5() -> Outcome {
    let (x, _, _) = random_batch(3, 16, 1);
    let mut pass = true;
    let mut shapes = Vec::new();
    for v in Variant::ALL {
        let model = Model::new(&tiny(v), 2).unwrap();
        let out = model.forward(&x).unwrap();
        let heads = if v.has_shallow_heads() { DEPTHS.len() + 1 } else { 1 };
        pass &= out.age_preds.len() == heads;
        pass &= out.sex_probs.len() == if v.has_sex_heads() { heads } else { 0 };
        pass &= out.reconstruction.as_ref().map(|r| r.shape() == x.shape()) == v.has_decoder().then_some(true);
        pass &= out.sex_probs.iter().flatten().all(|&p| p > 0.0 && p < 1.0);
        shapes.push(format!("{}:{}/{}", v.label(), out.age_preds.len(), out.sex_probs.len()));
    }
    outcome(pass, format!("age/sex heads {}", shapes.join(" ")))
}

fn block1(model: &Model, w: &LossWeights, seed: u64) -> Vec<f64> {
    let (x, ages, sexes) = random_batch(4, 16, seed);
    let (out, tape) = model.forward_train(&x, None).unwrap();
    let t = Targets { input: &x, ages: &ages, sexes: &sexes };
    let (_, og) = compute_loss(&out, t, &model.depths(), w, model.variant()).unwrap();
    let g: GradStore = model.backward(&tape, &og).unwrap();
    model.block_param_ids(1).into_iter().flat_map(|id| g.get(id).map(|t| t.data().to_vec()).unwrap_or_default()).collect()
}

fn criterion_6() -> Outcome {
    let w = LossWeights { alpha: 0.2, beta: 0.5, gamma: 0.5, ..Default::default() };
    let min_norm = (0..4)
        .map(|seed| {
            let m = Model::new(&tiny(Variant::DsmtAe), seed).unwrap();
            block1(&m, &w, 100 + seed).iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .fold(f64::INFINITY, f64::min);

    let w = LossWeights { gamma: 1.0, ..w };
    let mut diff: f64 = 0.0;
    for (with_ds, without) in [(Variant::DsmtAe, Variant::MtlAe), (Variant::DsAe, Variant::Ae)] {
        let mut full = Model::new(&tiny(with_ds), 5).unwrap();
        let mut plain = Model::new(&tiny(without), 6).unwrap();
        plain.copy_matching_from(&full);
        let scale = AgeScaling { offset: 50.0, scale: 15.0 };
        full.set_age_scaling(scale);
        plain.set_age_scaling(scale);
        let (a, b) = (block1(&full, &w, 42), block1(&plain, &w, 42));
        diff = diff.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    outcome(
        min_norm > 0.0 && diff <= ABLATED_TOL,
        format!("min block-1 grad norm {min_norm:.3e} at gamma=0.5, ablated diff {diff:.1e} (tol {ABLATED_TOL:.0e})"),
    )
}

fn criterion_7(out: &TrainOutcome, val: &[&dsmt_core::volume::VolumeSample]) -> Outcome {
    let lr = [cosine_lr(0, 200, 1e-3).unwrap(), cosine_lr(100, 200, 1e-3).unwrap(), cosine_lr(200, 200, 1e-3).unwrap()];
    let schedule = lr == [0.001, 0.0005, 0.0];

    use StopDecision::*;
    let scripts: [(&[f64], usize, &[StopDecision]); 2] = [
        (&[5.0, 4.0, 4.0, 3.9, 4.0, 4.0, 4.0], 3, &[Improved, Improved, Continue, Improved, Continue, Continue, Stop]),
        (&[1.0, 2.0], 1, &[Improved, Stop]),
    ];
    let stopping = scripts.iter().all(|(seq, patience, want)| {
        let mut es = EarlyStopping::new(*patience);
        seq.iter().enumerate().map(|(e, &m)| es.observe(e, m)).collect::<Vec<_>>() == *want
    });

    let y: Vec<f64> = val.iter().map(|s| s.age).collect();
    let again = mae(&y, &predict_heads(&out.model, val, 2).unwrap().age[0]).unwrap();
    let best = out.state.best_val_mae.unwrap();
    let restored = (again - best).abs() < RESTORE_TOL;
    outcome(
        schedule && stopping && restored,
        format!("lr {lr:?}, scripted stops {stopping}, restored MAE {again:.6} vs best {best:.6} (tol {RESTORE_TOL:.0e})"),
    )
}

/// The scaled-down end-to-end configuration.
fn e2e_model() -> ModelConfig {
    ModelConfig {
        side: 32,
        block_channels: vec![4, 8, 16, 32, 64],
        latent_dim: 32,
        head_hidden: vec![16, 8],
        variant: Variant::DsmtAe,
        ..Default::default()
    }
}

const E2E_SEED: u64 = 7;
const E2E_EPOCHS: usize = 15;

struct Ablation {
    table: AblationTable,
    mean_mae: f64,
    elapsed: Duration,
}

fn ablation() -> Ablation {
    let t = Instant::now();
    let samples = synthesize_dataset(200, &PhantomConfig { side: 32, ..Default::default() }, E2E_SEED).unwrap();
    let split = make_split(&samples, 0.2, &BINS, E2E_SEED).unwrap();
    let (tr, va) = split.partition(&samples);
    let cfg = TrainConfig { epochs: E2E_EPOCHS, patience: E2E_EPOCHS, seed: E2E_SEED, augmentation: None, deterministic: true, ..Default::default() };
    let table = run_ablation(&e2e_model(), &tr, &va, &cfg, &Variant::ALL, &AgeBrackets::default(), &mut |_| Box::new(NoopObserver));
    let mean = tr.iter().map(|s| s.age).sum::<f64>() / tr.len() as f64;
    let mean_mae = va.iter().map(|s| (s.age - mean).abs()).sum::<f64>() / va.len() as f64;
    Ablation { table, mean_mae, elapsed: t.elapsed() }
}

fn criterion_8(a: &Ablation) -> Outcome {
    let Some(row) = a.table.row(Variant::DsmtAe) else { return outcome(false, "no DSMT-AE row".into()) };
    let Some(res) = &row.result else { return outcome(false, format!("DSMT-AE failed: {:?}", row.error)) };
    let reported = res.report.overall.mae.unwrap();
    let final_head = res.final_head.mae.unwrap();
    let acc = res.sex_accuracy.unwrap_or(0.0);
    let epochs: Vec<f64> = (0..row.train_loss.len()).map(|e| e as f64).collect();
    let trend = spearman(&epochs, &row.train_loss).unwrap_or(f64::NAN);
    let limit = MAE_GAIN * a.mean_mae;
    outcome(
        reported <= limit && final_head <= limit && acc >= SEX_ACC && trend < 0.0,
        format!(
            "val MAE {reported:.3} (final head {final_head:.3}) vs mean predictor {:.3} (limit {limit:.3}), sex acc {acc:.3}, loss trend rho {trend:.3}, {} epochs, five variants trained in {:.0?}",
            a.mean_mae,
            row.train_loss.len(),
            a.elapsed
        ),
    )
}

fn criterion_9(a: &Ablation) -> Outcome {
    let (dsmt, base) = (a.table.overall_mae(Variant::DsmtAe), a.table.overall_mae(Variant::Baseline));
    let cells = a.table.cells();
    let layout = TABLE_COLUMNS.len() == 9 && cells.len() == 5 && cells.iter().all(|(_, c)| c.len() == 9 && !c[0].starts_with("error"));
    let ordered = matches!((dsmt, base), (Some(d), Some(b)) if d <= b);
    println!("{}", a.table.to_text());
    let (d, b) = (dsmt.unwrap_or(f64::NAN), base.unwrap_or(f64::NAN));
    outcome(ordered && layout, format!("DSMT-AE MAE {d:.3} <= Baseline {b:.3}, table {}x{} rows/cols", cells.len(), cells.first().map_or(0, |c| c.1.len())))
}

fn criterion_10(a: &Ablation, b: &Ablation) -> Outcome {
    let same = a.table == b.table
        && a.table.to_text() == b.table.to_text()
        && serde_json::to_string(&a.table).unwrap() == serde_json::to_string(&b.table).unwrap();
    outcome(same, format!("second run identical {same} ({:.0?} / {:.0?})", a.elapsed, b.elapsed))
}

fn main() {
    let mut results = Vec::new();
    let mut run = |n: usize, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if let Some(b) = budget {
            if took > b {
                o.pass = false;
                o.detail.push_str(&format!(", over the {b:?} budget"));
            }
        }
        println!("criterion {n}: {} {} [{took:.1?}]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push(o.pass);
    };

    run(1, Some(Duration::from_secs(10)), &mut criterion_1);
    run(2, Some(Duration::from_secs(120)), &mut criterion_2);
    run(3, Some(Duration::from_secs(5)), &mut criterion_3);
    let (trained, samples, val_ids) = tiny_training();
    let val: Vec<_> = samples.iter().filter(|s| val_ids.contains(&s.subject_id)).collect();
    run(4, Some(Duration::from_secs(60)), &mut || criterion_4(&trained.model, &val));
    run(5, Some(Duration::from_secs(60)), &mut criterion_5);
    run(6, None, &mut criterion_6);
    run(7, None, &mut || criterion_7(&trained, &val));
    let first = ablation();
    run(8, Some(Duration::from_secs(600)), &mut || {
        let mut o = criterion_8(&first);
        if first.elapsed > Duration::from_secs(600) {
            o.pass = false;
        }
        o
    });
    run(9, None, &mut || criterion_9(&first));
    let second = ablation();
    run(10, None, &mut || criterion_10(&first, &second));

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
