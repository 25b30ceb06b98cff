//! The composite objective against a straight-line oracle written per
//! variant, plus finite-difference checks of the output gradients.

use std::collections::BTreeMap;

mod common;

use common::oracle::{oracle_bce, oracle_mae, oracle_mse, oracle_total, DEPTHS};
use dsmt_core::losses::{compute_loss, total_loss, LossComponents, LossWeights, Targets};
use dsmt_core::model::{ModelOutputs, Variant};
use dsmt_core::nn::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-9;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

fn eta() -> impl Strategy<Value = [f64; 3]> {
    (0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x, y, z)| {
        let s = x + y + z;
        [x / s, y / s, 1.0 - x / s - y / s]
    })
}

fn components() -> impl Strategy<Value = LossComponents> {
    (0.0f64..2.0, 0.0f64..30.0, prop::array::uniform3(0.0f64..30.0), 0.0f64..5.0, prop::array::uniform3(0.0f64..5.0)).prop_map(
        |(ae, ba, bad, gc, gcd)| LossComponents {
            l_ae: ae,
            l_ba_final: ba,
            l_ba_shallow: DEPTHS.iter().copied().zip(bad).collect(),
            l_gc_final: gc,
            l_gc_shallow: DEPTHS.iter().copied().zip(gcd).collect(),
        },
    )
}

fn weights(a: f64, b: f64, g: f64, eta: &[f64; 3]) -> LossWeights {
    LossWeights::new(a, b, g, DEPTHS.iter().copied().zip(eta.iter().copied()).collect()).unwrap()
}

/// Raw model outputs for a batch of `n`, laid out for `v`.
#[derive(Debug, Clone)]
struct Raw {
    x: Vec<f64>,
    x_hat: Vec<f64>,
    ages: Vec<f64>,
    sexes: Vec<f64>,
    age_preds: Vec<Vec<f64>>,
    sex_probs: Vec<Vec<f64>>,
}

fn raw(n: usize) -> impl Strategy<Value = Raw> {
    let vox = n * 8;
    (
        prop::collection::vec(0.0f64..1.0, vox),
        prop::collection::vec(0.01f64..0.99, vox),
        prop::collection::vec(20.0f64..80.0, n),
        prop::collection::vec(prop::bool::ANY, n),
        prop::collection::vec(prop::collection::vec(10.0f64..90.0, n), 4),
        prop::collection::vec(prop::collection::vec(0.02f64..0.98, n), 4),
    )
        .prop_map(|(x, x_hat, ages, sexes, age_preds, sex_probs)| Raw {
            x,
            x_hat,
            ages,
            sexes: sexes.into_iter().map(|s| if s { 1.0 } else { 0.0 }).collect(),
            age_preds,
            sex_probs,
        })
}

impl Raw {
    fn outputs(&self, v: Variant) -> ModelOutputs {
        let n = self.ages.len();
        let heads = if v.has_shallow_heads() { 4 } else { 1 };
        ModelOutputs {
            reconstruction: v.has_decoder().then(|| Tensor::from_vec(&[n, 1, 2, 2, 2], self.x_hat.clone())),
            age_preds: self.age_preds[..heads].to_vec(),
            sex_probs: if v.has_sex_heads() { self.sex_probs[..heads].to_vec() } else { Vec::new() },
            latent: Tensor::zeros(&[n, 4]),
        }
    }

    fn input(&self) -> Tensor {
        Tensor::from_vec(&[self.ages.len(), 1, 2, 2, 2], self.x.clone())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composition_matches_oracle(v in variant(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 0.0f64..=1.0, eta in eta(), c in components()) {
        let got = total_loss(&c, &weights(a, b, g, &eta), v).unwrap();
        let want = oracle_total(v, a, b, g, &eta, &c);
        prop_assert!(close(got.l_total, want, TOL), "{v:?}: {} vs {want}", got.l_total);
    }

    #[test]
    fn raw_outputs_match_oracle(v in variant(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 0.0f64..=1.0, eta in eta(), r in raw(3)) {
        let x = r.input();
        let out = r.outputs(v);
        let t = Targets { input: &x, ages: &r.ages, sexes: &r.sexes };
        let (got, _) = compute_loss(&out, t, &DEPTHS, &weights(a, b, g, &eta), v).unwrap();
        let c = LossComponents {
            l_ae: if v.has_decoder() { oracle_mse(&r.x, &r.x_hat) } else { 0.0 },
            l_ba_final: oracle_mae(&r.ages, &r.age_preds[0]),
            l_ba_shallow: (0..3).map(|i| (DEPTHS[i], oracle_mae(&r.ages, &r.age_preds[i + 1]))).collect(),
            l_gc_final: oracle_bce(&r.sexes, &r.sex_probs[0]),
            l_gc_shallow: (0..3).map(|i| (DEPTHS[i], oracle_bce(&r.sexes, &r.sex_probs[i + 1]))).collect(),
        };
        let want = oracle_total(v, a, b, g, &eta, &c);
        prop_assert!(close(got.l_total, want, TOL), "{v:?}: {} vs {want}", got.l_total);
        prop_assert!(close(got.l_ba_final, c.l_ba_final, TOL));
        if v.has_decoder() {
            prop_assert!(close(got.l_ae, c.l_ae, TOL));
        }
    }

    #[test]
    fn output_gradients_match_finite_differences(v in variant(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, g in 0.0f64..=1.0, eta in eta(), r in raw(2)) {
        let w = weights(a, b, g, &eta);
        let x = r.input();
        let t = Targets { input: &x, ages: &r.ages, sexes: &r.sexes };
        let out = r.outputs(v);
        let (_, grads) = compute_loss(&out, t, &DEPTHS, &w, v).unwrap();
        let loss = |o: &ModelOutputs| compute_loss(o, t, &DEPTHS, &w, v).unwrap().0.l_total;
        let h = 1e-6;
        for (hi, preds) in out.age_preds.iter().enumerate() {
            for i in 0..preds.len() {
                // MAE is piecewise linear: skip points near the kink
                if (preds[i] - r.ages[i]).abs() < 1e-3 {
                    continue;
                }
                let (mut p, mut m) = (out.clone(), out.clone());
                p.age_preds[hi][i] += h;
                m.age_preds[hi][i] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                prop_assert!((num - grads.age[hi][i]).abs() < 1e-6, "age head {hi}[{i}]: {num} vs {}", grads.age[hi][i]);
            }
        }
        for (hi, probs) in out.sex_probs.iter().enumerate() {
            for i in 0..probs.len() {
                let (mut p, mut m) = (out.clone(), out.clone());
                p.sex_probs[hi][i] += h;
                m.sex_probs[hi][i] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                prop_assert!((num - grads.sex[hi][i]).abs() < 1e-6, "sex head {hi}[{i}]: {num} vs {}", grads.sex[hi][i]);
            }
        }
        if let (Some(rec), Some(grec)) = (&out.reconstruction, &grads.reconstruction) {
            for i in [0, rec.len() / 2, rec.len() - 1] {
                let (mut p, mut m) = (out.clone(), out.clone());
                p.reconstruction.as_mut().unwrap().data_mut()[i] += h;
                m.reconstruction.as_mut().unwrap().data_mut()[i] -= h;
                let num = (loss(&p) - loss(&m)) / (2.0 * h);
                prop_assert!((num - grec.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_is_affine_in_alpha(b in 0.0f64..=1.0, g in 0.0f64..=1.0, eta in eta(), c in components()) {
        let at = |a: f64| total_loss(&c, &weights(a, b, g, &eta), Variant::DsmtAe).unwrap().l_total;
        let (l0, l1, lm) = (at(0.0), at(1.0), at(0.3));
        prop_assert!(close(lm, 0.7 * l0 + 0.3 * l1, TOL));
        prop_assert!(close(l1, c.l_ae, TOL));
    }

    #[test]
    fn total_grows_with_each_component(v in variant(), a in 0.01f64..0.99, b in 0.01f64..0.99, g in 0.01f64..0.99, eta in eta(), c in components(), bump in 0.1f64..5.0) {
        let w = weights(a, b, g, &eta);
        let base = total_loss(&c, &w, v).unwrap().l_total;
        let mut up = c.clone();
        up.l_ba_final += bump;
        prop_assert!(total_loss(&up, &w, v).unwrap().l_total > base);
        let mut up = c.clone();
        up.l_ae += bump;
        let grew = total_loss(&up, &w, v).unwrap().l_total > base;
        prop_assert_eq!(grew, v.has_decoder());
        let mut up = c.clone();
        *up.l_ba_shallow.get_mut(&3).unwrap() += bump;
        let grew = total_loss(&up, &w, v).unwrap().l_total > base;
        prop_assert_eq!(grew, v.has_shallow_heads());
        let mut up = c.clone();
        up.l_gc_final += bump;
        let grew = total_loss(&up, &w, v).unwrap().l_total > base;
        prop_assert_eq!(grew, v.has_sex_heads());
    }
}

#[test]
fn all_weight_on_final_heads_ignores_shallow_losses() {
    let c = LossComponents {
        l_ae: 0.3,
        l_ba_final: 5.0,
        l_ba_shallow: BTreeMap::from([(2, 100.0), (3, 200.0), (4, 300.0)]),
        l_gc_final: 0.7,
        l_gc_shallow: BTreeMap::from([(2, 9.0), (3, 9.0), (4, 9.0)]),
    };
    let w = LossWeights { alpha: 0.5, beta: 0.5, gamma: 1.0, eta: BTreeMap::new() };
    let l = total_loss(&c, &w, Variant::DsmtAe).unwrap().l_total;
    assert!((l - (0.5 * 0.3 + 0.5 * (0.5 * 5.0 + 0.5 * 0.7))).abs() < TOL);
}

#[test]
fn clamped_probabilities_stay_finite() {
    let x = Tensor::zeros(&[2, 1, 2, 2, 2]);
    let out = ModelOutputs {
        reconstruction: Some(Tensor::zeros(&[2, 1, 2, 2, 2])),
        age_preds: vec![vec![40.0, 50.0]],
        sex_probs: vec![vec![0.0, 1.0]],
        latent: Tensor::zeros(&[2, 4]),
    };
    let t = Targets { input: &x, ages: &[40.0, 50.0], sexes: &[1.0, 0.0] };
    let (l, g) = compute_loss(&out, t, &[], &LossWeights::default(), Variant::MtlAe).unwrap();
    assert!(l.is_finite());
    assert!((l.l_gc_final - (-(1e-7f64).ln())).abs() < 1e-6);
    assert!(g.sex[0].iter().all(|v| v.is_finite()));
}
