//! Output layout per variant and how deep supervision reaches block 1.

mod common;

use common::{random_batch, tiny};
use dsmt_core::losses::{compute_loss, LossWeights, Targets};
use dsmt_core::model::{AgeScaling, Model, Variant};
use dsmt_core::nn::GradStore;

#[test]
fn heads_and_reconstruction_follow_the_variant() {
    let (x, _, _) = random_batch(3, 16, 1);
    for v in Variant::ALL {
        let model = Model::new(&tiny(v), 2).unwrap();
        let out = model.forward(&x).unwrap();
        let n_ds = if v.has_shallow_heads() { 3 } else { 0 };
        assert_eq!(out.age_preds.len(), n_ds + 1, "{v}");
        assert_eq!(out.sex_probs.len(), if v.has_sex_heads() { n_ds + 1 } else { 0 }, "{v}");
        assert_eq!(out.reconstruction.is_some(), v != Variant::Baseline, "{v}");
        if let Some(r) = &out.reconstruction {
            assert_eq!(r.shape(), x.shape());
            assert!(r.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(out.age_preds.iter().all(|p| p.len() == 3 && p.iter().all(|a| a.is_finite())));
        assert!(out.sex_probs.iter().flatten().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn default_depths_give_four_heads_per_task() {
    let model = Model::new(&tiny(Variant::DsmtAe), 0).unwrap();
    assert_eq!(model.depths(), vec![2, 3, 4]);
    assert_eq!((model.n_age_heads(), model.n_sex_heads()), (4, 4));
}

fn block1_grads(model: &Model, g: &GradStore) -> Vec<f64> {
    model.block_param_ids(1).into_iter().flat_map(|id| g.get(id).map(|t| t.data().to_vec()).unwrap_or_default()).collect()
}

/// Gradient of the total loss on a train-mode pass without dropout.
fn grads(model: &Model, w: &LossWeights, seed: u64) -> GradStore {
    let (x, ages, sexes) = random_batch(4, 16, seed);
    let (out, tape) = model.forward_train(&x, None).unwrap();
    let t = Targets { input: &x, ages: &ages, sexes: &sexes };
    let (_, og) = compute_loss(&out, t, &model.depths(), w, model.variant()).unwrap();
    model.backward(&tape, &og).unwrap()
}

#[test]
fn block_one_receives_gradient_with_deep_supervision() {
    let w = LossWeights { alpha: 0.2, beta: 0.5, gamma: 0.5, ..Default::default() };
    for seed in 0..4 {
        let model = Model::new(&tiny(Variant::DsmtAe), seed).unwrap();
        let g = block1_grads(&model, &grads(&model, &w, 100 + seed));
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0 && norm.is_finite(), "seed {seed}: {norm}");
    }
}

/// With gamma = 1 every shallow head has zero weight, so block 1 must see
/// exactly the gradient of the same network without those heads.
#[test]
fn zero_weighted_shallow_heads_contribute_nothing() {
    for (with_ds, without_ds) in [(Variant::DsmtAe, Variant::MtlAe), (Variant::DsAe, Variant::Ae)] {
        let w = LossWeights { alpha: 0.3, beta: 0.6, gamma: 1.0, ..Default::default() };
        let full = Model::new(&tiny(with_ds), 5).unwrap();
        let mut plain = Model::new(&tiny(without_ds), 6).unwrap();
        let copied = plain.copy_matching_from(&full);
        assert_eq!(copied, plain.params().len(), "every {without_ds} parameter exists in {with_ds}");
        let scale = AgeScaling { offset: 50.0, scale: 15.0 };
        let mut full = full;
        full.set_age_scaling(scale);
        plain.set_age_scaling(scale);

        let gf = grads(&full, &w, 42);
        let gp = grads(&plain, &w, 42);
        let (a, b) = (block1_grads(&full, &gf), block1_grads(&plain, &gp));
        assert_eq!(a.len(), b.len());
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "{with_ds} vs {without_ds}: {diff}");
        assert!(a.iter().any(|v| *v != 0.0));
    }
}
