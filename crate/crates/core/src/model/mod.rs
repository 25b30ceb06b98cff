//! The DSMT-AE network and its ablation variants.
//!
//! Encoder: five residual blocks, each halving the spatial size. The
//! deepest feature map is average-pooled and projected to the latent code
//! `z`. The decoder maps `z` back to the input volume. Bottleneck heads
//! predict age (a linear unit rescaled to years) and sex (a sigmoid unit)
//! from `z` (final heads) and from pooled features of the supervised
//! encoder blocks (shallow heads).

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Variant, N_BLOCKS};
pub use layers::{AgeScaling, Decoder, DecoderStage, Head, HeadKind, ResBlock};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, BatchNorm3d, BatchNormCache, Dense, GradStore, Param, ParamRegistry, Tensor};
use crate::rng::{self, Rng};
use layers::{DecoderTape, HeadTape};

/// Outputs of one forward pass over a batch. Head-indexed vectors are
/// ordered `[final, shallow depths ascending]`; each entry holds one value
/// per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub reconstruction: Option<Tensor>,
    pub age_preds: Vec<Vec<f64>>,
    pub sex_probs: Vec<Vec<f64>>,
    pub latent: Tensor,
}

impl ModelOutputs {
    pub fn batch_size(&self) -> usize {
        self.latent.batch()
    }
}

/// dL/d(outputs), shaped like [`ModelOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub reconstruction: Option<Tensor>,
    pub age: Vec<Vec<f64>>,
    pub sex: Vec<Vec<f64>>,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input_shape: Vec<usize>,
    /// `acts[0]` is the input, `acts[k]` the output of block k.
    acts: Vec<Tensor>,
    block_bn: Vec<BatchNormCache>,
    pooled: Vec<Tensor>,
    latent: Tensor,
    decoder: Option<DecoderTape>,
    age_heads: Vec<HeadTape>,
    sex_heads: Vec<HeadTape>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    blocks: Vec<ResBlock>,
    latent: Dense,
    decoder: Option<Decoder>,
    age_heads: Vec<Head>,
    sex_heads: Vec<Head>,
    age_scaling: AgeScaling,
    n_param_tensors: usize,
}

impl Model {
    /// Builds a freshly initialised model; `seed` fixes the initial weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::derived(seed, 0x1417, 0);
        let mut reg = ParamRegistry::new();
        let sizes = cfg.spatial_sizes();
        let ch = &cfg.block_channels;

        let mut blocks = Vec::with_capacity(N_BLOCKS);
        let mut in_c = cfg.in_channels;
        for (k, &c) in ch.iter().enumerate() {
            blocks.push(ResBlock::new(&mut reg, &format!("encoder.block{}", k + 1), in_c, c, &mut rng));
            in_c = c;
        }
        let latent = Dense::new(&mut reg, "latent", ch[N_BLOCKS - 1], cfg.latent_dim, 3.0, &mut rng);
        let decoder = cfg
            .variant
            .has_decoder()
            .then(|| Decoder::new(&mut reg, cfg.latent_dim, ch, &sizes, cfg.in_channels, &mut rng));

        let depths = cfg.active_depths();
        let mut age_heads = vec![Head::new(&mut reg, HeadKind::Age, None, cfg.latent_dim, &cfg.head_hidden, cfg.dropout_rate, &mut rng)];
        for &d in &depths {
            age_heads.push(Head::new(&mut reg, HeadKind::Age, Some(d), ch[d - 1], &cfg.head_hidden, cfg.dropout_rate, &mut rng));
        }
        let mut sex_heads = Vec::new();
        if cfg.variant.has_sex_heads() {
            sex_heads.push(Head::new(&mut reg, HeadKind::Sex, None, cfg.latent_dim, &cfg.head_hidden, cfg.dropout_rate, &mut rng));
            for &d in &depths {
                sex_heads.push(Head::new(&mut reg, HeadKind::Sex, Some(d), ch[d - 1], &cfg.head_hidden, cfg.dropout_rate, &mut rng));
            }
        }
        Ok(Model {
            cfg: cfg.clone(),
            blocks,
            latent,
            decoder,
            age_heads,
            sex_heads,
            age_scaling: AgeScaling::default(),
            n_param_tensors: reg.count(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Shallow depths in head order (after the final head).
    pub fn depths(&self) -> Vec<usize> {
        self.age_heads.iter().filter_map(|h| h.depth).collect()
    }

    pub fn n_age_heads(&self) -> usize {
        self.age_heads.len()
    }

    pub fn n_sex_heads(&self) -> usize {
        self.sex_heads.len()
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn age_scaling(&self) -> AgeScaling {
        self.age_scaling
    }

    /// Sets the map from the age heads' linear unit to years, typically the
    /// training-set age mean and standard deviation.
    pub fn set_age_scaling(&mut self, scaling: AgeScaling) {
        self.age_scaling = scaling;
    }

    pub fn n_param_tensors(&self) -> usize {
        self.n_param_tensors
    }

    /// Parameters in id order.
    pub fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.blocks.iter().flat_map(ResBlock::params).collect();
        p.extend(self.latent.params());
        if let Some(d) = &self.decoder {
            p.extend(d.params());
        }
        p.extend(self.age_heads.iter().flat_map(Head::params));
        p.extend(self.sex_heads.iter().flat_map(Head::params));
        p.sort_by_key(|p| p.id);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.blocks.iter_mut().flat_map(ResBlock::params_mut).collect();
        p.extend(self.latent.params_mut());
        if let Some(d) = &mut self.decoder {
            p.extend(d.params_mut());
        }
        p.extend(self.age_heads.iter_mut().flat_map(Head::params_mut));
        p.extend(self.sex_heads.iter_mut().flat_map(Head::params_mut));
        p.sort_by_key(|p| p.id);
        p
    }

    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn batch_norms(&self) -> Vec<&BatchNorm3d> {
        let mut v: Vec<&BatchNorm3d> = self.blocks.iter().map(|b| &b.bn).collect();
        if let Some(d) = &self.decoder {
            v.extend(d.batch_norms());
        }
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm3d> {
        let mut v: Vec<&mut BatchNorm3d> = self.blocks.iter_mut().map(|b| &mut b.bn).collect();
        if let Some(d) = &mut self.decoder {
            v.extend(d.batch_norms_mut());
        }
        v
    }

    /// Non-trainable state: normalisation statistics and the age scaling.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for bn in self.batch_norms() {
            out.push((format!("{}.running_mean", bn.name), bn.running_mean.clone()));
            out.push((format!("{}.running_var", bn.name), bn.running_var.clone()));
        }
        out.push(("age_scaling".into(), vec![self.age_scaling.offset, self.age_scaling.scale]));
        out
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        if name == "age_scaling" {
            if data.len() != 2 {
                return Err(Error::Compatibility("age_scaling buffer must hold two values".into()));
            }
            self.age_scaling = AgeScaling { offset: data[0], scale: data[1] };
            return Ok(());
        }
        for bn in self.batch_norms_mut() {
            let target = if name == format!("{}.running_mean", bn.name) {
                &mut bn.running_mean
            } else if name == format!("{}.running_var", bn.name) {
                &mut bn.running_var
            } else {
                continue;
            };
            if target.len() != data.len() {
                return Err(Error::Compatibility(format!("buffer {name} has {} values, expected {}", data.len(), target.len())));
            }
            target.copy_from_slice(data);
            return Ok(());
        }
        Err(Error::Compatibility(format!("unknown buffer {name}")))
    }

    /// Copies every parameter and buffer whose name and shape match `other`.
    /// Returns the number of parameter tensors copied.
    pub fn copy_matching_from(&mut self, other: &Model) -> usize {
        let src: std::collections::HashMap<&str, &Tensor> = other.params().into_iter().map(|p| (p.name.as_str(), &p.value)).collect();
        let mut copied = 0;
        for p in self.params_mut() {
            if let Some(t) = src.get(p.name.as_str()) {
                if t.shape() == p.value.shape() {
                    p.value = (*t).clone();
                    copied += 1;
                }
            }
        }
        for (name, data) in other.buffers() {
            let _ = self.set_buffer(&name, &data);
        }
        copied
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.cfg.side;
        let want = [x.shape().first().copied().unwrap_or(0), self.cfg.in_channels, s, s, s];
        if x.shape() != want || want[0] == 0 {
            return Err(Error::Shape(format!("model expects [B, {}, {s}, {s}, {s}] input, got {:?}", self.cfg.in_channels, x.shape())));
        }
        Ok(())
    }

    /// Evaluation-mode forward: running normalisation statistics, no dropout.
    pub fn forward(&self, x: &Tensor) -> Result<ModelOutputs> {
        self.check_input(x)?;
        Ok(self.run(x, false, None).0)
    }

    /// Training-mode forward with batch statistics. Dropout is applied only
    /// when an rng is supplied.
    pub fn forward_train(&self, x: &Tensor, dropout_rng: Option<&mut Rng>) -> Result<(ModelOutputs, Tape)> {
        self.check_input(x)?;
        let (out, tape) = self.run(x, true, dropout_rng);
        Ok((out, tape.expect("training forward keeps a tape")))
    }

    fn run(&self, x: &Tensor, train: bool, mut dropout_rng: Option<&mut Rng>) -> (ModelOutputs, Option<Tape>) {
        let mut acts = vec![x.clone()];
        let mut block_bn = Vec::new();
        for block in &self.blocks {
            let (y, cache) = block.forward(acts.last().unwrap(), train);
            block_bn.extend(cache);
            acts.push(y);
        }
        let pooled: Vec<Tensor> = acts[1..].iter().map(global_avg_pool).collect();
        let z = self.latent.forward(&pooled[N_BLOCKS - 1]);

        let (reconstruction, decoder_tape) = match &self.decoder {
            Some(d) => {
                let (r, t) = d.forward(&z, train);
                (Some(r), t)
            }
            None => (None, None),
        };

        let mut run_heads = |heads: &[Head]| -> (Vec<Vec<f64>>, Vec<HeadTape>) {
            let mut preds = Vec::with_capacity(heads.len());
            let mut tapes = Vec::new();
            for h in heads {
                let input = match h.depth {
                    None => &z,
                    Some(d) => &pooled[d - 1],
                };
                let (p, t) = h.forward(input, self.age_scaling, dropout_rng.as_deref_mut(), train);
                preds.push(p);
                tapes.extend(t);
            }
            (preds, tapes)
        };
        let (age_preds, age_tapes) = run_heads(&self.age_heads);
        let (sex_probs, sex_tapes) = run_heads(&self.sex_heads);

        let outputs = ModelOutputs { reconstruction, age_preds, sex_probs, latent: z.clone() };
        let tape = train.then(|| Tape {
            input_shape: x.shape().to_vec(),
            acts,
            block_bn,
            pooled,
            latent: z,
            decoder: decoder_tape,
            age_heads: age_tapes,
            sex_heads: sex_tapes,
        });
        (outputs, tape)
    }

    /// Backpropagates output gradients through the recorded tape.
    pub fn backward(&self, tape: &Tape, grad: &OutputGrads) -> Result<GradStore> {
        if grad.age.len() != self.age_heads.len() || grad.sex.len() != self.sex_heads.len() {
            return Err(Error::Shape("output gradient head count does not match the model".into()));
        }
        if grad.reconstruction.is_some() != self.decoder.is_some() {
            return Err(Error::Shape("reconstruction gradient presence does not match the model".into()));
        }
        let mut grads = GradStore::new(self.n_param_tensors);
        let b = tape.input_shape[0];
        let mut dz = Tensor::zeros(&[b, self.cfg.latent_dim]);
        let mut dpooled: Vec<Option<Tensor>> = vec![None; N_BLOCKS];

        let heads = self.age_heads.iter().zip(&tape.age_heads).zip(&grad.age);
        let heads = heads.chain(self.sex_heads.iter().zip(&tape.sex_heads).zip(&grad.sex));
        for ((head, htape), g) in heads {
            let input = match head.depth {
                None => &tape.latent,
                Some(d) => &tape.pooled[d - 1],
            };
            let dx = head.backward(input, htape, g, self.age_scaling, &mut grads);
            match head.depth {
                None => dz.add_assign(&dx),
                Some(d) => match &mut dpooled[d - 1] {
                    Some(acc) => acc.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                },
            }
        }

        if let (Some(dec), Some(dtape), Some(g)) = (&self.decoder, &tape.decoder, &grad.reconstruction) {
            dz.add_assign(&dec.backward(&tape.latent, dtape, g, &mut grads));
        }

        let dpool5 = self.latent.backward(&tape.pooled[N_BLOCKS - 1], &dz, &mut grads);
        match &mut dpooled[N_BLOCKS - 1] {
            Some(acc) => acc.add_assign(&dpool5),
            slot @ None => *slot = Some(dpool5),
        }

        let mut dact: Option<Tensor> = None;
        for k in (1..=N_BLOCKS).rev() {
            let mut g = match dact.take() {
                Some(g) => g,
                None => Tensor::zeros(tape.acts[k].shape()),
            };
            if let Some(dp) = &dpooled[k - 1] {
                g.add_assign(&global_avg_pool_backward(dp, tape.acts[k].shape()));
            }
            dact = self.blocks[k - 1].backward(&tape.acts[k - 1], &tape.acts[k], &tape.block_bn[k - 1], &g, &mut grads, k > 1);
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a training step into the running
    /// statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        let caches: Vec<&BatchNormCache> = tape
            .block_bn
            .iter()
            .chain(tape.decoder.as_ref().into_iter().flat_map(Decoder::tape_bn))
            .collect();
        for (bn, cache) in self.batch_norms_mut().into_iter().zip(caches) {
            bn.update_running_stats(cache);
        }
    }

    /// Encoder block output grads live on block parameters; returns the
    /// gradient tensors of block `k` (1-based) for inspection.
    pub fn block_param_ids(&self, k: usize) -> Vec<crate::nn::ParamId> {
        self.blocks[k - 1].params().iter().map(|p| p.id).collect()
    }
}
