use crate::nn::{
    elu, elu_backward, sigmoid, BatchNorm3d, BatchNormCache, Conv3d, ConvTranspose3d, Dense, Dropout, GradStore, Param,
    ParamRegistry, Tensor,
};
use crate::rng::Rng;

/// `y = ELU(BN(conv3x3x3_s2(x)) + proj1x1x1_s2(x))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    pub proj: Conv3d,
}

impl ResBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_c: usize, out_c: usize, rng: &mut Rng) -> Self {
        ResBlock {
            conv: Conv3d::new(reg, &format!("{name}.conv"), in_c, out_c, 3, 2, 1, false, rng),
            bn: BatchNorm3d::new(reg, &format!("{name}.bn"), out_c),
            proj: Conv3d::new(reg, &format!("{name}.proj"), in_c, out_c, 1, 2, 0, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, Option<BatchNormCache>) {
        let c = self.conv.forward(x);
        let (mut n, cache) = if train {
            let (n, cache) = self.bn.forward_train(&c);
            (n, Some(cache))
        } else {
            (self.bn.forward_eval(&c), None)
        };
        n.add_assign(&self.proj.forward(x));
        (n.map(elu), cache)
    }

    pub fn backward(
        &self,
        x: &Tensor,
        y: &Tensor,
        cache: &BatchNormCache,
        grad: &Tensor,
        grads: &mut GradStore,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let ds = elu_backward(y, grad);
        let dc = self.bn.backward(cache, &ds, grads);
        let dx_main = self.conv.backward(x, &dc, grads, need_input_grad);
        let dx_skip = self.proj.backward(x, &ds, grads, need_input_grad);
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p.extend(self.proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p.extend(self.proj.params_mut());
        p
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub tconv: ConvTranspose3d,
    /// `None` on the output stage, which ends in a sigmoid instead.
    pub bn: Option<BatchNorm3d>,
    pub out_side: usize,
}

/// Latent vector back to a `[B, 1, S, S, S]` volume through five stride-2
/// transposed convolutions.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub seed: Dense,
    pub seed_channels: usize,
    pub seed_side: usize,
    pub stages: Vec<DecoderStage>,
}

#[derive(Debug, Clone)]
pub struct DecoderTape {
    /// Inputs of each stage; `acts[0]` is the reshaped seed activation.
    acts: Vec<Tensor>,
    bn: Vec<Option<BatchNormCache>>,
    output: Tensor,
}

impl Decoder {
    /// `channels` are the encoder block widths; `sizes` the encoder spatial
    /// sizes including the input side.
    pub fn new(reg: &mut ParamRegistry, latent_dim: usize, channels: &[usize], sizes: &[usize], out_c: usize, rng: &mut Rng) -> Self {
        let n = channels.len();
        let seed_channels = channels[n - 1];
        let seed_side = sizes[n];
        let seed = Dense::new(reg, "decoder.seed", latent_dim, seed_channels * seed_side.pow(3), 6.0, rng);
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let in_c = channels[n - 1 - i];
            let last = i == n - 1;
            let out = if last { out_c } else { channels[n - 2 - i] };
            let name = format!("decoder.stage{}", i + 1);
            stages.push(DecoderStage {
                tconv: ConvTranspose3d::new(reg, &format!("{name}.tconv"), in_c, out, 3, 2, 1, last, rng),
                bn: (!last).then(|| BatchNorm3d::new(reg, &format!("{name}.bn"), out)),
                out_side: sizes[n - 1 - i],
            });
        }
        Decoder { seed, seed_channels, seed_side, stages }
    }

    pub fn forward(&self, z: &Tensor, train: bool) -> (Tensor, Option<DecoderTape>) {
        let b = z.batch();
        let h = self.seed.forward(z).map(elu);
        let mut a = h.reshape(&[b, self.seed_channels, self.seed_side, self.seed_side, self.seed_side]);
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let t = stage.tconv.forward(&a, [stage.out_side; 3]);
            let next = match &stage.bn {
                Some(bn) if train => {
                    let (n, cache) = bn.forward_train(&t);
                    caches.push(Some(cache));
                    n.map(elu)
                }
                Some(bn) => bn.forward_eval(&t).map(elu),
                None => {
                    caches.push(None);
                    t.map(sigmoid)
                }
            };
            if train {
                acts.push(a);
            }
            a = next;
        }
        let tape = train.then(|| DecoderTape { acts, bn: caches, output: a.clone() });
        (a, tape)
    }

    /// Returns the gradient with respect to the latent input.
    pub fn backward(&self, z: &Tensor, tape: &DecoderTape, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let mut g = Tensor::from_vec(
            grad.shape(),
            tape.output.data().iter().zip(grad.data()).map(|(y, g)| g * y * (1.0 - y)).collect(),
        );
        for (i, stage) in self.stages.iter().enumerate().rev() {
            if let (Some(bn), Some(cache)) = (&stage.bn, &tape.bn[i]) {
                let out = &tape.acts[i + 1];
                g = bn.backward(cache, &elu_backward(out, &g), grads);
            }
            g = stage.tconv.backward(&tape.acts[i], &g, grads);
        }
        let seed_act = tape.acts[0].clone().reshape(&[z.batch(), self.seed.n_out()]);
        let g = elu_backward(&seed_act, &g.reshape(&[z.batch(), self.seed.n_out()]));
        self.seed.backward(z, &g, grads)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.seed.params();
        for s in &self.stages {
            p.extend(s.tconv.params());
            if let Some(bn) = &s.bn {
                p.extend(bn.params());
            }
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.seed.params_mut();
        for s in &mut self.stages {
            p.extend(s.tconv.params_mut());
            if let Some(bn) = &mut s.bn {
                p.extend(bn.params_mut());
            }
        }
        p
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm3d> {
        self.stages.iter_mut().filter_map(|s| s.bn.as_mut())
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm3d> {
        self.stages.iter().filter_map(|s| s.bn.as_ref())
    }

    pub(crate) fn tape_bn(tape: &DecoderTape) -> impl Iterator<Item = &BatchNormCache> {
        tape.bn.iter().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Age,
    Sex,
}

/// Affine map from the age head's linear unit to years.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeScaling {
    pub offset: f64,
    pub scale: f64,
}

impl Default for AgeScaling {
    fn default() -> Self {
        AgeScaling { offset: 50.0, scale: 20.0 }
    }
}

/// dense -> ELU -> dense -> ELU -> dropout -> single output unit.
#[derive(Debug, Clone)]
pub struct Head {
    pub kind: HeadKind,
    /// `None` for the final head on the latent code.
    pub depth: Option<usize>,
    pub fc1: Dense,
    pub fc2: Dense,
    pub out: Dense,
    pub dropout: Dropout,
}

#[derive(Debug, Clone)]
pub struct HeadTape {
    h1: Tensor,
    h2: Tensor,
    mask: Option<Tensor>,
    h2d: Tensor,
    pred: Vec<f64>,
}

impl Head {
    pub fn new(reg: &mut ParamRegistry, kind: HeadKind, depth: Option<usize>, n_in: usize, hidden: &[usize], dropout: f64, rng: &mut Rng) -> Self {
        let task = match kind {
            HeadKind::Age => "age",
            HeadKind::Sex => "sex",
        };
        let place = depth.map_or_else(|| "final".to_string(), |d| format!("d{d}"));
        let name = format!("head.{task}.{place}");
        Head {
            kind,
            depth,
            fc1: Dense::new(reg, &format!("{name}.fc1"), n_in, hidden[0], 6.0, rng),
            fc2: Dense::new(reg, &format!("{name}.fc2"), hidden[0], hidden[1], 6.0, rng),
            out: Dense::new(reg, &format!("{name}.out"), hidden[1], 1, 3.0, rng),
            dropout: Dropout { rate: dropout },
        }
    }

    pub fn forward(&self, x: &Tensor, age: AgeScaling, dropout_rng: Option<&mut Rng>, keep_tape: bool) -> (Vec<f64>, Option<HeadTape>) {
        let h1 = self.fc1.forward(x).map(elu);
        let h2 = self.fc2.forward(&h1).map(elu);
        let (h2d, mask) = match dropout_rng {
            Some(rng) if self.dropout.rate > 0.0 => {
                let (d, m) = self.dropout.forward(&h2, rng);
                (d, Some(m))
            }
            _ => (h2.clone(), None),
        };
        let u = self.out.forward(&h2d);
        let pred: Vec<f64> = match self.kind {
            HeadKind::Age => u.data().iter().map(|&v| age.offset + age.scale * v).collect(),
            HeadKind::Sex => u.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let tape = keep_tape.then(|| HeadTape { h1, h2, mask, h2d, pred: pred.clone() });
        (pred, tape)
    }

    /// `grad` is dL/d(prediction) per sample; returns dL/d(input).
    pub fn backward(&self, x: &Tensor, tape: &HeadTape, grad: &[f64], age: AgeScaling, grads: &mut GradStore) -> Tensor {
        let du: Vec<f64> = match self.kind {
            HeadKind::Age => grad.iter().map(|g| g * age.scale).collect(),
            HeadKind::Sex => grad.iter().zip(&tape.pred).map(|(g, p)| g * p * (1.0 - p)).collect(),
        };
        let du = Tensor::from_vec(&[grad.len(), 1], du);
        let mut dh2 = self.out.backward(&tape.h2d, &du, grads);
        if let Some(mask) = &tape.mask {
            dh2 = Dropout::backward(mask, &dh2);
        }
        let dh1 = self.fc2.backward(&tape.h1, &elu_backward(&tape.h2, &dh2), grads);
        self.fc1.backward(x, &elu_backward(&tape.h1, &dh1), grads)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.fc1.params_mut();
        p.extend(self.fc2.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}
