use rand::Rng;

use super::{GradStore, Param, ParamRegistry, Tensor};

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    /// `gain` scales the fan-in uniform bound: 6 for ELU-followed layers,
    /// 3 for linear outputs.
    pub fn new<R: Rng + ?Sized>(reg: &mut ParamRegistry, name: &str, n_in: usize, n_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / n_in as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Dense {
            weight: reg.param(format!("{name}.weight"), Tensor::from_vec(&[n_out, n_in], w)),
            bias: reg.param(format!("{name}.bias"), Tensor::zeros(&[n_out])),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (b, n_in, n_out) = (x.batch(), self.n_in(), self.n_out());
        assert_eq!(x.per_item(), n_in, "dense input width");
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = Vec::with_capacity(b * n_out);
        for row in x.data().chunks(n_in) {
            for (o, wr) in w.chunks(n_in).enumerate() {
                out.push(bias[o] + row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        Tensor::from_vec(&[b, n_out], out)
    }

    pub fn backward(&self, x: &Tensor, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        let w = self.weight.value.data();
        let mut dw = vec![0.0; n_in * n_out];
        let mut db = vec![0.0; n_out];
        let mut dx = vec![0.0; x.len()];
        for ((xr, gr), dxr) in x.data().chunks(n_in).zip(grad.data().chunks(n_out)).zip(dx.chunks_mut(n_in)) {
            for (o, &g) in gr.iter().enumerate() {
                db[o] += g;
                let dwr = &mut dw[o * n_in..(o + 1) * n_in];
                let wr = &w[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    dwr[i] += g * xr[i];
                    dxr[i] += g * wr[i];
                }
            }
        }
        grads.accumulate(self.weight.id, Tensor::from_vec(&[n_out, n_in], dw));
        grads.accumulate(self.bias.id, Tensor::from_vec(&[n_out], db));
        Tensor::from_vec(x.shape(), dx)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    /// `n_in * n_out + n_out`
    pub fn param_count(&self) -> usize {
        self.n_in() * self.n_out() + self.n_out()
    }
}
