use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rayon::prelude::*;

use super::{GradStore, Param, ParamRegistry, Tensor};

/// Strided 3D kernel relating a "big" grid to a "small" grid through
/// `big = small * stride + offset - pad`.
///
/// A forward convolution maps big (input) to small (output); a transposed
/// convolution maps small (input) to big (output). Weights are laid out
/// `[small_c, big_c, k, k, k]` in both cases, which is the usual
/// `[out, in, ...]` layout for convolutions and `[in, out, ...]` for
/// transposed convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StridedKernel {
    pub small_c: usize,
    pub big_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

type Ranges = Vec<(usize, usize)>;

impl StridedKernel {
    pub fn weight_len(&self) -> usize {
        self.small_c * self.big_c * self.k.pow(3)
    }

    /// For each kernel offset, the half-open range of small indices whose
    /// big partner falls inside `[0, n_big)`.
    fn axis_ranges(&self, n_small: usize, n_big: usize) -> Ranges {
        let (s, p) = (self.stride as isize, self.pad as isize);
        (0..self.k as isize)
            .map(|kk| {
                let lo = if kk >= p { 0 } else { (p - kk + s - 1) / s };
                let span = n_big as isize + p - kk;
                let hi = if span <= 0 { 0 } else { ((span + s - 1) / s).min(n_small as isize) };
                (lo as usize, hi.max(lo) as usize)
            })
            .collect()
    }

    fn ranges(&self, small: [usize; 3], big: [usize; 3]) -> [Ranges; 3] {
        [
            self.axis_ranges(small[0], big[0]),
            self.axis_ranges(small[1], big[1]),
            self.axis_ranges(small[2], big[2]),
        ]
    }

    /// Unfolds one batch item of the big grid into a `[big_c * k^3, n_small]`
    /// matrix whose column `o` holds the receptive field of small voxel `o`
    /// (zero where it falls in the padding).
    fn im2col(&self, big: &[f64], big_dims: [usize; 3], small_dims: [usize; 3], r: &[Ranges; 3]) -> Array2<f64> {
        let k = self.k;
        let (s, p) = (self.stride, self.pad);
        let [_, bh, bw] = big_dims;
        let [_, sh, sw] = small_dims;
        let nb: usize = big_dims.iter().product();
        let ns: usize = small_dims.iter().product();
        let mut cols = Array2::<f64>::zeros((self.big_c * k * k * k, ns));
        let out = cols.as_slice_mut().expect("standard layout");
        for bc in 0..self.big_c {
            let inp = &big[bc * nb..][..nb];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((bc * k + kz) * k + ky) * k + kx;
                        let dst = &mut out[row * ns..][..ns];
                        let (xl, xh) = r[2][kx];
                        for oz in r[0][kz].0..r[0][kz].1 {
                            let iz = oz * s + kz - p;
                            for oy in r[1][ky].0..r[1][ky].1 {
                                let iy = oy * s + ky - p;
                                let irow = &inp[(iz * bh + iy) * bw..][..bw];
                                let drow = &mut dst[(oz * sh + oy) * sw..][..sw];
                                for ox in xl..xh {
                                    drow[ox] = irow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back onto
    /// the big grid of one batch item.
    fn col2im(&self, cols: &Array2<f64>, big: &mut [f64], big_dims: [usize; 3], small_dims: [usize; 3], r: &[Ranges; 3]) {
        let k = self.k;
        let (s, p) = (self.stride, self.pad);
        let [_, bh, bw] = big_dims;
        let [_, sh, sw] = small_dims;
        let nb: usize = big_dims.iter().product();
        let ns: usize = small_dims.iter().product();
        let src_all = cols.as_slice().expect("standard layout");
        for bc in 0..self.big_c {
            let out = &mut big[bc * nb..][..nb];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((bc * k + kz) * k + ky) * k + kx;
                        let src = &src_all[row * ns..][..ns];
                        let (xl, xh) = r[2][kx];
                        for oz in r[0][kz].0..r[0][kz].1 {
                            let iz = oz * s + kz - p;
                            for oy in r[1][ky].0..r[1][ky].1 {
                                let iy = oy * s + ky - p;
                                let orow = &mut out[(iz * bh + iy) * bw..][..bw];
                                let srow = &src[(oz * sh + oy) * sw..][..sw];
                                for ox in xl..xh {
                                    orow[ox * s + kx - p] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_matrix<'a>(&self, w: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.small_c, self.big_c * self.k.pow(3)), w).expect("weight length")
    }

    /// `small[b, sc, o] = sum_{bc, k} w[sc, bc, k] * big[b, bc, o*s + k - p]`
    pub fn to_small(&self, w: &[f64], big: &Tensor, small_dims: [usize; 3]) -> Tensor {
        let batch = big.batch();
        let bd = dims3(big);
        let ns: usize = small_dims.iter().product();
        let nb: usize = bd.iter().product();
        let r = self.ranges(small_dims, bd);
        let wm = self.weight_matrix(w);
        let mut out = Tensor::zeros(&[batch, self.small_c, small_dims[0], small_dims[1], small_dims[2]]);
        let big_data = big.data();
        out.data_mut().par_chunks_mut(self.small_c * ns).enumerate().for_each(|(b, o)| {
            let cols = self.im2col(&big_data[b * self.big_c * nb..][..self.big_c * nb], bd, small_dims, &r);
            let mut om = ArrayViewMut2::from_shape((self.small_c, ns), o).expect("output block");
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut om);
        });
        out
    }

    /// Adjoint of [`to_small`](Self::to_small).
    pub fn to_big(&self, w: &[f64], small: &Tensor, big_dims: [usize; 3]) -> Tensor {
        let batch = small.batch();
        let sd = dims3(small);
        let ns: usize = sd.iter().product();
        let nb: usize = big_dims.iter().product();
        let r = self.ranges(sd, big_dims);
        let wm = self.weight_matrix(w);
        let mut out = Tensor::zeros(&[batch, self.big_c, big_dims[0], big_dims[1], big_dims[2]]);
        let small_data = small.data();
        out.data_mut().par_chunks_mut(self.big_c * nb).enumerate().for_each(|(b, o)| {
            let sm = ArrayView2::from_shape((self.small_c, ns), &small_data[b * self.small_c * ns..][..self.small_c * ns]).expect("input block");
            let cols = wm.t().dot(&sm);
            let cols = if cols.is_standard_layout() { cols } else { cols.as_standard_layout().into_owned() };
            self.col2im(&cols, o, big_dims, sd, &r);
        });
        out
    }

    /// `dw[sc, bc, k] = sum_{b, o} big[b, bc, o*s + k - p] * small[b, sc, o]`
    pub fn weight_grad(&self, big: &Tensor, small: &Tensor) -> Vec<f64> {
        let batch = big.batch();
        let bd = dims3(big);
        let sd = dims3(small);
        let ns: usize = sd.iter().product();
        let nb: usize = bd.iter().product();
        let r = self.ranges(sd, bd);
        let (big_data, small_data) = (big.data(), small.data());
        let per_item: Vec<Array2<f64>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let cols = self.im2col(&big_data[b * self.big_c * nb..][..self.big_c * nb], bd, sd, &r);
                let sm = ArrayView2::from_shape((self.small_c, ns), &small_data[b * self.small_c * ns..][..self.small_c * ns]).expect("grad block");
                sm.dot(&cols.t())
            })
            .collect();
        let mut dw = Array2::<f64>::zeros((self.small_c, self.big_c * self.k.pow(3)));
        for m in &per_item {
            dw += m;
        }
        dw.into_raw_vec_and_offset().0
    }
}

fn dims3(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    assert_eq!(s.len(), 5, "expected a [B, C, D, H, W] tensor, got {s:?}");
    [s[2], s[3], s[4]]
}

fn add_channel_bias(x: &mut Tensor, bias: &[f64]) {
    let c = x.shape()[1];
    let s = x.spatial();
    x.data_mut()
        .par_chunks_mut(s)
        .enumerate()
        .for_each(|(i, ch)| ch.iter_mut().for_each(|v| *v += bias[i % c]));
}

fn channel_sums(g: &Tensor) -> Vec<f64> {
    let c = g.shape()[1];
    let s = g.spatial();
    let mut out = vec![0.0; c];
    for (i, ch) in g.data().chunks(s).enumerate() {
        out[i % c] += ch.iter().sum::<f64>();
    }
    out
}

fn uniform_init<R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// 3D convolution with cubic kernel, symmetric zero padding and stride.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub kernel: StridedKernel,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let kernel = StridedKernel { small_c: out_c, big_c: in_c, k, stride, pad };
        let fan_in = in_c * k.pow(3);
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_vec(&[out_c, in_c, k, k, k], uniform_init(kernel.weight_len(), bound, rng));
        let weight = reg.param(format!("{name}.weight"), w);
        let bias = bias.then(|| reg.param(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Conv3d { kernel, weight, bias }
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let StridedKernel { k, stride, pad, .. } = self.kernel;
        input.map(|n| (n + 2 * pad - k) / stride + 1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.kernel.to_small(self.weight.value.data(), x, self.output_dims(dims3(x)));
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b.value.data());
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&self, x: &Tensor, grad: &Tensor, grads: &mut GradStore, need_input_grad: bool) -> Option<Tensor> {
        let dw = self.kernel.weight_grad(x, grad);
        grads.accumulate(self.weight.id, Tensor::from_vec(self.weight.value.shape(), dw));
        if let Some(b) = &self.bias {
            grads.accumulate(b.id, Tensor::from_vec(&[self.kernel.small_c], channel_sums(grad)));
        }
        need_input_grad.then(|| self.kernel.to_big(self.weight.value.data(), grad, dims3(x)))
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

/// Transposed 3D convolution. The output size along each axis is
/// `(n - 1) * stride - 2 * pad + k + output_padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub kernel: StridedKernel,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        reg: &mut ParamRegistry,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let kernel = StridedKernel { small_c: in_c, big_c: out_c, k, stride, pad };
        // each output voxel receives roughly in_c * (k/stride)^3 contributions
        let fan_in = (in_c * k.pow(3)) as f64 / (stride.pow(3)) as f64;
        let bound = (6.0 / fan_in.max(1.0)).sqrt();
        let w = Tensor::from_vec(&[in_c, out_c, k, k, k], uniform_init(kernel.weight_len(), bound, rng));
        let weight = reg.param(format!("{name}.weight"), w);
        let bias = bias.then(|| reg.param(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        ConvTranspose3d { kernel, weight, bias }
    }

    pub fn forward(&self, x: &Tensor, out_dims: [usize; 3]) -> Tensor {
        let mut y = self.kernel.to_big(self.weight.value.data(), x, out_dims);
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b.value.data());
        }
        y
    }

    pub fn backward(&self, x: &Tensor, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let dw = self.kernel.weight_grad(grad, x);
        grads.accumulate(self.weight.id, Tensor::from_vec(self.weight.value.shape(), dw));
        if let Some(b) = &self.bias {
            grads.accumulate(b.id, Tensor::from_vec(&[self.kernel.big_c], channel_sums(grad)));
        }
        self.kernel.to_small(self.weight.value.data(), grad, dims3(x))
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Direct definition of a strided 3D cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [b, ic, d, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]];
        let (oc, k) = (w.shape()[0], w.shape()[2]);
        let o = |n: usize| (n + 2 * pad - k) / stride + 1;
        let (od, oh, ow) = (o(d), o(h), o(wd));
        let mut out = Tensor::zeros(&[b, oc, od, oh, ow]);
        for bi in 0..b {
            for c in 0..oc {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..ic {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (z * stride + kz) as isize - pad as isize;
                                            let iy = (y * stride + ky) as isize - pad as isize;
                                            let ix = (xx * stride + kx) as isize - pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((bi * ic + ci) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                            let wi = (((c * ic + ci) * k + kz) * k + ky) * k + kx;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((bi * oc + c) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_naive_definition_with_odd_sizes() {
        let mut reg = ParamRegistry::new();
        let mut r = rng::seeded(3);
        let conv = Conv3d::new(&mut reg, "c", 2, 3, 3, 2, 1, false, &mut r);
        let x = random_tensor(&[2, 2, 5, 6, 7], 11);
        let got = conv.forward(&x);
        let want = naive_conv(&x, &conv.weight.value, 2, 1);
        assert_eq!(got.shape(), &[2, 3, 3, 3, 4]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn to_big_is_adjoint_of_to_small() {
        // <A x, y> == <x, A^T y>
        let kern = StridedKernel { small_c: 3, big_c: 2, k: 3, stride: 2, pad: 1 };
        let w = random_tensor(&[3, 2, 3, 3, 3], 5);
        let big = random_tensor(&[2, 2, 7, 6, 5], 6);
        let small = random_tensor(&[2, 3, 4, 3, 3], 7);
        let lhs = dot(&kern.to_small(w.data(), &big, [4, 3, 3]), &small);
        let rhs = dot(&big, &kern.to_big(w.data(), &small, [7, 6, 5]));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn weight_grad_matches_directional_derivative() {
        // d<A_w x, y>/dw = weight_grad(x, y); the map is linear in w.
        let kern = StridedKernel { small_c: 2, big_c: 2, k: 3, stride: 2, pad: 1 };
        let w = random_tensor(&[2, 2, 3, 3, 3], 8);
        let dir = random_tensor(&[2, 2, 3, 3, 3], 9);
        let big = random_tensor(&[1, 2, 6, 6, 6], 10);
        let small = random_tensor(&[1, 2, 3, 3, 3], 12);
        let g = Tensor::from_vec(w.shape(), kern.weight_grad(&big, &small));
        let f = |w: &[f64]| dot(&kern.to_small(w, &big, [3, 3, 3]), &small);
        let wp: Vec<f64> = w.data().iter().zip(dir.data()).map(|(a, b)| a + b).collect();
        let directional = f(&wp) - f(w.data());
        assert!((directional - dot(&g, &dir)).abs() < 1e-10);
    }

    #[test]
    fn transposed_output_size_with_output_padding() {
        let mut reg = ParamRegistry::new();
        let mut r = rng::seeded(1);
        let t = ConvTranspose3d::new(&mut reg, "t", 2, 1, 3, 2, 1, true, &mut r);
        let x = random_tensor(&[1, 2, 3, 3, 3], 2);
        // 2n - 1 + output_padding
        assert_eq!(t.forward(&x, [5, 6, 5]).shape(), &[1, 1, 5, 6, 5]);
    }
}
