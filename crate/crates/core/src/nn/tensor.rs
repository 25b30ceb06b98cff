use rayon::prelude::*;

/// Dense row-major `f64` tensor. Volumes use the layout `[B, C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch entry.
    pub fn per_item(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Spatial element count of a `[B, C, ...]` tensor.
    pub fn spatial(&self) -> usize {
        self.shape[2..].iter().product()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.par_iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch entry as a `[1, ...]` tensor.
    pub fn item(&self, b: usize) -> Tensor {
        let n = self.per_item();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[b * n..(b + 1) * n].to_vec() }
    }
}

/// Mean over spatial positions: `[B, C, ...] -> [B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let s = x.spatial();
    let data = x.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
    Tensor::from_vec(&[b, c], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, input_shape: &[usize]) -> Tensor {
    let s: usize = input_shape[2..].iter().product();
    let mut out = Tensor::zeros(input_shape);
    out.data_mut()
        .chunks_mut(s)
        .zip(grad.data())
        .for_each(|(ch, &g)| ch.fill(g / s as f64));
    out
}
