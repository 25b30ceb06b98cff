use rand::Rng;

use super::Tensor;

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Gradient through ELU given the activation output `y`.
pub fn elu_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { g * (y + 1.0) })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    /// Returns the masked output and the scale mask (0 or `1/(1-rate)`).
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> (Tensor, Tensor) {
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        (Tensor::from_vec(x.shape(), out), Tensor::from_vec(x.shape(), mask))
    }

    pub fn backward(mask: &Tensor, grad: &Tensor) -> Tensor {
        let data = grad.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
        Tensor::from_vec(grad.shape(), data)
    }
}
