use crate::error::{Error, Result};
use crate::numerics::Rng;

/// `(name, shape, data)` of one parameter tensor.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);

/// Ordered access to every parameter tensor.
///
/// `tensors` and `tensors_mut` must list the same tensors in the same order;
/// optimizers and checkpoints zip over them.
pub trait Parameters {
    fn tensors(&self) -> Vec<NamedTensor<'_>>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// All parameters concatenated in tensor order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn uniform_fill(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-scale, scale)).collect()
}

/// `y = W x + b` with `W` stored `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn uniform(in_dim: usize, out_dim: usize, scale: f64, rng: &Rng) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: uniform_fill(&mut rng.child("weight"), in_dim * out_dim, scale),
            bias: uniform_fill(&mut rng.child("bias"), out_dim, scale),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::dims(self.in_dim, x.len()));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o];
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                acc
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.out_dim);
        let mut grad_in = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let g = grad_out[o];
            grads.bias[o] += g;
            let base = o * self.in_dim;
            for i in 0..self.in_dim {
                grads.weight[base + i] += g * x[i];
                grad_in[i] += self.weight[base + i] * g;
            }
        }
        grad_in
    }

    pub(crate) fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push((
            format!("{prefix}.weight"),
            vec![self.out_dim, self.in_dim],
            &self.weight,
        ));
        out.push((format!("{prefix}.bias"), vec![self.out_dim], &self.bias));
    }

    pub(crate) fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

pub(crate) fn tanh_vec(z: Vec<f64>) -> Vec<f64> {
    z.into_iter().map(f64::tanh).collect()
}

/// `∂L/∂z` for `h = tanh(z)` given `∂L/∂h` and `h`.
pub(crate) fn tanh_backward(h: &[f64], grad_h: &[f64]) -> Vec<f64> {
    h.iter().zip(grad_h).map(|(h, g)| g * (1.0 - h * h)).collect()
}
