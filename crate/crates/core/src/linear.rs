//! Per-pixel affine maps over planar grids, with their reverse-mode rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PlanarGrid;

/// Affine map `out = W in + b` applied independently at every pixel.
/// `weight` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in `±sqrt(6 / in_dim) * gain`; biases start at zero.
    pub fn random<R: Rng>(in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt() * gain;
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    #[inline]
    pub fn w(&self, out: usize, input: usize) -> f64 {
        self.weight[out * self.in_dim + input]
    }

    pub fn forward(&self, input: &PlanarGrid) -> Result<PlanarGrid> {
        if input.channels() != self.in_dim {
            return Err(Error::invalid(format!(
                "linear layer expects {} channels, got {}",
                self.in_dim,
                input.channels()
            )));
        }
        let mut out = PlanarGrid::zeros(self.out_dim, input.height(), input.width());
        for o in 0..self.out_dim {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_dim {
                let w = self.weight[o * self.in_dim + i];
                if w == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(input.plane(i)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the cotangent
    /// with respect to `input`.
    pub fn backward(&self, input: &PlanarGrid, d_out: &PlanarGrid, grad: &mut Linear) -> PlanarGrid {
        debug_assert_eq!(d_out.channels(), self.out_dim);
        debug_assert_eq!(input.channels(), self.in_dim);
        let mut d_in = PlanarGrid::zeros(self.in_dim, input.height(), input.width());
        for o in 0..self.out_dim {
            let g = d_out.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_dim {
                let x = input.plane(i);
                grad.weight[o * self.in_dim + i] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                let w = self.weight[o * self.in_dim + i];
                for (d, gv) in d_in.plane_mut(i).iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
        d_in
    }

    /// Like [`Linear::backward`] but skips the input cotangent.
    pub fn backward_params(&self, input: &PlanarGrid, d_out: &PlanarGrid, grad: &mut Linear) {
        for o in 0..self.out_dim {
            let g = d_out.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_dim {
                let x = input.plane(i);
                grad.weight[o * self.in_dim + i] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub(crate) fn relu_in_place(grid: &mut PlanarGrid) {
    for v in grid.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes cotangent entries where the ReLU output was not positive.
pub(crate) fn relu_backward_in_place(activated: &PlanarGrid, cotangent: &mut PlanarGrid) {
    for (g, a) in cotangent.values_mut().iter_mut().zip(activated.values()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
