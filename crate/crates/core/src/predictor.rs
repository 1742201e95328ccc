//! Per-level pixel classifier: a two-layer MLP on the fused features, whose
//! logits are bilinearly upsampled to image resolution before the softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::LevelRange;
use crate::grid::{softmax_channels, upsample_adjoint, upsample_bilinear, PlanarGrid};
use crate::linear::{relu_backward_in_place, relu_in_place, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn classes(&self) -> usize {
        self.output.out_dim
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    fn hidden_activations(&self, features: &PlanarGrid) -> Result<PlanarGrid> {
        let mut h = self.hidden.forward(features)?;
        relu_in_place(&mut h);
        Ok(h)
    }

    /// Low-resolution logits `g(F_l)`.
    pub fn logits(&self, features: &PlanarGrid) -> Result<PlanarGrid> {
        self.output.forward(&self.hidden_activations(features)?)
    }
}

/// One MLP per level, indexed by `level - l_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub levels: LevelRange,
    pub per_level: Vec<Mlp>,
}

impl PredictorParams {
    pub fn zeros(levels: LevelRange, fused_width: usize, hidden_width: usize, classes: usize) -> Self {
        Self {
            levels,
            per_level: (0..levels.len())
                .map(|_| Mlp {
                    hidden: Linear::zeros(fused_width, hidden_width),
                    output: Linear::zeros(hidden_width, classes),
                })
                .collect(),
        }
    }

    pub fn random<R: Rng>(
        levels: LevelRange,
        fused_width: usize,
        hidden_width: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            levels,
            per_level: (0..levels.len())
                .map(|_| Mlp {
                    hidden: Linear::random(fused_width, hidden_width, 1.0, rng),
                    output: Linear::random(hidden_width, classes, 0.5, rng),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels,
            per_level: self.per_level.iter().map(Mlp::zeros_like).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.per_level[0].classes()
    }

    pub fn level(&self, level: usize) -> Result<&Mlp> {
        if !self.levels.contains(level) {
            return Err(Error::invalid(format!("no predictor for level {level}")));
        }
        Ok(&self.per_level[self.levels.index(level)])
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.per_level
            .iter()
            .flat_map(|m| m.hidden.tensors().into_iter().chain(m.output.tensors()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.per_level
            .iter_mut()
            .flat_map(|m| {
                let Mlp { hidden, output } = m;
                hidden.tensors_mut().into_iter().chain(output.tensors_mut())
            })
            .collect()
    }
}

/// Full-resolution class probabilities produced at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub level: usize,
    pub probabilities: PlanarGrid,
}

impl ProbabilityMap {
    pub fn height(&self) -> usize {
        self.probabilities.height()
    }

    pub fn width(&self) -> usize {
        self.probabilities.width()
    }

    pub fn classes(&self) -> usize {
        self.probabilities.channels()
    }

    #[inline]
    pub fn prob(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probabilities.get(class, row, col)
    }
}

fn check_level_grid(f_l: &PlanarGrid, level: usize, full_height: usize, full_width: usize) -> Result<()> {
    let s = LevelRange::stride(level);
    if f_l.height() * s != full_height || f_l.width() * s != full_width {
        return Err(Error::invalid(format!(
            "features {}x{} at level {level} do not match image {full_height}x{full_width}",
            f_l.height(),
            f_l.width()
        )));
    }
    Ok(())
}

/// `softmax(up_{2^l}(mlp(F_l)))`.
pub fn predict_level(
    f_l: &PlanarGrid,
    params: &PredictorParams,
    level: usize,
    full_height: usize,
    full_width: usize,
) -> Result<ProbabilityMap> {
    check_level_grid(f_l, level, full_height, full_width)?;
    let logits = params.level(level)?.logits(f_l)?;
    let up = upsample_bilinear(&logits, LevelRange::stride(level))?;
    Ok(ProbabilityMap {
        level,
        probabilities: softmax_channels(&up),
    })
}

/// A pixel whose cross-entropy term contributes to the loss, with its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTarget {
    pub row: usize,
    pub col: usize,
    pub label: usize,
    pub weight: f64,
}

/// Reverse pass of `sum_t weight_t * -ln p[label_t]` through one level's
/// predictor. `probs` must be the forward output for the same `f_l` and
/// parameters. Returns the MLP gradient and the cotangent on `f_l`.
pub fn predictor_backward(
    f_l: &PlanarGrid,
    params: &PredictorParams,
    level: usize,
    probs: &ProbabilityMap,
    targets: &[PixelTarget],
) -> Result<(Mlp, PlanarGrid)> {
    let mlp = params.level(level)?;
    let (h, w) = (probs.height(), probs.width());
    check_level_grid(f_l, level, h, w)?;
    if probs.classes() != mlp.classes() {
        return Err(Error::InvalidState("probability map class count mismatch".into()));
    }
    let mut grad = mlp.zeros_like();
    if targets.is_empty() {
        return Ok((grad, PlanarGrid::zeros(f_l.channels(), f_l.height(), f_l.width())));
    }
    let n = mlp.classes();
    let mut d_logits_full = PlanarGrid::zeros(n, h, w);
    for t in targets {
        if t.row >= h || t.col >= w {
            return Err(Error::invalid(format!(
                "target pixel ({}, {}) outside {h}x{w}",
                t.row, t.col
            )));
        }
        if t.label >= n {
            return Err(Error::invalid(format!(
                "label {} out of range for {n} classes",
                t.label
            )));
        }
        for c in 0..n {
            let onehot = if c == t.label { 1.0 } else { 0.0 };
            let g = t.weight * (probs.prob(c, t.row, t.col) - onehot);
            let cur = d_logits_full.get(c, t.row, t.col);
            d_logits_full.set(c, t.row, t.col, cur + g);
        }
    }
    let d_logits = upsample_adjoint(&d_logits_full, LevelRange::stride(level), f_l.height(), f_l.width())?;
    let hidden = mlp.hidden_activations(f_l)?;
    let mut d_hidden = mlp.output.backward(&hidden, &d_logits, &mut grad.output);
    relu_backward_in_place(&hidden, &mut d_hidden);
    let d_features = mlp.hidden.backward(f_l, &d_hidden, &mut grad.hidden);
    Ok((grad, d_features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> PlanarGrid {
        PlanarGrid::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let levels = LevelRange::new(2, 3).unwrap();
        let params = PredictorParams::zeros(levels, 4, 5, 4);
        let f = PlanarGrid::filled(4, 2, 2, 0.3);
        let p = predict_level(&f, &params, 3, 16, 16).unwrap();
        assert_eq!((p.classes(), p.height(), p.width()), (4, 16, 16));
        assert!(p.probabilities.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(predict_level(&f, &params, 2, 16, 16).is_err());
    }

    #[test]
    fn stride_one_level_is_direct_softmax() {
        let levels = LevelRange::new(1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = PredictorParams::random(levels, 3, 4, 3, &mut rng);
        let f = random_grid(&mut rng, 3, 2, 2);
        let p = predict_level(&f, &params, 1, 4, 4).unwrap();
        let logits = params.per_level[0].logits(&f).unwrap();
        let expect = softmax_channels(&upsample_bilinear(&logits, 2).unwrap());
        assert_eq!(p.probabilities, expect);
    }

    #[test]
    fn matches_composition_oracle() {
        let levels = LevelRange::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = PredictorParams::random(levels, 3, 4, 3, &mut rng);
        let f = random_grid(&mut rng, 3, 2, 2);
        let p = predict_level(&f, &params, 2, 8, 8).unwrap();
        let mlp = &params.per_level[0];
        let mut logits = PlanarGrid::zeros(3, 2, 2);
        for y in 0..2 {
            for x in 0..2 {
                let hidden: Vec<f64> = (0..4)
                    .map(|j| {
                        let pre = mlp.hidden.bias[j] + (0..3).map(|i| mlp.hidden.w(j, i) * f.get(i, y, x)).sum::<f64>();
                        pre.max(0.0)
                    })
                    .collect();
                for c in 0..3 {
                    let z = mlp.output.bias[c] + (0..4).map(|j| mlp.output.w(c, j) * hidden[j]).sum::<f64>();
                    logits.set(c, y, x, z);
                }
            }
        }
        let expect = softmax_channels(&upsample_bilinear(&logits, 4).unwrap());
        for (a, b) in p.probabilities.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_perfect_targets_give_zero_gradient() {
        let levels = LevelRange::new(1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PredictorParams::random(levels, 2, 3, 2, &mut rng);
        let f = random_grid(&mut rng, 2, 1, 1);
        let p = predict_level(&f, &params, 1, 2, 2).unwrap();
        let (g, df) = predictor_backward(&f, &params, 1, &p, &[]).unwrap();
        assert!(PredictorParams {
            levels,
            per_level: vec![g]
        }
        .tensors()
        .iter()
        .all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(df.values().iter().all(|&v| v == 0.0));

        let onehot = ProbabilityMap {
            level: 1,
            probabilities: PlanarGrid::from_vec(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        };
        let t = [PixelTarget {
            row: 0,
            col: 1,
            label: 0,
            weight: 1.0,
        }];
        let (g, df) = predictor_backward(&f, &params, 1, &onehot, &t).unwrap();
        assert!(PredictorParams {
            levels,
            per_level: vec![g]
        }
        .tensors()
        .iter()
        .all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(df.values().iter().all(|&v| v == 0.0));

        let bad = [PixelTarget {
            row: 2,
            col: 0,
            label: 0,
            weight: 1.0,
        }];
        assert!(matches!(
            predictor_backward(&f, &params, 1, &p, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let levels = LevelRange::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = PredictorParams::random(levels, 3, 4, 3, &mut rng);
        let f = random_grid(&mut rng, 3, 2, 2);
        let targets: Vec<PixelTarget> = (0..8)
            .map(|_| PixelTarget {
                row: rng.gen_range(0..8),
                col: rng.gen_range(0..8),
                label: rng.gen_range(0..3),
                weight: 0.125,
            })
            .collect();
        let loss = |p: &PredictorParams, f: &PlanarGrid| -> f64 {
            let pm = predict_level(f, p, 2, 8, 8).unwrap();
            targets
                .iter()
                .map(|t| -t.weight * pm.prob(t.label, t.row, t.col).ln())
                .sum()
        };
        let pm = predict_level(&f, &params, 2, 8, 8).unwrap();
        let (g, df) = predictor_backward(&f, &params, 2, &pm, &targets).unwrap();
        let analytic = PredictorParams {
            levels,
            per_level: vec![g],
        };
        let h = 1e-5;
        let check = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4;
        let count: usize = params.tensors().iter().map(|t| t.len()).sum();
        for k in 0..count {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *flat_mut(&mut plus, k) += h;
            *flat_mut(&mut minus, k) -= h;
            let numeric = (loss(&plus, &f) - loss(&minus, &f)) / (2.0 * h);
            let a = analytic.tensors().concat()[k];
            assert!(check(a, numeric), "param {k}: analytic {a} numeric {numeric}");
        }
        for k in 0..f.values().len() {
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus.values_mut()[k] += h;
            minus.values_mut()[k] -= h;
            let numeric = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h);
            assert!(check(df.values()[k], numeric), "feature {k}");
        }
    }

    fn flat_mut(p: &mut PredictorParams, mut k: usize) -> &mut f64 {
        for t in p.tensors_mut() {
            if k < t.len() {
                return &mut t[k];
            }
            k -= t.len();
        }
        panic!("index out of range")
    }
}
