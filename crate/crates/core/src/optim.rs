//! Loss, reverse pass, momentum SGD with the poly schedule, and the training
//! loop that interleaves parameter steps with threshold updates.
//!
//! The loss sums, over levels, the mean cross-entropy of the pixels that
//! entered each level. Which pixels entered a level depends on the thresholds
//! and is treated as a constant when differentiating.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acm::{ConfidenceMeasure, PixelMask};
use crate::cascade::{forward_train, Model, ModelParams, TrainForward};
use crate::data::LabeledScene;
use crate::error::{Error, Result};
use crate::extractor::{extractor_backward, FusionMode, LevelRange};
use crate::grid::{LabelMap, PlanarGrid};
use crate::predictor::{predictor_backward, PixelTarget, ProbabilityMap};

const PROB_FLOOR: f64 = 1e-12;

/// Optimizer, threshold and architecture settings. Every field has a default
/// so a JSON config may set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_floor: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub r: f64,
    pub tau_init: f64,
    pub seed: u64,
    pub l_min: usize,
    pub l_max: usize,
    pub fused_width: usize,
    pub hidden_width: usize,
    pub confidence: ConfidenceMeasure,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.01,
            lr_floor: 0.0001,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0001,
            max_steps: 300,
            batch_size: 8,
            gamma: 0.9,
            r: 0.3,
            tau_init: 0.5,
            seed: 0,
            l_min: 2,
            l_max: 4,
            fused_width: 32,
            hidden_width: 32,
            confidence: ConfidenceMeasure::MaxProb,
            fusion: FusionMode::TopDown,
        }
    }
}

impl TrainConfig {
    pub fn levels(&self) -> Result<LevelRange> {
        LevelRange::new(self.l_min, self.l_max)
    }

    pub fn with_levels(mut self, levels: LevelRange) -> Self {
        self.l_min = levels.l_min();
        self.l_max = levels.l_max();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_floor", self.lr_floor),
            ("power", self.power),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        for (name, v) in [("gamma", self.gamma), ("r", self.r), ("tau_init", self.tau_init)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.fused_width == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }
}

/// Mean `-ln p[label]` over the pixels of `v`; 0 when `v` is empty.
pub fn level_loss(p_map: &ProbabilityMap, labels: &LabelMap, v: &PixelMask) -> f64 {
    let count = v.count();
    if count == 0 {
        return 0.0;
    }
    let sum: f64 = v
        .iter()
        .map(|(row, col)| -p_map.prob(labels.get(row, col), row, col).max(PROB_FLOOR).ln())
        .sum();
    sum / count as f64
}

/// Sum of per-level losses.
pub fn total_loss<'a>(pairs: impl IntoIterator<Item = (&'a ProbabilityMap, &'a PixelMask)>, labels: &LabelMap) -> f64 {
    pairs.into_iter().map(|(p, v)| level_loss(p, labels, v)).sum()
}

/// Loss of one forward pass.
pub fn forward_loss(fwd: &TrainForward, labels: &LabelMap) -> f64 {
    total_loss(
        fwd.prob_maps
            .iter()
            .zip(fwd.masks())
            .filter_map(|(p, v)| p.as_ref().map(|p| (p, v))),
        labels,
    )
}

/// Gradient of `scale * loss` for every parameter, with the level masks of
/// `fwd` held fixed.
pub fn backward(params: &ModelParams, fwd: &TrainForward, labels: &LabelMap, scale: f64) -> Result<ModelParams> {
    let levels = params.levels();
    if fwd.pyramid.levels != levels || fwd.prob_maps.len() != levels.len() {
        return Err(Error::InvalidState("forward state does not match the model".into()));
    }
    let mut grads = params.zeros_like();
    let mut grad_fused = Vec::with_capacity(levels.len());
    for level in levels.l_min()..=levels.l_max() {
        let i = levels.index(level);
        let f_l = fwd.pyramid.fused(level);
        let mask = &fwd.masks()[i];
        let count = mask.count();
        match &fwd.prob_maps[i] {
            Some(p) if count > 0 => {
                if p.height() != labels.height() || p.width() != labels.width() {
                    return Err(Error::InvalidState("labels do not match the forward pass".into()));
                }
                let weight = scale / count as f64;
                let targets: Vec<PixelTarget> = mask
                    .iter()
                    .map(|(row, col)| PixelTarget {
                        row,
                        col,
                        label: labels.get(row, col),
                        weight,
                    })
                    .collect();
                let (g, d_f) = predictor_backward(f_l, &params.predictor, level, p, &targets)?;
                grads.predictor.per_level[i] = g;
                grad_fused.push(d_f);
            }
            _ => grad_fused.push(PlanarGrid::zeros(f_l.channels(), f_l.height(), f_l.width())),
        }
    }
    grads.extractor = extractor_backward(&fwd.pyramid, &params.extractor, grad_fused)?;
    Ok(grads)
}

/// `max(lr_floor, lr_init * (1 - step / max_steps)^power)`.
pub fn poly_lr(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.max_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond max_steps {}",
            config.max_steps
        )));
    }
    let progress = if config.max_steps == 0 {
        0.0
    } else {
        step as f64 / config.max_steps as f64
    };
    Ok((config.lr_init * (1.0 - progress).powf(config.power)).max(config.lr_floor))
}

/// `v <- momentum * v + (g + weight_decay * p)`, `p <- p - lr * v`.
/// Refuses to touch anything when a gradient is non-finite.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if params.parameter_count() != grads.parameter_count() || params.parameter_count() != velocity.parameter_count() {
        return Err(Error::InvalidState(
            "parameter, gradient and velocity shapes differ".into(),
        ));
    }
    if !grads.all_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite gradient".into(),
            last_good: None,
        });
    }
    let grad_tensors = grads.tensors();
    for ((p, v), g) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(grad_tensors)
    {
        for ((pk, vk), gk) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vk = config.momentum * *vk + (gk + config.weight_decay * *pk);
            *pk -= lr * *vk;
        }
    }
    Ok(())
}

/// One row of the training log. Per-level vectors are indexed by
/// `level - l_min`; counts are summed over the minibatch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub tau: Vec<f64>,
    pub entered: Vec<usize>,
    pub accepted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub levels: Option<LevelRange>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// CSV with columns `step,lr,loss` then `tau_l,v_l,o_l` per level from
    /// coarsest to finest.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let levels: Vec<usize> = self.levels.map(|l| l.top_down().collect()).unwrap_or_default();
        write!(out, "step,lr,loss")?;
        for l in &levels {
            write!(out, ",tau_{l},v_{l},o_{l}")?;
        }
        writeln!(out)?;
        for row in &self.rows {
            write!(out, "{},{},{}", row.step, row.lr, row.loss)?;
            if let Some(range) = self.levels {
                for l in range.top_down() {
                    let i = range.index(l);
                    write!(out, ",{},{},{}", row.tau[i], row.entered[i], row.accepted[i])?;
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

struct ImageStep {
    loss: f64,
    grads: ModelParams,
    correct: Vec<Vec<f64>>,
    entered: Vec<usize>,
    accepted: Vec<usize>,
}

fn image_step(model: &Model, scene: &LabeledScene, scale: f64) -> Result<ImageStep> {
    let fwd = forward_train(
        &scene.image,
        &scene.labels,
        &model.params,
        &model.thresholds,
        model.measure(),
    )?;
    let loss = forward_loss(&fwd, &scene.labels);
    let grads = backward(&model.params, &fwd, &scene.labels, scale)?;
    Ok(ImageStep {
        loss,
        grads,
        entered: fwd.masks().iter().map(PixelMask::count).collect(),
        accepted: fwd.result.per_level.iter().map(|a| a.len()).collect(),
        correct: fwd.correct_confidences,
    })
}

/// Trains a fresh model on `scenes`. Minibatches are drawn from a seeded
/// shuffle; per-image work may run in parallel but every reduction happens in
/// minibatch order, so results do not depend on the worker count.
pub fn train(scenes: &[LabeledScene], classes: usize, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    let first = scenes.first().ok_or(Error::EmptyInput("training set"))?;
    config.validate()?;
    let levels = config.levels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init_with_rng(config, first.image.channels(), classes, &mut rng)?;
    for s in scenes {
        levels.check_image(s.image.height(), s.image.width())?;
        s.labels.check_classes(classes)?;
    }
    let mut velocity = model.params.zeros_like();
    let mut log = TrainLog {
        levels: Some(levels),
        rows: Vec::with_capacity(config.max_steps),
    };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let lr = poly_lr(step, config)?;
        let scale = 1.0 / batch.len() as f64;
        let steps: Vec<ImageStep> = batch
            .par_iter()
            .map(|&k| image_step(&model, &scenes[k], scale))
            .collect::<Result<_>>()?;

        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        let mut pooled = vec![Vec::new(); levels.len()];
        let mut entered = vec![0; levels.len()];
        let mut accepted = vec![0; levels.len()];
        for s in &steps {
            loss += s.loss * scale;
            grads.add_assign(&s.grads);
            for i in 0..levels.len() {
                pooled[i].extend_from_slice(&s.correct[i]);
                entered[i] += s.entered[i];
                accepted[i] += s.accepted[i];
            }
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("loss {loss}"),
                last_good: Some(Box::new(model)),
            });
        }
        sgd_step(&mut model.params, &grads, &mut velocity, lr, config)?;
        for level in levels.l_min() + 1..=levels.l_max() {
            model.thresholds.update(level, &pooled[levels.index(level)])?;
        }
        log.rows.push(LogRow {
            step,
            lr,
            loss,
            tau: model.thresholds.taus().to_vec(),
            entered,
            accepted,
        });
    }
    model.thresholds.freeze();
    Ok((model, log))
}
