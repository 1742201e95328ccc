//! Coarse-to-fine inference: every level predicts the pixels still unresolved,
//! accepts the confident ones and hands the rest to the next finer level.

use crate::acm::{confidence, split, AcceptedSet, ConfidenceMeasure, PixelMask, ThresholdState};
use crate::error::{Error, Result};
use crate::extractor::{extract, FeaturePyramid, LevelRange};
use crate::grid::{argmax_channel, LabelMap, PlanarGrid};
use crate::predictor::{predict_level, ProbabilityMap};

pub use crate::model::{Model, ModelParams};

/// Outcome of one cascade run. Per-level vectors are indexed by
/// `level - l_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub levels: LevelRange,
    /// Final class per pixel.
    pub label_map: LabelMap,
    /// Level at which each pixel was accepted.
    pub level_map: LabelMap,
    pub per_level: Vec<AcceptedSet>,
    /// `V_l`: pixels entering each level.
    pub per_level_masks: Vec<PixelMask>,
}

impl CascadeResult {
    pub fn accepted(&self, level: usize) -> &AcceptedSet {
        &self.per_level[self.levels.index(level)]
    }

    pub fn mask(&self, level: usize) -> &PixelMask {
        &self.per_level_masks[self.levels.index(level)]
    }
}

/// Everything a training step needs from the forward pass of one image.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub pyramid: FeaturePyramid,
    /// `P_l`, absent for levels whose `V_l` was empty.
    pub prob_maps: Vec<Option<ProbabilityMap>>,
    pub result: CascadeResult,
    /// Confidences of pixels in `V_l` whose argmax equals the label.
    pub correct_confidences: Vec<Vec<f64>>,
}

impl TrainForward {
    pub fn masks(&self) -> &[PixelMask] {
        &self.result.per_level_masks
    }
}

struct Pass {
    pyramid: FeaturePyramid,
    prob_maps: Vec<Option<ProbabilityMap>>,
    result: CascadeResult,
}

fn run(
    image: &PlanarGrid,
    params: &ModelParams,
    thresholds: &ThresholdState,
    measure: ConfidenceMeasure,
) -> Result<Pass> {
    let levels = params.levels();
    if thresholds.levels() != levels {
        return Err(Error::invalid(format!(
            "thresholds cover {} but the network covers {levels}",
            thresholds.levels()
        )));
    }
    let pyramid = extract(image, &params.extractor, levels)?;
    let (h, w) = (image.height(), image.width());
    let mut label_map = LabelMap::filled(h, w, 0);
    let mut level_map = LabelMap::filled(h, w, 0);
    let mut per_level = vec![None; levels.len()];
    let mut masks = vec![None; levels.len()];
    let mut prob_maps = vec![None; levels.len()];
    let mut current = PixelMask::full(h, w);
    for level in levels.top_down() {
        let i = levels.index(level);
        let is_lowest = level == levels.l_min();
        let (accepted, deferred) = if current.is_empty() {
            (
                AcceptedSet {
                    level,
                    entries: Vec::new(),
                },
                PixelMask::empty(h, w),
            )
        } else {
            let p = predict_level(pyramid.fused(level), &params.predictor, level, h, w)?;
            let out = split(&current, &p, thresholds.tau(level), is_lowest, measure)?;
            prob_maps[i] = Some(p);
            out
        };
        for a in &accepted.entries {
            label_map.set(a.row, a.col, a.class);
            level_map.set(a.row, a.col, level);
        }
        per_level[i] = Some(accepted);
        masks[i] = Some(std::mem::replace(&mut current, deferred));
    }
    Ok(Pass {
        pyramid,
        prob_maps,
        result: CascadeResult {
            levels,
            label_map,
            level_map,
            per_level: per_level.into_iter().map(Option::unwrap).collect(),
            per_level_masks: masks.into_iter().map(Option::unwrap).collect(),
        },
    })
}

/// Test-mode cascade. Thresholds must be frozen.
pub fn infer(
    image: &PlanarGrid,
    params: &ModelParams,
    thresholds: &ThresholdState,
    measure: ConfidenceMeasure,
) -> Result<CascadeResult> {
    if !thresholds.is_frozen() {
        return Err(Error::InvalidState("inference requires frozen thresholds".into()));
    }
    Ok(run(image, params, thresholds, measure)?.result)
}

impl Model {
    pub fn infer(&self, image: &PlanarGrid) -> Result<CascadeResult> {
        infer(image, &self.params, &self.thresholds, self.measure())
    }
}

/// Train-mode cascade: same routing as [`infer`] with the live thresholds,
/// plus the statistics the threshold update and the loss need.
pub fn forward_train(
    image: &PlanarGrid,
    labels: &LabelMap,
    params: &ModelParams,
    thresholds: &ThresholdState,
    measure: ConfidenceMeasure,
) -> Result<TrainForward> {
    if labels.height() != image.height() || labels.width() != image.width() {
        return Err(Error::invalid(format!(
            "labels {}x{} do not match image {}x{}",
            labels.height(),
            labels.width(),
            image.height(),
            image.width()
        )));
    }
    labels.check_classes(params.classes())?;
    let pass = run(image, params, thresholds, measure)?;
    let mut correct_confidences = vec![Vec::new(); pass.prob_maps.len()];
    let mut buf = Vec::new();
    for (i, p) in pass.prob_maps.iter().enumerate() {
        let Some(p) = p else { continue };
        for (row, col) in pass.result.per_level_masks[i].iter() {
            let (class, _) = argmax_channel(&p.probabilities, row, col)?;
            if class == labels.get(row, col) {
                p.probabilities.pixel_into(row, col, &mut buf);
                correct_confidences[i].push(confidence(&buf, measure)?);
            }
        }
    }
    Ok(TrainForward {
        pyramid: pass.pyramid,
        prob_maps: pass.prob_maps,
        result: pass.result,
        correct_confidences,
    })
}
