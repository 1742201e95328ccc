//! Segmentation metrics, per-level cascade statistics, and the ablation
//! sweeps (quantile ratio, employed levels, fusion variant).

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::cascade::{CascadeResult, Model};
use crate::data::{Benchmark, LabeledScene};
use crate::error::{Error, Result};
use crate::extractor::{FusionMode, LevelRange};
use crate::grid::LabelMap;
use crate::optim::{train, TrainConfig};

/// `counts[a * n + b]` = pixels of true class `a` predicted as `b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|b| self.get(class, b)).sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|a| self.get(a, class)).sum()
    }

    pub fn accumulate(&mut self, prediction: &LabelMap, labels: &LabelMap) -> Result<()> {
        if prediction.height() != labels.height() || prediction.width() != labels.width() {
            return Err(Error::invalid("prediction and label maps differ in size"));
        }
        prediction.check_classes(self.classes)?;
        labels.check_classes(self.classes)?;
        for (&p, &t) in prediction.values().iter().zip(labels.values()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn confusion(prediction: &LabelMap, labels: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(prediction, labels)?;
    Ok(cm)
}

/// Per-class scores (`None` for classes excluded by a zero denominator) and
/// their mean over the classes that have one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

fn scores(
    cm: &ConfusionMatrix,
    include_background: bool,
    name: &str,
    score: impl Fn(u64, u64, u64) -> Option<f64>,
) -> Result<ClassScores> {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| score(cm.get(c, c), cm.row_sum(c), cm.col_sum(c)))
        .collect();
    let counted: Vec<f64> = per_class
        .iter()
        .enumerate()
        .filter(|(c, _)| include_background || *c != 0)
        .filter_map(|(_, s)| *s)
        .collect();
    if counted.is_empty() {
        return Err(Error::UndefinedMetric(format!("{name}: no class present")));
    }
    Ok(ClassScores {
        mean: counted.iter().sum::<f64>() / counted.len() as f64,
        per_class,
    })
}

fn iou(tp: u64, row: u64, col: u64) -> Option<f64> {
    let union = row + col - tp;
    (union > 0).then(|| tp as f64 / union as f64)
}

fn f1(tp: u64, row: u64, col: u64) -> Option<f64> {
    let denom = row + col;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// Mean IoU over classes with a nonempty union, background included.
pub fn miou(cm: &ConfusionMatrix) -> Result<ClassScores> {
    scores(cm, true, "mIoU", iou)
}

/// Mean IoU over foreground classes only.
pub fn miou_foreground(cm: &ConfusionMatrix) -> Result<ClassScores> {
    scores(cm, false, "foreground mIoU", iou)
}

pub fn mean_f1(cm: &ConfusionMatrix) -> Result<ClassScores> {
    scores(cm, true, "mean F1", f1)
}

/// Per-level routing statistics of one cascade run, indexed by `level - l_min`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelStats {
    pub levels: LevelRange,
    /// `|O_l| / (H W)`.
    pub prediction_ratio: Vec<f64>,
    /// Foreground share of `V_l`; `None` when `V_l` is empty.
    pub foreground_ratio: Vec<Option<f64>>,
}

pub fn level_stats(result: &CascadeResult, labels: &LabelMap) -> Result<LevelStats> {
    let (h, w) = (labels.height(), labels.width());
    if result.label_map.height() != h || result.label_map.width() != w {
        return Err(Error::invalid("cascade result and labels differ in size"));
    }
    let total = (h * w) as f64;
    let prediction_ratio = result.per_level.iter().map(|a| a.len() as f64 / total).collect();
    let foreground_ratio = result
        .per_level_masks
        .iter()
        .map(|m| {
            let n = m.count();
            let fg = m.iter().filter(|&(r, c)| labels.get(r, c) != 0).count();
            (n > 0).then(|| fg as f64 / n as f64)
        })
        .collect();
    Ok(LevelStats {
        levels: result.levels,
        prediction_ratio,
        foreground_ratio,
    })
}

impl LevelStats {
    /// Per-image average; foreground ratios average over the images where
    /// they are defined.
    pub fn mean(stats: &[LevelStats]) -> Result<LevelStats> {
        let first = stats.first().ok_or(Error::EmptyInput("level statistics"))?;
        let n = first.levels.len();
        let mut prediction_ratio = vec![0.0; n];
        let mut fg_sum = vec![0.0; n];
        let mut fg_count = vec![0usize; n];
        for s in stats {
            if s.levels != first.levels {
                return Err(Error::invalid("level statistics cover different ranges"));
            }
            for i in 0..n {
                prediction_ratio[i] += s.prediction_ratio[i] / stats.len() as f64;
                if let Some(f) = s.foreground_ratio[i] {
                    fg_sum[i] += f;
                    fg_count[i] += 1;
                }
            }
        }
        Ok(LevelStats {
            levels: first.levels,
            prediction_ratio,
            foreground_ratio: fg_sum
                .iter()
                .zip(&fg_count)
                .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
        })
    }

    pub fn prediction_ratio_at(&self, level: usize) -> f64 {
        self.prediction_ratio[self.levels.index(level)]
    }

    pub fn foreground_ratio_at(&self, level: usize) -> Option<f64> {
        self.foreground_ratio[self.levels.index(level)]
    }

    /// CSV with one row per level, coarsest first.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,prediction_ratio,foreground_ratio")?;
        for l in self.levels.top_down() {
            let fg = self.foreground_ratio_at(l).map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{l},{},{fg}", self.prediction_ratio_at(l))?;
        }
        Ok(())
    }
}

/// Metrics of one model over a set of scenes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub pixels: u64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub foreground_miou: Option<f64>,
    pub mean_f1: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub level_stats: LevelStats,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(model: &Model, scenes: &[LabeledScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let classes = model.classes();
    let per_image: Vec<(ConfusionMatrix, LevelStats)> = scenes
        .par_iter()
        .map(|s| {
            let result = model.infer(&s.image)?;
            Ok((
                confusion(&result.label_map, &s.labels, classes)?,
                level_stats(&result, &s.labels)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(classes);
    let mut stats = Vec::with_capacity(per_image.len());
    for (c, s) in per_image {
        cm.merge(&c);
        stats.push(s);
    }
    let iou = miou(&cm)?;
    let f1 = mean_f1(&cm)?;
    Ok(EvalReport {
        images: scenes.len(),
        pixels: cm.total(),
        miou: iou.mean,
        per_class_iou: iou.per_class,
        foreground_miou: miou_foreground(&cm).ok().map(|s| s.mean),
        mean_f1: f1.mean,
        per_class_f1: f1.per_class,
        level_stats: LevelStats::mean(&stats)?,
        confusion: cm,
    })
}

/// One trained-and-evaluated configuration of a sweep.
#[derive(Debug, Clone)]
pub enum SweepOutcome {
    Done(Box<EvalReport>),
    Failed(String),
}

impl SweepOutcome {
    pub fn report(&self) -> Option<&EvalReport> {
        match self {
            SweepOutcome::Done(r) => Some(r),
            SweepOutcome::Failed(_) => None,
        }
    }
}

fn run_one(bench: &Benchmark, config: &TrainConfig) -> Result<SweepOutcome> {
    match train(&bench.train, bench.classes, config) {
        Ok((model, _)) => Ok(SweepOutcome::Done(Box::new(evaluate(&model, &bench.val)?))),
        Err(Error::Divergence { step, detail, .. }) => {
            Ok(SweepOutcome::Failed(format!("diverged at step {step}: {detail}")))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct RSweepRow {
    pub r: f64,
    pub levels: LevelRange,
    pub outcome: SweepOutcome,
}

/// Trains and evaluates one model per quantile ratio (shared seed).
pub fn ablate_r(bench: &Benchmark, base: &TrainConfig, r_values: &[f64]) -> Result<Vec<RSweepRow>> {
    if r_values.len() < 2 {
        return Err(Error::invalid("an r sweep needs at least two values"));
    }
    let mut seen = HashSet::new();
    for &r in r_values {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("r = {r} outside [0, 1]")));
        }
        if !seen.insert(r.to_bits()) {
            return Err(Error::invalid(format!("duplicate r value {r}")));
        }
    }
    let levels = base.levels()?;
    r_values
        .iter()
        .map(|&r| {
            let config = TrainConfig { r, ..base.clone() };
            Ok(RSweepRow {
                r,
                levels,
                outcome: run_one(bench, &config)?,
            })
        })
        .collect()
}

pub fn write_r_sweep_csv<W: Write>(rows: &[RSweepRow], mut out: W) -> std::io::Result<()> {
    let Some(first) = rows.first() else {
        return Ok(());
    };
    let levels: Vec<usize> = first.levels.top_down().collect();
    write!(out, "r,status")?;
    for l in &levels {
        write!(out, ",prediction_ratio_l{l}")?;
    }
    for l in &levels {
        write!(out, ",foreground_ratio_l{l}")?;
    }
    writeln!(out, ",miou")?;
    for row in rows {
        match &row.outcome {
            SweepOutcome::Done(rep) => {
                write!(out, "{},ok", row.r)?;
                for &l in &levels {
                    write!(out, ",{}", rep.level_stats.prediction_ratio_at(l))?;
                }
                for &l in &levels {
                    let fg = rep
                        .level_stats
                        .foreground_ratio_at(l)
                        .map(|v| v.to_string())
                        .unwrap_or_default();
                    write!(out, ",{fg}")?;
                }
                writeln!(out, ",{}", rep.miou)?;
            }
            SweepOutcome::Failed(_) => {
                write!(out, "{},failed", row.r)?;
                for _ in 0..2 * levels.len() + 1 {
                    write!(out, ",")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LevelsSweepRow {
    pub subset: LevelRange,
    pub outcome: SweepOutcome,
}

/// Trains and evaluates one model per level subset. Each subset must lie
/// inside the base configuration's level range.
pub fn ablate_levels(bench: &Benchmark, base: &TrainConfig, subsets: &[LevelRange]) -> Result<Vec<LevelsSweepRow>> {
    if subsets.is_empty() {
        return Err(Error::invalid("no level subsets given"));
    }
    let full = base.levels()?;
    for s in subsets {
        if !full.contains(s.l_min()) || !full.contains(s.l_max()) {
            return Err(Error::invalid(format!("subset {s} outside levels {full}")));
        }
    }
    subsets
        .iter()
        .map(|&subset| {
            let config = base.clone().with_levels(subset);
            Ok(LevelsSweepRow {
                subset,
                outcome: run_one(bench, &config)?,
            })
        })
        .collect()
}

pub fn write_levels_sweep_csv<W: Write>(rows: &[LevelsSweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "levels,status,miou,mean_f1")?;
    for row in rows {
        match row.outcome.report() {
            Some(rep) => writeln!(out, "{},ok,{},{}", row.subset, rep.miou, rep.mean_f1)?,
            None => writeln!(out, "{},failed,,", row.subset)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FusionSweepRow {
    pub mode: FusionMode,
    pub outcome: SweepOutcome,
}

/// Trains and evaluates one model per fusion variant of the extractor.
pub fn ablate_fusion(bench: &Benchmark, base: &TrainConfig, modes: &[FusionMode]) -> Result<Vec<FusionSweepRow>> {
    if modes.is_empty() {
        return Err(Error::invalid("no fusion variants given"));
    }
    modes
        .iter()
        .map(|&mode| {
            let config = TrainConfig {
                fusion: mode,
                ..base.clone()
            };
            Ok(FusionSweepRow {
                mode,
                outcome: run_one(bench, &config)?,
            })
        })
        .collect()
}

pub fn write_fusion_sweep_csv<W: Write>(rows: &[FusionSweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "fusion,status,miou,mean_f1")?;
    for row in rows {
        let name = match row.mode {
            FusionMode::TopDown => "top-down",
            FusionMode::LevelLocal => "level-local",
        };
        match row.outcome.report() {
            Some(rep) => writeln!(out, "{name},ok,{},{}", rep.miou, rep.mean_f1)?,
            None => writeln!(out, "{name},failed,,")?,
        }
    }
    Ok(())
}
