//! Hierarchical features.
//!
//! Base features `C_l` are fixed block statistics of the image at stride
//! `2^l` (mean, population standard deviation and mean gradient magnitude per
//! input channel), centered and scaled to order-one magnitudes so plain SGD
//! trains the layers above at a usable rate. Fused features `F_l` are built
//! top-down: the coarsest level passes a multi-window context stack through a
//! learned per-pixel layer, every finer level fuses the 2x-upsampled level
//! above with its own base features. All learned maps are per-pixel affine + ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{upsample_adjoint, upsample_bilinear, PlanarGrid};
use crate::linear::{relu_backward_in_place, relu_in_place, Linear};

pub const MAX_LEVEL: usize = 6;

/// Inclusive range of pyramid levels; level `l` has stride `2^l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelRange {
    l_min: usize,
    l_max: usize,
}

impl LevelRange {
    pub fn new(l_min: usize, l_max: usize) -> Result<Self> {
        if l_min < 1 || l_min > l_max || l_max > MAX_LEVEL {
            return Err(Error::invalid(format!(
                "level range [{l_min}, {l_max}] must satisfy 1 <= l_min <= l_max <= {MAX_LEVEL}"
            )));
        }
        Ok(Self { l_min, l_max })
    }

    pub fn single(level: usize) -> Result<Self> {
        Self::new(level, level)
    }

    /// Builds a range from an explicit level list, which must be non-empty and
    /// contiguous (any order).
    pub fn from_levels(levels: &[usize]) -> Result<Self> {
        let lo = *levels
            .iter()
            .min()
            .ok_or_else(|| Error::invalid("empty level subset"))?;
        let hi = *levels.iter().max().unwrap();
        let mut sorted = levels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != hi - lo + 1 {
            return Err(Error::invalid(format!("level subset {levels:?} is not contiguous")));
        }
        Self::new(lo, hi)
    }

    #[inline]
    pub fn l_min(&self) -> usize {
        self.l_min
    }

    #[inline]
    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn len(&self) -> usize {
        self.l_max - self.l_min + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, level: usize) -> bool {
        (self.l_min..=self.l_max).contains(&level)
    }

    /// Position of `level` in per-level vectors (`level - l_min`).
    #[inline]
    pub fn index(&self, level: usize) -> usize {
        debug_assert!(self.contains(level));
        level - self.l_min
    }

    /// Levels from coarsest to finest.
    pub fn top_down(&self) -> impl Iterator<Item = usize> {
        (self.l_min..=self.l_max).rev()
    }

    pub fn stride(level: usize) -> usize {
        1 << level
    }

    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        let s = Self::stride(self.l_max);
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "image {height}x{width} is not divisible by stride {s} of level {}",
                self.l_max
            )));
        }
        Ok(())
    }
}

impl Default for LevelRange {
    fn default() -> Self {
        Self { l_min: 2, l_max: 4 }
    }
}

impl std::fmt::Display for LevelRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.l_min == self.l_max {
            write!(f, "{}", self.l_min)
        } else {
            write!(f, "{}-{}", self.l_min, self.l_max)
        }
    }
}

/// How finer levels obtain information from coarser ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `F_l = f(up2(F_{l+1}), C_l)`.
    #[default]
    TopDown,
    /// Finer levels see only their own base features; the upsampled branch
    /// is replaced by zeros.
    LevelLocal,
}

/// Learned parameters of the fused-feature stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub levels: LevelRange,
    pub base_channels: usize,
    pub fused_width: usize,
    pub fusion_mode: FusionMode,
    /// `4 * base_channels -> fused_width`, used at `l_max`.
    pub context: Linear,
    /// One map `fused_width + base_channels -> fused_width` per level below
    /// `l_max`, indexed by `level - l_min`.
    pub fusion: Vec<Linear>,
}

impl ExtractorParams {
    pub fn zeros(levels: LevelRange, input_channels: usize, fused_width: usize, fusion_mode: FusionMode) -> Self {
        let base_channels = 3 * input_channels;
        Self {
            levels,
            base_channels,
            fused_width,
            fusion_mode,
            context: Linear::zeros(4 * base_channels, fused_width),
            fusion: (levels.l_min()..levels.l_max())
                .map(|_| Linear::zeros(fused_width + base_channels, fused_width))
                .collect(),
        }
    }

    pub fn random<R: Rng>(
        levels: LevelRange,
        input_channels: usize,
        fused_width: usize,
        fusion_mode: FusionMode,
        rng: &mut R,
    ) -> Self {
        let base_channels = 3 * input_channels;
        Self {
            levels,
            base_channels,
            fused_width,
            fusion_mode,
            context: Linear::random(4 * base_channels, fused_width, 1.0, rng),
            fusion: (levels.l_min()..levels.l_max())
                .map(|_| Linear::random(fused_width + base_channels, fused_width, 1.0, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            context: self.context.zeros_like(),
            fusion: self.fusion.iter().map(Linear::zeros_like).collect(),
            ..self.clone()
        }
    }

    fn fusion_at(&self, level: usize) -> Result<&Linear> {
        if level < self.levels.l_min() || level >= self.levels.l_max() {
            return Err(Error::invalid(format!(
                "no fusion layer for level {level} in range {}",
                self.levels
            )));
        }
        Ok(&self.fusion[level - self.levels.l_min()])
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.context.tensors().to_vec();
        for layer in &self.fusion {
            out.extend(layer.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.context.tensors_mut().into_iter().collect();
        for layer in &mut self.fusion {
            out.extend(layer.tensors_mut());
        }
        out
    }
}

/// Base and fused features for every level, indexed by `level - l_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: LevelRange,
    pub base: Vec<PlanarGrid>,
    pub fused: Vec<PlanarGrid>,
}

impl FeaturePyramid {
    pub fn base(&self, level: usize) -> &PlanarGrid {
        &self.base[self.levels.index(level)]
    }

    pub fn fused(&self, level: usize) -> &PlanarGrid {
        &self.fused[self.levels.index(level)]
    }
}

/// Central-difference gradient magnitude per channel, borders replicated.
fn gradient_magnitude(image: &PlanarGrid) -> PlanarGrid {
    let (h, w) = (image.height(), image.width());
    let mut out = PlanarGrid::zeros(image.channels(), h, w);
    for c in 0..image.channels() {
        let src = image.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let gx = 0.5 * (src[y * w + xr] - src[y * w + xl]);
                let gy = 0.5 * (src[yd * w + x] - src[yu * w + x]);
                dst[y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    out
}

fn check_divisible(image: &PlanarGrid, level: usize) -> Result<()> {
    let s = LevelRange::stride(level);
    if image.height() == 0
        || image.width() == 0
        || !image.height().is_multiple_of(s)
        || !image.width().is_multiple_of(s)
    {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible by stride {s}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

// Image values live in [0, 1]; block spreads and gradients are typically
// well under 0.1.
const MEAN_SCALE: f64 = 4.0;
const SPREAD_SCALE: f64 = 8.0;

fn block_statistics(image: &PlanarGrid, gradient: &PlanarGrid, level: usize) -> PlanarGrid {
    let s = LevelRange::stride(level);
    let (h, w) = (image.height(), image.width());
    let (bh, bw) = (h / s, w / s);
    let count = (s * s) as f64;
    let mut out = PlanarGrid::zeros(3 * image.channels(), bh, bw);
    for c in 0..image.channels() {
        let src = image.plane(c);
        let grad = gradient.plane(c);
        for by in 0..bh {
            for bx in 0..bw {
                let mut sum = 0.0;
                let mut gsum = 0.0;
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        sum += src[y * w + x];
                        gsum += grad[y * w + x];
                    }
                }
                let mean = sum / count;
                let mut var = 0.0;
                for y in by * s..(by + 1) * s {
                    for x in bx * s..(bx + 1) * s {
                        let d = src[y * w + x] - mean;
                        var += d * d;
                    }
                }
                out.set(3 * c, by, bx, MEAN_SCALE * (mean - 0.5));
                out.set(3 * c + 1, by, bx, SPREAD_SCALE * (var / count).sqrt());
                out.set(3 * c + 2, by, bx, SPREAD_SCALE * gsum / count);
            }
        }
    }
    out
}

/// Block mean, standard deviation and mean gradient magnitude per input
/// channel at stride `2^level`; output channel `3c + k` holds statistic `k`
/// of input channel `c`.
pub fn base_features(image: &PlanarGrid, level: usize) -> Result<PlanarGrid> {
    check_divisible(image, level)?;
    Ok(block_statistics(image, &gradient_magnitude(image), level))
}

/// Mean over a `k x k` window (k odd) with edge-clamped sampling.
fn box_mean(grid: &PlanarGrid, k: usize) -> PlanarGrid {
    let r = (k / 2) as isize;
    let (h, w) = (grid.height() as isize, grid.width() as isize);
    let mut horiz = PlanarGrid::zeros(grid.channels(), grid.height(), grid.width());
    let mut out = horiz.clone();
    for c in 0..grid.channels() {
        let src = grid.plane(c);
        let tmp = horiz.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-r..=r).map(|d| src[(y * w + (x + d).clamp(0, w - 1)) as usize]).sum();
                tmp[(y * w + x) as usize] = s / k as f64;
            }
        }
        let tmp = horiz.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let s: f64 = (-r..=r).map(|d| tmp[((y + d).clamp(0, h - 1) * w + x) as usize]).sum();
                dst[(y * w + x) as usize] = s / k as f64;
            }
        }
    }
    out
}

/// `concat(c, box3(c), box9(c), global mean)`, the input of the context head.
pub fn context_stack(c_top: &PlanarGrid) -> PlanarGrid {
    let mut global = PlanarGrid::zeros(c_top.channels(), c_top.height(), c_top.width());
    for c in 0..c_top.channels() {
        let plane = c_top.plane(c);
        let mean = plane.iter().sum::<f64>() / plane.len().max(1) as f64;
        global.plane_mut(c).iter_mut().for_each(|v| *v = mean);
    }
    let b3 = box_mean(c_top, 3);
    let b9 = box_mean(c_top, 9);
    PlanarGrid::concat_channels(&[c_top, &b3, &b9, &global]).expect("same spatial size")
}

/// Fused features of the coarsest level.
pub fn context_top(c_top: &PlanarGrid, params: &ExtractorParams) -> Result<PlanarGrid> {
    if c_top.channels() != params.base_channels {
        return Err(Error::invalid(format!(
            "context head expects {} base channels, got {}",
            params.base_channels,
            c_top.channels()
        )));
    }
    let mut out = params.context.forward(&context_stack(c_top))?;
    relu_in_place(&mut out);
    Ok(out)
}

fn fusion_input(f_above: &PlanarGrid, c_level: &PlanarGrid, mode: FusionMode) -> Result<PlanarGrid> {
    let up = match mode {
        FusionMode::TopDown => upsample_bilinear(f_above, 2)?,
        FusionMode::LevelLocal => PlanarGrid::zeros(f_above.channels(), c_level.height(), c_level.width()),
    };
    PlanarGrid::concat_channels(&[&up, c_level])
}

/// Fused features of `level < l_max` from the fused level above and the
/// level's own base features.
pub fn fuse_topdown(
    f_above: &PlanarGrid,
    c_level: &PlanarGrid,
    params: &ExtractorParams,
    level: usize,
) -> Result<PlanarGrid> {
    let layer = params.fusion_at(level)?;
    if f_above.height() * 2 != c_level.height() || f_above.width() * 2 != c_level.width() {
        return Err(Error::invalid(format!(
            "level above is {}x{}, expected half of {}x{}",
            f_above.height(),
            f_above.width(),
            c_level.height(),
            c_level.width()
        )));
    }
    if f_above.channels() != params.fused_width || c_level.channels() != params.base_channels {
        return Err(Error::invalid(format!(
            "fusion at level {level} expects {}+{} channels, got {}+{}",
            params.fused_width,
            params.base_channels,
            f_above.channels(),
            c_level.channels()
        )));
    }
    let mut out = layer.forward(&fusion_input(f_above, c_level, params.fusion_mode)?)?;
    relu_in_place(&mut out);
    Ok(out)
}

/// Builds the whole pyramid: base features for every level, then fused
/// features from `l_max` down to `l_min`.
pub fn extract(image: &PlanarGrid, params: &ExtractorParams, levels: LevelRange) -> Result<FeaturePyramid> {
    if levels != params.levels {
        return Err(Error::invalid(format!(
            "requested levels {levels} but parameters cover {}",
            params.levels
        )));
    }
    levels.check_image(image.height(), image.width())?;
    if 3 * image.channels() != params.base_channels {
        return Err(Error::invalid(format!(
            "image has {} channels, parameters expect {}",
            image.channels(),
            params.base_channels / 3
        )));
    }
    let gradient = gradient_magnitude(image);
    let base: Vec<PlanarGrid> = (levels.l_min()..=levels.l_max())
        .map(|l| block_statistics(image, &gradient, l))
        .collect();
    let mut fused = vec![PlanarGrid::zeros(0, 0, 0); levels.len()];
    let top = levels.index(levels.l_max());
    fused[top] = context_top(&base[top], params)?;
    for level in (levels.l_min()..levels.l_max()).rev() {
        let i = levels.index(level);
        fused[i] = fuse_topdown(&fused[i + 1], &base[i], params, level)?;
    }
    Ok(FeaturePyramid { levels, base, fused })
}

/// Reverse pass through the fused features. `grad_fused[i]` is the loss
/// cotangent on `F_{l_min + i}`; base features are constants. Returns
/// parameter gradients shaped like `params`.
pub fn extractor_backward(
    pyramid: &FeaturePyramid,
    params: &ExtractorParams,
    grad_fused: Vec<PlanarGrid>,
) -> Result<ExtractorParams> {
    let levels = pyramid.levels;
    if grad_fused.len() != levels.len() {
        return Err(Error::InvalidState(format!(
            "expected {} fused cotangents, got {}",
            levels.len(),
            grad_fused.len()
        )));
    }
    for (g, f) in grad_fused.iter().zip(&pyramid.fused) {
        if !g.same_shape(f) {
            return Err(Error::InvalidState("fused cotangent shape mismatch".into()));
        }
    }
    let mut grads = params.zeros_like();
    let mut pending = grad_fused;
    for level in levels.l_min()..=levels.l_max() {
        let i = levels.index(level);
        let mut g = std::mem::replace(&mut pending[i], PlanarGrid::zeros(0, 0, 0));
        relu_backward_in_place(&pyramid.fused[i], &mut g);
        if level == levels.l_max() {
            let input = context_stack(&pyramid.base[i]);
            params.context.backward_params(&input, &g, &mut grads.context);
        } else {
            let input = fusion_input(&pyramid.fused[i + 1], &pyramid.base[i], params.fusion_mode)?;
            let layer = params.fusion_at(level)?;
            let d_input = layer.backward(&input, &g, &mut grads.fusion[i]);
            if params.fusion_mode == FusionMode::TopDown {
                let above = &pyramid.fused[i + 1];
                let d_up = d_input.channel_range(0, params.fused_width);
                let d_above = upsample_adjoint(&d_up, 2, above.height(), above.width())?;
                pending[i + 1].add_assign(&d_above);
            }
        }
    }
    Ok(grads)
}
