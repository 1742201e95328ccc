//! Dense planar grids and the handful of numeric kernels the rest of the
//! crate is built on: bilinear resampling (and its exact transpose),
//! per-pixel softmax/argmax, and quantiles.
//!
//! Resampling uses half-pixel centers: output pixel `j` at scale `f` samples
//! the input coordinate `(j + 0.5) / f - 0.5`, clamped to `[0, n - 1]`. The
//! adjoint is built from the same tap table, so forward and transpose can
//! never drift apart.

use crate::error::{Error, Result};

/// Channel-major `channels x height x width` grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarGrid {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl PlanarGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    /// Wraps `values` (row-major within each channel). Fails on a length
    /// mismatch or a non-finite entry.
    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite grid value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: f64) {
        self.values[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[channel * n..(channel + 1) * n]
    }

    pub fn plane_mut(&mut self, channel: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[channel * n..(channel + 1) * n]
    }

    /// Copies the channel vector at one pixel into `out`.
    pub fn pixel_into(&self, row: usize, col: usize, out: &mut Vec<f64>) {
        out.clear();
        let n = self.plane_len();
        let offset = row * self.width + col;
        out.extend((0..self.channels).map(|c| self.values[c * n + offset]));
    }

    pub fn same_shape(&self, other: &PlanarGrid) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stacks grids of identical spatial size along the channel axis.
    pub fn concat_channels(parts: &[&PlanarGrid]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyInput("concat_channels"))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = parts.iter().find(|g| g.height != h || g.width != w) {
            return Err(Error::invalid(format!(
                "cannot concatenate {}x{} with {}x{}",
                h, w, bad.height, bad.width
            )));
        }
        let channels = parts.iter().map(|g| g.channels).sum();
        let mut values = Vec::with_capacity(channels * h * w);
        for g in parts {
            values.extend_from_slice(&g.values);
        }
        Ok(Self {
            channels,
            height: h,
            width: w,
            values,
        })
    }

    /// Channels `start..start + count` as a new grid.
    pub fn channel_range(&self, start: usize, count: usize) -> Self {
        let n = self.plane_len();
        Self {
            channels: count,
            height: self.height,
            width: self.width,
            values: self.values[start * n..(start + count) * n].to_vec(),
        }
    }

    pub fn add_assign(&mut self, other: &PlanarGrid) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn dot(&self, other: &PlanarGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Per-pixel small integers (class indices, or level indices), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> usize {
        self.values[row * self.width + col] as usize
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: usize) {
        self.values[row * self.width + col] = value as u8;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Fails when any value is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.values.iter().position(|&v| v as usize >= classes) {
            Some(i) => Err(Error::invalid(format!(
                "label {} at pixel {} out of range for {classes} classes",
                self.values[i], i
            ))),
            None => Ok(()),
        }
    }
}

/// One output coordinate's two input taps and weights along an axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn axis_taps(input_len: usize, factor: usize) -> Vec<Tap> {
    let last = (input_len - 1) as f64;
    (0..input_len * factor)
        .map(|j| {
            let src = ((j as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input_len - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!(
            "upsampling factor must be a power of two, got {factor}"
        )));
    }
    Ok(())
}

/// Bilinear upsampling by a power-of-two `factor`, per channel.
pub fn upsample_bilinear(input: &PlanarGrid, factor: usize) -> Result<PlanarGrid> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let (h, w) = (input.height, input.width);
    if h == 0 || w == 0 {
        return Ok(PlanarGrid::zeros(input.channels, h * factor, w * factor));
    }
    let rows = axis_taps(h, factor);
    let cols = axis_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = PlanarGrid::zeros(input.channels, oh, ow);
    let mut row_buf = vec![0.0; w];
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for (oy, ty) in rows.iter().enumerate() {
            let a = &src[ty.lo * w..(ty.lo + 1) * w];
            let b = &src[ty.hi * w..(ty.hi + 1) * w];
            for x in 0..w {
                row_buf[x] = ty.w_lo * a[x] + ty.w_hi * b[x];
            }
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, tx) in cols.iter().enumerate() {
                out_row[ox] = tx.w_lo * row_buf[tx.lo] + tx.w_hi * row_buf[tx.hi];
            }
        }
    }
    Ok(out)
}

/// Transpose of [`upsample_bilinear`]: scatters each cotangent value back onto
/// the input taps that produced it.
pub fn upsample_adjoint(
    cotangent: &PlanarGrid,
    factor: usize,
    original_height: usize,
    original_width: usize,
) -> Result<PlanarGrid> {
    check_factor(factor)?;
    let (h, w) = (original_height, original_width);
    if cotangent.height != h * factor || cotangent.width != w * factor {
        return Err(Error::invalid(format!(
            "cotangent {}x{} does not match {}x{} upsampled by {}",
            cotangent.height, cotangent.width, h, w, factor
        )));
    }
    if factor == 1 {
        return Ok(cotangent.clone());
    }
    let mut out = PlanarGrid::zeros(cotangent.channels, h, w);
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let rows = axis_taps(h, factor);
    let cols = axis_taps(w, factor);
    let ow = w * factor;
    let mut row_buf = vec![0.0; w];
    for c in 0..cotangent.channels {
        let src = cotangent.plane(c);
        let dst = out.plane_mut(c);
        for (oy, ty) in rows.iter().enumerate() {
            row_buf.iter_mut().for_each(|v| *v = 0.0);
            let in_row = &src[oy * ow..(oy + 1) * ow];
            for (ox, tx) in cols.iter().enumerate() {
                row_buf[tx.lo] += tx.w_lo * in_row[ox];
                row_buf[tx.hi] += tx.w_hi * in_row[ox];
            }
            for x in 0..w {
                dst[ty.lo * w + x] += ty.w_lo * row_buf[x];
                dst[ty.hi * w + x] += ty.w_hi * row_buf[x];
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax across channels, max-shifted for overflow safety.
pub fn softmax_channels(logits: &PlanarGrid) -> PlanarGrid {
    let n = logits.plane_len();
    let channels = logits.channels;
    let mut out = logits.clone();
    let mut max = vec![f64::NEG_INFINITY; n];
    for c in 0..channels {
        for (m, &z) in max.iter_mut().zip(logits.plane(c)) {
            if z > *m {
                *m = z;
            }
        }
    }
    let mut sum = vec![0.0; n];
    for c in 0..channels {
        let plane = out.plane_mut(c);
        for ((v, m), s) in plane.iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - m).exp();
            *s += *v;
        }
    }
    for c in 0..channels {
        for (v, s) in out.plane_mut(c).iter_mut().zip(&sum) {
            *v /= s;
        }
    }
    out
}

/// Smallest channel index attaining the maximum at `(row, col)`, with that value.
pub fn argmax_channel(probabilities: &PlanarGrid, row: usize, col: usize) -> Result<(usize, f64)> {
    if row >= probabilities.height || col >= probabilities.width {
        return Err(Error::invalid(format!(
            "pixel ({row}, {col}) outside {}x{} grid",
            probabilities.height, probabilities.width
        )));
    }
    if probabilities.channels == 0 {
        return Err(Error::invalid("argmax over zero channels"));
    }
    let offset = row * probabilities.width + col;
    let n = probabilities.plane_len();
    let mut best = (0, probabilities.values[offset]);
    for c in 1..probabilities.channels {
        let v = probabilities.values[c * n + offset];
        if v > best.1 {
            best = (c, v);
        }
    }
    Ok(best)
}

/// Linear-interpolated quantile at position `(len - 1) * r` of the ascending sort.
pub fn quantile(values: &[f64], r: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("quantile ratio {r} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * r;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> PlanarGrid {
        let values = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        PlanarGrid::from_vec(c, h, w, values).unwrap()
    }

    #[test]
    fn constant_upsamples_to_constant() {
        let g = PlanarGrid::filled(2, 3, 2, 3.0);
        let up = upsample_bilinear(&g, 4).unwrap();
        assert_eq!((up.channels(), up.height(), up.width()), (2, 12, 8));
        assert!(up.values().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_sample_row_upsamples_by_hand() {
        let g = PlanarGrid::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&g, 2).unwrap();
        assert_eq!(up.values(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn factor_one_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 3, 5, 7);
        assert_eq!(upsample_bilinear(&g, 1).unwrap(), g);
        assert_eq!(upsample_adjoint(&g, 1, 5, 7).unwrap(), g);
    }

    #[test]
    fn non_power_of_two_factor_is_rejected() {
        let g = PlanarGrid::zeros(1, 2, 2);
        assert!(matches!(upsample_bilinear(&g, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(upsample_bilinear(&g, 0), Err(Error::InvalidArgument(_))));
        let y = PlanarGrid::zeros(1, 6, 6);
        assert!(upsample_adjoint(&y, 3, 2, 2).is_err());
    }

    #[test]
    fn adjoint_rejects_dimension_mismatch() {
        let y = PlanarGrid::zeros(1, 4, 5);
        assert!(matches!(upsample_adjoint(&y, 2, 2, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn adjoint_inner_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_grid(&mut rng, 1, 2, 2);
        let y = random_grid(&mut rng, 1, 4, 4);
        let lhs = upsample_bilinear(&x, 2).unwrap().dot(&y);
        let rhs = x.dot(&upsample_adjoint(&y, 2, 2, 2).unwrap());
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10);
    }

    #[test]
    fn adjoint_of_ones_conserves_mass() {
        let ones = PlanarGrid::filled(1, 6, 8, 1.0);
        let back = upsample_adjoint(&ones, 2, 3, 4).unwrap();
        let total: f64 = back.values().iter().sum();
        assert!((total - 48.0).abs() < 1e-12);
        // Each input cell receives the sum of its interpolation weights; the
        // weights of every output pixel sum to 1, so interior cells get 4.
        assert!((back.get(0, 1, 1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let z = PlanarGrid::zeros(4, 2, 3);
        let p = softmax_channels(&z);
        assert!(p.values().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let z = PlanarGrid::from_vec(2, 1, 1, vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax_channels(&z);
        assert!((p.get(0, 0, 0) - 0.25).abs() < 1e-15);
        assert!((p.get(1, 0, 0) - 0.75).abs() < 1e-15);

        let big = PlanarGrid::from_vec(2, 1, 1, vec![1000.0, 1000.0 + 3f64.ln()]).unwrap();
        assert!((softmax_channels(&big).get(1, 0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn argmax_cases() {
        let g = PlanarGrid::from_vec(3, 1, 1, vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(argmax_channel(&g, 0, 0).unwrap(), (1, 0.7));
        let g = PlanarGrid::from_vec(2, 1, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_channel(&g, 0, 0).unwrap(), (0, 0.5));
        let g = PlanarGrid::from_vec(3, 1, 1, vec![0.0, 0.0, 1.0]).unwrap();
        assert_eq!(argmax_channel(&g, 0, 0).unwrap(), (2, 1.0));
        assert!(argmax_channel(&g, 1, 0).is_err());
    }

    #[test]
    fn quantile_cases() {
        assert!((quantile(&[0.2, 0.4, 0.6, 0.8], 0.5).unwrap() - 0.5).abs() < 1e-15);
        let v = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(quantile(&v, 0.0).unwrap(), -1.0);
        assert_eq!(quantile(&v, 1.0).unwrap(), 2.5);
        assert_eq!(quantile(&[0.7], 0.42).unwrap(), 0.7);
        assert!(matches!(quantile(&[], 0.5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(PlanarGrid::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(PlanarGrid::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn adjoint_identity_holds(seed in any::<u64>(), exp in 0u32..4, h in 1usize..5, w in 1usize..5, c in 1usize..3) {
            let factor = 1usize << exp;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_grid(&mut rng, c, h, w);
            let y = random_grid(&mut rng, c, h * factor, w * factor);
            let lhs = upsample_bilinear(&x, factor).unwrap().dot(&y);
            let rhs = x.dot(&upsample_adjoint(&y, factor, h, w).unwrap());
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            prop_assert!((lhs - rhs).abs() / scale < 1e-10);
        }

        #[test]
        fn upsampling_preserves_range(seed in any::<u64>(), exp in 0u32..4, h in 1usize..6, w in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_grid(&mut rng, 1, h, w);
            let up = upsample_bilinear(&x, 1 << exp).unwrap();
            let lo = x.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(up.values().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn softmax_normalizes_and_keeps_argmax(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let z = PlanarGrid::from_vec(3, 2, 2, values).unwrap();
            let p = softmax_channels(&z);
            for row in 0..2 {
                for col in 0..2 {
                    let s: f64 = (0..3).map(|c| p.get(c, row, col)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                    prop_assert!((0..3).all(|c| p.get(c, row, col) > 0.0 && p.get(c, row, col) <= 1.0));
                    prop_assert_eq!(argmax_channel(&p, row, col).unwrap().0, argmax_channel(&z, row, col).unwrap().0);
                }
            }
        }

        #[test]
        fn softmax_is_shift_invariant(values in proptest::collection::vec(-10.0f64..10.0, 4), shift in -50.0f64..50.0) {
            let z = PlanarGrid::from_vec(4, 1, 1, values.clone()).unwrap();
            let zs = PlanarGrid::from_vec(4, 1, 1, values.iter().map(|v| v + shift).collect()).unwrap();
            let (a, b) = (softmax_channels(&z), softmax_channels(&zs));
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn quantile_bounded_and_monotone(values in proptest::collection::vec(-5.0f64..5.0, 1..40), r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0) {
            let (lo_r, hi_r) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let a = quantile(&values, lo_r).unwrap();
            let b = quantile(&values, hi_r).unwrap();
            prop_assert!(a >= lo && a <= hi && b >= lo && b <= hi);
            prop_assert!(a <= b);
        }
    }
}
