//! Adaptive confidence gating.
//!
//! Each level compares per-pixel confidence against its threshold: pixels at
//! or above it are accepted with their argmax class, the rest are deferred to
//! the next finer level. The finest level has threshold 0 and accepts
//! everything it sees. During training each non-finest threshold is blended
//! toward the `r`-quantile of the confidences of correctly classified pixels:
//! `tau <- gamma * tau + (1 - gamma) * quantile_r(correct)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::LevelRange;
use crate::grid::{argmax_channel, quantile};
use crate::predictor::ProbabilityMap;

/// Boolean membership per pixel at full image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn insert(&mut self, row: usize, col: usize) {
        self.bits[row * self.width + col] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Member pixels in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// How a probability vector is turned into a scalar confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMeasure {
    #[default]
    MaxProb,
    /// Top-1 minus top-2 probability.
    Margin,
    /// `1 - H(p) / ln(n)`.
    NegEntropy,
}

impl std::str::FromStr for ConfidenceMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-prob" => Ok(Self::MaxProb),
            "margin" => Ok(Self::Margin),
            "neg-entropy" => Ok(Self::NegEntropy),
            other => Err(Error::invalid(format!("unknown confidence measure '{other}'"))),
        }
    }
}

pub fn confidence(p: &[f64], measure: ConfidenceMeasure) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyInput("confidence"));
    }
    match measure {
        ConfidenceMeasure::MaxProb => Ok(p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
        ConfidenceMeasure::Margin => {
            if p.len() < 2 {
                return Err(Error::invalid("margin confidence needs at least two classes"));
            }
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in p {
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            Ok(first - second)
        }
        ConfidenceMeasure::NegEntropy => {
            if p.len() == 1 {
                return Ok(1.0);
            }
            let entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
            Ok((1.0 - entropy / (p.len() as f64).ln()).clamp(0.0, 1.0))
        }
    }
}

/// Per-level thresholds and their soft-update parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    levels: LevelRange,
    tau: Vec<f64>,
    gamma: f64,
    r: f64,
    frozen: bool,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

impl ThresholdState {
    /// Every level above `l_min` starts at `tau_init`; `l_min` is pinned to 0.
    pub fn new(levels: LevelRange, tau_init: f64, gamma: f64, r: f64) -> Result<Self> {
        check_unit("tau_init", tau_init)?;
        let tau = (levels.l_min()..=levels.l_max())
            .map(|l| if l == levels.l_min() { 0.0 } else { tau_init })
            .collect();
        Self::from_parts(levels, tau, gamma, r, false)
    }

    /// Explicit thresholds indexed by `level - l_min`; the `l_min` entry must be 0.
    pub fn from_parts(levels: LevelRange, tau: Vec<f64>, gamma: f64, r: f64, frozen: bool) -> Result<Self> {
        check_unit("gamma", gamma)?;
        check_unit("r", r)?;
        if tau.len() != levels.len() {
            return Err(Error::invalid(format!(
                "{} thresholds for {} levels",
                tau.len(),
                levels.len()
            )));
        }
        for &t in &tau {
            check_unit("tau", t)?;
        }
        if tau[0] != 0.0 {
            return Err(Error::invalid("threshold of the lowest level must be 0"));
        }
        Ok(Self {
            levels,
            tau,
            gamma,
            r,
            frozen,
        })
    }

    pub fn levels(&self) -> LevelRange {
        self.levels
    }

    pub fn tau(&self, level: usize) -> f64 {
        self.tau[self.levels.index(level)]
    }

    pub fn taus(&self) -> &[f64] {
        &self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Soft quantile update of one level. An empty confidence list leaves the
    /// threshold untouched.
    pub fn update(&mut self, level: usize, correct_confidences: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if !self.levels.contains(level) {
            return Err(Error::invalid(format!("level {level} outside {}", self.levels)));
        }
        if level == self.levels.l_min() {
            return Err(Error::invalid("the lowest level's threshold is fixed at 0"));
        }
        if correct_confidences.is_empty() {
            return Ok(());
        }
        let q = quantile(correct_confidences, self.r)?;
        let i = self.levels.index(level);
        self.tau[i] = (self.gamma * self.tau[i] + (1.0 - self.gamma) * q).clamp(0.0, 1.0);
        Ok(())
    }
}

/// Functional form of [`ThresholdState::update`].
pub fn update_threshold(state: &ThresholdState, level: usize, correct_confidences: &[f64]) -> Result<ThresholdState> {
    let mut next = state.clone();
    next.update(level, correct_confidences)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accepted {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

/// Pixels resolved at one level, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptedSet {
    pub level: usize,
    pub entries: Vec<Accepted>,
}

impl AcceptedSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Splits `v` into pixels accepted at this level and pixels deferred to the
/// next finer one. Confidence `>= tau` accepts.
pub fn split(
    v: &PixelMask,
    p_map: &ProbabilityMap,
    tau: f64,
    is_lowest: bool,
    measure: ConfidenceMeasure,
) -> Result<(AcceptedSet, PixelMask)> {
    check_unit("tau", tau)?;
    if is_lowest && tau != 0.0 {
        return Err(Error::invalid("the lowest level must use threshold 0"));
    }
    if v.height() != p_map.height() || v.width() != p_map.width() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match probability map {}x{}",
            v.height(),
            v.width(),
            p_map.height(),
            p_map.width()
        )));
    }
    let mut accepted = Vec::new();
    let mut deferred = PixelMask::empty(v.height(), v.width());
    let mut buf = Vec::with_capacity(p_map.classes());
    for (row, col) in v.iter() {
        p_map.probabilities.pixel_into(row, col, &mut buf);
        let cf = confidence(&buf, measure)?;
        if is_lowest || cf >= tau {
            let (class, _) = argmax_channel(&p_map.probabilities, row, col)?;
            accepted.push(Accepted { row, col, class });
        } else {
            deferred.insert(row, col);
        }
    }
    Ok((
        AcceptedSet {
            level: p_map.level,
            entries: accepted,
        },
        deferred,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PlanarGrid;
    use proptest::prelude::*;

    fn map_from_pixels(pixels: &[Vec<f64>]) -> ProbabilityMap {
        let n = pixels[0].len();
        let w = pixels.len();
        let mut g = PlanarGrid::zeros(n, 1, w);
        for (x, p) in pixels.iter().enumerate() {
            for (c, &v) in p.iter().enumerate() {
                g.set(c, 0, x, v);
            }
        }
        ProbabilityMap {
            level: 3,
            probabilities: g,
        }
    }

    #[test]
    fn confidence_measures() {
        let p = [0.1, 0.7, 0.2];
        assert_eq!(confidence(&p, ConfidenceMeasure::MaxProb).unwrap(), 0.7);
        let u = [0.25; 4];
        assert_eq!(confidence(&u, ConfidenceMeasure::MaxProb).unwrap(), 0.25);
        assert_eq!(confidence(&u, ConfidenceMeasure::Margin).unwrap(), 0.0);
        assert!(confidence(&u, ConfidenceMeasure::NegEntropy).unwrap().abs() < 1e-12);
        let m = confidence(&[0.5, 0.3, 0.2], ConfidenceMeasure::Margin).unwrap();
        assert!((m - 0.2).abs() < 1e-15);
        assert!(confidence(&[1.0], ConfidenceMeasure::Margin).is_err());
        assert_eq!(confidence(&[0.0, 1.0], ConfidenceMeasure::NegEntropy).unwrap(), 1.0);
    }

    #[test]
    fn split_by_threshold() {
        let map = map_from_pixels(&[
            vec![0.9, 0.05, 0.03, 0.02],
            vec![0.5, 0.2, 0.2, 0.1],
            vec![0.3, 0.25, 0.25, 0.2],
        ]);
        let all = PixelMask::full(1, 3);
        let (acc, def) = split(&all, &map, 0.5, false, ConfidenceMeasure::MaxProb).unwrap();
        assert_eq!(acc.entries.iter().map(|a| a.col).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(def.iter().collect::<Vec<_>>(), vec![(0, 2)]);

        let (acc, def) = split(&all, &map, 0.0, false, ConfidenceMeasure::MaxProb).unwrap();
        assert_eq!(acc.len(), 3);
        assert!(def.is_empty());

        let (acc, def) = split(&all, &map, 1.0, false, ConfidenceMeasure::MaxProb).unwrap();
        assert!(acc.is_empty());
        assert_eq!(def.count(), 3);

        assert!(split(&all, &map, 0.5, true, ConfidenceMeasure::MaxProb).is_err());
        assert!(split(&PixelMask::full(2, 2), &map, 0.5, false, ConfidenceMeasure::MaxProb).is_err());
    }

    #[test]
    fn threshold_updates() {
        let levels = LevelRange::new(2, 4).unwrap();
        let s = ThresholdState::new(levels, 0.5, 0.9, 0.5).unwrap();
        assert_eq!(s.taus(), &[0.0, 0.5, 0.5]);

        let mut still = ThresholdState::new(levels, 0.5, 1.0, 0.3).unwrap();
        still.update(4, &[0.99, 0.98]).unwrap();
        assert_eq!(still.tau(4), 0.5);

        // Median of [0.6, 0.7, 0.8] is 0.7.
        let next = update_threshold(&s, 3, &[0.8, 0.6, 0.7]).unwrap();
        assert!((next.tau(3) - 0.52).abs() < 1e-15);
        assert_eq!(next.tau(4), 0.5);

        let same = update_threshold(&s, 4, &[]).unwrap();
        assert_eq!(same, s);

        assert!(matches!(
            update_threshold(&s, 2, &[0.3]),
            Err(Error::InvalidArgument(_))
        ));
        let frozen = s.clone().frozen();
        assert!(matches!(update_threshold(&frozen, 3, &[0.3]), Err(Error::Frozen)));
        assert!(ThresholdState::from_parts(levels, vec![0.1, 0.5, 0.5], 0.9, 0.3, false).is_err());
    }

    #[test]
    fn converges_geometrically_to_constant_quantile() {
        let levels = LevelRange::new(2, 3).unwrap();
        let mut s = ThresholdState::new(levels, 0.5, 0.9, 0.3).unwrap();
        for k in 1..=50 {
            s.update(3, &[0.8]).unwrap();
            let expect = 0.8 - 0.3 * 0.9f64.powi(k);
            assert!((s.tau(3) - expect).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn split_partitions_and_is_monotone(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..20),
            members in proptest::collection::vec(any::<bool>(), 20),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let pixels: Vec<Vec<f64>> = raw.iter().map(|p| {
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            }).collect();
            let map = map_from_pixels(&pixels);
            let w = pixels.len();
            let v = PixelMask::from_bits(1, w, members[..w].to_vec()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let (acc_lo, def_lo) = split(&v, &map, lo, false, ConfidenceMeasure::MaxProb).unwrap();
            let (acc_hi, _) = split(&v, &map, hi, false, ConfidenceMeasure::MaxProb).unwrap();
            prop_assert_eq!(acc_lo.len() + def_lo.count(), v.count());
            prop_assert!(def_lo.is_subset_of(&v));
            for a in &acc_lo.entries {
                prop_assert!(v.contains(a.row, a.col) && !def_lo.contains(a.row, a.col));
            }
            let lo_set: Vec<_> = acc_lo.entries.iter().map(|a| a.col).collect();
            prop_assert!(acc_hi.entries.iter().all(|a| lo_set.contains(&a.col)));
        }

        #[test]
        fn split_is_class_permutation_invariant(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..12),
            tau in 0.0f64..=1.0,
        ) {
            let pixels: Vec<Vec<f64>> = raw.iter().map(|p| {
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            }).collect();
            let perm = [2usize, 0, 1];
            let permuted: Vec<Vec<f64>> = pixels.iter().map(|p| {
                let mut q = vec![0.0; 3];
                for (c, &v) in p.iter().enumerate() { q[perm[c]] = v; }
                q
            }).collect();
            let v = PixelMask::full(1, pixels.len());
            let (a, d) = split(&v, &map_from_pixels(&pixels), tau, false, ConfidenceMeasure::MaxProb).unwrap();
            let (b, e) = split(&v, &map_from_pixels(&permuted), tau, false, ConfidenceMeasure::MaxProb).unwrap();
            prop_assert_eq!(d, e);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                // Exact ties may resolve to a different original class; skip those.
                let p = &pixels[x.col];
                let top = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if p.iter().filter(|&&q| q == top).count() == 1 {
                    prop_assert_eq!(perm[x.class], y.class);
                }
            }
        }

        #[test]
        fn tau_stays_in_unit_interval(
            updates in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 0..6), 1..30),
            gamma in 0.0f64..=1.0,
            r in 0.0f64..=1.0,
        ) {
            let levels = LevelRange::new(2, 4).unwrap();
            let mut s = ThresholdState::new(levels, 0.5, gamma, r).unwrap();
            for (k, u) in updates.iter().enumerate() {
                s.update(3 + k % 2, u).unwrap();
                prop_assert!(s.taus().iter().all(|t| (0.0..=1.0).contains(t)));
                prop_assert_eq!(s.tau(2), 0.0);
            }
        }
    }
}
