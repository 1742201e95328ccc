//! Procedural scenes: a smooth textured background with a sparse set of
//! colored shapes (rectangles, ellipses, thin lines) at widely varying scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, PlanarGrid};

use super::pnm::quantize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    ThinLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Class 0 is background.
    pub classes: usize,
    pub channels: usize,
    pub target_fg_fraction: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Side length range of rectangles, drawn log-uniformly.
    pub rect_size: (f64, f64),
    /// Semi-axis range of ellipses, drawn log-uniformly.
    pub ellipse_radius: (f64, f64),
    pub line_length: (f64, f64),
    pub line_width: (f64, f64),
    /// Amplitude of the low-frequency background texture.
    pub texture_amplitude: f64,
    /// Spacing in pixels of the background texture lattice.
    pub texture_cell: usize,
    /// Per-shape color jitter (standard deviation).
    pub shape_jitter: f64,
    /// Per-pixel Gaussian noise (standard deviation).
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            classes: 5,
            channels: 3,
            target_fg_fraction: 0.05,
            min_shapes: 1,
            max_shapes: 40,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::ThinLine],
            rect_size: (3.0, 24.0),
            ellipse_radius: (2.0, 12.0),
            line_length: (12.0, 48.0),
            line_width: (1.5, 3.0),
            texture_amplitude: 0.12,
            texture_cell: 16,
            shape_jitter: 0.04,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::invalid(format!("classes = {} outside [2, 255]", self.classes)));
        }
        if !(self.target_fg_fraction > 0.0 && self.target_fg_fraction <= 0.5) {
            return Err(Error::invalid(format!(
                "target_fg_fraction = {} outside (0, 0.5]",
                self.target_fg_fraction
            )));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.kinds.is_empty() {
            return Err(Error::invalid("no shape kinds enabled"));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes == 0 {
            return Err(Error::invalid("shape count range is empty"));
        }
        if self.texture_cell == 0 {
            return Err(Error::invalid("texture_cell must be positive"));
        }
        for (name, (lo, hi)) in [
            ("rect_size", self.rect_size),
            ("ellipse_radius", self.ellipse_radius),
            ("line_length", self.line_length),
            ("line_width", self.line_width),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::invalid(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        let canvas = self.height.min(self.width) as f64;
        let smallest = self
            .kinds
            .iter()
            .map(|k| match k {
                ShapeKind::Rectangle => self.rect_size.0,
                ShapeKind::Ellipse => 2.0 * self.ellipse_radius.0,
                ShapeKind::ThinLine => self.line_length.0,
            })
            .fold(0.0, f64::max);
        if smallest > canvas {
            return Err(Error::invalid(format!(
                "minimum shape extent {smallest} exceeds the {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Mean color of each foreground class; evenly spaced hues, shifted by
    /// the dataset seed.
    pub fn class_colors(&self) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c01c);
        let offset: f64 = rng.gen_range(0.0..1.0);
        let fg = self.classes - 1;
        (0..fg)
            .map(|k| hsv_to_rgb((offset + k as f64 / fg as f64).fract(), 0.75, 0.85))
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).floor();
    let f = h * 6.0 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// An image with a label per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: PlanarGrid,
    pub labels: LabelMap,
}

impl LabeledScene {
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.labels.values().iter().filter(|&&v| v != 0).count();
        fg as f64 / self.labels.values().len() as f64
    }
}

/// Geometry of one stamped shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rectangle {
        cy: f64,
        cx: f64,
        half_h: f64,
        half_w: f64,
        angle: f64,
    },
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    ThinLine {
        y0: f64,
        x0: f64,
        y1: f64,
        x1: f64,
        half_width: f64,
    },
}

impl Shape {
    /// Whether the center of pixel `(row, col)` lies inside the shape.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (py, px) = (row as f64 + 0.5, col as f64 + 0.5);
        match *self {
            Shape::Rectangle {
                cy,
                cx,
                half_h,
                half_w,
                angle,
            } => {
                let (u, v) = rotate(py - cy, px - cx, angle);
                u.abs() <= half_h && v.abs() <= half_w
            }
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (u, v) = rotate(py - cy, px - cx, angle);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::ThinLine {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => {
                let (dy, dx) = (y1 - y0, x1 - x0);
                let len2 = dy * dy + dx * dx;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0)
                };
                let (qy, qx) = (y0 + t * dy - py, x0 + t * dx - px);
                qy * qy + qx * qx <= half_width * half_width
            }
        }
    }

    /// Inclusive pixel bounding box `(row_lo, row_hi, col_lo, col_hi)` clipped to the canvas.
    fn bounds(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        let (ylo, yhi, xlo, xhi) = match *self {
            Shape::Rectangle {
                cy, cx, half_h, half_w, ..
            } => {
                let r = (half_h * half_h + half_w * half_w).sqrt();
                (cy - r, cy + r, cx - r, cx + r)
            }
            Shape::Ellipse { cy, cx, ry, rx, .. } => {
                let r = ry.max(rx);
                (cy - r, cy + r, cx - r, cx + r)
            }
            Shape::ThinLine {
                y0,
                x0,
                y1,
                x1,
                half_width,
            } => (
                y0.min(y1) - half_width,
                y0.max(y1) + half_width,
                x0.min(x1) - half_width,
                x0.max(x1) + half_width,
            ),
        };
        let clip = |v: f64, n: usize| v.floor().clamp(0.0, (n - 1) as f64) as usize;
        if yhi < 0.0 || xhi < 0.0 || ylo > height as f64 || xlo > width as f64 {
            return None;
        }
        Some((clip(ylo, height), clip(yhi, height), clip(xlo, width), clip(xhi, width)))
    }

    pub fn pixels(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let Some((r0, r1, c0, c1)) = self.bounds(height, width) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                if self.contains(row, col) {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

fn rotate(dy: f64, dx: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * dy + s * dx, -s * dy + c * dx)
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

fn random_shape(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Shape {
    let (h, w) = (config.height as f64, config.width as f64);
    let kind = config.kinds[rng.gen_range(0..config.kinds.len())];
    let cy = rng.gen_range(0.0..h);
    let cx = rng.gen_range(0.0..w);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    match kind {
        ShapeKind::Rectangle => {
            let side = log_uniform(rng, config.rect_size);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            Shape::Rectangle {
                cy,
                cx,
                half_h: 0.5 * side * aspect.sqrt(),
                half_w: 0.5 * side / aspect.sqrt(),
                angle,
            }
        }
        ShapeKind::Ellipse => {
            let r = log_uniform(rng, config.ellipse_radius);
            let aspect: f64 = rng.gen_range(0.5..2.0);
            Shape::Ellipse {
                cy,
                cx,
                ry: r * aspect.sqrt(),
                rx: r / aspect.sqrt(),
                angle,
            }
        }
        ShapeKind::ThinLine => {
            let len = rng.gen_range(config.line_length.0..=config.line_length.1);
            let (s, c) = angle.sin_cos();
            Shape::ThinLine {
                y0: cy - 0.5 * len * s,
                x0: cx - 0.5 * len * c,
                y1: cy + 0.5 * len * s,
                x1: cx + 0.5 * len * c,
                half_width: 0.5 * rng.gen_range(config.line_width.0..=config.line_width.1),
            }
        }
    }
}

/// Smooth per-channel texture: random lattice values, bilinearly blended.
fn value_noise(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let cell = config.texture_cell;
    let (lh, lw) = (config.height / cell + 2, config.width / cell + 2);
    (0..config.channels)
        .map(|_| {
            let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut plane = vec![0.0; config.height * config.width];
            for y in 0..config.height {
                let fy = y as f64 / cell as f64;
                let (iy, ty) = (fy.floor() as usize, fy.fract());
                for x in 0..config.width {
                    let fx = x as f64 / cell as f64;
                    let (ix, tx) = (fx.floor() as usize, fx.fract());
                    let at = |r: usize, c: usize| lattice[r * lw + c];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    plane[y * config.width + x] = top * (1.0 - ty) + bottom * ty;
                }
            }
            plane
        })
        .collect()
}

const BACKGROUND_MEAN: [f64; 3] = [0.42, 0.45, 0.38];

/// Scene `index` of the dataset described by `config`, together with the
/// shapes that were stamped (in stamping order; later shapes overwrite).
pub fn generate_scene_with_shapes(config: &SceneConfig, index: u64) -> Result<(LabeledScene, Vec<Shape>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index + 1);
    let (h, w, channels) = (config.height, config.width, config.channels);
    let colors = config.class_colors();

    let texture = value_noise(config, &mut rng);
    let mut values = vec![0.0; channels * h * w];
    for c in 0..channels {
        let base = BACKGROUND_MEAN[c % 3];
        for (v, t) in values[c * h * w..(c + 1) * h * w].iter_mut().zip(&texture[c]) {
            *v = base + config.texture_amplitude * t;
        }
    }

    let mut labels = LabelMap::filled(h, w, 0);
    let mut fg = 0usize;
    let total = (h * w) as f64;
    let ceiling = (2.0 * config.target_fg_fraction * total).ceil() as usize;
    let jitter = Normal::new(0.0, config.shape_jitter.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut shapes = Vec::new();
    let mut attempts = 0;
    while shapes.len() < config.max_shapes && attempts < 8 * config.max_shapes {
        attempts += 1;
        let reached = fg as f64 / total >= config.target_fg_fraction;
        if reached && shapes.len() >= config.min_shapes {
            break;
        }
        let shape = random_shape(config, &mut rng);
        let class = rng.gen_range(1..config.classes);
        let tint: Vec<f64> = (0..channels).map(|_| jitter.sample(&mut rng)).collect();
        let pixels = shape.pixels(h, w);
        if pixels.is_empty() {
            continue;
        }
        let gained = pixels.iter().filter(|&&(r, c)| labels.get(r, c) == 0).count();
        if fg + gained > ceiling && !shapes.is_empty() {
            continue;
        }
        for &(r, col) in &pixels {
            labels.set(r, col, class);
            for c in 0..channels {
                values[(c * h + r) * w + col] = colors[class - 1][c % 3] + tint[c];
            }
        }
        fg += gained;
        shapes.push(shape);
    }

    let noise = Normal::new(0.0, config.noise_std.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    for v in values.iter_mut() {
        *v = quantize(*v + noise.sample(&mut rng)) as f64 / 255.0;
    }
    let image = PlanarGrid::from_vec(channels, h, w, values)?;
    Ok((LabeledScene { image, labels }, shapes))
}

/// Deterministic function of `(config, index)`. Image values are multiples
/// of 1/255, so the PPM round trip is exact.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<LabeledScene> {
    Ok(generate_scene_with_shapes(config, index)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 3).unwrap());
        assert_ne!(generate_scene(&cfg, 3).unwrap(), generate_scene(&cfg, 4).unwrap());
    }

    #[test]
    fn foreground_fraction_near_target() {
        let cfg = SceneConfig::default();
        for index in 0..20 {
            let f = generate_scene(&cfg, index).unwrap().foreground_fraction();
            assert!((0.02..=0.10).contains(&f), "scene {index}: {f}");
        }
    }

    #[test]
    fn labels_follow_geometry() {
        let cfg = SceneConfig::default();
        for index in 0..5 {
            let (scene, shapes) = generate_scene_with_shapes(&cfg, index).unwrap();
            for row in 0..cfg.height {
                for col in 0..cfg.width {
                    let inside = shapes.iter().any(|s| s.contains(row, col));
                    assert_eq!(scene.labels.get(row, col) != 0, inside);
                }
            }
            assert!(scene.image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            scene.labels.check_classes(cfg.classes).unwrap();
        }
    }

    #[test]
    fn unsatisfiable_configs_are_rejected() {
        let cfg = SceneConfig {
            height: 16,
            width: 16,
            kinds: vec![ShapeKind::ThinLine],
            line_length: (20.0, 30.0),
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(Error::InvalidArgument(_))));
        let cfg = SceneConfig {
            target_fg_fraction: 0.6,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
        let cfg = SceneConfig {
            classes: 1,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }
}
