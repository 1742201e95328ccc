//! Synthetic labeled scenes, their on-disk form, and benchmark splits.
//!
//! A benchmark directory holds `train/` and `val/` with one
//! `scene_NNNN.ppm` / `scene_NNNN_labels.pgm` pair per scene, and a
//! `manifest.json` describing the generator settings and every entry.

mod pnm;
mod scene;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pnm::{decode_pgm_labels, decode_ppm, encode_pgm, encode_ppm, quantize};
pub use scene::{generate_scene, generate_scene_with_shapes, LabeledScene, SceneConfig, Shape, ShapeKind};

pub const MANIFEST_FILE: &str = "manifest.json";

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_scene(image_path: &Path, labels_path: &Path, scene: &LabeledScene) -> Result<()> {
    write_file(image_path, &encode_ppm(&scene.image)?)?;
    write_file(labels_path, &encode_pgm(&scene.labels))
}

pub fn read_scene(image_path: &Path, labels_path: &Path, classes: usize) -> Result<LabeledScene> {
    let image = decode_ppm(&read_file(image_path)?)?;
    let labels = decode_pgm_labels(&read_file(labels_path)?, classes)?;
    if image.height() != labels.height() || image.width() != labels.width() {
        return Err(Error::invalid(format!(
            "{} is {}x{} but {} is {}x{}",
            image_path.display(),
            image.height(),
            image.width(),
            labels_path.display(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(LabeledScene { image, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    /// Scene index passed to the generator.
    pub index: u64,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub labels: String,
    pub fg_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scene: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub seeds: Seeds,
    pub train_count: usize,
    pub val_count: usize,
    pub mean_fg_fraction: f64,
    pub entries: Vec<ManifestEntry>,
}

/// Train and validation scenes held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub classes: usize,
    pub train: Vec<LabeledScene>,
    pub val: Vec<LabeledScene>,
}

impl Benchmark {
    /// Same scenes [`make_benchmark`] writes: indices `0..train` for training,
    /// `train..train + val` for validation.
    pub fn generate(config: &SceneConfig, train_count: usize, val_count: usize) -> Result<Self> {
        let train = (0..train_count as u64)
            .map(|i| generate_scene(config, i))
            .collect::<Result<_>>()?;
        let val = (train_count as u64..(train_count + val_count) as u64)
            .map(|i| generate_scene(config, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            classes: config.classes,
            train,
            val,
        })
    }

    /// 64 training and 16 validation scenes of 128x128 with 5% foreground.
    pub fn standard(seed: u64) -> Result<Self> {
        Self::generate(
            &SceneConfig {
                seed,
                ..SceneConfig::default()
            },
            64,
            16,
        )
    }

    /// Loads a benchmark from a manifest file or the directory holding one.
    pub fn load(path: &Path) -> Result<(Self, Manifest)> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)?;
        let classes = manifest.config.classes;
        let mut bench = Self {
            classes,
            train: Vec::new(),
            val: Vec::new(),
        };
        for e in &manifest.entries {
            let scene = read_scene(&root.join(&e.image), &root.join(&e.labels), classes)?;
            match e.split {
                Split::Train => bench.train.push(scene),
                Split::Val => bench.val.push(scene),
            }
        }
        Ok((bench, manifest))
    }
}

fn entry_paths(split: Split, index: u64) -> (String, String) {
    (
        format!("{}/scene_{index:04}.ppm", split.dir()),
        format!("{}/scene_{index:04}_labels.pgm", split.dir()),
    )
}

/// Generates and writes a benchmark under `out_dir`.
pub fn make_benchmark(config: &SceneConfig, train_count: usize, val_count: usize, out_dir: &Path) -> Result<Manifest> {
    if train_count == 0 || val_count == 0 {
        return Err(Error::invalid("train and val counts must be at least 1"));
    }
    config.validate()?;
    let mut entries = Vec::with_capacity(train_count + val_count);
    for index in 0..(train_count + val_count) as u64 {
        let split = if (index as usize) < train_count {
            Split::Train
        } else {
            Split::Val
        };
        let scene = generate_scene(config, index)?;
        let (image, labels) = entry_paths(split, index);
        write_scene(&out_dir.join(&image), &out_dir.join(&labels), &scene)?;
        entries.push(ManifestEntry {
            split,
            index,
            image,
            labels,
            fg_fraction: scene.foreground_fraction(),
        });
    }
    let mean_fg_fraction = entries.iter().map(|e| e.fg_fraction).sum::<f64>() / entries.len() as f64;
    let manifest = Manifest {
        config: config.clone(),
        seeds: Seeds { scene: config.seed },
        train_count,
        val_count,
        mean_fg_fraction,
        entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Path of the manifest inside a benchmark directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
