//! The `af2` command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 input or format error, 4 numeric
//! divergence during training.

mod model_file;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cascade::CascadeResult;
use crate::data::{decode_ppm, encode_pgm, make_benchmark, read_file, write_file, Benchmark, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_fusion, ablate_levels, ablate_r, evaluate, write_fusion_sweep_csv, write_levels_sweep_csv, write_r_sweep_csv,
};
use crate::extractor::{FusionMode, LevelRange};
use crate::grid::LabelMap;
use crate::optim::{train, TrainConfig};

pub use model_file::{decode_model, encode_model, load_model, save_model, Header, FORMAT_VERSION, MAGIC};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "af2",
    version,
    about = "Coarse-to-fine segmentation with adaptive confidence thresholds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sweep {
    R,
    Levels,
    Fusion,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark (scenes, labels, manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0.05)]
        fg_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on the training split of a benchmark.
    Train {
        /// Benchmark directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Segment one PPM image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label map (PGM).
        #[arg(long)]
        out: PathBuf,
        /// Map of the level each pixel was accepted at (PGM).
        #[arg(long)]
        levels_out: Option<PathBuf>,
    },
    /// Evaluate a model on the validation split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics report (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Per-level statistics (CSV); defaults to the report path with a
        /// `.csv` extension.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train and evaluate one model per sweep value.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated values: ratios for `r`, ranges such as `2-4` or
        /// `3` for `levels`, `top-down`/`level-local` for `fusion`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-level acceptance images for one PPM image.
    Viz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_INPUT,
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let config = match path {
        Some(p) => serde_json::from_slice(&read_file(p)?)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create(path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

fn parse_values<T>(values: &[String], parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    values.iter().map(|v| parse(v.trim())).collect()
}

fn parse_range(s: &str) -> Result<LevelRange> {
    let bad = || Error::invalid(format!("bad level subset {s:?}"));
    match s.split_once('-') {
        Some((a, b)) => LevelRange::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => LevelRange::single(s.parse().map_err(|_| bad())?),
    }
}

fn parse_fusion(s: &str) -> Result<FusionMode> {
    match s {
        "top-down" => Ok(FusionMode::TopDown),
        "level-local" => Ok(FusionMode::LevelLocal),
        _ => Err(Error::invalid(format!("unknown fusion variant {s:?}"))),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            out,
            train,
            val,
            size,
            classes,
            fg_frac,
            seed,
        } => {
            let config = SceneConfig {
                height: size,
                width: size,
                classes,
                target_fg_fraction: fg_frac,
                seed,
                ..SceneConfig::default()
            };
            let manifest = make_benchmark(&config, train, val, &out)?;
            println!(
                "wrote {} scenes to {} (mean foreground {:.4})",
                manifest.entries.len(),
                out.display(),
                manifest.mean_fg_fraction
            );
        }
        Command::Train { data, config, out, log } => {
            let config = read_config(config.as_deref())?;
            let (bench, _) = Benchmark::load(&data)?;
            let (model, train_log) = train(&bench.train, bench.classes, &config)?;
            save_model(&model, &out)?;
            if let Some(log) = log {
                write_with(&log, |w| train_log.write_csv(w))?;
            }
            let last = train_log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} steps, final loss {last:.5}, thresholds {:?}",
                config.max_steps,
                model.thresholds.taus()
            );
        }
        Command::Infer {
            model,
            image,
            out,
            levels_out,
        } => {
            let model = load_model(&model)?;
            let result = model.infer(&decode_ppm(&read_file(&image)?)?)?;
            write_file(&out, &encode_pgm(&result.label_map))?;
            if let Some(path) = levels_out {
                write_file(&path, &encode_pgm(&result.level_map))?;
            }
        }
        Command::Eval {
            model,
            data,
            report,
            stats,
        } => {
            let model = load_model(&model)?;
            let (bench, _) = Benchmark::load(&data)?;
            let rep = evaluate(&model, &bench.val)?;
            let mut json = serde_json::to_vec_pretty(&rep)?;
            json.push(b'\n');
            write_file(&report, &json)?;
            let stats = stats.unwrap_or_else(|| report.with_extension("csv"));
            write_with(&stats, |w| rep.level_stats.write_csv(w))?;
            println!("mIoU {:.4}  mean F1 {:.4}", rep.miou, rep.mean_f1);
        }
        Command::Ablate {
            data,
            config,
            sweep,
            values,
            out,
        } => {
            let config = read_config(config.as_deref())?;
            let (bench, _) = Benchmark::load(&data)?;
            match sweep {
                Sweep::R => {
                    let rs = parse_values(&values, |s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::invalid(format!("bad r value {s:?}")))
                    })?;
                    let rows = ablate_r(&bench, &config, &rs)?;
                    write_with(&out, |w| write_r_sweep_csv(&rows, w))?;
                }
                Sweep::Levels => {
                    let rows = ablate_levels(&bench, &config, &parse_values(&values, parse_range)?)?;
                    write_with(&out, |w| write_levels_sweep_csv(&rows, w))?;
                }
                Sweep::Fusion => {
                    let rows = ablate_fusion(&bench, &config, &parse_values(&values, parse_fusion)?)?;
                    write_with(&out, |w| write_fusion_sweep_csv(&rows, w))?;
                }
            }
        }
        Command::Viz { model, image, out } => {
            let model = load_model(&model)?;
            let result = model.infer(&decode_ppm(&read_file(&image)?)?)?;
            for path in write_viz(&result, model.classes(), &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// Display color of a class: black background, evenly spaced hues otherwise.
pub fn class_color(class: usize, classes: usize) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let h = (class - 1) as f64 / (classes - 1).max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|v| (v * 255.0).round() as u8)
}

fn ppm(h: usize, w: usize, pixel: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            out.extend_from_slice(&pixel(r, c));
        }
    }
    out
}

/// Writes `level_<l>.ppm` for every level (class colors where the pixel was
/// accepted at `l`, white elsewhere) and `final.ppm` with the stacked map.
/// Returns the written paths, coarsest level first.
pub fn write_viz(result: &CascadeResult, classes: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    let labels: &LabelMap = &result.label_map;
    let (h, w) = (labels.height(), labels.width());
    let mut paths = Vec::new();
    for level in result.levels.top_down() {
        let path = dir.join(format!("level_{level}.ppm"));
        let bytes = ppm(h, w, |r, c| {
            if result.level_map.get(r, c) == level {
                class_color(labels.get(r, c), classes)
            } else {
                [255; 3]
            }
        });
        write_file(&path, &bytes)?;
        paths.push(path);
    }
    let path = dir.join("final.ppm");
    write_file(&path, &ppm(h, w, |r, c| class_color(labels.get(r, c), classes)))?;
    paths.push(path);
    Ok(paths)
}
