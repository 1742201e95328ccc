use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adaptive_focus::data::decode_pgm_labels;

fn af2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_af2"))
        .args(args)
        .output()
        .expect("spawn af2")
}

fn ok(args: &[&str]) -> Output {
    let out = af2(args);
    assert!(
        out.status.success(),
        "af2 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bench");
    let model = dir.path().join("model.af2");
    let log = dir.path().join("train.csv");
    let report = dir.path().join("report.json");

    ok(&["generate", "--out", s(&data)]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 80);

    ok(&["train", "--data", s(&data), "--out", s(&model), "--log", s(&log)]);
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 301);

    ok(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report)]);
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let miou = rep["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let stats = fs::read_to_string(report.with_extension("csv")).unwrap();
    assert_eq!(stats.lines().count(), 4);
}

fn small_setup(dir: &Path) -> (String, String) {
    let data = dir.join("bench");
    let config = dir.join("config.json");
    let model = dir.join("model.af2");
    ok(&[
        "generate",
        "--out",
        s(&data),
        "--train",
        "3",
        "--val",
        "2",
        "--size",
        "32",
        "--seed",
        "7",
    ]);
    fs::write(
        &config,
        r#"{"max_steps": 4, "batch_size": 2, "fused_width": 6, "hidden_width": 5, "l_min": 2, "l_max": 4}"#,
    )
    .unwrap();
    ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&model)]);
    (s(&data).to_string(), s(&model).to_string())
}

#[test]
fn infer_and_viz_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = small_setup(dir.path());
    let image = format!("{data}/val/scene_0003.ppm");
    let a = dir.path().join("a.pgm");
    let b = dir.path().join("b.pgm");
    let levels = dir.path().join("levels.pgm");

    ok(&[
        "infer",
        "--model",
        &model,
        "--image",
        &image,
        "--out",
        s(&a),
        "--levels-out",
        s(&levels),
    ]);
    ok(&["infer", "--model", &model, "--image", &image, "--out", s(&b)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let labels = decode_pgm_labels(&bytes, 5).unwrap();
    assert_eq!((labels.height(), labels.width()), (32, 32));
    let level_map = decode_pgm_labels(&fs::read(&levels).unwrap(), 5).unwrap();
    assert!(level_map.values().iter().all(|&l| (2..=4).contains(&l)));

    let viz = dir.path().join("viz");
    ok(&["viz", "--model", &model, "--image", &image, "--out", s(&viz)]);
    let mut files: Vec<String> = fs::read_dir(&viz)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["final.ppm", "level_2.ppm", "level_3.ppm", "level_4.ppm"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(af2(&["train", "--nonsense"]).status.code(), Some(2));
    assert_eq!(af2(&[]).status.code(), Some(2));
    let missing = dir.path().join("missing");
    assert_eq!(
        af2(&[
            "eval",
            "--model",
            s(&missing),
            "--data",
            s(&missing),
            "--report",
            "r.json"
        ])
        .status
        .code(),
        Some(3)
    );

    let (data, model) = small_setup(dir.path());
    let mut bytes = fs::read(&model).unwrap();
    bytes[4] = 99;
    let bad = dir.path().join("bad.af2");
    fs::write(&bad, &bytes).unwrap();
    let image = format!("{data}/train/scene_0000.ppm");
    let out = dir.path().join("o.pgm");
    assert_eq!(
        af2(&["infer", "--model", s(&bad), "--image", &image, "--out", s(&out)])
            .status
            .code(),
        Some(3)
    );

    let diverge = dir.path().join("diverge.json");
    fs::write(
        &diverge,
        r#"{"max_steps": 5, "batch_size": 2, "lr_init": 1e300, "fused_width": 6, "hidden_width": 5}"#,
    )
    .unwrap();
    let m2 = dir.path().join("m2.af2");
    assert_eq!(
        af2(&["train", "--data", &data, "--config", s(&diverge), "--out", s(&m2)])
            .status
            .code(),
        Some(4)
    );

    let out_csv = dir.path().join("sweep.csv");
    assert_eq!(
        af2(&[
            "ablate",
            "--data",
            &data,
            "--sweep",
            "r",
            "--values",
            "0.3,0.3",
            "--out",
            s(&out_csv)
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn ablation_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_setup(dir.path());
    let config = dir.path().join("config.json");
    let out = dir.path().join("levels.csv");
    ok(&[
        "ablate",
        "--data",
        &data,
        "--config",
        s(&config),
        "--sweep",
        "levels",
        "--values",
        "2-4,2,3,4",
        "--out",
        s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "levels,status,miou,mean_f1");
    assert!(lines[1].starts_with("2-4,ok,"));
}
