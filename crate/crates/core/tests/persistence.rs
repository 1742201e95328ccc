use adaptive_focus::cli::{encode_model, load_model, save_model};
use adaptive_focus::data::{Benchmark, SceneConfig};
use adaptive_focus::{evaluate, train, TrainConfig};

fn small() -> (Benchmark, TrainConfig) {
    let scenes = SceneConfig {
        height: 32,
        width: 32,
        seed: 3,
        ..SceneConfig::default()
    };
    let bench = Benchmark::generate(&scenes, 6, 3).unwrap();
    let config = TrainConfig {
        max_steps: 12,
        batch_size: 3,
        lr_init: 0.05,
        fused_width: 8,
        hidden_width: 6,
        seed: 11,
        ..TrainConfig::default()
    };
    (bench, config)
}

#[test]
fn saved_model_evaluates_identically() {
    let (bench, config) = small();
    let (model, _) = train(&bench.train, bench.classes, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.af2");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, model);

    let a = serde_json::to_string(&evaluate(&model, &bench.val).unwrap()).unwrap();
    let b = serde_json::to_string(&evaluate(&loaded, &bench.val).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let (bench, config) = small();
    let (a, log_a) = train(&bench.train, bench.classes, &config).unwrap();
    let (b, log_b) = train(&bench.train, bench.classes, &config).unwrap();
    assert_eq!(encode_model(&a).unwrap(), encode_model(&b).unwrap());
    assert_eq!(log_a, log_b);

    let (c, _) = train(&bench.train, bench.classes, &TrainConfig { seed: 12, ..config }).unwrap();
    assert_ne!(encode_model(&a).unwrap(), encode_model(&c).unwrap());
}
