mod common;

use std::fs;

use anchor_uda::experiment::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_run, snapshot_path, ExperimentConfig, Variant,
};
use anchor_uda::Error;
use common::{sha256_file, small_config, tree_digest};

fn config_in(seed: u64, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = small_config(seed);
    cfg.out = dir.to_path_buf();
    cfg
}

#[test]
fn generation_is_reproducible_byte_for_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let written = cmd_generate(&config_in(21, a.path())).unwrap();
    cmd_generate(&config_in(21, b.path())).unwrap();
    assert_eq!(written.len(), 3);
    assert_eq!(tree_digest(a.path()), tree_digest(b.path()));

    let c = tempfile::tempdir().unwrap();
    cmd_generate(&config_in(22, c.path())).unwrap();
    let src = |d: &std::path::Path| sha256_file(&d.join("data/source.cagd"));
    assert_ne!(src(a.path()), src(c.path()));
}

#[test]
fn run_writes_its_artifacts_and_resumes_to_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(23, dir.path());
    let report = cmd_run(&cfg, None).unwrap();
    assert_eq!(report.stages.len(), cfg.train.stages);
    for rel in [
        "config.toml",
        "data/target-eval.cagd",
        "metrics.jsonl",
        "summary.json",
        "plots/stages.tsv",
        "reports/final.tsv",
        "reports/source-only.json",
        "checkpoints/warmup.cagm",
        "checkpoints/final.cagm",
        "snapshots/stage-1.cags",
        "snapshots/stage-2.cags",
    ] {
        assert!(dir.path().join(rel).is_file(), "missing {rel}");
    }
    let lines = fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    let t = &cfg.train;
    assert_eq!(
        lines,
        t.pretrain_iterations + t.warmup_iterations + t.stages * t.iterations_per_stage
    );
    let back = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);

    let final_digest = sha256_file(&dir.path().join("checkpoints/final.cagm"));
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed_cfg = config_in(23, resumed_dir.path());
    let resumed = cmd_run(&resumed_cfg, Some(&snapshot_path(dir.path(), 2))).unwrap();
    assert_eq!(resumed.final_eval, report.final_eval);
    assert!(resumed.source_only.is_none());
    assert_eq!(
        sha256_file(&resumed_dir.path().join("checkpoints/final.cagm")),
        final_digest
    );
}

#[test]
fn ablation_gains_are_relative_to_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(24, dir.path());
    let report = cmd_ablate(&cfg).unwrap();
    assert_eq!(report.rows.len(), Variant::ALL.len());
    assert_eq!(report.row(Variant::Warmup).unwrap().gain, 0.0);
    for r in &report.rows {
        assert_eq!(r.gain, r.miou - report.warmup_miou);
        assert_eq!(r.miou, r.eval.miou);
    }
    let table = fs::read_to_string(dir.path().join("ablation.tsv")).unwrap();
    assert_eq!(table, report.to_table());
    assert_eq!(table.lines().count(), Variant::ALL.len() + 1);
    for v in Variant::ALL.iter().filter(|v| v.switches().is_some()) {
        assert!(dir
            .path()
            .join("variants")
            .join(v.name())
            .join("final.cagm")
            .is_file());
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ablation.json")).unwrap())
            .unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), Variant::ALL.len());
}

#[test]
fn eval_is_repeatable_and_picks_up_the_run_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(25, dir.path());
    cmd_generate(&cfg).unwrap();
    cmd_run(&cfg, None).unwrap();
    let ckpt = dir.path().join("checkpoints/final.cagm");
    let data = dir.path().join("data/target-eval.cagd");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_eval(&ckpt, &data, a.path()).unwrap();
    let rb = cmd_eval(&ckpt, &data, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(tree_digest(a.path()), tree_digest(b.path()));
    assert_eq!(
        fs::read_to_string(a.path().join("plots/stages.tsv")).unwrap(),
        fs::read_to_string(dir.path().join("plots/stages.tsv")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["final"]["miou"].as_f64().unwrap(), ra.miou);
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cagm");
    let data = dir.path().join("nope.cagd");
    match cmd_eval(&missing, &data, dir.path()) {
        Err(e @ Error::File { .. }) => assert!(e.to_string().contains("nope.cagm"), "{e}"),
        other => panic!("expected a file error, got {other:?}"),
    }
}

#[test]
fn config_requires_a_seed_and_rejects_unknown_keys() {
    assert!(ExperimentConfig::from_toml("out = \"x\"\n").is_err());
    assert!(ExperimentConfig::from_toml("seed = 1\n[train]\nlearning_rate = 0.1\n").is_err());
    let cfg = ExperimentConfig::from_toml("seed = 9\n[train]\nstages = 2\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.stages, 2);
    assert_eq!(cfg.train.lambda_dis, 0.3);
    assert_eq!(
        ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(),
        cfg
    );
}

#[test]
fn shipped_config_is_the_built_in_default() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::with_seed(1));
}
