use std::path::Path;

use omnicli::commands::{request_for_sample, resolve_checkpoint};
use omnicli::run;
use omniris::evalkit::{MetricsReport, PredictionDump};
use omniris::omnimodel::{save_checkpoint, ModelConfig, ModelState};
use omniris::synthref::DatasetConfig;

fn small_config() -> DatasetConfig {
    DatasetConfig {
        train_size: 18,
        test_size: 30,
        train_scenes: 12,
        train_reference_scenes: 30,
        test_reference_scenes: 30,
        ..DatasetConfig::default()
    }
}

fn omnicli(args: &[&str]) -> i32 {
    run(std::iter::once("omnicli").chain(args.iter().copied()))
}

fn build(dir: &Path) {
    let cfg = dir.join("data.json");
    std::fs::write(&cfg, serde_json::to_string(&small_config()).unwrap()).unwrap();
    let out = dir.join("data");
    assert_eq!(omnicli(&["build-data", "--seed", "7", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()]), 0);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(omnicli(&["build-data", "--out", "x", "--bogus"]), 2);
    assert_eq!(omnicli(&["frobnicate"]), 2);
    assert_eq!(omnicli(&[]), 2);
    assert_eq!(omnicli(&["train", "--data", "d", "--out", "o", "--preset", "huge"]), 2);
    assert_eq!(omnicli(&["--help"]), 0);
}

#[test]
fn build_data_writes_manifests_with_the_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let data = dir.path().join("data");
    for split in ["omni-train", "text-test", "visual-test", "omni-test"] {
        assert!(data.join(format!("{split}.jsonl")).is_file(), "{split}");
    }
    let cfg: DatasetConfig = serde_json::from_str(&std::fs::read_to_string(data.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.train_size, 18);
}

#[test]
fn missing_inputs_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let m = missing.to_str().unwrap();
    assert_eq!(omnicli(&["eval", "--data", m, "--ckpt", m, "--split", "text-test"]), 1);
    assert_eq!(omnicli(&["infer", "--data", m, "--ckpt", m, "--sample", "x"]), 1);
}

#[test]
fn checkpoint_names_resolve_inside_the_run_directory() {
    let run = Path::new("runs/a");
    assert_eq!(resolve_checkpoint("stage3", run).unwrap(), run.join("joint.ckpt"));
    assert_eq!(resolve_checkpoint("visual_tune", run).unwrap(), run.join("visual_tune.ckpt"));
    assert!(resolve_checkpoint("stage9", run).is_err());
}

#[test]
fn train_eval_and_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "batch_size = 1\nsteps.vl_align = 1\nsteps.visual_tune = 1\nsteps.joint = 2\n").unwrap();
    let run_dir = dir.path().join("run");
    let r = run_dir.to_str().unwrap();
    assert_eq!(omnicli(&["train", "--data", d, "--out", r, "--config", cfg.to_str().unwrap(), "--seed", "3"]), 0);
    for stage in ["vl_align", "visual_tune", "joint"] {
        assert!(run_dir.join(format!("{stage}.ckpt")).is_file());
    }
    assert!(std::fs::read_to_string(run_dir.join("train.cfg")).unwrap().contains("seed=3"));

    let report = dir.path().join("eval/visual.json");
    let code = omnicli(&[
        "eval", "--data", d, "--run", r, "--ckpt", "stage3", "--split", "visual-test", "--kind", "box", "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let parsed: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.split, "visual-test");
    assert_eq!(parsed.samples, 30);
    assert!((0.0..=1.0).contains(&parsed.pooled.giou));
    let preds = std::fs::read_to_string(report.with_extension("predictions.jsonl")).unwrap();
    let dumps: Vec<PredictionDump> = preds.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(dumps.len(), 30);
    assert_eq!(omnicli(&["eval", "--data", d, "--run", r, "--ckpt", "stage3", "--split", "text-test", "--kind", "lasso"]), 1);

    let ckpt = run_dir.join("joint.ckpt");
    let c = ckpt.to_str().unwrap();
    let ids: Vec<String> = std::fs::read_to_string(data.join("omni-test.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(omnicli(&["infer", "--data", d, "--ckpt", c, "--sample", &ids[0]]), 0);
    let req = request_for_sample(&data, &ids[0]).unwrap();
    assert!(req.text.is_some() && req.reference.is_some());
    let req_path = dir.path().join("req.json");
    std::fs::write(&req_path, serde_json::to_string(&req).unwrap()).unwrap();
    assert_eq!(omnicli(&["infer", "--data", d, "--ckpt", c, "--request", req_path.to_str().unwrap()]), 0);
    assert_eq!(omnicli(&["infer", "--data", d, "--ckpt", c, "--sample", "no-such-sample"]), 1);
}

#[test]
fn train_accepts_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    build(dir.path());
    let init = dir.path().join("init.ckpt");
    let small = ModelState::init(&ModelConfig { d_model: 16, stem_channels: 4, ..ModelConfig::desk() }, 0).unwrap();
    save_checkpoint(&small, &init).unwrap();
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "batch_size = 1\nsteps.vl_align = 1\nsteps.visual_tune = 0\nsteps.joint = 0\n").unwrap();
    let out = dir.path().join("run");
    let args = [
        "train", "--data", dir.path().join("data").to_str().unwrap(), "--out", out.to_str().unwrap(), "--config",
        cfg.to_str().unwrap(), "--ckpt", init.to_str().unwrap(),
    ]
    .map(String::from);
    assert_eq!(run(std::iter::once("omnicli".to_string()).chain(args)), 0);
    let trained = omniris::omnimodel::load_checkpoint(&out.join("vl_align.ckpt")).unwrap();
    assert_eq!(trained.config.d_model, 16);
}
