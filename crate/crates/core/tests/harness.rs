mod common;

use std::path::Path;
use std::process::Command;

use lsrm::harness::compare::{compare_layers, overlap_from_dumps, write_comparison, Reference};
use lsrm::harness::config::{RunConfig, SceneRef};
use lsrm::harness::run::{cmd_run, diff_runs, dry_run};
use lsrm::harness::{exit_code, EXIT_CONFIG};
use lsrm::pipeline::{build_instance, stage_one, Model, ModelConfig, RoutingMode};
use lsrm::scene::SceneFile;

fn tiny_run(out: &Path, workers: usize) -> RunConfig {
    RunConfig {
        scene: SceneRef::Preset("small_sphere".into()),
        model: common::tiny_config(),
        workers,
        seed: 4,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn config_errors_map_to_exit_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    for text in [r#"{"wrokers": 2}"#, r#"{"schema": 9}"#, r#"{"model": {"d": 30, "h_q": 4}}"#, "not json"] {
        std::fs::write(&path, text).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG, "{text}: {err}");
    }
}

#[test]
fn runs_are_byte_identical_and_report_parity() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = cmd_run(&tiny_run(a.path(), 4)).unwrap();
    let sb = cmd_run(&tiny_run(b.path(), 4)).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(sa.status, "ok");
    assert!(sa.parity_max_abs.unwrap() <= 1e-6);
    assert_eq!(sa.bytes_by_kind["window_local"], 0);
    assert_eq!(sa.overlap.len(), 4 * common::tiny_config().sparse_depth);
    assert!(diff_runs(a.path(), b.path()).unwrap().is_empty());
    for name in &sa.artifacts {
        assert!(a.path().join(name).exists(), "{name}");
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["fine_tokens"]["volume"], sa.fine_tokens.volume);
}

#[test]
fn empty_scene_reports_no_active_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(dir.path(), 2);
    cfg.scene = SceneRef::Preset("empty".into());
    let s = cmd_run(&cfg).unwrap();
    assert_eq!(s.status, "no active tokens");
    assert_eq!(s.fine_tokens.volume, 0);
    assert_eq!(s.artifacts, ["stage1.gv", "summary.json"]);
}

#[test]
fn full_scale_dry_run_estimates() {
    let cfg = RunConfig {
        model: ModelConfig::full_scale(),
        ..RunConfig::default()
    };
    let est = dry_run(&cfg).unwrap();
    assert_eq!((est.s_vol, est.s_img), (96, 96));
    assert!((10_000..100_000).contains(&est.fine_volume_tokens), "{est:?}");
    assert!(est.fine_image_tokens_estimate > 1_000 && est.fine_image_tokens_estimate < est.dense_image_tokens);
    assert_eq!(est.dense_image_tokens, 12 * 96 * 96);
}

/// The overlap table written by compare-routing is recomputed offline from
/// the dumped selections, on the default sphere with seed 21.
#[test]
fn overlap_table_matches_offline_jaccard() {
    let cfg = RunConfig {
        seed: 21,
        ..RunConfig::default()
    };
    let model = Model::random(&cfg.model, cfg.seed).unwrap();
    let scene = cfg.scene().unwrap();
    let s1 = stage_one(&model, &scene, cfg.feature_provider().as_ref()).unwrap();
    let inst = build_instance(&model, &scene, &s1, &cfg.instance_options()).unwrap();
    let (cmp, _) = compare_layers(&inst, &model.sparse_blocks, cfg.budgets, Reference::Score).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_comparison(dir.path(), &inst, &cmp).unwrap();

    let offline = overlap_from_dumps(dir.path(), model.sparse_blocks.len()).unwrap();
    assert_eq!(offline, cmp.rows);
    let csv = std::fs::read_to_string(dir.path().join("overlap.csv")).unwrap();
    for (line, row) in csv.lines().skip(1).zip(&offline) {
        let mean: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(mean, row.mean_jaccard);
    }
    let first = &cmp.rows[0];
    let last = &cmp.rows[cmp.rows.len() - 4];
    assert_eq!((first.layer, last.layer), (0, model.sparse_blocks.len() - 1));
}

#[test]
fn plan_reference_overlaps_fully() {
    let (model, inst) = common::tiny_instance(9, RoutingMode::ThreeD);
    let (cmp, _) = compare_layers(&inst, &model.sparse_blocks, Default::default(), Reference::Plan).unwrap();
    assert!(cmp.rows.iter().all(|r| r.mean_jaccard == 1.0));
}

fn lsrm(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lsrm")).args(args).current_dir(dir).output().unwrap()
}

#[test]
fn cli_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    std::fs::write(d.join("bad.json"), r#"{"workers": 0}"#).unwrap();
    assert_eq!(lsrm(&["run", "--config", "bad.json"], d).status.code(), Some(3));
    assert_eq!(lsrm(&["verify", "--suite", "everything"], d).status.code(), Some(3));
    assert_eq!(lsrm(&["run", "--routing", "2d"], d).status.code(), Some(3));
    assert_eq!(lsrm(&["--help"], d).status.code(), Some(0));

    let out = lsrm(&["scene", "--preset", "small_sphere", "--views", "3", "--out", "scenes/s.json"], d);
    assert!(out.status.success());
    let scene = SceneFile::load(&d.join("scenes/s.json")).unwrap();
    assert_eq!(scene, SceneFile::preset("small_sphere", 3));

    // relative scene paths resolve against the config file
    let mut cfg = serde_json::json!({
        "scene": {"path": "s.json"},
        "model": common::tiny_config(),
        "seed": 3,
    });
    cfg["out"] = serde_json::json!(d.join("run").to_str().unwrap());
    std::fs::write(d.join("scenes/run.json"), cfg.to_string()).unwrap();
    let out = lsrm(&["run", "--config", "scenes/run.json", "--workers", "2", "--routing", "score"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["workers"], 2);
    assert_eq!(summary["routing"], "score");
    assert_eq!(summary["status"], "ok");

    let out = lsrm(&["run", "--dry-run", "--config", "scenes/run.json"], d);
    assert!(out.status.success());
    let est: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(est["fine_volume_tokens"].as_u64().unwrap() > 0);
}
