//! End-to-end tests of the command-line surface: exit codes, file artifacts
//! and determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_disco3d")
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("DISCO_LOG", "warn")
        .output()
        .expect("spawn disco3d")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_gen_spec(dir: &Path, seed: u64) -> PathBuf {
    let spec = format!(
        "classes = 3\nsamples_per_class = 80\nfree_space_samples = 40\nnoise = 0.03\nseed = {seed}\n"
    );
    let p = dir.join("scene.toml");
    std::fs::write(&p, spec).unwrap();
    p
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, "epochs = 30\nbatch_size = 96\nn_rel = 5\nn_irr = 0\nseed = 3\n").unwrap();
    p
}

#[test]
fn gen_writes_loadable_field_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_gen_spec(dir.path(), 1);
    let out = dir.path().join("scene.dff");
    let result = run_cli(&["gen", spec.to_str().unwrap(), out.to_str().unwrap()]);
    assert_exit(&result, 0);
    assert!(out.exists());
    assert!(disco3d::fieldset::sidecar_path(&out).exists());
    let fs = disco3d::fieldset::load_fieldset(&out).unwrap();
    assert_eq!(fs.samples.len(), 3 * 80 + 40);
    assert_eq!(fs.catalog.len(), 3);
}

#[test]
fn gen_rejects_invalid_margin_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "classes = 2\nmargin = 3.5\n").unwrap();
    let out = dir.path().join("bad.dff");
    let result = run_cli(&["gen", p.to_str().unwrap(), out.to_str().unwrap()]);
    assert_exit(&result, 2);
    assert!(!out.exists());
    assert!(!disco3d::fieldset::sidecar_path(&out).exists());
}

#[test]
fn gen_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_gen_spec(dir.path(), 7);
    let out_a = dir.path().join("a.dff");
    let out_b = dir.path().join("b.dff");
    assert_exit(&run_cli(&["gen", spec.to_str().unwrap(), out_a.to_str().unwrap()]), 0);
    assert_exit(&run_cli(&["gen", spec.to_str().unwrap(), out_b.to_str().unwrap()]), 0);
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
    assert_eq!(
        std::fs::read(disco3d::fieldset::sidecar_path(&out_a)).unwrap(),
        std::fs::read(disco3d::fieldset::sidecar_path(&out_b)).unwrap()
    );
}

fn generated_scene(dir: &Path) -> PathBuf {
    let spec = write_gen_spec(dir, 5);
    let out = dir.join("scene.dff");
    assert_exit(&run_cli(&["gen", spec.to_str().unwrap(), out.to_str().unwrap()]), 0);
    out
}

#[test]
fn run_uss_with_query_file_is_a_mode_error() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let queries = dir.path().join("q.json");
    std::fs::write(&queries, r#"[{"class": 0}]"#).unwrap();
    let ck = dir.path().join("out.dck");
    let result = run_cli(&[
        "run",
        field.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
        "--queries",
        queries.to_str().unwrap(),
        "--mode",
        "uss",
    ]);
    assert_exit(&result, 2);
    assert!(!ck.exists());
}

#[test]
fn run_writes_checkpoint_and_full_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let config = small_config(dir.path());
    let ck = dir.path().join("out.dck");
    let csv = dir.path().join("telemetry.csv");
    let result = run_cli(&[
        "run",
        field.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--telemetry",
        csv.to_str().unwrap(),
        "--quiet",
    ]);
    assert_exit(&result, 0);
    let back = disco3d::trainer::load_checkpoint(&ck).unwrap();
    assert_eq!(back.telemetry.len(), 30);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 31, "header plus one row per epoch");
}

#[test]
fn run_same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let config = small_config(dir.path());
    let mut bytes = Vec::new();
    for name in ["a.dck", "b.dck"] {
        let ck = dir.path().join(name);
        let result = run_cli(&[
            "run",
            field.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--quiet",
        ]);
        assert_exit(&result, 0);
        bytes.push(std::fs::read(&ck).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn eval_without_ground_truth_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    // Unlabeled fieldset written through the library.
    let mut fs = disco3d::fieldset::generate_synthetic_scene(&disco3d::fieldset::GeneratorSpec {
        classes: 2,
        samples_per_class: 60,
        free_space_samples: 20,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    for s in &mut fs.samples {
        s.gt_label = None;
    }
    let field = dir.path().join("unlabeled.dff");
    disco3d::fieldset::save_fieldset(&fs, &field).unwrap();

    let labeled = generated_scene(dir.path());
    let config = small_config(dir.path());
    let ck = dir.path().join("out.dck");
    assert_exit(
        &run_cli(&[
            "run",
            labeled.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--quiet",
        ]),
        0,
    );
    let result = run_cli(&[
        "eval",
        ck.to_str().unwrap(),
        field.to_str().unwrap(),
        "--match",
        "hungarian",
    ]);
    assert_exit(&result, 2);
}

#[test]
fn eval_hungarian_dominates_clip_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let config = small_config(dir.path());
    let ck = dir.path().join("out.dck");
    assert_exit(
        &run_cli(&[
            "run",
            field.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--quiet",
        ]),
        0,
    );
    let mut miou = Vec::new();
    for matching in ["hungarian", "clip"] {
        let report = dir.path().join(format!("{matching}.json"));
        let result = run_cli(&[
            "eval",
            ck.to_str().unwrap(),
            field.to_str().unwrap(),
            "--match",
            matching,
            "--report",
            report.to_str().unwrap(),
        ]);
        assert_exit(&result, 0);
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert!((parsed["pq"].as_f64().unwrap() - parsed["sq"].as_f64().unwrap() * parsed["rq"].as_f64().unwrap()).abs() < 1e-9);
        miou.push(parsed["miou_rel"].as_f64().unwrap());
    }
    assert!(
        miou[0] >= miou[1] - 1e-12,
        "hungarian mIoU {} vs clip mIoU {}",
        miou[0],
        miou[1]
    );
}

#[test]
fn export_writes_csv_and_ply() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let config = small_config(dir.path());
    let ck = dir.path().join("out.dck");
    assert_exit(
        &run_cli(&[
            "run",
            field.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--quiet",
        ]),
        0,
    );
    let csv = dir.path().join("points.csv");
    let ply = dir.path().join("points.ply");
    let result = run_cli(&[
        "export",
        ck.to_str().unwrap(),
        field.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--ply",
        ply.to_str().unwrap(),
    ]);
    assert_exit(&result, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3 * 80 + 40 + 1);
    let ply_bytes = std::fs::read(&ply).unwrap();
    assert!(ply_bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
}

#[test]
fn render_mode_evaluation_covers_the_point_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("rays.toml");
    std::fs::write(
        &spec,
        "classes = 3\nsamples_per_class = 150\nfree_space_samples = 60\nnoise = 0.03\n\
         viewpoints = 4\nsamples_per_ray = 6\nseed = 11\n",
    )
    .unwrap();
    let field = dir.path().join("rays.dff");
    assert_exit(&run_cli(&["gen", spec.to_str().unwrap(), field.to_str().unwrap()]), 0);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "epochs = 120\nbatch_size = 256\nn_rel = 6\nn_irr = 0\nseed = 2\n").unwrap();
    let ck = dir.path().join("rays.dck");
    assert_exit(
        &run_cli(&[
            "run",
            field.to_str().unwrap(),
            "--out",
            ck.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--quiet",
        ]),
        0,
    );
    let report = dir.path().join("render.json");
    assert_exit(
        &run_cli(&[
            "eval",
            ck.to_str().unwrap(),
            field.to_str().unwrap(),
            "--match",
            "hungarian",
            "--points",
            "render",
            "--match-radius",
            "0.5",
            "--report",
            report.to_str().unwrap(),
        ]),
        0,
    );
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let miou = parsed["miou_rel"].as_f64().unwrap();
    assert!(miou > 0.9, "render-mode mIoU {miou}");
}

#[test]
fn malformed_field_file_exits_two_without_panic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dff");
    std::fs::write(&bad, b"garbage").unwrap();
    let ck = dir.path().join("out.dck");
    let result = run_cli(&["run", bad.to_str().unwrap(), "--out", ck.to_str().unwrap()]);
    assert_exit(&result, 2);
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
    assert!(!stderr.contains("panicked"), "stderr: {stderr}");
}

#[test]
fn numerical_blowup_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let field = generated_scene(dir.path());
    let config = dir.path().join("hot.toml");
    std::fs::write(
        &config,
        "epochs = 10\nbatch_size = 96\nn_rel = 3\nn_irr = 0\nlr_start = 1e160\nlr_end = 1e160\n",
    )
    .unwrap();
    let ck = dir.path().join("out.dck");
    let result = run_cli(&[
        "run",
        field.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--quiet",
    ]);
    assert_exit(&result, 3);
}
