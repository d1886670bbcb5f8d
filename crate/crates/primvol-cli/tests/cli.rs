//! End-to-end tests of the `primvol` binary: exit codes, artifact layout,
//! determinism across runs and thread counts, and the teacher -> fit /
//! distill -> invert chain at toy scale.

use std::path::Path;
use std::process::{Command, Output};

fn primvol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_primvol"))
        .args(args)
        .env_remove("PRIMVOL_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed (status {:?}):\n{}\n{}",
        out.status.code(),
        stdout(out),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn render_demo_is_bitwise_stable_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    let run = |out: &Path, threads: &str| {
        let res = primvol(&[
            "render",
            "--res",
            "48x32",
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert_success(&res, "render");
        res
    };
    let res = run(&out_a, "1");
    assert!(stdout(&res).contains("ms/frame"));
    assert!(stdout(&res).contains("rays/sec"));
    run(&out_b, "1");
    run(&out_c, "2");

    let pfm_a = std::fs::read(out_a.join("render.pfm")).unwrap();
    let pfm_b = std::fs::read(out_b.join("render.pfm")).unwrap();
    let pfm_c = std::fs::read(out_c.join("render.pfm")).unwrap();
    assert_eq!(pfm_a, pfm_b, "same command must give identical bytes");
    assert_eq!(pfm_a, pfm_c, "thread count must not change the image");
    assert!(out_a.join("render.png").exists());
}

#[test]
fn render_oracle_flag_reports_agreement() {
    let dir = tempfile::tempdir().unwrap();
    let out = primvol(&[
        "render",
        "--res",
        "32x24",
        "--step",
        "0.05",
        "--oracle",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out, "render --oracle");
    let text = stdout(&out);
    let diff_line = text
        .lines()
        .find(|l| l.starts_with("max_abs_diff"))
        .expect("oracle diff is printed");
    let value: f64 = diff_line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(value < 1e-9, "both integrators share the rule, got diff {value}");
    assert!(dir.path().join("oracle.pfm").exists());
}

#[test]
fn render_missing_scene_path_exits_2() {
    let out = primvol(&["render", "--scene", "/definitely/not/here.scene"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty(), "must print a message");
}

#[test]
fn unknown_flag_exits_2() {
    let out = primvol(&["render", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_default_exits_0_and_prints_report() {
    let out = primvol(&["gradcheck", "--probes", "25"]);
    assert_success(&out, "gradcheck");
    assert!(stdout(&out).contains("\"pass\": true"));
}

#[test]
fn bench_prints_structured_block() {
    let out = primvol(&["bench", "--res", "48x48", "--frames", "3", "--step", "0.1"]);
    assert_success(&out, "bench");
    let text = stdout(&out);
    assert!(text.contains("[bench]") && text.contains("[/bench]"));
    for key in ["prim_ms_median=", "oracle_ms_median=", "speedup=", "rays_per_sec="] {
        assert!(text.contains(key), "missing {key} in:\n{text}");
    }
}

#[test]
fn inspect_writes_overlay_and_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = primvol(&[
        "inspect",
        "--res",
        "48x48",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_success(&out, "inspect");
    assert!(dir.path().join("overlay.png").exists());
    let text = stdout(&out);
    assert!(text.contains("euler zyx"));
    // Demo scene has 6 primitives: header + 6 rows.
    assert_eq!(text.lines().count(), 7, "table:\n{text}");
}

#[test]
fn teacher_fit_distill_invert_chain_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let manifest = ds_dir.join("manifest.jsonl");

    let out = primvol(&[
        "teacher",
        "--out",
        ds_dir.to_str().unwrap(),
        "--samples",
        "3",
        "--views",
        "2",
        "--res",
        "16x16",
        "--step",
        "0.08",
    ]);
    assert_success(&out, "teacher");
    assert!(manifest.exists());

    let fit_dir = dir.path().join("fit");
    let out = primvol(&[
        "fit",
        "--dataset",
        manifest.to_str().unwrap(),
        "--nprim-grid",
        "2",
        "--iters",
        "10",
        "--step",
        "0.08",
        "--out",
        fit_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "fit");
    assert!(fit_dir.join("fitted.scene").exists());
    assert!(fit_dir.join("fit_log.json").exists());

    // Distill in two legs through a checkpoint; the second leg must resume.
    let distill_dir = dir.path().join("distill");
    let ckpt = distill_dir.join("ck.bin");
    let common = [
        "--dataset",
        manifest.to_str().unwrap(),
        "--nprim-grid",
        "2",
        "--step",
        "0.08",
        "--out",
        distill_dir.to_str().unwrap(),
        "--ckpt",
        ckpt.to_str().unwrap(),
    ];
    let mut args = vec!["distill", "--iters", "2"];
    args.extend_from_slice(&common);
    let out = primvol(&args);
    assert_success(&out, "distill leg 1");
    assert!(ckpt.exists());
    let mut args = vec!["distill", "--iters", "4"];
    args.extend_from_slice(&common);
    let out = primvol(&args);
    assert_success(&out, "distill leg 2");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("resuming"),
        "second leg must resume from the checkpoint"
    );
    let generator = distill_dir.join("generator.bin");
    assert!(generator.exists());

    let invert_dir = dir.path().join("invert");
    let out = primvol(&[
        "invert",
        "--dataset",
        manifest.to_str().unwrap(),
        "--ckpt",
        generator.to_str().unwrap(),
        "--nprim-grid",
        "2",
        "--iters",
        "6",
        "--step",
        "0.08",
        "--out",
        invert_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "invert");
    for artifact in ["target.png", "inverted.png", "inverted.json"] {
        assert!(invert_dir.join(artifact).exists(), "missing {artifact}");
    }

    // Mismatched anchor grid is a usage error.
    let out = primvol(&[
        "invert",
        "--dataset",
        manifest.to_str().unwrap(),
        "--ckpt",
        generator.to_str().unwrap(),
        "--nprim-grid",
        "3",
        "--out",
        invert_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "anchor mismatch must exit 2");
}
