use std::path::Path;
use std::process::{Command, Output};

fn nerfvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfvs"))
        .args(args)
        .env_remove("NERFVS_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = nerfvs(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["scene", "scaffold", "train", "render", "eval", "pipeline"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(code(&nerfvs(&["eval", "ablate", "--help"])), 0);
}

#[test]
fn usage_and_config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&nerfvs(&["frobnicate"])), 2);
    assert_eq!(code(&nerfvs(&["train", "--data", s(&missing), "--out", s(dir.path())])), 2);
    let spec = dir.path().join("spec.json");
    assert_eq!(code(&nerfvs(&["scene", "spec", "--size", "16", "--out", s(&spec)])), 0);
    let bad = nerfvs(&[
        "pipeline", "--spec", s(&spec), "--preset", "smoke", "--set", "no_such_key=1", "--out", s(dir.path()),
    ]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no_such_key"));
    assert_eq!(code(&nerfvs(&["--threads", "0", "scene", "spec", "--out", s(&spec)])), 2);
}

#[test]
fn corrupt_checkpoint_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.nvsg");
    std::fs::write(&ckpt, b"NVSG garbage").unwrap();
    let cams = dir.path().join("cams.json");
    std::fs::write(&cams, "[]").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&nerfvs(&["render", "--ckpt", s(&ckpt), "--cameras", s(&cams), "--out", s(&out)])), 3);
}

#[test]
fn stages_run_end_to_end_and_render_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let ok = |args: &[&str]| {
        let out = nerfvs(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["scene", "spec", "--size", "16", "--out", s(&p("spec.json"))]);
    ok(&["scene", "gen", "--spec", s(&p("spec.json")), "--out", s(&p("data"))]);
    ok(&[
        "scaffold", "bake", "--mesh", s(&p("data/scaffold.obj")), "--cameras", s(&p("data/cameras_train.json")),
        "--out", s(&p("baked")),
    ]);
    // Baking by hand reproduces the dataset's own priors.
    for f in ["dist_0.pfm", "cov_3.pfm"] {
        assert_eq!(std::fs::read(p("baked").join(f)).unwrap(), std::fs::read(p("data/priors").join(f)).unwrap());
    }
    ok(&[
        "scene", "perturb", "--data", s(&p("data")), "--out", s(&p("pert")), "--mode", "delete-random-faces",
        "--mag", "0.2",
    ]);
    assert_ne!(std::fs::read(p("pert/scaffold.obj")).unwrap(), std::fs::read(p("data/scaffold.obj")).unwrap());
    ok(&[
        "train", "--data", s(&p("data")), "--preset", "smoke", "--set", "iterations=20", "--set", "resolution=8",
        "--out", s(&p("train")),
    ]);
    for f in ["checkpoint.nvsg", "log.csv", "config.txt", "manifest.json"] {
        assert!(p("train").join(f).is_file(), "{f}");
    }
    let ckpt = p("train/checkpoint.nvsg");
    for out in ["r1", "r2"] {
        ok(&[
            "--threads", "2", "render", "--ckpt", s(&ckpt), "--cameras", s(&p("data/cameras_extrap.json")),
            "--samples", "16", "--out", s(&p(out)),
        ]);
    }
    for f in ["0.ppm", "depth_0.pfm", "5.ppm"] {
        assert_eq!(std::fs::read(p("r1").join(f)).unwrap(), std::fs::read(p("r2").join(f)).unwrap());
    }
    std::fs::write(p("none.json"), "[]").unwrap();
    ok(&["render", "--ckpt", s(&ckpt), "--cameras", s(&p("none.json")), "--out", s(&p("r3"))]);
    ok(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&p("data")), "--split", "interp", "--samples", "16", "--report",
        s(&p("report.json")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["split"], "interp");
    assert!(report["mean_psnr"].as_f64().unwrap() > 5.0);
    ok(&[
        "eval", "ablate", "--data", s(&p("data")), "--preset", "smoke", "--set", "iterations=10", "--set",
        "resolution=8", "--set", "n_samples_per_ray=8", "--grid-views", "2", "--out", s(&p("ablate")),
    ]);
    let csv = std::fs::read_to_string(p("ablate/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(p("ablate/grids/extrap_1.ppm").is_file());
    assert!(p("ablate/no-variance/checkpoint.nvsg").is_file());
}

#[test]
fn every_subcommand_has_help() {
    for args in [
        &["scene", "spec", "--help"][..],
        &["scene", "gen", "--help"],
        &["scene", "perturb", "--help"],
        &["scaffold", "bake", "--help"],
        &["train", "--help"],
        &["render", "--help"],
        &["eval", "--help"],
        &["pipeline", "--help"],
    ] {
        let out = nerfvs(args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn pipeline_resumes_and_names_failing_stages() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let out = dir.path().join("run");
    assert_eq!(code(&nerfvs(&["scene", "spec", "--size", "16", "--out", s(&spec)])), 0);
    let args = [
        "pipeline", "--spec", s(&spec), "--preset", "smoke", "--set", "iterations=10", "--set", "resolution=8",
        "--out", s(&out),
    ];
    let first = nerfvs(&args);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    for f in ["manifest.json", "dataset/manifest.json", "dataset/priors/manifest.json", "eval/report_extrap.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    // A stage without a manifest counts as interrupted and runs again.
    std::fs::remove_file(out.join("train/manifest.json")).unwrap();
    let second = nerfvs(&args);
    let log = String::from_utf8_lossy(&second.stderr);
    assert_eq!(code(&second), 0);
    assert!(log.contains("[scene] reused") && log.contains("[bake] reused"), "{log}");
    assert!(log.contains("[train] done"), "{log}");

    let mut bad: serde_json::Value = serde_json::from_slice(&std::fs::read(&spec).unwrap()).unwrap();
    bad["trajectory"]["n_train"] = 2.into();
    std::fs::write(&spec, serde_json::to_vec(&bad).unwrap()).unwrap();
    let failed = nerfvs(&args);
    assert_eq!(code(&failed), 2);
    assert!(String::from_utf8_lossy(&failed.stderr).contains("stage scene"));
}

#[test]
fn render_converges_with_more_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let ok = |args: &[&str]| assert_eq!(code(&nerfvs(args)), 0, "{args:?}");
    ok(&["scene", "spec", "--size", "16", "--out", s(&p("spec.json"))]);
    ok(&["scene", "gen", "--spec", s(&p("spec.json")), "--out", s(&p("data"))]);
    ok(&[
        "train", "--data", s(&p("data")), "--preset", "smoke", "--set", "iterations=30", "--set", "resolution=8",
        "--out", s(&p("train")),
    ]);
    for n in ["128", "256"] {
        ok(&[
            "render", "--ckpt", s(&p("train/checkpoint.nvsg")), "--cameras", s(&p("data/cameras_interp.json")),
            "--samples", n, "--out", s(&p(n)),
        ]);
    }
    let read = |d: &str| nerfvs_core::io::load_image(&p(d).join("2.ppm")).unwrap();
    let (a, b) = (read("128"), read("256"));
    let worst = a
        .data
        .iter()
        .zip(&b.data)
        .flat_map(|(x, y)| (0..3).map(move |k| (x[k] - y[k]).abs()))
        .fold(0.0, f64::max);
    assert!(worst < 1e-2, "{worst}");
}
