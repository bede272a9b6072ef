//! End-to-end tests of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::Output;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sceneflow")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin()).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn kv_value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("missing key {key} in output:\n{stdout}"))
        .parse()
        .unwrap()
}

/// Static scene bundle: checkered plane, camera shifted one pixel of
/// disparity so the estimate should recover the flow almost exactly.
fn render_static_scene(dir: &Path) -> PathBuf {
    std::fs::write(
        dir.join("scene.cfg"),
        "width = 48\nheight = 36\nfx = 100\nfy = 100\ncx = 23.5\ncy = 17.5\n\
         background = plane\nplane_z = 10\nseed = 3\n\
         camera_motion = 1 0 0 -0.1 0 1 0 0 0 0 1 0\n",
    )
    .unwrap();
    let out = dir.join("scene");
    run_ok(&[
        "synth",
        "--spec", dir.join("scene.cfg").to_str().unwrap(),
        "--out-dir", out.to_str().unwrap(),
    ]);
    out
}

#[test]
fn synth_estimate_eval_pipeline_recovers_static_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scene = render_static_scene(dir);
    let f = |name: &str| scene.join(name).to_str().unwrap().to_string();

    std::fs::write(
        dir.join("opt.cfg"),
        "levels = 4\nalpha = 0.02 0.04 0.08 0.16\niterations_per_level = 60\n",
    )
    .unwrap();
    let pred = dir.join("pred.sfl");
    let trace = dir.join("trace.csv");
    run_ok(&[
        "estimate",
        "--pc1", &f("pc1.ply"),
        "--pc2", &f("pc2.ply"),
        "--pose", &f("pose.txt"),
        "--depth2", &f("depth2.png"),
        "--intrinsics", &f("intrinsics.txt"),
        "--config", dir.join("opt.cfg").to_str().unwrap(),
        "--out-flow", pred.to_str().unwrap(),
        "--trace", trace.to_str().unwrap(),
    ]);

    let stdout = run_ok(&["eval", "--pred", pred.to_str().unwrap(), "--gt", &f("gt_flow.sfl")]);
    assert!(kv_value(&stdout, "epe3d") < 1e-2, "pipeline EPE too high:\n{stdout}");
    assert_eq!(kv_value(&stdout, "acc3d_strict"), 1.0);

    let trace_text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = trace_text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "level,iteration,depth1,depth2,ds,chamfer,laplacian,total"
    );
    assert!(lines.next().is_some(), "trace has no data rows");
}

#[test]
fn eval_on_identical_files_reports_zero_epe() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = render_static_scene(tmp.path());
    let gt = scene.join("gt_flow.sfl").to_str().unwrap().to_string();
    let stdout = run_ok(&["eval", "--pred", &gt, "--gt", &gt]);
    assert_eq!(kv_value(&stdout, "epe3d"), 0.0);
    assert_eq!(kv_value(&stdout, "outliers3d"), 0.0);

    let csv = run_ok(&["eval", "--pred", &gt, "--gt", &gt, "--csv"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epe3d,acc3d_strict,acc3d_relax,outliers3d,point_count");
    assert!(lines.next().unwrap().starts_with("0,1,1,0,"));
}

#[test]
fn loss_at_ground_truth_flow_is_small() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scene = render_static_scene(dir);
    let f = |name: &str| scene.join(name).to_str().unwrap().to_string();
    std::fs::write(dir.join("w.cfg"), "alpha = 1.0\n").unwrap();
    let stdout = run_ok(&[
        "loss",
        "--pc1", &f("pc1.ply"),
        "--pc2", &f("pc2.ply"),
        "--flow", &f("gt_flow.sfl"),
        "--pose", &f("pose.txt"),
        "--depth2", &f("depth2.png"),
        "--intrinsics", &f("intrinsics.txt"),
        "--weights", dir.join("w.cfg").to_str().unwrap(),
    ]);
    // Depth images are quantized to 1/256 m and scene borders disocclude,
    // so per-point means are small but not zero.
    assert!(kv_value(&stdout, "depth1_mean") < 1e-4, "{stdout}");
    assert!(kv_value(&stdout, "ds_mean") < 1e-12, "{stdout}");
    assert!(kv_value(&stdout, "chamfer_mean") < 1e-2, "{stdout}");
}

#[test]
fn unproject_preprocess_icp_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let scene = render_static_scene(dir);
    let f = |name: &str| scene.join(name).to_str().unwrap().to_string();

    let cloud = dir.join("cloud.ply");
    let stdout = run_ok(&[
        "unproject",
        "--depth", &f("depth1.png"),
        "--intrinsics", &f("intrinsics.txt"),
        "--image", &f("image1.png"),
        "--out", cloud.to_str().unwrap(),
    ]);
    assert_eq!(stdout.trim(), "unprojected 1728 points");

    std::fs::write(dir.join("pp.cfg"), "max_depth = 20\nrange_limit = 50\n").unwrap();
    let kept = dir.join("kept.ply");
    let stdout = run_ok(&[
        "preprocess",
        "--in", cloud.to_str().unwrap(),
        "--config", dir.join("pp.cfg").to_str().unwrap(),
        "--out", kept.to_str().unwrap(),
    ]);
    let first = stdout.lines().next().unwrap();
    assert!(first.starts_with("kept ") && first.contains(" removed "), "{stdout}");

    let pose_out = dir.join("icp_pose.txt");
    run_ok(&[
        "icp",
        "--source", &f("pc1.ply"),
        "--target", &f("pc2.ply"),
        "--out-pose", pose_out.to_str().unwrap(),
    ]);
    let pose = sceneflow::io::read_pose(&pose_out).unwrap();
    pose.validate().unwrap();
}

#[test]
fn failures_print_error_code_and_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Missing file.
    let out = run(&[
        "eval",
        "--pred", dir.join("missing.sfl").to_str().unwrap(),
        "--gt", dir.join("missing.sfl").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("ERROR IO: "), "{stderr}");

    // Malformed flow file.
    let bad = dir.join("bad.sfl");
    std::fs::write(&bad, b"not a flow file").unwrap();
    let out = run(&["eval", "--pred", bad.to_str().unwrap(), "--gt", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("ERROR FORMAT: "), "{stderr}");

    // Config with an unknown key.
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let scene = render_static_scene(dir);
    let f = |name: &str| scene.join(name).to_str().unwrap().to_string();
    let out = run(&[
        "estimate",
        "--pc1", &f("pc1.ply"),
        "--pc2", &f("pc2.ply"),
        "--pose", &f("pose.txt"),
        "--depth2", &f("depth2.png"),
        "--intrinsics", &f("intrinsics.txt"),
        "--config", cfg.to_str().unwrap(),
        "--out-flow", dir.join("out.sfl").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("ERROR FORMAT: ") && stderr.contains("bogus_key"), "{stderr}");
}
