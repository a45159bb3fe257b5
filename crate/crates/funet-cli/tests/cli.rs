use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn funet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to launch binary")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["synth", "compose", "flow", "mask", "train", "predict", "eval"] {
        let out = funet(&[sub, "--help"], dir.path());
        assert!(out.status.success(), "{sub} --help failed");
        assert!(stdout(&out).contains("--"), "{sub} --help lists no flags");
    }
    assert!(funet(&["--help"], dir.path()).status.success());
}

#[test]
fn synth_writes_frames_masks_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = funet(
        &["synth", "--out", "data", "--frames", "4", "--size", "16x16", "--seed", "7"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let data = dir.path().join("data");
    assert!(data.join("manifest.json").is_file());
    for i in 0..4 {
        assert!(data.join(format!("seq_000/frames/frame_{i:06}.png")).is_file());
        assert!(data.join(format!("seq_000/masks/frame_{i:06}.pgm")).is_file());
    }
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for tag in ["a", "b"] {
        let out = funet(
            &["synth", "--out", tag, "--frames", "3", "--size", "16x16", "--seed", "5"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for rel in ["manifest.json", "seq_000/frames/frame_000001.png", "seq_000/masks/frame_000002.pgm"]
    {
        let a = fs::read(dir.path().join("a").join(rel)).unwrap();
        let b = fs::read(dir.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

#[test]
fn synth_indivisible_size_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = funet(&["synth", "--out", "d", "--size", "63x64"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("divisible by 4"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = funet(&["synth", "--out", "d", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compose_empty_input_fails_with_reason() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("fg")).unwrap();
    fs::create_dir_all(dir.path().join("bg")).unwrap();
    let out = funet(&["compose", "--fg", "fg", "--bg", "bg", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: compose:"), "{}", stderr(&out));
}

#[test]
fn flow_and_mask_produce_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = funet(
        &["synth", "--out", "data", "--frames", "3", "--size", "16x16", "--seed", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = funet(
        &["flow", "--in", "data/seq_000/frames", "--out", "flows", "--levels", "1"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    for i in 0..2 {
        assert!(dir.path().join(format!("flows/frame_{i:06}.flo")).is_file());
        assert!(dir.path().join(format!("flows/frame_{i:06}_mag.pgm")).is_file());
    }
    let out = funet(&["mask", "--flows", "flows", "--alpha", "0.4", "--out", "masks"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("masks/frame_000001.pgm").is_file());
}

#[test]
fn mask_with_huge_alpha_is_all_background() {
    let dir = tempfile::tempdir().unwrap();
    funet(
        &["synth", "--out", "data", "--frames", "3", "--size", "16x16", "--seed", "3"],
        dir.path(),
    );
    funet(&["flow", "--in", "data/seq_000/frames", "--out", "flows", "--levels", "1"], dir.path());
    let out = funet(&["mask", "--flows", "flows", "--alpha", "1e9", "--out", "m"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = fs::read(dir.path().join("m/frame_000000.pgm")).unwrap();
    // P5 header then payload; every payload byte must be 0.
    let header_end = bytes
        .windows(4)
        .position(|w| w == b"255\n")
        .map(|p| p + 4)
        .unwrap();
    assert!(bytes[header_end..].iter().all(|&b| b == 0));
}

#[test]
fn predict_rejects_indivisible_frames() {
    let dir = tempfile::tempdir().unwrap();
    // A checkpoint from a zero-epoch training run on tiny data.
    funet(
        &[
            "synth", "--out", "data", "--frames", "3", "--size", "16x16", "--seed", "4",
            "--sequences", "5",
        ],
        dir.path(),
    );
    let out = funet(
        &[
            "train", "--data", "data/manifest.json", "--epochs", "0", "--seed", "4", "--out",
            "m.ckpt", "--levels", "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    // Frames whose extents are not divisible by 4.
    let odd = dir.path().join("odd");
    fs::create_dir_all(&odd).unwrap();
    let frame = funet_core::imageio::Frame::zeros(63, 64, 3);
    for i in 0..2 {
        funet_core::imageio::save_frame(&frame, odd.join(format!("frame_{i:06}.png"))).unwrap();
    }
    let out = funet(
        &["predict", "--model", "m.ckpt", "--in", "odd", "--out", "pred", "--levels", "1"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("divisible by 4"), "{}", stderr(&out));
}

#[test]
fn eval_reports_perfect_dice_for_identical_dirs() {
    let dir = tempfile::tempdir().unwrap();
    funet(
        &["synth", "--out", "data", "--frames", "3", "--size", "16x16", "--seed", "6"],
        dir.path(),
    );
    let masks = "data/seq_000/masks";
    let out = funet(&["eval", "--pred", masks, "--gt", masks], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mean_dice=1"), "{}", stdout(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["frame_count"], 3);
    assert_eq!(report["mean_dice"], 1.0);
}

#[test]
fn compose_recovers_square_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fg_dir = dir.path().join("fg");
    let bg_dir = dir.path().join("bg");
    fs::create_dir_all(&fg_dir).unwrap();
    fs::create_dir_all(&bg_dir).unwrap();
    // Black 4x4 square at (2,2) on a pure green field.
    let mut fg = funet_core::imageio::Frame::zeros(16, 16, 3);
    for y in 0..16 {
        for x in 0..16 {
            if !(2..6).contains(&x) || !(2..6).contains(&y) {
                fg.set(x, y, 1, 1.0);
            }
        }
    }
    funet_core::imageio::save_frame(&fg, fg_dir.join("frame_000000.png")).unwrap();
    let mut bg = funet_core::imageio::Frame::zeros(16, 16, 3);
    for v in &mut bg.data {
        *v = 0.5;
    }
    funet_core::imageio::save_frame(&bg, bg_dir.join("frame_000000.png")).unwrap();
    let out = funet(
        &["compose", "--fg", "fg", "--bg", "bg", "--out", "o", "--key", "00ff00"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mask = funet_core::imageio::load_mask(dir.path().join("o/seq_000/masks/frame_000000.pgm"))
        .unwrap();
    for y in 0..16 {
        for x in 0..16 {
            let expect = u8::from((2..6).contains(&x) && (2..6).contains(&y));
            assert_eq!(mask.get(x, y), expect, "mask mismatch at ({x},{y})");
        }
    }
}
