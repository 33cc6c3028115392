use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lusk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lusk"))
        .args(args)
        .output()
        .expect("spawn lusk")
}

fn ok(args: &[&str]) -> Output {
    let out = lusk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small model and scene so every subcommand finishes quickly.
const TINY: &str = "\
input_size = 32
channels = 4,8
cbam_reduction = 2
k = 2
epochs = 2
batch = 4
pairs = 8
pretrain_epochs = 2
scene.frames = 8
scene.size = 32
";

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn count_files(dir: &Path, prefix: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
        .count()
}

#[test]
fn synth_writes_default_scene_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "3", "synth", "--out", p(&a)]);
    ok(&["synth", "--seed", "3", "--out", p(&b)]);
    assert_eq!(count_files(&a, "frame_"), 40);
    for name in ["frame_00000.pgm", "frame_00039.pgm", "truth.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn fuse_emits_ten_channels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = tiny_config(dir.path());
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    let frame = data.join("frame_00000.pgm");
    for (mode, sub) in [("fused", "f"), ("norm", "n")] {
        let out = dir.path().join(sub);
        ok(&["fuse", "--config", &cfg, "--in", p(&frame), "--out", p(&out), "--mode", mode, "--tga", "1.5"]);
        assert_eq!(count_files(&out, "channel_"), 10);
    }
}

#[test]
fn synth_train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.lusk");
    let pred = dir.path().join("pred");
    let report = dir.path().join("eval").join("report.txt");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    let out = ok(&["train", "--config", &cfg, "--data", p(&data), "--out", p(&ckpt)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 2 epochs"));
    assert!(dir.path().join("model.loss.csv").exists());
    ok(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred)]);
    assert_eq!(count_files(&pred, "overlay_"), 8);
    let csv = fs::read_to_string(pred.join("keypoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 2);
    ok(&["eval", "--pred", p(&pred), "--truth", p(&data), "--out", p(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("frames_total = 8"), "{text}");
    assert!(report.with_extension("frames.csv").exists());

    // inference is byte-identical on repeat
    let again = dir.path().join("pred2");
    ok(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&again)]);
    assert_eq!(
        fs::read(pred.join("keypoints.csv")).unwrap(),
        fs::read(again.join("keypoints.csv")).unwrap()
    );
    assert_eq!(
        fs::read(pred.join("overlay_00003.pgm")).unwrap(),
        fs::read(again.join("overlay_00003.pgm")).unwrap()
    );
}

#[test]
fn overlay_marks_keypoints_at_full_intensity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.lusk");
    let pred = dir.path().join("pred");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    ok(&["train", "--config", &cfg, "--set", "epochs=1", "--data", p(&data), "--out", p(&ckpt)]);
    ok(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&pred)]);
    let csv = fs::read_to_string(pred.join("keypoints.csv")).unwrap();
    let first: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let (r, c) = (first[2].round() as usize, first[3].round() as usize);
    let bytes = fs::read(pred.join("overlay_00000.pgm")).unwrap();
    let raster = &bytes[bytes.len() - 32 * 32..];
    assert_eq!(raster[r.min(31) * 32 + c.min(31)], 255);
}

#[test]
fn train_reproduces_the_learning_rate_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.lusk");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    ok(&[
        "train", "--config", &cfg, "--set", "epochs=60", "--set", "batch=32", "--set", "lr=0.001", "--set", "pairs=4",
        "--data", p(&data), "--out", p(&ckpt),
    ]);
    let csv = fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 60);
    for (e, row) in rows.iter().enumerate() {
        let lr: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(lr, 0.001 * 0.95f64.powi((e / 6) as i32), "epoch {e}");
    }
    assert!(dir.path().join("m.epoch010.lusk").exists());
    assert!(dir.path().join("m.epoch050.lusk").exists());
}

#[test]
fn pretrained_encoder_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let enc = dir.path().join("enc.lusk");
    let ckpt = dir.path().join("m.lusk");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    ok(&["pretrain", "--config", &cfg, "--data", p(&data), "--out", p(&enc)]);
    ok(&["train", "--config", &cfg, "--data", p(&data), "--init", p(&enc), "--out", p(&ckpt)]);
    let out = lusk(&["train", "--config", &cfg, "--set", "k=3", "--data", p(&data), "--init", p(&enc), "--out", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "epochs = 3\nfrobnicate = 1\nwobble = 2\n").unwrap();
    let out = lusk(&["synth", "--config", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("frobnicate") && err.contains("wobble") && err.contains(":2:"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);

    let out = lusk(&["synth", "--set", "scene.pleura_depth=0.9", "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = lusk(&["train", "--data", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = lusk(&["train", "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", p(&data)]);
    let out = lusk(&[
        "train", "--config", &cfg, "--set", "lr=1e300", "--data", p(&data), "--out",
        p(&dir.path().join("m.lusk")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let pred = dir.path().join("kp.csv");
    fs::write(&pred, "frame,slot,row,col\n0,0,1,1\n").unwrap();
    let out = lusk(&["eval", "--pred", p(&pred), "--truth", p(&data), "--out", p(&dir.path().join("r.txt"))]);
    assert_eq!(out.status.code(), Some(3));
}
