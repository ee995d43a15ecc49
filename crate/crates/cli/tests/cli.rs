use std::path::Path;
use std::process::{Command, Output};

fn lumen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lumen")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_image(path: &Path, scale: f32) {
    let img = image::RgbImage::from_fn(160, 160, |x, y| {
        let v = |k: u32| ((((x * k + y * 3) % 256) as f32) * scale) as u8;
        image::Rgb([v(1), v(2), v(5)])
    });
    img.save(path).unwrap();
}

#[test]
fn train_encode_decode_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &str| root.join(p).to_str().unwrap().to_owned();
    for sub in ["data/low", "data/gt"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    write_image(&root.join("data/low/a.png"), 0.2);
    write_image(&root.join("data/gt/a.png"), 1.0);

    let common = ["--data", &s("data"), "--quality", "1", "--iters", "2", "--batch", "1", "--patch", "64"];
    let (pre_ckpt, q1_ckpt) = (s("pre.safetensors"), s("q1.safetensors"));
    let mut pre = vec!["train", "--stage", "pretrain", "--channels", "8", "--ckpt-out", &pre_ckpt];
    pre.extend(common);
    ok(lumen(&pre));
    let log = s("joint.csv");
    let mut joint = vec!["train", "--stage", "joint", "--ckpt-in", &pre_ckpt];
    joint.extend(["--ckpt-out", &q1_ckpt, "--log", &log, "--prefetch"]);
    joint.extend(common);
    ok(lumen(&joint));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);

    let stdout = ok(lumen(&["encode", "--ckpt", &s("q1.safetensors"), "--input", &s("data/low/a.png"), "--output", &s("a.lmn")]));
    assert!(stdout.contains("bpp"));
    ok(lumen(&["decode", "--ckpt", &s("q1.safetensors"), "--input", &s("a.lmn"), "--output", &s("a.png")]));
    let decoded = image::open(root.join("a.png")).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (160, 160));

    let report = s("report.csv");
    let stdout = ok(lumen(&["eval", "--data", &s("data"), "--ckpt", &s("q{q}.safetensors"), "--qualities", "1", "--out", &report]));
    assert!(stdout.starts_with("q1 (1 images)"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("image_id,quality,bpp,psnr,ms_ssim,ms_ssim_db"));

    // A checkpoint whose quality is not requested is refused.
    let out = lumen(&["eval", "--data", &s("data"), "--ckpt", &s("q1.safetensors"), "--qualities", "3", "--out", &report]);
    assert!(!out.status.success());
}

#[test]
fn joint_stage_without_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("low")).unwrap();
    std::fs::create_dir_all(dir.path().join("gt")).unwrap();
    write_image(&dir.path().join("low/a.png"), 0.2);
    write_image(&dir.path().join("gt/a.png"), 1.0);
    let out = lumen(&[
        "train",
        "--stage",
        "joint",
        "--data",
        dir.path().to_str().unwrap(),
        "--channels",
        "8",
        "--patch",
        "64",
        "--iters",
        "1",
        "--ckpt-out",
        dir.path().join("x.safetensors").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let out = lumen(&["decode", "--ckpt", "/nonexistent.safetensors", "--input", "x", "--output", "y"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent.safetensors"));
}
