use std::path::Path;
use std::process::{Command, Output};

fn mgvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgvq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mgvq")
}

fn ok(args: &[&str]) -> String {
    let out = mgvq(args);
    assert!(
        out.status.success(),
        "mgvq {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "hidden_dim=16",
    "--set",
    "depth=1",
    "--set",
    "batch_size=2",
    "--set",
    "eval_every=2",
];

#[test]
fn synth_train_encode_decode_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.mgck");
    let log = dir.path().join("log.jsonl");
    ok(&["synth", "-o", s(&data), "--count", "12", "--size", "32"]);
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 12);

    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "-o",
        s(&ckpt),
        "--log",
        s(&log),
        "--steps",
        "4",
    ];
    args.extend(SMALL);
    ok(&args);
    let text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().count(), 4);

    let img = data.join("00000.png");
    let tokens = dir.path().join("x.mgvq");
    let out = dir.path().join("x.png");
    ok(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "-i",
        s(&img),
        "-o",
        s(&tokens),
    ]);
    assert_eq!(std::fs::metadata(&tokens).unwrap().len(), 67);
    ok(&[
        "decode",
        "--checkpoint",
        s(&ckpt),
        "-i",
        s(&tokens),
        "-o",
        s(&out),
        "--keep",
        "2",
    ]);
    let decoded = mgvq::imaging::read_image(&out).unwrap();
    assert_eq!((decoded.height, decoded.width), (32, 32));

    let report = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["psnr"].as_f64().unwrap().is_finite());

    // resuming extends the same run and appends to the log
    ok(&[
        "train",
        "--data",
        s(&data),
        "-o",
        s(&ckpt),
        "--log",
        s(&log),
        "--resume",
        s(&ckpt),
        "--steps",
        "6",
    ]);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 6);

    let csv = dir.path().join("mkeep.csv");
    ok(&[
        "experiment",
        "mkeep",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "-o",
        s(&csv),
    ]);
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(
        table.starts_with("groups,codebook_size,m_keep,psnr,ssim"),
        "{table}"
    );
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn bad_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.mgck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let img = dir.path().join("a.png");
    mgvq::synthetic::scenes(1, 32, 0)[0].save_png(&img).unwrap();
    let out = mgvq(&[
        "encode",
        "--checkpoint",
        s(&junk),
        "-i",
        s(&img),
        "-o",
        s(&dir.path().join("a.mgvq")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().any(|l| l.starts_with("error:")), "{err}");
    assert!(!dir.path().join("a.mgvq").exists());
}

#[test]
fn bad_override_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = mgvq(&[
        "train",
        "--synthetic",
        "4",
        "-o",
        s(&dir.path().join("m.mgck")),
        "--set",
        "groups=0",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
