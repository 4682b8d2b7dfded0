use std::process::Command;

fn run(args: &[&str], threads: Option<&str>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spinshuffle"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("SPINSHUFFLE_THREADS", t);
    }
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(&["phantom", "--out", out], None), 0);
    assert!(dir.path().join("labels.hdr").exists());
    assert_eq!(run(&["mask", "--out", out, "--seed", "4"], Some("2")), 0);
    assert_eq!(run(&["frobnicate"], None), 1);
    assert_eq!(run(&["phantom", "--seed", "x"], None), 1);
    assert_eq!(run(&["phantom", "--out", out], Some("lots")), 1);
    assert_eq!(run(&["phantom", "--config", "/nonexistent.ini"], None), 1);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["fit", "--input", empty.to_str().unwrap(), "--out", out], None), 2);
}

#[test]
fn crlb_writes_ordered_bounds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["crlb", "--out", dir.path().to_str().unwrap()], None), 0);
    let text = std::fs::read_to_string(dir.path().join("crlb.csv")).unwrap();
    let bound = |name: &str| -> f64 {
        text.lines().find(|l| l.starts_with(name)).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!(bound("optimized") < bound("equal_power_constant"));
}
