use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cdiff_core::denoiser::{init_params, Checkpoint};
use cdiff_core::metrics::Report;
use cdiff_core::RunConfig;

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn cdiff(args: &[&str]) -> Output {
    let mut all = vec!["--serial", "--config"];
    let cfg = golden("tiny.toml");
    all.push(cfg.to_str().unwrap());
    all.extend_from_slice(args);
    Command::new(env!("CARGO_BIN_EXE_cdiff")).args(&all).output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(cdiff(&["gen-data", "--pairs", "10", "--seed", "7", "--out", s(d)]));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 20);
    assert_eq!(ta, tb);
    assert!(a.join("manifest.json").exists() && !a.join("INCOMPLETE").exists());
}

#[test]
fn zero_step_training_keeps_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, train) = (tmp.path().join("data"), tmp.path().join("train"));
    ok(cdiff(&["gen-data", "--out", s(&data)]));
    ok(cdiff(&["train", "--steps", "0", "--seed", "11", "--data", s(&data), "--out", s(&train)]));
    let ck = Checkpoint::load(&train.join("checkpoint.bin")).unwrap();
    let init = init_params::<f32>(&RunConfig::smoke().denoiser, 11).unwrap();
    assert_eq!(ck.state.step, 0);
    assert_eq!(ck.state.params, init);
    assert_eq!(ck.state.ema, init);
}

#[test]
fn bench_bilinear_matches_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(cdiff(&["gen-data", "--out", s(&data)]));
    let out = ok(cdiff(&["bench", "--method", "bilinear", "--data", s(&data), "--out", s(&run)]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bilinear"));
    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    let report = Report::from_csv(&csv).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!((row.method.as_str(), row.n_items), ("bilinear", 3));
    assert!(row.psnr_db.is_finite() && row.ssim <= 1.0 && row.nmse >= 0.0);
    assert_eq!(csv, std::fs::read_to_string(golden("bench_bilinear.csv")).unwrap());

    // The written outputs can be scored again through `eval`.
    let dir = run.join("outputs/bilinear");
    let spec = format!("bilinear={}", s(&dir));
    let again = ok(cdiff(&["eval", "--data", s(&data), "--method", &spec]));
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nhr_resolution = 30\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cdiff"))
        .args(["--config", s(&bad), "gen-data", "--out", s(&tmp.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("nothing");
    let out = cdiff(&["bench", "--method", "bicubic", "--data", s(&missing), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = cdiff(&["bench", "--method", "nearest", "--data", s(&missing), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = cdiff(&["train", "--data", s(&missing), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!cdiff(&["gen-data", "--bogus"]).status.success());
}
