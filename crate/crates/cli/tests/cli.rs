use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn igcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igcl"))
        .args(args)
        .env_remove("IGCL_DATA_ROOT")
        .env_remove("IGCL_OUTPUT_ROOT")
        .output()
        .expect("run igcl")
}

fn ok(args: &[&str]) -> String {
    let out = igcl(args);
    assert!(out.status.success(), "igcl {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// Synthetic dataset plus a 200-step tiny run shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        ok(&["synth", "--ids", "4", "--per-id", "8", "--clothes", "2", "--seed", "7", "--out", s(&data)]);
        ok(&["train", "--data", s(&data), "--out", s(&run), "--tiny", "--steps", "200", "--seed", "0"]);
        Fixture { _dir: dir, data, run }
    })
}

#[test]
fn synth_writes_counts_and_is_deterministic() {
    let f = fixture();
    let train = files(&f.data.join("train"));
    assert_eq!(train.len(), 32);
    assert_eq!(files(&f.data.join("parse/train")).len(), 32);
    let again = tempfile::tempdir().unwrap();
    ok(&["synth", "--ids", "4", "--per-id", "8", "--clothes", "2", "--seed", "7", "--out", s(again.path())]);
    for sub in ["train", "query", "gallery", "parse/train", "parse/query", "parse/gallery"] {
        let (a, b) = (files(&f.data.join(sub)), files(&again.path().join(sub)));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
        }
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(igcl(&["synth", "--ids", "0", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(igcl(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(igcl(&["synth"]).status.code(), Some(2));
    let config = dir.path().join("c.txt");
    fs::write(&config, "ids = 0\n").unwrap();
    assert_eq!(igcl(&["synth", "--config", s(&config), "--out", s(dir.path())]).status.code(), Some(2));
    fs::write(&config, "colour = red\n").unwrap();
    assert_eq!(igcl(&["synth", "--config", s(&config), "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = igcl(&["eval", "--checkpoint", s(&missing), "--data", s(&f.data), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = igcl(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(dir.path()), "--tiny", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_log_checkpoints_and_snapshot() {
    let f = fixture();
    let log = fs::read_to_string(f.run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 200);
    assert!(f.run.join("last.ckpt").is_file() && f.run.join("inference.ckpt").is_file());
    let snapshot = fs::read_to_string(f.run.join("config.txt")).unwrap();
    for line in ["command = train", "variant = tiny", "steps = 200", "seed = 0", "cad = true"] {
        assert!(snapshot.lines().any(|l| l == line), "{line} missing from\n{snapshot}");
    }
}

#[test]
fn baseline_flags_and_alpha_reach_the_snapshot() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--data", s(&f.data), "--out", s(dir.path()), "--tiny", "--steps", "2", "--no-cad", "--no-saj", "--no-pie", "--alpha", "0.5"]);
    let snapshot = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    for line in ["alpha = 0.5", "cad = false", "saj = false", "pie = false"] {
        assert!(snapshot.lines().any(|l| l == line), "{line}");
    }
    // baseline logs carry no mid-level or high-level loss
    for line in fs::read_to_string(dir.path().join("train_log.tsv")).unwrap().lines() {
        let cols: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        assert_eq!((cols[5], cols[6]), (0.0, 0.0));
    }
}

#[test]
fn snapshot_reruns_identically_and_flags_override_file() {
    let f = fixture();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["train", "--data", s(&f.data), "--out", s(a.path()), "--tiny", "--steps", "3", "--seed", "5"]);
    let snapshot = a.path().join("config.txt");
    ok(&["train", "--config", s(&snapshot), "--out", s(b.path())]);
    assert_eq!(fs::read(a.path().join("train_log.tsv")).unwrap(), fs::read(b.path().join("train_log.tsv")).unwrap());

    let c = tempfile::tempdir().unwrap();
    ok(&["train", "--config", s(&snapshot), "--out", s(c.path()), "--steps", "1"]);
    assert_eq!(fs::read_to_string(c.path().join("train_log.tsv")).unwrap().lines().count(), 1);
    assert!(fs::read_to_string(c.path().join("config.txt")).unwrap().contains("seed = 5\n"));
}

#[test]
fn environment_supplies_roots() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let out_status = Command::new(env!("CARGO_BIN_EXE_igcl"))
        .args(["extract", "--checkpoint", s(&f.run.join("inference.ckpt"))])
        .env("IGCL_DATA_ROOT", &f.data)
        .env("IGCL_OUTPUT_ROOT", out.path())
        .output()
        .unwrap();
    assert!(out_status.status.success());
    assert!(out.path().join("extract/features.tsv").is_file());
}

fn metric(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap().parse().unwrap()
}

#[test]
fn overfit_checkpoint_ranks_training_set() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "eval", "--checkpoint", s(&f.run.join("inference.ckpt")), "--data", s(&f.data), "--out", s(dir.path()),
        "--query-split", "train", "--gallery-split", "train", "--export-similarity", "15",
    ]);
    assert!(stdout.contains("mAP") && stdout.contains("CMC@1") && stdout.contains("CMC@20"));
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metric(&metrics, "rank1") >= 0.95, "{metrics}");
    let heat = dir.path().join("similarity.png");
    assert!(heat.is_file());
    assert_eq!(fs::read_to_string(dir.path().join("similarity.tsv")).unwrap().lines().count(), 15);
    assert!(dir.path().join("cmc.tsv").is_file() && dir.path().join("config.txt").is_file());
}

fn read_features(dir: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(dir.join("features.tsv")).unwrap().lines().map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn extract_rows_match_manifest_and_normalize() {
    let f = fixture();
    let ckpt = f.run.join("inference.ckpt");
    let (a, b, n) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&["extract", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "gallery", "--out", s(a.path())]);
    ok(&["extract", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "gallery", "--out", s(b.path())]);
    let rows = read_features(a.path());
    let manifest = fs::read_to_string(a.path().join("manifest.tsv")).unwrap();
    assert_eq!(rows.len(), files(&f.data.join("gallery")).len());
    assert_eq!(manifest.lines().count(), rows.len() + 1);
    assert_eq!(fs::read(a.path().join("features.tsv")).unwrap(), fs::read(b.path().join("features.tsv")).unwrap());

    ok(&["extract", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "gallery", "--out", s(n.path()), "--normalize"]);
    for row in read_features(n.path()) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
}

/// Counting oracle: AP of each query from match ranks in the kept gallery
/// (same identity seen by the same camera is dropped).
fn oracle_map(q: &[Vec<f64>], g: &[Vec<f64>], qm: &[(usize, usize)], gm: &[(usize, usize)]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut aps = Vec::new();
    for (qi, qv) in q.iter().enumerate() {
        let kept: Vec<usize> = (0..g.len()).filter(|&j| gm[j] != qm[qi]).collect();
        let d: Vec<f64> = (0..g.len()).map(|j| dist(qv, &g[j])).collect();
        let rank = |j: usize| kept.iter().filter(|&&o| d[o] < d[j] || (d[o] == d[j] && o < j)).count();
        let mut ranks: Vec<usize> = kept.iter().filter(|&&j| gm[j].0 == qm[qi].0).map(|&j| rank(j)).collect();
        if ranks.is_empty() {
            continue;
        }
        ranks.sort();
        aps.push(ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / (r + 1) as f64).sum::<f64>() / ranks.len() as f64);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn manifest_meta(dir: &Path) -> Vec<(usize, usize)> {
    fs::read_to_string(dir.join("manifest.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split('\t').collect();
            (c[2].parse().unwrap(), c[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn random_init_map_equals_oracle_on_same_features() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // a one-step run at a vanishing learning rate stays at its random initialization
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&f.data), "--out", s(&run), "--tiny", "--steps", "1", "--lr", "1e-12", "--seed", "3"]);
    let ckpt = run.join("inference.ckpt");
    let (qd, gd, ed) = (dir.path().join("q"), dir.path().join("g"), dir.path().join("e"));
    ok(&["extract", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "query", "--out", s(&qd), "--normalize"]);
    ok(&["extract", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--split", "gallery", "--out", s(&gd), "--normalize"]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&ed)]);
    let want = oracle_map(&read_features(&qd), &read_features(&gd), &manifest_meta(&qd), &manifest_meta(&gd));
    let got = metric(&fs::read_to_string(ed.join("metrics.txt")).unwrap(), "mAP");
    assert!((got - want).abs() < 1e-6, "{got} vs oracle {want}");
}
