use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conmh::dataset::load_dataset;
use conmh::model::HashCode;
use conmh::retrieval::CodeDatabase;

fn conmh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conmh"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code_of(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = conmh(dir, args);
    assert_eq!(
        code_of(&out),
        0,
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_data(dir: &Path) -> PathBuf {
    ok(
        dir,
        &[
            "gen-data", "--classes", "3", "--per-class", "6", "--frames", "10", "--dim", "8", "--seed", "7", "--out",
            "data/syn.cmh", "--quiet",
        ],
    );
    dir.join("data/syn.cmh")
}

fn train_small(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", "data/syn.cmh", "--bits", "16", "--epochs", "2", "--batch", "6", "--seed", "1", "--out", out,
        "--quiet",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn gen_data_writes_a_loadable_container_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "gen-data", "--classes", "10", "--per-class", "100", "--frames", "16", "--dim", "32", "--seed", "7", "--out",
            "data/syn.cmh",
        ],
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("N=1000") && stdout.contains("M=16") && stdout.contains("d=32"), "{stdout}");
    let ds = load_dataset(dir.path().join("data/syn.cmh")).unwrap();
    assert_eq!((ds.len(), ds.num_frames, ds.dim, ds.num_classes), (1000, 16, 32, Some(10)));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path().join("data/syn.cmh.manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["data"]["num_classes"], 10);
}

#[test]
fn missing_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = conmh(dir.path(), &["gen-data", "--classes", "2"]);
    assert_eq!(code_of(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unwritable_path_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = conmh(dir.path(), &["gen-data", "--out", "file/sub/syn.cmh"]);
    assert_eq!(code_of(&out), 3);
}

#[test]
fn bad_config_documents_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = conmh(dir.path(), &["gen-data", "--config", "bad.json", "--out", "x.cmh"]);
    assert_eq!(code_of(&out), 2);
    let out = conmh(dir.path(), &["gen-data", "--config", "absent.json", "--out", "x.cmh"]);
    assert_eq!(code_of(&out), 3);
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "runs/a", &["--mask-ratio", "0.75"]);
    let run = dir.path().join("runs/a");
    assert!(run.join("model.cmhm").exists());
    let log = read(run.join("train_log.csv"));
    assert!(log.starts_with("epoch,recon,contra,total,lr,seconds\n"));
    assert_eq!(log.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&read(run.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["model"]["code_length"], 16);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn infeasible_mask_ratio_exits_2_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = conmh(
        dir.path(),
        &["train", "--data", "missing.cmh", "--mask-ratio", "0.97", "--frames", "16", "--out", "runs/x"],
    );
    assert_eq!(code_of(&out), 2);
    assert!(!dir.path().join("runs/x").exists());
}

#[test]
fn no_contrastive_log_has_zero_contrastive_column() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "runs/nc", &["--ablation", "no_contrastive"]);
    let log = read(dir.path().join("runs/nc/train_log.csv"));
    for line in log.lines().skip(1) {
        let contra: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(contra, 0.0);
    }
}

#[test]
fn manifest_replays_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "runs/a", &[]);
    ok(
        dir.path(),
        &["train", "--data", "data/syn.cmh", "--config", "runs/a/manifest.json", "--out", "runs/b", "--quiet"],
    );
    let a = dir.path().join("runs/a");
    let b = dir.path().join("runs/b");
    assert_eq!(std::fs::read(a.join("model.cmhm")).unwrap(), std::fs::read(b.join("model.cmhm")).unwrap());
    let hash = |p: &Path| {
        let m: serde_json::Value = serde_json::from_str(&read(p.join("manifest.json"))).unwrap();
        m["config_hash"].clone()
    };
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn encode_is_deterministic_and_sized_by_dataset() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "runs/a", &[]);
    for out in ["codes/1", "codes/2"] {
        ok(
            dir.path(),
            &["encode", "--checkpoint", "runs/a/model.cmhm", "--data", "data/syn.cmh", "--out", out, "--quiet"],
        );
    }
    let one = std::fs::read(dir.path().join("codes/1/codes.cmhc")).unwrap();
    assert_eq!(one, std::fs::read(dir.path().join("codes/2/codes.cmhc")).unwrap());
    assert_eq!(u32::from_le_bytes(one[12..16].try_into().unwrap()), 16);
    let db = CodeDatabase::from_bytes(&one).unwrap();
    assert_eq!(db.len(), 18);

    ok(
        dir.path(),
        &[
            "encode", "--checkpoint", "runs/a/model.cmhm", "--data", "data/syn.cmh", "--split", "query",
            "--query-fraction", "0.5", "--out", "codes/q", "--quiet",
        ],
    );
    assert_eq!(CodeDatabase::load(dir.path().join("codes/q/codes.cmhc")).unwrap().len(), 9);
}

#[test]
fn encode_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    train_small(dir.path(), "runs/a", &[]);
    ok(dir.path(), &["gen-data", "--dim", "12", "--frames", "10", "--per-class", "2", "--out", "wide.cmh", "--quiet"]);
    let out = conmh(
        dir.path(),
        &["encode", "--checkpoint", "runs/a/model.cmhm", "--data", "wide.cmh", "--out", "codes/w"],
    );
    assert_eq!(code_of(&out), 2);
}

fn write_codes(path: &Path, codes: &[Vec<i8>], labels: &[u32]) {
    let codes: Vec<HashCode> = codes.iter().map(|c| HashCode::from_bits(c.clone()).unwrap()).collect();
    let labels: Vec<Vec<u32>> = labels.iter().map(|&l| vec![l]).collect();
    CodeDatabase::new(&codes, (0..codes.len() as u64).collect(), &labels)
        .unwrap()
        .save(path)
        .unwrap();
}

#[test]
fn eval_of_perfect_codes_reports_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = vec![1, 1, -1, -1];
    let b = vec![-1, -1, 1, 1];
    write_codes(
        &dir.path().join("perfect.cmhc"),
        &[a.clone(), a.clone(), a, b.clone(), b.clone(), b],
        &[0, 0, 0, 1, 1, 1],
    );
    ok(
        dir.path(),
        &["eval", "--queries", "perfect.cmhc", "--database", "perfect.cmhc", "--ks", "1,2", "--out", "ev", "--quiet"],
    );
    let report: serde_json::Value = serde_json::from_str(&read(dir.path().join("ev/report.json"))).unwrap();
    assert_eq!(report["version"], 1);
    assert_eq!(report["map_at_k"]["1"], 1.0);
    assert_eq!(report["map_at_k"]["2"], 1.0);
    assert_eq!(read(dir.path().join("ev/map_vs_k.csv")), "k,map\n1,1\n2,1\n");
    let pr = read(dir.path().join("ev/pr_curve.csv"));
    assert!(pr.starts_with("recall,precision\n"));
    assert_eq!(pr.lines().count(), 21);
}

#[test]
fn eval_rejects_code_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    write_codes(&dir.path().join("a.cmhc"), &[vec![1, -1]], &[0]);
    write_codes(&dir.path().join("b.cmhc"), &[vec![1, -1, 1]], &[0]);
    let out = conmh(dir.path(), &["eval", "--queries", "a.cmhc", "--database", "b.cmhc", "--out", "ev"]);
    assert_eq!(code_of(&out), 2);
}

#[test]
fn eval_of_corrupt_code_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.cmhc"), b"CMHCjunk").unwrap();
    let out = conmh(dir.path(), &["eval", "--queries", "junk.cmhc", "--database", "junk.cmhc", "--out", "ev"]);
    assert_eq!(code_of(&out), 3);
}

#[test]
fn sweeps_write_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let base = [
        "sweep", "--data", "data/syn.cmh", "--bits", "8", "--epochs", "1", "--batch", "6", "--ks", "1,5", "--quiet",
    ];
    let mut ratios = base.to_vec();
    ratios.extend(["--ratios", "0.3,0.5,0.75,0.9", "--strategy", "overlapped", "--out", "sw/r"]);
    ok(dir.path(), &ratios);
    let csv = read(dir.path().join("sw/r/sweep.csv"));
    assert_eq!(csv.lines().next().unwrap(), "mask_ratio,seed,map@1,map@5");
    assert_eq!(csv.lines().count(), 5);

    let mut abl = base.to_vec();
    abl.extend(["--ablations", "full,no_contrastive,no_recon,no_mask", "--out", "sw/a"]);
    ok(dir.path(), &abl);
    let csv = read(dir.path().join("sw/a/sweep.csv"));
    let settings: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(settings, ["full", "no_contrastive", "no_recon", "no_mask"]);
}

#[test]
fn empty_sweep_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = conmh(dir.path(), &["sweep", "--data", "data/syn.cmh", "--ratios", "", "--out", "sw"]);
    assert_eq!(code_of(&out), 2);
    let out = conmh(dir.path(), &["sweep", "--data", "data/syn.cmh", "--out", "sw"]);
    assert_eq!(code_of(&out), 2);
}

#[test]
fn infeasible_sweep_setting_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = conmh(
        dir.path(),
        &["sweep", "--data", "data/syn.cmh", "--ratios", "0.5,0.99", "--epochs", "1", "--out", "sw", "--quiet"],
    );
    assert_eq!(code_of(&out), 2);
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path());
    let out = conmh(
        dir.path(),
        &["train", "--data", "data/syn.cmh", "--epochs", "3", "--lr", "1e300", "--out", "runs/nan", "--quiet"],
    );
    assert_eq!(code_of(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let out = conmh(
        dir.path(),
        &["sweep", "--data", "data/syn.cmh", "--ratios", "0.5", "--lr", "1e300", "--out", "sw", "--quiet"],
    );
    assert_eq!(code_of(&out), 4);
    assert!(read(dir.path().join("sw/sweep.csv")).starts_with("mask_ratio,seed,"));
}
