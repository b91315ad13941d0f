use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthscene"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--n-scenes",
    "3",
    "--n-objects-per-scene",
    "3",
    "--points-per-object",
    "48",
    "--seeds",
    "12",
    "--quiet",
];

fn generate(dir: &Path, seed: &str) -> Output {
    let mut args = vec!["generate", "--seed", seed, "--output", path(dir)];
    args.extend_from_slice(TINY);
    run(&args)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--output", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn generate_is_deterministic() {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = generate(x.path(), "7");
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = run(&[
        "--sequential",
        "generate",
        "--seed",
        "7",
        "--output",
        path(y.path()),
        "--n-scenes",
        "3",
        "--n-objects-per-scene",
        "3",
        "--points-per-object",
        "48",
        "--seeds",
        "12",
    ]);
    assert!(b.status.success());
    assert_eq!(String::from_utf8_lossy(&b.stderr).matches("pair ").count(), 3);
    assert_eq!(tree(x.path()), tree(y.path()));
    let summary: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(summary["n_pairs"], 3);
}

#[test]
fn invalid_flag_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--seed", "1", "--output", path(dir.path()), "--theta", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.theta"));
    let out = run(&["generate", "--seed", "1", "--output", path(dir.path()), "--candidate-pool", "all"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_writes_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.json");
    fs::write(
        &counts,
        r#"{"scenes": [["kitchen", 3], ["office", 1]],
            "categories": ["chair", "stove"],
            "object_counts": [[1, 3], [2, 0]]}"#,
    )
    .unwrap();
    let target = dir.path().join("dist.json");
    let out = run(&["fit", "--counts", path(&counts), "--epsilon", "0.2", "--output", path(&target)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dist: serde_json::Value = serde_json::from_str(&fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(dist["scene_prior"], serde_json::json!([0.75, 0.25]));
    assert_eq!(dist["epsilon"], 0.2);

    let out = run(&["fit"]);
    assert!(out.status.success());
    let bundled: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(bundled["scene_labels"].as_array().unwrap().len(), 14);

    fs::write(&counts, r#"{"scenes": [["a", 0]], "categories": ["c"], "category_counts": [1]}"#).unwrap();
    assert_eq!(run(&["fit", "--counts", path(&counts)]).status.code(), Some(2));
    assert_eq!(run(&["fit", "--counts", path(&dir.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn generated_distribution_feeds_generate() {
    let dir = tempfile::tempdir().unwrap();
    let dist = dir.path().join("dist.json");
    assert!(run(&["fit", "--epsilon", "1", "--output", path(&dist)]).status.success());
    let data = dir.path().join("data");
    let mut args = vec!["generate", "--seed", "2", "--output", path(&data), "--distribution", path(&dist)];
    args.extend_from_slice(TINY);
    assert!(run(&args).status.success());
}

#[test]
fn match_and_losses_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(generate(&data, "5").status.success());

    let out = run(&["match", "--dataset", path(&data), "--pair", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let matches: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(matches["theta"], 0.1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("pair_000001/manifest.json")).unwrap()).unwrap();
    assert_eq!(matches["pairs"].as_array().unwrap().len(), manifest["matches"]["pairs"].as_array().unwrap().len());
    assert_eq!(run(&["match", "--dataset", path(&data), "--pair", "9"]).status.code(), Some(2));

    let ckpt = dir.path().join("zero.json");
    let out = run(&["init-checkpoint", "--config", path(&data), "--zero", "--output", path(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = dir.path().join("report.jsonl");
    let out = run(&["losses", "--dataset", path(&data), "--checkpoint", path(&ckpt), "--report", path(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let get = |k: &str| r[k].as_f64().unwrap();
        let expect = get("l_obj") + 0.1 * get("l_pts") + 100.0 * (get("l_rec_coarse") + get("l_rec_detail"));
        assert!((get("l_overall") - expect).abs() < 1e-12);
    }

    let out = run(&["losses", "--dataset", path(&data)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn losses_on_empty_directory_exit_with_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let report = dir.path().join("report.jsonl");
    let out = run(&["losses", "--dataset", path(&empty), "--report", path(&report)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!report.exists());
    assert!(fs::read_dir(&empty).unwrap().next().is_none());
}

#[test]
fn corrupt_checkpoint_is_invalid_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(generate(&data, "6").status.success());
    let ckpt = dir.path().join("bad.json");
    fs::write(&ckpt, r#"{"tensors": []}"#).unwrap();
    let out = run(&["losses", "--dataset", path(&data), "--checkpoint", path(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let out = run(&["gradcheck", "--report", path(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PASS"));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
}
