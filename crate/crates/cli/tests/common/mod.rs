#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = r#"
[synth]
n_spots = 240
n_slides = 4
genes = 20
feature_dim = 8
embed_dim = 6
n_types = 4
n_reference = 160

[reward]
n_clusters = 8
pca_dim = 5
spatial_mode = "corrected"

[sampler]
rounds = 4

[baseline]
passes = 4

[train]
lr0 = 0.05
lr_min = 1e-4
batch = 32
epochs = 6
hidden = 16
head_hidden = 16
head_dim = 8
top_k = 6
top_t = 2

[sweep]
strategies = ["random", "scrl"]
ratios = [0.25]
seeds = [0, 1]
eval_folds = [0]
"#;

pub fn scrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = scrl(dir, args);
    assert!(
        out.status.success(),
        "scrl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

/// Runs the five commands in `dir` with the small config and returns the
/// eval stdout.
pub fn pipeline(dir: &Path) -> String {
    fs::write(dir.join("run.toml"), SMALL_CONFIG).unwrap();
    let c = ["--config", "run.toml"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { c.iter().chain(args).copied().collect() };
    ok(dir, &with(&["synth", "--out", "data"]));
    ok(dir, &with(&["sample", "--data", "data", "--strategy", "scrl", "--budget", "0.2", "--fold", "0", "--out", "pool/pool.json"]));
    ok(dir, &with(&["train", "--data", "data", "--pool", "pool/pool.json", "--out", "ckpt"]));
    let eval = ok(dir, &with(&["eval", "--data", "data", "--ckpt", "ckpt", "--fold", "0", "--out", "eval/metrics.json"]));
    ok(dir, &with(&["sweep", "--data", "data", "--out", "report"]));
    String::from_utf8(eval.stdout).unwrap()
}
