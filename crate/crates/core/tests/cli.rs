use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &[&str] = &[
    "data.train_rollouts=12",
    "data.val_rollouts=4",
    "data.test_rollouts=3",
    "data.horizon=8",
    "model.encoder_hidden=[8]",
    "model.encoder_dim=4",
    "model.film_hidden=[8]",
    "model.denoiser_hidden=[8,8]",
    "model.dynamics_hidden=[8]",
    "train.max_steps=40",
    "train.eval_every=20",
    "train.batch_size=32",
    "inference.particles=16",
    "inference.steps=8",
    "sweep.particles=[4,8]",
    "sweep.sequences=2",
];

fn dnpf(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dnpf"));
    cmd.current_dir(dir);
    for s in TINY.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(dir: &Path, extra: &[&str], cmd: &str) {
    let out = dnpf(dir, extra, &[cmd]);
    assert!(
        out.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn pipeline(dir: &Path, extra: &[&str]) {
    for cmd in ["simulate", "train", "filter", "eval", "ablate", "sweep", "plot"] {
        ok(dir, extra, cmd);
    }
}

/// Hash of every file under `root` except wall-clock timing records.
fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n != "timing") {
                    stack.push(p);
                }
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let h = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), h);
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &[]);
    pipeline(b.path(), &[]);
    let ha = tree_hashes(a.path());
    let hb = tree_hashes(b.path());
    for f in [
        "runs/data/provenance.json",
        "runs/bundle/train_report.json",
        "runs/out/filter/seq_00000.jsonl",
        "runs/out/eval/metrics.csv",
        "runs/out/ablate/ablation.csv",
        "runs/out/sweep/sweep.csv",
        "runs/out/plot/seq_00000_dim0.svg",
    ] {
        assert!(ha.contains_key(f), "missing {f}");
    }
    assert!(a.path().join("runs/out/filter/timing/seq_00000.csv").exists());
    assert_eq!(ha, hb);
    assert!(!ha.keys().any(|k| k.contains(".partial")));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(a.path(), "1"), (b.path(), "3")] {
        for cmd in ["simulate", "train", "filter"] {
            let out = Command::new(env!("CARGO_BIN_EXE_dnpf"))
                .current_dir(dir)
                .env("DNPF_THREADS", threads)
                .args(TINY.iter().flat_map(|s| ["--set", s]))
                .arg(cmd)
                .output()
                .unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    assert_eq!(tree_hashes(a.path()), tree_hashes(b.path()));
}

#[test]
fn sensor_and_provenance() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{
  "task": {"name": "spin-contact"},
  "sensor": {"h": [[0, 0, 1, 0], [0, 0, 0, 1]], "std": [0.25, 0.25], "seed": 4},
  "eval": {"components": [{"name": "object", "dims": [2, 3]}]}
}"#;
    std::fs::write(d.path().join("cfg.json"), cfg).unwrap();
    for cmd in ["simulate", "train", "filter", "eval"] {
        let out = dnpf(d.path(), &[], &["--config", "cfg.json", cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let line = std::fs::read_to_string(d.path().join("runs/out/filter/seq_00000.jsonl")).unwrap();
    assert!(line.lines().nth(2).unwrap().contains("\"sensor_used\":true"));
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("runs/out/eval/provenance.json")).unwrap())
            .unwrap();
    assert_eq!(prov["command"], "eval");
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(prov["seeds"]["sensor"], 4);
    let csv = std::fs::read_to_string(d.path().join("runs/out/eval/metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("object"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(dnpf(d.path(), &["inference.particle=3"], &["simulate"])), 2);
    assert_eq!(code(dnpf(d.path(), &["inference.particles=0"], &["simulate"])), 2);
    assert_eq!(code(dnpf(d.path(), &[], &["--config", "missing.json", "simulate"])), 4);
    std::fs::write(d.path().join("bad.json"), "{\n  \"data\": {\n    \"horizon\": \"x\"\n  }\n}").unwrap();
    let out = dnpf(d.path(), &[], &["--config", "bad.json", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert_eq!(code(dnpf(d.path(), &[], &["filter"])), 4);
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_dnpf"))
        .current_dir(d.path())
        .env("DNPF_THREADS", "zero")
        .arg("config")
        .output()
        .unwrap();
    assert_eq!(code(bad_threads), 2);
    ok(d.path(), &[], "simulate");
    assert_eq!(code(dnpf(d.path(), &["train.lr=1e300"], &["train"])), 3);
    assert!(!d.path().join("runs/bundle").exists());
    assert!(!d.path().join("runs/bundle.partial").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            dnpf::config::RunConfig::load(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 2);
}
