//! Runs the `kvmix` binary end to end on a tiny model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TINY: &[&str] = &[
    "--set",
    "model.denoiser.base_channels=8",
    "--set",
    "trainer.batch_size=2",
    "--set",
    "trainer.checkpoint_every=2",
    "--set",
    "trainer.log_every=1",
    "--set",
    "eval.count=2",
    "--set",
    "eval.seeds_per_input=2",
    "--set",
    "sampler.steps=3",
    "--set",
    "guidance.refine_steps_per_t=1",
];

fn kvmix(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvmix"))
        .arg("--output-dir")
        .arg(out)
        .args(TINY)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = kvmix(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    for d in [&a, &b] {
        ok(d.path(), &["gen-data", "--count", "4", "--seed", "9"]);
    }
    // The config snapshot records the output directory, which differs.
    let data = |d: &Path| -> Vec<_> {
        tree(&d.join("gen-data"))
            .into_iter()
            .filter(|(n, _)| n != "config.resolved.toml")
            .collect()
    };
    let (ta, tb) = (data(a.path()), data(b.path()));
    assert!(ta.iter().any(|(n, _)| n.ends_with("manifest.json")));
    assert_eq!(ta, tb);
}

#[test]
fn bad_configuration_exits_with_usage_code() {
    let d = tempdir().unwrap();
    let o = kvmix(d.path(), &["--set", "trainer.alpha=-1", "validate-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer.alpha"));

    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "seeed = 1\n").unwrap();
    let o = kvmix(d.path(), &["--config", cfg.to_str().unwrap(), "validate-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeed"));

    let o = kvmix(d.path(), &["train-adapters", "--variant", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_config_prints_resolved_values() {
    let d = tempdir().unwrap();
    let text = ok(d.path(), &["--set", "trainer.alpha=0.5", "validate-config"]);
    assert!(text.contains("alpha = 0.5"), "{text}");
}

#[test]
fn missing_variant_fails_ablation() {
    let d = tempdir().unwrap();
    let o = kvmix(d.path(), &["ablate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tiny_pipeline_produces_every_artifact() {
    let d = tempdir().unwrap();
    let out = d.path();
    ok(out, &["gen-data", "--count", "6"]);
    ok(out, &["pretrain-base", "--steps", "2"]);
    assert!(out.join("pretrain-base/final.ckpt").exists());
    let metrics = fs::read_to_string(out.join("pretrain-base/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    for v in ["mixed", "coarse-only", "fine-only"] {
        ok(out, &["train-adapters", "--variant", v, "--steps", "2"]);
        assert!(out.join("train-adapters").join(v).join("final.ckpt").exists());
    }

    ok(out, &["sample", "--input", "1", "--save-attention"]);
    assert!(out.join("sample/sample.png").exists());
    assert!(out.join("sample/attention.npz").exists());

    ok(out, &["sample", "--guided", "--shift", "0:+4,0", "--save-attention"]);
    let assignment: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("sample/assignment.json")).unwrap()).unwrap();
    assert_eq!(assignment["shift"]["prompt"], 0);
    assert!(assignment["pairs"].is_array());
    for f in ["stage1.png", "stage2.png", "attention.npz"] {
        assert!(out.join("sample").join(f).exists(), "{f}");
    }

    let o = kvmix(out, &["sample", "--shift", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    ok(out, &["eval", "--limit", "1"]);
    assert!(out.join("eval/report.csv").exists());

    let table = ok(out, &["ablate", "--limit", "1"]);
    for v in ["coarse-only", "fine-only", "mixed", "mixed+guidance"] {
        assert!(table.contains(v), "{table}");
    }
    let summary = fs::read_to_string(out.join("ablate/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5, "{summary}");
    assert!(out.join("ablate/report.csv").exists());
}
