use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn maskdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = maskdiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    jsonl(&String::from_utf8(out.stdout).unwrap())
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn data(&self, kind: &str, count: usize, seed: u64) -> PathBuf {
        let out = self.path(&format!("{kind}-{seed}"));
        let recs = ok(&[
            "datagen",
            "--kind",
            kind,
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            s(&out),
        ]);
        assert_eq!(recs[0]["count"], count);
        out
    }

    fn config(&self, text: &str) -> PathBuf {
        let p = self.path("quick.cfg");
        std::fs::write(&p, text).unwrap();
        p
    }
}

#[test]
fn full_curriculum_through_the_cli() {
    let fx = Fixture::new();
    let asr = fx.data("asr", 12, 1);
    let mcq = fx.data("mcq", 8, 2);
    let aqa = fx.data("aqa", 4, 3);
    let pref = fx.data("pref", 4, 4);
    let held_asr = fx.data("asr", 3, 91);
    let held_mcq = fx.data("mcq", 3, 92);
    let held_pref = fx.data("pref", 2, 94);
    let cfg = fx.config("max_steps = 2\nbatch = 2\n");

    let stage_inputs: [&[&Path]; 5] = [
        &[&asr, &mcq],
        &[&asr],
        &[&mcq, &aqa],
        &[&mcq, &aqa],
        &[&pref],
    ];
    let mut prev: Option<PathBuf> = None;
    for (stage, data) in stage_inputs.iter().enumerate() {
        let out = fx.path(&format!("s{stage}.ckpt"));
        let log = fx.path(&format!("s{stage}.jsonl"));
        let stage_s = stage.to_string();
        let mut args = vec![
            "train",
            "--stage",
            &stage_s,
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--log",
            s(&log),
        ];
        for d in data.iter() {
            args.extend(["--data", s(d)]);
        }
        if stage == 2 || stage == 3 {
            args.extend(["--asr", s(&asr)]);
        }
        if let Some(p) = &prev {
            args.extend(["--init", s(p)]);
        }
        let metrics = ok(&args);
        assert_eq!(metrics.len(), 2, "stage {stage}");
        assert!(metrics
            .iter()
            .all(|m| m["stage"] == stage && m["loss"].as_f64().unwrap().is_finite()));
        assert_eq!(jsonl(&std::fs::read_to_string(&log).unwrap()), metrics);
        assert!(out.exists());
        prev = Some(out);
    }

    let s3 = fx.path("s3.ckpt");
    let s4 = fx.path("s4.ckpt");
    let trace = fx.path("trace.jsonl");
    let decoded = ok(&[
        "decode",
        "--ckpt",
        s(&s4),
        "--data",
        s(&held_asr),
        "--trace",
        s(&trace),
        "--mode",
        "factor",
    ]);
    assert_eq!(decoded.len(), 3);
    let steps = jsonl(&std::fs::read_to_string(&trace).unwrap());
    assert_eq!(steps.iter().filter(|v| v["kind"] == "summary").count(), 3);

    let report = ok(&[
        "eval",
        "--ckpt",
        s(&s4),
        "--data",
        s(&held_asr),
        "--data",
        s(&held_mcq),
        "--data",
        s(&held_pref),
        "--reference",
        s(&s3),
        "--train-data",
        s(&asr),
    ]);
    let r = &report[0];
    assert_eq!(r["asr_records"], 3);
    assert_eq!(r["mcq_records"], 3);
    assert_eq!(r["pref_records"], 2);
    assert!(r["preference_margin"].is_f64());

    // A threshold nobody can meet flips the exit code.
    let strict = maskdiff(&[
        "eval",
        "--ckpt",
        s(&s4),
        "--data",
        s(&held_asr),
        "--max-ter=-1",
    ]);
    assert_eq!(strict.status.code(), Some(1));

    // Evaluating on training data is refused.
    let leak = maskdiff(&[
        "eval",
        "--ckpt",
        s(&s4),
        "--data",
        s(&asr),
        "--train-data",
        s(&asr),
    ]);
    assert_eq!(leak.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&leak.stderr).contains("training manifests"));

    let csv = fx.path("sweep.csv");
    let rows = ok(&[
        "bench-decode",
        "--ckpt",
        s(&s4),
        "--data",
        s(&held_asr),
        "--factors",
        "0.5,1,2",
        "--steps",
        "16,8",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(rows.len(), 5);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with(
        "mode,steps,factor,token_error_rate,choice_accuracy,forward_passes,wall_seconds"
    ));

    let var = ok(&[
        "vrpo-variance",
        "--ckpt",
        s(&s3),
        "--data",
        s(&held_pref),
        "--trials",
        "50",
        "--max-ratio",
        "10",
    ]);
    assert_eq!(var[0]["trials"], 50);
    assert!(var[0]["independent_var"].as_f64().unwrap() > 0.0);

    let params = ok(&["report", "--ckpt", s(&s4)]);
    let comps = params[0]["components"].as_array().unwrap();
    assert_eq!(comps.len(), 5);
    assert!(params[0]["overall"]["fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn later_stages_need_an_initial_checkpoint() {
    let fx = Fixture::new();
    let asr = fx.data("asr", 2, 1);
    let out = maskdiff(&[
        "train",
        "--stage",
        "1",
        "--data",
        s(&asr),
        "--out",
        s(&fx.path("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn datagen_is_reproducible() {
    let fx = Fixture::new();
    let a = fx.data("mcq", 5, 7);
    let b = fx.path("again");
    ok(&[
        "datagen",
        "--kind",
        "mcq",
        "--count",
        "5",
        "--seed",
        "7",
        "--out",
        s(&b),
    ]);
    assert_eq!(
        std::fs::read(a.join("manifest.jsonl")).unwrap(),
        std::fs::read(b.join("manifest.jsonl")).unwrap()
    );
}

#[test]
fn bad_arguments_are_usage_errors() {
    let out = maskdiff(&[
        "datagen", "--kind", "speech", "--count", "1", "--out", "/tmp/x",
    ]);
    assert!(!out.status.success());
    let out = maskdiff(&[
        "train",
        "--stage",
        "9",
        "--data",
        "/nonexistent",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
