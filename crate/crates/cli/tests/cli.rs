use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use pivotguard::fixtures::conflict_rescue_corpus;
use pivotguard::jsonl;
use pivotguard::synth::{Candidate, SubstitutionPlan, SynthTask};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pivotguard"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(samples: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = conflict_rescue_corpus(samples, 4);
        jsonl::write(&dir.path().join("corpus.jsonl"), &corpus.samples).unwrap();
        std::fs::write(
            dir.path().join("model.json"),
            serde_json::to_string(&corpus.model).unwrap(),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn model(&self) -> String {
        format!("scripted:{}", self.path("model.json"))
    }

    fn decode(&self, method: &str, extra: &[&str]) -> Output {
        let out = self.path(&format!("{method}.jsonl"));
        let mut args = vec![
            "decode",
            "--corpus",
            &self.path("corpus.jsonl"),
            "--model",
            &self.model(),
            "--method",
            method,
            "--out",
            &out,
        ]
        .into_iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn line_count(path: &str) -> usize {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .count()
}

#[test]
fn decode_writes_one_record_per_sample() {
    let ws = Workspace::new(6);
    let out = ws.decode(
        "rpgd",
        &[
            "--jobs",
            "2",
            "--timings",
            &ws.path("t.jsonl"),
            "--trace",
            &ws.path("trace.jsonl"),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(line_count(&ws.path("rpgd.jsonl")), 6);
    assert_eq!(line_count(&ws.path("t.jsonl")), 6);
    let first: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(ws.path("rpgd.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first["sample_id"], 0);
    assert!(first["error"].is_null());
}

#[test]
fn unknown_flag_exits_one() {
    let out = run(&["decode", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("decode"));
}

#[test]
fn missing_corpus_names_the_path() {
    let ws = Workspace::new(1);
    let missing = ws.path("absent.jsonl");
    let out = run(&[
        "decode",
        "--corpus",
        &missing,
        "--model",
        &ws.model(),
        "--out",
        &ws.path("o.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.jsonl"), "{}", stderr(&out));
}

#[test]
fn bad_override_is_runtime_error() {
    let ws = Workspace::new(1);
    let out = ws.decode("rpgd", &["--set", "tau=2.5"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_prints_report_and_writes_csv() {
    let ws = Workspace::new(4);
    for m in ["greedy", "rpgd"] {
        assert!(ws.decode(m, &[]).status.success());
    }
    let out = run(&[
        "eval",
        "--results",
        &ws.path("greedy.jsonl"),
        &ws.path("rpgd.jsonl"),
        "--gold",
        &ws.path("corpus.jsonl"),
        "--report",
        &ws.path("report.json"),
        "--csv",
        &ws.path("v.csv"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("rpgd"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert!(report["methods"].is_array() || report["methods"].is_object());
    assert_eq!(line_count(&ws.path("v.csv")), 1 + 8);
}

#[test]
fn trace_dump_filters_by_step() {
    let ws = Workspace::new(2);
    assert!(ws
        .decode("rpgd", &["--trace", &ws.path("trace.jsonl")])
        .status
        .success());
    let out = run(&[
        "trace-dump",
        "--trace",
        &ws.path("trace.jsonl"),
        "--step",
        "0",
        "--sample",
        "1",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sample 1 rpgd step 0"), "{text}");
    assert!(!text.contains("sample 0 "), "{text}");
}

fn synth_task() -> SynthTask {
    let base = conflict_rescue_corpus(1, 4).samples.remove(0);
    let answer = base.answer.clone();
    SynthTask {
        base,
        substitutions: vec![SubstitutionPlan {
            passage: 0,
            p_gt: Candidate {
                value: answer.clone(),
                category: "nationality".into(),
            },
            candidates: vec![
                Candidate {
                    value: answer,
                    category: "nationality".into(),
                },
                Candidate {
                    value: "Kenyan".into(),
                    category: "nationality".into(),
                },
            ],
            references: BTreeMap::from([("Kenyan".to_owned(), "Registry scans list Kenyan .".to_owned())]),
        }],
    }
}

#[test]
fn synth_mock_retains_and_rejects_by_score() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    jsonl::write(Path::new(&p("tasks.jsonl")), &[synth_task()]).unwrap();

    let out = run(&[
        "synth",
        "--corpus",
        &p("tasks.jsonl"),
        "--mock-scores",
        "9-10",
        "--out",
        &p("kept.jsonl"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let kept = std::fs::read_to_string(p("kept.jsonl")).unwrap();
    assert!(kept.contains("Kenyan"));

    let out = run(&[
        "synth",
        "--corpus",
        &p("tasks.jsonl"),
        "--mock-scores",
        "1-3",
        "--out",
        &p("kept2.jsonl"),
        "--rejected",
        &p("rej.jsonl"),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(line_count(&p("kept2.jsonl")), 0);
    assert_eq!(line_count(&p("rej.jsonl")), 1);
}

#[test]
fn synth_remote_without_endpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    jsonl::write(&tasks, &[synth_task()]).unwrap();
    let out = run(&[
        "synth",
        "--corpus",
        tasks.to_str().unwrap(),
        "--client",
        "remote",
        "--out",
        "/dev/null",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--endpoint"));
}
