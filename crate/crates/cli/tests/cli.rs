use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const DATASET: &str = r#"{"id":"n1","task":"NER","schema":["PER","ORG"],"text":"Alice works at Acme.","label":[{"span":"Alice","type":"PER"},{"span":"Acme","type":"ORG"}]}
{"id":"r1","task":"RE","schema":["works_for"],"text":"Bob works for Globex.","label":[{"head":"Bob","predicate":"works_for","tail":"Globex"}]}
{"id":"e1","task":"EE","schema":[{"name":"Hire","roles":["employer","employee"]}],"text":"Initech hired Carol.","label":[{"trigger":"hired","type":"Hire","arguments":{"employer":"Initech","employee":"Carol"}}]}
"#;

const WRONG_SCRIPT: &str = r#"{"id":"n1","round":0,"text":[{"span":"Bob","type":"PER"}]}
{"id":"r1","round":0,"text":"[]"}
{"id":"e1","round":0,"text":"not json at all"}
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("data.jsonl"), DATASET).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn scir(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_scir"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("SCIR_API_KEY")
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.scir(args);
        assert!(
            out.status.success(),
            "scir {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str], code: i32, category: &str) -> String {
        let out = self.scir(args);
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(out.status.code(), Some(code), "scir {args:?}: {stderr}");
        let line = stderr
            .lines()
            .find(|l| l.starts_with("error["))
            .unwrap_or_else(|| panic!("no error line in {stderr}"));
        assert!(line.starts_with(&format!("error[{category}]: ")), "{line}");
        line.to_string()
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn oracle_run_scores_perfectly_and_needs_no_detectors() {
    let f = Fixture::new();
    let stdout = f.ok(&["run", "--dataset", "data.jsonl", "--out-dir", "out"]);
    assert!(
        stdout.contains("items=3 pruned=3 flushed=0 aborted=0 extraction_calls=3 prune_calls=3 detector_calls=0"),
        "{stdout}"
    );
    for name in ["answers.jsonl", "traces.jsonl", "manifest.json"] {
        assert!(f.path("out").join(name).is_file(), "{name}");
    }

    f.ok(&[
        "eval",
        "--gold",
        "data.jsonl",
        "--answers",
        "out/answers.jsonl",
        "--json",
        "score.json",
    ]);
    let score = json(&f.path("score.json"));
    assert_eq!(score["overall"]["micro_f1"], 1.0);
    assert_eq!(score["items"], 3);

    let report = f.ok(&[
        "report",
        "--traces",
        "out/traces.jsonl",
        "--manifest",
        "out/manifest.json",
        "--json",
        "acc.json",
    ]);
    assert!(report.contains("K=2"), "{report}");
    let acc = json(&f.path("acc.json"));
    assert_eq!(acc["total"]["calls"]["detector"], 0);
    assert_eq!(acc["total"]["calls"]["extraction"], 3);
}

#[test]
fn zero_iterations_flushes_every_wrong_item_after_one_generation() {
    let f = Fixture::new();
    f.write("script.jsonl", WRONG_SCRIPT);
    let stdout = f.ok(&[
        "run",
        "--dataset",
        "data.jsonl",
        "--out-dir",
        "out",
        "--extractor",
        "scripted:script.jsonl",
        "--max-iterations",
        "0",
    ]);
    assert!(stdout.contains("pruned=0 flushed=3"), "{stdout}");
    let traces = jsonl(&f.path("out/traces.jsonl"));
    assert_eq!(traces.len(), 3);
    assert!(traces
        .iter()
        .all(|t| t["round"] == 0 && t["disposition"] == "Flushed"));
    let answers = jsonl(&f.path("out/answers.jsonl"));
    assert!(answers
        .iter()
        .all(|a| a["accepted_via"] == "Flushed" && a["accepted_round"] == 0));
    let manifest = json(&f.path("out/manifest.json"));
    assert_eq!(manifest["max_generations"], 1);
    assert_eq!(manifest["calls"]["detector"], 0);
}

#[test]
fn follower_run_yields_curve_and_pruning_table() {
    let f = Fixture::new();
    f.write("script.jsonl", WRONG_SCRIPT);
    f.ok(&[
        "run",
        "--dataset",
        "data.jsonl",
        "--out-dir",
        "out",
        "--extractor",
        "follower:script.jsonl",
    ]);
    let text = f.ok(&[
        "eval",
        "--gold",
        "data.jsonl",
        "--traces",
        "out/traces.jsonl",
        "--manifest",
        "out/manifest.json",
        "--curve-csv",
        "curve.csv",
        "--json",
        "score.json",
    ]);
    assert!(text.contains("accepted_incorrect"), "{text}");
    let csv = fs::read_to_string(f.path("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
    let score = json(&f.path("score.json"));
    let curve = score["curve"].as_array().unwrap();
    assert!(curve[0]["score"]["micro_f1"].as_f64().unwrap() < 1.0);
    assert_eq!(curve[2]["score"]["micro_f1"], 1.0);
    assert_eq!(score["overall"]["micro_f1"], 1.0);
}

#[test]
fn api_keys_never_reach_the_manifest() {
    let f = Fixture::new();
    f.write(
        "scir.toml",
        "[paths]\ndataset = \"data.jsonl\"\nout_dir = \"out\"\n\n[endpoints.default]\nbase_url = \"http://127.0.0.1:9/v1\"\napi_key = \"sk-very-secret\"\n",
    );
    f.ok(&["--config", "scir.toml", "run"]);
    let manifest = fs::read_to_string(f.path("out/manifest.json")).unwrap();
    assert!(!manifest.contains("sk-very-secret"));
    assert!(manifest.contains("127.0.0.1:9"));
    assert!(manifest.contains("dataset_sha256"));
}

#[test]
fn failures_print_one_categorised_line() {
    let f = Fixture::new();
    f.fails(
        &["run", "--dataset", "nope.jsonl", "--out-dir", "out"],
        3,
        "IoFailure",
    );

    f.write("bad.toml", "[run]\nmax_iterationz = 3\n");
    f.fails(&["--config", "bad.toml", "run"], 2, "ConfigInvalid");

    f.fails(&["run", "--out-dir", "out"], 2, "ConfigInvalid");

    let dup = format!("{}{}", DATASET, DATASET.lines().next().unwrap());
    f.write("dup.jsonl", &dup);
    f.fails(
        &["run", "--dataset", "dup.jsonl", "--out-dir", "out"],
        4,
        "DuplicateId",
    );

    f.write(
        "nogold.jsonl",
        r#"{"id":"x","task":"NER","schema":["PER"],"text":"t"}"#,
    );
    f.fails(
        &["run", "--dataset", "nogold.jsonl", "--out-dir", "out"],
        4,
        "MissingGold",
    );

    f.ok(&["run", "--dataset", "data.jsonl", "--out-dir", "out"]);
    f.write("other.jsonl", &DATASET.replace("\"n1\"", "\"n9\""));
    f.fails(
        &[
            "eval",
            "--gold",
            "other.jsonl",
            "--answers",
            "out/answers.jsonl",
        ],
        4,
        "MissingGold",
    );

    let mut manifest = json(&f.path("out/manifest.json"));
    manifest["calls"]["prune"] = 99.into();
    f.write("tampered.json", &manifest.to_string());
    f.fails(
        &[
            "report",
            "--traces",
            "out/traces.jsonl",
            "--manifest",
            "tampered.json",
        ],
        4,
        "TraceIncomplete",
    );

    let replay = [
        "run",
        "--dataset",
        "data.jsonl",
        "--out-dir",
        "out",
        "--extractor",
        "remote",
        "--replay",
        "tape.jsonl",
    ];
    f.fails(&replay, 2, "ConfigInvalid");
    f.write("tape.jsonl", "");
    let stdout = f.ok(&replay);
    assert!(stdout.contains("pruned=0 flushed=0 aborted=3"), "{stdout}");
    let answers = jsonl(&f.path("out/answers.jsonl"));
    assert!(answers
        .iter()
        .all(|a| a["error"].as_str().unwrap().contains("cassette miss")));
}

#[test]
fn mbsc_build_labels_predictions() {
    let f = Fixture::new();
    f.write("script.jsonl", WRONG_SCRIPT);
    f.ok(&[
        "run",
        "--dataset",
        "data.jsonl",
        "--out-dir",
        "out",
        "--extractor",
        "scripted:script.jsonl",
        "--max-iterations",
        "0",
    ]);
    f.ok(&[
        "build-mbsc",
        "--gold",
        "data.jsonl",
        "--predictions",
        "out/answers.jsonl",
        "--out",
        "mbsc.jsonl",
        "--stats",
        "stats.json",
    ]);
    let records = jsonl(&f.path("mbsc.jsonl"));
    assert_eq!(records.len(), 3);
    let by_id = |id: &str| records.iter().find(|r| r["id"] == id).unwrap().clone();
    assert_eq!(
        by_id("n1")["tags"],
        serde_json::json!(["Missing", "Redundant"])
    );
    assert_eq!(by_id("r1")["tags"], serde_json::json!(["Missing"]));
    let stats = json(&f.path("stats.json"));
    assert_eq!(stats["records"], 3);

    f.write("stray.jsonl", r#"{"id":"ghost","prediction":[]}"#);
    f.fails(
        &[
            "build-mbsc",
            "--gold",
            "data.jsonl",
            "--predictions",
            "stray.jsonl",
            "--out",
            "bad.jsonl",
        ],
        4,
        "UnresolvedId",
    );
    assert!(!f.path("bad.jsonl").exists());
}

#[test]
fn conll_conversion_produces_runnable_items() {
    let f = Fixture::new();
    f.write(
        "train.conll",
        "-DOCSTART- O\n\nAlice B-PER\nvisited O\nNew B-LOC\nYork I-LOC\n\nBob B-PER\nslept O\n",
    );
    let out = f.ok(&[
        "convert",
        "--input",
        "train.conll",
        "--output",
        "conv.jsonl",
    ]);
    assert!(out.contains("items=2"), "{out}");
    let items = jsonl(&f.path("conv.jsonl"));
    assert_eq!(items[0]["id"], "conll-1");
    assert_eq!(items[0]["text"], "Alice visited New York");
    let stdout = f.ok(&["run", "--dataset", "conv.jsonl", "--out-dir", "out"]);
    assert!(stdout.contains("items=2 pruned=2"), "{stdout}");
}
