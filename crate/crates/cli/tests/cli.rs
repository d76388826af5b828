use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cicbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cicbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cicbench(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cicbench(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

struct Fixture {
    dir: tempfile::TempDir,
    corpus: PathBuf,
    queries: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut corpus = String::new();
        corpus.push_str(r#"{"id":"PSG001","title":"Eureka","text":"Eureka is the county seat of Humboldt County in California."}"#);
        corpus.push('\n');
        corpus.push_str(r#"{"id":"PSG002","title":"Arcata","text":"Arcata is a city near the bay with a university."}"#);
        corpus.push('\n');
        for i in 0..60 {
            corpus.push_str(&format!(
                "{{\"id\":\"N{i:02}\",\"title\":\"Town {i}\",\"text\":\"Town {i} is a city in California with a county seat and a bay.\"}}\n"
            ));
        }
        let queries = concat!(
            r#"{"query_id":"q1","q":"Eureka is the county seat of which county?","a":"Humboldt County","gold_ids":["PSG001"],"task_kind":"QA"}"#,
            "\n",
            r#"{"query_id":"q2","q":"Which city near the bay has a university?","a":"Arcata","gold_ids":["PSG002"],"task_kind":"QA"}"#,
            "\n",
        );
        let corpus_path = dir.path().join("corpus.jsonl");
        let queries_path = dir.path().join("queries.jsonl");
        std::fs::write(&corpus_path, corpus).unwrap();
        std::fs::write(&queries_path, queries).unwrap();
        Fixture {
            dir,
            corpus: corpus_path,
            queries: queries_path,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn build(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec![
            "build",
            "--corpus",
            s(&self.corpus),
            "--queries",
            s(&self.queries),
            "--budget",
            "500",
            "--seed",
            "7",
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn build_is_reproducible_with_manifest() {
    let fx = Fixture::new();
    let a = fx.build("a.jsonl", &["--ratio", "0.5"]);
    let b = fx.build("b.jsonl", &["--ratio", "0.5"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(fx.path("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "build");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["ratio"], 0.5);
    assert_eq!(manifest["config"]["budget"], 500);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    let digest = manifest["inputs"][s(&fx.corpus)].as_str().unwrap();
    assert_eq!(digest.len(), 64);

    let instances = read_lines(&a);
    assert_eq!(instances.len(), 2);
    assert_eq!(instances[0]["query_id"], "q1");
}

#[test]
fn zero_ratio_uses_only_random_filler() {
    let fx = Fixture::new();
    let out = fx.build("loft.jsonl", &["--ratio", "0.0", "--k", "5"]);
    for inst in read_lines(&out) {
        assert_eq!(inst["retrieved_count"], 0);
        assert!(inst["context"].as_array().unwrap().len() > 1);
    }
}

#[test]
fn stats_reproduces_builder_report() {
    let fx = Fixture::new();
    let out = fx.build("d.jsonl", &[]);
    let built = std::fs::read_to_string(fx.path("d.jsonl.stats.json")).unwrap();
    let recomputed = ok(&["stats", "--dataset", s(&out)]);
    assert_eq!(built, recomputed);
    let table = ok(&["stats", "--dataset", s(&out), "--table"]);
    assert!(table.starts_with("Task\t#CTX\t#Tokens\t#Prov\nQA\t"));
}

#[test]
fn config_file_precedence() {
    let fx = Fixture::new();
    let cfg = fx.path("run.cfg");
    std::fs::write(&cfg, "ratio = 0.0\nbudget = 300\n").unwrap();
    let out = fx.path("c.jsonl");
    let args = [
        "--config", s(&cfg), "build", "--corpus", s(&fx.corpus), "--queries", s(&fx.queries), "--seed", "1",
        "--budget", "450", "--out", s(&out),
    ];
    ok(&args);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(fx.path("c.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["ratio"], 0.0);
    assert_eq!(manifest["config"]["budget"], 450);

    std::fs::write(&cfg, "ratoi = 0.0\n").unwrap();
    let bad = [
        "--config", s(&cfg), "build", "--corpus", s(&fx.corpus), "--queries", s(&fx.queries), "--seed", "1",
    ];
    assert_eq!(code(&bad), 2);
}

#[test]
fn simulate_probe_filter_chain() {
    let fx = Fixture::new();
    let dataset = fx.build("d.jsonl", &[]);
    let traces = fx.path("traces.jsonl");
    ok(&[
        "simulate", "--dataset", s(&dataset), "--heads", "8", "--retrieval-heads", "2,5", "--kappa", "0.9", "--seed",
        "11", "--out", s(&traces),
    ]);
    let profiles = fx.path("profiles.json");
    ok(&["probe", "--traces", s(&traces), "--golds", s(&dataset), "--M", "1", "--out", s(&profiles)]);
    let p: Value = serde_json::from_str(&std::fs::read_to_string(&profiles).unwrap()).unwrap();
    let rates: Vec<f64> = p["profiles"].as_array().unwrap().iter().map(|h| h["hit_rate"].as_f64().unwrap()).collect();
    assert_eq!(rates[2], 1.0);
    assert_eq!(rates[5], 1.0);

    let ids = ok(&["filter", "--traces", s(&traces), "--profiles", s(&profiles), "--Q", "2", "--M", "1"]);
    for line in ids.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["passage_ids"].as_array().unwrap().len() <= 2);
    }

    let filtered = fx.path("filtered.jsonl");
    ok(&[
        "filter", "--traces", s(&traces), "--profiles", s(&profiles), "--Q", "2", "--M", "1", "--dataset",
        s(&dataset), "--out", s(&filtered),
    ]);
    for inst in read_lines(&filtered) {
        assert_eq!(inst["context"].as_array().unwrap().len(), 1);
        assert!(inst.get("missing_gold").is_none());
    }

    // preset: DA / confounded / NQ is Q=4, M=1
    let preset = ok(&[
        "filter", "--traces", s(&traces), "--profiles", s(&profiles), "--style", "da", "--regime", "confounded",
        "--task", "nq",
    ]);
    for line in preset.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["passage_ids"].as_array().unwrap().len() <= 4);
    }
    // no preset for fact verification without confounders
    assert_eq!(
        code(&["filter", "--traces", s(&traces), "--profiles", s(&profiles), "--style", "da", "--regime", "loft", "--task", "fever"]),
        2
    );
}

#[test]
fn sft_format_styles() {
    let fx = Fixture::new();
    let dataset = fx.build("d.jsonl", &[]);
    let cci = ok(&["sft-format", "--dataset", s(&dataset), "--style", "CCI"]);
    let first: Value = serde_json::from_str(cci.lines().next().unwrap()).unwrap();
    assert_eq!(first["target"], "<RETRIEVAL>PSG001</RETRIEVAL>Humboldt County");
    let da = ok(&["sft-format", "--dataset", s(&dataset)]);
    let first: Value = serde_json::from_str(da.lines().next().unwrap()).unwrap();
    assert_eq!(first["target"], "Humboldt County");
}

#[test]
fn eval_reports() {
    let fx = Fixture::new();
    let preds = fx.path("preds.jsonl");
    std::fs::write(
        &preds,
        concat!(
            r#"{"query_id":"q1","prediction":"Humboldt County","references":["Humboldt County"],"retrieved_ids":["a"],"gold_ids":["a","b"]}"#,
            "\n",
            r#"{"query_id":"q2","prediction":"the Arcata.","references":["Arcata"]}"#,
            "\n"
        ),
    )
    .unwrap();
    let report: Value = serde_json::from_str(&ok(&["eval", "--predictions", s(&preds), "--task", "qa"])).unwrap();
    assert_eq!(report["score"], 1.0);
    assert_eq!(report["recall"], 0.5);
    assert_eq!(report["metric"], "exact_match");
    let dialogue: Value =
        serde_json::from_str(&ok(&["eval", "--predictions", s(&preds), "--task", "wow"])).unwrap();
    assert_eq!(dialogue["metric"], "rouge-l");
}

#[test]
fn gradcheck_and_training() {
    let report: Value = serde_json::from_str(&ok(&["gradcheck", "--n", "8", "--k", "2", "--tau", "0.5", "--trials", "20", "--seed", "1"])).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() < 1e-3);

    let fx = Fixture::new();
    let train = fx.path("train.jsonl");
    let test = fx.path("test.jsonl");
    ok(&["simulate", "--embeddings", "--queries", "200", "--n", "10", "--d", "8", "--gold", "2", "--seed", "1", "--out", s(&train)]);
    ok(&["simulate", "--embeddings", "--queries", "50", "--n", "10", "--d", "8", "--gold", "2", "--seed", "2", "--out", s(&test)]);
    let out = fx.path("params.json");
    ok(&[
        "train-rethead", "--data", s(&train), "--eval-data", s(&test), "--k", "2", "--tau", "0.5", "--steps", "400",
        "--seed", "3", "--out", s(&out),
    ]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(report["selection_accuracy"].as_f64().unwrap() >= 0.95);
    assert_eq!(report["losses"].as_array().unwrap().len(), 400);
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    // randomized commands insist on a seed
    assert_eq!(code(&["build", "--corpus", s(&fx.corpus), "--queries", s(&fx.queries)]), 2);
    assert_eq!(code(&["gradcheck"]), 2);
    // bad value
    assert_eq!(code(&["build", "--corpus", s(&fx.corpus), "--queries", s(&fx.queries), "--ratio", "1.5", "--seed", "1"]), 2);
    // malformed corpus line
    let broken = fx.path("broken.jsonl");
    std::fs::write(&broken, "{\"id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\nnot json\n").unwrap();
    let out = cicbench(&["build", "--corpus", s(&broken), "--queries", s(&fx.queries), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
    // numeric failure: tolerance nothing can meet
    assert_eq!(code(&["gradcheck", "--trials", "3", "--tol", "0", "--seed", "1"]), 4);
    // divergence
    let train = fx.path("train.jsonl");
    ok(&["simulate", "--embeddings", "--queries", "10", "--n", "6", "--d", "4", "--seed", "1", "--out", s(&train)]);
    assert_eq!(code(&["train-rethead", "--data", s(&train), "--steps", "50", "--step-size", "1e300", "--seed", "1"]), 4);
}
