use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn chain(&self, name: &str, n: usize) -> PathBuf {
        let edges: Vec<[usize; 2]> = (1..n).map(|i| [i - 1, i]).collect();
        self.write(name, &serde_json::json!({ "n": n, "edges": edges }).to_string())
    }
}

fn mixbnd(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixbnd")).args(args.iter().map(|a| a.as_ref())).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Exit code and the parsed JSON error object from stderr.
fn failure(out: &Output) -> (i32, Value) {
    let err: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), err)
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_solve_eval_round_trip() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 8);
    let (m, r) = (sb.path("m.json"), sb.path("r.json"));
    ok(&mixbnd(&[&"generate", &"--graph", &g, &"--k", &"2", &"--seed", &"4", &"--out", &m]));
    ok(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"2", &"--model", &m, &"--seed", &"4", &"--out", &r]));
    let doc = read(&r);
    assert_eq!(doc["diagnostics"]["runs"], 13);
    assert!(doc.get("bounds").is_none());
    let report: Value =
        serde_json::from_str(&ok(&mixbnd(&[&"eval", &"--graph", &g, &"--model", &m, &"--recovered", &r]))).unwrap();
    assert!(report["max_abs_cpt"].as_f64().unwrap() < 1e-9);
    assert!(report["max_abs_weight"].as_f64().unwrap() < 1e-9);
}

#[test]
fn noisy_solve_carries_a_ledger_that_eval_checks() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 8);
    let (m, r, e) = (sb.path("m.json"), sb.path("r.json"), sb.path("e.json"));
    ok(&mixbnd(&[&"generate", &"--graph", &g, &"--k", &"2", &"--out", &m]));
    ok(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"2", &"--oracle", &"noisy", &"--model", &m, &"--out", &r]));
    assert_eq!(read(&r)["bounds"]["eps"], 1e-6);
    ok(&mixbnd(&[&"eval", &"--graph", &g, &"--model", &m, &"--recovered", &r, &"--out", &e]));
    let bounds = &read(&e)["bounds"];
    assert_eq!(bounds["params_checked"], bounds["params_within"]);
    assert_eq!(bounds["all_within"], true);
}

#[test]
fn dump_runs_without_a_model_prints_the_collection() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 8);
    let text = ok(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"2", &"--runs", &"path", &"--dump-runs"]));
    let (runs, tree) = text.split_once("\n\n").unwrap();
    assert_eq!(runs.lines().count(), 13);
    assert_eq!(runs.lines().next(), Some("0*0*0*--"));
    assert_eq!(tree.lines().count(), 12);
}

#[test]
fn samples_and_em_solve() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 6);
    let (m, s, r) = (sb.path("m.json"), sb.path("s.csv"), sb.path("r.json"));
    ok(&mixbnd(&[
        &"generate",
        &"--graph",
        &g,
        &"--k",
        &"2",
        &"--zeta",
        &"0.25",
        &"--out",
        &m,
        &"--samples",
        &s,
        &"--count",
        &"20000",
    ]));
    let csv = std::fs::read_to_string(&s).unwrap();
    assert_eq!(csv.lines().next(), Some("v0,v1,v2,v3,v4,v5,u"));
    assert_eq!(csv.lines().count(), 20001);
    ok(&mixbnd(&[
        &"solve",
        &"--graph",
        &g,
        &"--k",
        &"2",
        &"--oracle",
        &"em",
        &"--samples",
        &s,
        &"--min-postselect",
        &"300",
        &"--out",
        &r,
    ]));
    let w: f64 = read(&r)["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
}

#[test]
fn zero_count_writes_no_samples() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 4);
    let (m, s) = (sb.path("m.json"), sb.path("s.csv"));
    ok(&mixbnd(&[&"generate", &"--graph", &g, &"--k", &"1", &"--out", &m, &"--samples", &s, &"--count", &"0"]));
    assert!(m.exists() && !s.exists());
    let (code, err) = failure(&mixbnd(&[&"generate", &"--graph", &g, &"--k", &"1", &"--out", &m, &"--count", &"5"]));
    assert_eq!((code, err["error"].as_str()), (2, Some("BadArgument")));
}

#[test]
fn dary_round_trip_for_one_source() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 3);
    let (m, r) = (sb.path("m.json"), sb.path("r.json"));
    let d: &[&dyn AsRef<std::ffi::OsStr>] = &[&"--alphabet-d", &"3"];
    ok(&mixbnd(&[&[&"generate" as &dyn AsRef<_>, &"--graph", &g, &"--k", &"1", &"--out", &m], d].concat()));
    ok(&mixbnd(
        &[&[&"solve" as &dyn AsRef<_>, &"--graph", &g, &"--k", &"1", &"--model", &m, &"--out", &r], d].concat(),
    ));
    assert_eq!(read(&r)["alphabet"]["d"], 3);
    let report =
        ok(&mixbnd(&[&[&"eval" as &dyn AsRef<_>, &"--graph", &g, &"--model", &m, &"--recovered", &r], d].concat()));
    let report: Value = serde_json::from_str(&report).unwrap();
    assert!(report["max_abs_error"].as_f64().unwrap() < 1e-6);
}

#[test]
fn malformed_graph_reports_line_and_exit_2() {
    let sb = Sandbox::new();
    let g = sb.write("g.json", "{\n  \"n\": 3,\n  \"edges\": [[0, 1],,]\n}\n");
    let (code, err) = failure(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"2", &"--dump-runs"]));
    assert_eq!((code, err["error"].as_str()), (2, Some("Json")));
    assert!(err["message"].as_str().unwrap().contains("g.json:3:"), "{err}");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn cyclic_graph_is_rejected() {
    let sb = Sandbox::new();
    let g = sb.write("g.json", r#"{"n": 3, "edges": [[0, 1], [1, 2], [2, 0]]}"#);
    let (code, err) = failure(&mixbnd(&[&"generate", &"--graph", &g, &"--k", &"2", &"--out", &sb.path("m.json")]));
    assert_eq!((code, err["error"].as_str()), (2, Some("CycleDetected")));
}

#[test]
fn bad_sample_cell_names_its_line() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 2);
    let s = sb.write("s.csv", "v0,v1\n0,1\n1,0\n0,7\n");
    let (code, err) = failure(&mixbnd(&[
        &"solve",
        &"--graph",
        &g,
        &"--k",
        &"1",
        &"--oracle",
        &"em",
        &"--samples",
        &s,
        &"--out",
        &sb.path("r.json"),
    ]));
    assert_eq!((code, err["error"].as_str()), (2, Some("Csv")));
    assert!(err["message"].as_str().unwrap().contains("s.csv:4:"), "{err}");
}

#[test]
fn too_many_sources_is_a_pipeline_failure() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 8);
    let (code, err) =
        failure(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"3", &"--runs", &"generic", &"--dump-runs"]));
    assert_eq!((code, err["error"].as_str()), (3, Some("NotEnoughCenters")));
}

#[test]
fn missing_oracle_inputs_are_input_errors() {
    let sb = Sandbox::new();
    let g = sb.chain("g.json", 8);
    let r = sb.path("r.json");
    let (code, err) = failure(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"2", &"--out", &r]));
    assert_eq!((code, err["error"].as_str()), (2, Some("BadArgument")));
    let (code, _) = failure(&mixbnd(&[&"solve", &"--graph", &g, &"--k", &"0", &"--out", &r]));
    assert_eq!(code, 2);
}
