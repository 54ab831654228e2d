use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patternkv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_SPEC: &str = "\
# two heads, short stream
layers = 1
heads = 2
head_dim = 16
prefill_len = 256
decode_len = 512
seed = 5
";

fn write_spec(dir: &TempDir, name: &str, body: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn compare_json(args: &[&str]) -> Value {
    let o = run(args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn scheme<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["schemes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["name"] == name)
        .unwrap_or_else(|| panic!("scheme {name} missing"))
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["compare", "--help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["compare"])), 1);
    assert_eq!(
        code(&run(&["compare", "--synthetic", "default", "--bits", "3"])),
        1
    );
    assert_eq!(
        code(&run(&["compare", "--synthetic", "default", "--alpha", "0.7"])),
        1
    );
    assert_eq!(
        code(&run(&["compare", "--synthetic", "default", "--scheme", "kivi"])),
        1
    );
    let both = run(&["compare", "--synthetic", "default", "--input", "x.kvtr"]);
    assert_eq!(code(&both), 1);
}

#[test]
fn compare_clustered_synthetic() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, "small.spec", SMALL_SPEC);
    let report = compare_json(&[
        "compare",
        "--synthetic",
        &spec,
        "--bits",
        "2",
        "--scheme",
        "raw",
        "--scheme",
        "patternkv",
    ]);
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["input"]["source"], "synthetic");
    assert_eq!(report["input"]["spec"]["head_dim"], 16);
    let pkv = scheme(&report, "patternkv")["metrics"]["mse"].as_f64().unwrap();
    let raw = scheme(&report, "raw")["metrics"]["mse"].as_f64().unwrap();
    assert!(pkv < raw, "patternkv {pkv} raw {raw}");
    assert_eq!(scheme(&report, "patternkv")["heads"].as_array().unwrap().len(), 2);
}

#[test]
fn pattern_flags_off_match_raw() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, "small.spec", SMALL_SPEC);
    let report = compare_json(&[
        "compare",
        "--synthetic",
        &spec,
        "--scheme",
        "patternkv",
        "--no-k-pattern",
        "--no-v-pattern",
    ]);
    assert_eq!(
        scheme(&report, "patternkv")["metrics"],
        scheme(&report, "raw")["metrics"]
    );
}

#[test]
fn reports_are_deterministic_except_wall_clock() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, "small.spec", SMALL_SPEC);
    let mut outs = Vec::new();
    for name in ["a.json", "b.json"] {
        let out = dir.path().join(name);
        let o = run(&[
            "compare",
            "--synthetic",
            &spec,
            "--seed",
            "9",
            "--output",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("patternkv"));
        let text = fs::read_to_string(&out).unwrap();
        let stripped: Vec<&str> = text
            .lines()
            .filter(|l| !l.contains("\"wall_clock_ms\""))
            .collect();
        outs.push(stripped.join("\n"));
    }
    assert_eq!(outs[0], outs[1]);
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
}

#[test]
fn verify_suites() {
    for suite in ["quant", "patterns", "gate", "variance", "covering"] {
        let o = run(&["verify", "--suite", suite, "--seed", "4"]);
        assert_eq!(code(&o), 0, "{suite}: {}", stdout(&o));
        assert!(stdout(&o).contains("ok"));
        assert!(!stdout(&o).contains("FAIL"));
    }
    let o = run(&["verify", "--suite", "everything"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown suite"));
}

#[test]
fn synth_inspect_flags_outlier_channel() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(
        &dir,
        "outlier.spec",
        "layers = 2\nheads = 1\nhead_dim = 16\nprefill_len = 20\ndecode_len = 8\n\
         k_outlier_channels = 7\nk_outlier_multipliers = 100\n",
    );
    let trace = dir.path().join("t.kvtr");
    let csv = dir.path().join("c.csv");
    assert_eq!(code(&run(&["synth", "--spec", &spec, "--output", p(&trace)])), 0);

    let o = run(&["inspect", "--input", p(&trace), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("num_layers    2"));
    assert!(out.contains("decode_steps  8"));
    let k_rows: Vec<&str> = out
        .lines()
        .filter(|l| l.split_whitespace().nth(2) == Some("k"))
        .collect();
    assert_eq!(k_rows.len(), 2);
    for row in k_rows {
        assert_eq!(row.split_whitespace().last(), Some("7"), "{row}");
    }

    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("layer,head,kind,channel,mean_abs,min,max,outlier"));
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 16);
    assert!(table
        .lines()
        .any(|l| l.starts_with("0,0,k,7,") && l.ends_with(",true")));
}

#[test]
fn prefill_only_trace_is_valid() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(
        &dir,
        "p.spec",
        "layers = 1\nheads = 1\nhead_dim = 8\nprefill_len = 12\ndecode_len = 0\n",
    );
    let trace = dir.path().join("p.kvtr");
    assert_eq!(
        code(&run(&[
            "synth",
            "--spec",
            &spec,
            "--output",
            p(&trace),
            "--dtype",
            "f16"
        ])),
        0
    );
    let o = run(&["inspect", "--input", p(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("decode_steps  0"));
    assert!(stdout(&o).contains("f16"));
}

#[test]
fn bad_traces_exit_2() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("t.kvtr");
    let spec = write_spec(
        &dir,
        "s.spec",
        "layers = 1\nheads = 1\nhead_dim = 8\nprefill_len = 16\ndecode_len = 4\n",
    );
    assert_eq!(code(&run(&["synth", "--spec", &spec, "--output", p(&trace)])), 0);
    let bytes = fs::read(&trace).unwrap();

    let truncated = dir.path().join("short.kvtr");
    fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let o = run(&["inspect", "--input", p(&truncated)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("byte offset"), "{}", stderr(&o));
    let o = run(&["compare", "--input", p(&truncated)]);
    assert_eq!(code(&o), 2);

    let mut v2 = bytes.clone();
    v2[4] = 2;
    let versioned = dir.path().join("v2.kvtr");
    fs::write(&versioned, &v2).unwrap();
    let o = run(&["inspect", "--input", p(&versioned)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("expected 1, found 2"), "{}", stderr(&o));

    let missing = dir.path().join("nope.kvtr");
    assert_eq!(code(&run(&["inspect", "--input", p(&missing)])), 2);
}

#[test]
fn compare_reads_traces() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("t.kvtr");
    let spec = write_spec(&dir, "small.spec", SMALL_SPEC);
    assert_eq!(code(&run(&["synth", "--spec", &spec, "--output", p(&trace)])), 0);
    let report = compare_json(&[
        "compare",
        "--input",
        p(&trace),
        "--scheme",
        "patternkv",
        "--no-v-gate",
    ]);
    assert_eq!(report["input"]["source"], "trace");
    assert_eq!(report["input"]["num_kv_heads"], 2);
    assert_eq!(report["input"]["dtype"], "f32");
    let names: Vec<&str> = report["schemes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["patternkv", "raw"]);
    assert_eq!(
        scheme(&report, "patternkv")["config"]["toggles"]["use_v_gate"],
        false
    );
}

#[test]
fn bad_spec_file_is_usage() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, "bad.spec", "layers = 1\nwidth = 3\n");
    let o = run(&["compare", "--synthetic", &spec]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown key"));
}
