use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn copydet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_copydet"))
        .args(args)
        .env("COPYDET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = copydet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"n_refs": 3000, "n_queries_matched": 150, "n_distractors": 400, "n_train": 2000, "dim": 48}"#;

fn generated(dir: &Path) -> std::path::PathBuf {
    let config = dir.join("config.json");
    fs::write(&config, SMALL).unwrap();
    let data = dir.join("data");
    ok(&["gen", "--config", s(&config), "--seed", "3", "--out", s(&data)]);
    data
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn generated_dataset_evaluates_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generated(tmp.path());
    for f in ["manifest.json", "refs.dsc", "queries.dsc", "train.dsc", "gt.csv", "metadata.jsonl"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let out = tmp.path().join("eval");
    ok(&[
        "eval-descriptor",
        "--queries", s(&data.join("queries.dsc")),
        "--refs", s(&data.join("refs.dsc")),
        "--gt", s(&data.join("gt.csv")),
        "--metadata", s(&data.join("metadata.jsonl")),
        "--k", "10",
        "--out", s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let micro = report["summary"]["micro_ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&micro));
    assert!(out.join("tables/source.csv").exists());
    assert!(out.join("series/pr_curve.csv").exists());

    // At most k rows per query.
    assert!(csv_rows(&out.join("candidates.csv")).len() <= 10 * 550);

    // Evaluating the emitted candidates through the matching track agrees.
    let matching = tmp.path().join("matching");
    ok(&[
        "eval-matching",
        "--candidates", s(&out.join("candidates.csv")),
        "--gt", s(&data.join("gt.csv")),
        "--row-budget", "97",
        "--out", s(&matching),
    ]);
    assert_eq!(fs::read(out.join("aps.csv")).unwrap(), fs::read(matching.join("aps.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(matching.join("report.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["micro_ap"].as_f64().unwrap(), micro);

    // Penalty rows: one per transformation present in the metadata.
    let pen = tmp.path().join("pen");
    ok(&[
        "penalty",
        "--aps", s(&out.join("aps.csv")),
        "--metadata", s(&data.join("metadata.jsonl")),
        "--out", s(&pen),
    ]);
    let mut names = std::collections::BTreeSet::new();
    for line in fs::read_to_string(data.join("metadata.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for step in v["steps"].as_array().into_iter().flatten() {
            names.insert(step["name"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(csv_rows(&pen.join("penalties.csv")).len(), names.len());

    // Comparing a report with itself lands on the diagonal.
    let cmp = tmp.path().join("cmp");
    ok(&["compare", "--x", s(&out), "--y", s(&out), "--metric", "micro-ap", "--out", s(&cmp)]);
    for row in csv_rows(&cmp.join("compare.csv")) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2], f[3]);
    }
}

#[test]
fn background_options_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generated(tmp.path());
    for mode in ["scores", "subtract", "rescale"] {
        let out = tmp.path().join(mode);
        ok(&[
            "eval-descriptor",
            "--queries", s(&data.join("queries.dsc")),
            "--refs", s(&data.join("refs.dsc")),
            "--gt", s(&data.join("gt.csv")),
            "--bg", s(&data.join("train.dsc")),
            "--mode", mode,
            "--out", s(&out),
        ]);
        assert!(out.join("report.json").exists());
    }
    let out = tmp.path().join("norm");
    ok(&[
        "normalize",
        "--queries", s(&data.join("queries.dsc")),
        "--bg", s(&data.join("train.dsc")),
        "--mode", "subtract",
        "--out", s(&out),
    ]);
    assert!(out.join("queries.dsc").exists());
}

#[test]
fn duplicate_pair_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.csv");
    let cands = tmp.path().join("c.csv");
    fs::write(&gt, "query_id,reference_id\nq1,r1\n").unwrap();
    fs::write(&cands, "query_id,reference_id,score\nq1,r1,0.5\nq1,r2,0.4\nq1,r1,0.3\n").unwrap();
    let out = tmp.path().join("out");
    for budget in ["1", "1000"] {
        let res = copydet(&[
            "eval-matching", "--candidates", s(&cands), "--gt", s(&gt), "--row-budget", budget, "--out", s(&out),
        ]);
        assert_eq!(res.status.code(), Some(2), "budget {budget}");
        let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
        assert_eq!(err["exit_code"], 2);
        assert!(err["message"].as_str().unwrap().contains("r1"));
        let stderr: serde_json::Value = serde_json::from_slice(&copydet_stderr_json(&res.stderr)).unwrap();
        assert_eq!(stderr["error"], err["error"]);
    }
}

/// The error document is the trailing block of stderr starting at a `{` line.
fn copydet_stderr_json(stderr: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(stderr);
    let start = text.rfind("\n{").map_or(0, |i| i + 1);
    text[start..].as_bytes().to_vec()
}

#[test]
fn empty_candidates_give_zero_micro_ap() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.csv");
    let cands = tmp.path().join("c.csv");
    fs::write(&gt, "query_id,reference_id\nq1,r1\nq2,r9\n").unwrap();
    fs::write(&cands, "query_id,reference_id,score\n").unwrap();
    let out = tmp.path().join("out");
    ok(&["eval-matching", "--candidates", s(&cands), "--gt", s(&gt), "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["micro_ap"].as_f64(), Some(0.0));
}

#[test]
fn bad_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("nope.csv");
    let res = copydet(&["eval-matching", "--candidates", s(&missing), "--gt", s(&missing), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(out.join("error.json").exists());

    let bad = tmp.path().join("bad.dsc");
    fs::write(&bad, b"not a descriptor file").unwrap();
    let gt = tmp.path().join("gt.csv");
    fs::write(&gt, "query_id,reference_id\nq,r\n").unwrap();
    let res = copydet(&["eval-descriptor", "--queries", s(&bad), "--refs", s(&bad), "--gt", s(&gt), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));

    let res = copydet(&["penalty", "--aps", s(&gt), "--metadata", s(&gt), "--lambda", "-1", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn rank_deficient_unregularized_fit_is_a_computation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let aps = tmp.path().join("aps.csv");
    let meta = tmp.path().join("meta.jsonl");
    fs::write(&aps, "query_id,ap\nq1,0.5\nq2,0.7\n").unwrap();
    // blur and hflip always co-occur, so their columns are identical.
    let rec = |q: &str| {
        format!(
            r#"{{"query_id":"{q}","source":"generic","edit_mode":"automatic","steps":[{{"name":"blur","class":"L"}},{{"name":"hflip","class":"G"}}]}}"#
        )
    };
    fs::write(&meta, format!("{}\n{}\n", rec("q1"), rec("q2"))).unwrap();
    let out = tmp.path().join("out");
    let res = copydet(&["penalty", "--aps", s(&aps), "--metadata", s(&meta), "--lambda", "0", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn manifest_records_hashes_not_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.csv");
    let cands = tmp.path().join("c.csv");
    fs::write(&gt, "query_id,reference_id\nq1,r1\n").unwrap();
    fs::write(&cands, "query_id,reference_id,score\nq1,r1,0.5\n").unwrap();
    let out = tmp.path().join("out");
    ok(&["eval-matching", "--candidates", s(&cands), "--gt", s(&gt), "--out", s(&out)]);
    let text = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(!text.contains(s(tmp.path())));
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["command"], "eval-matching");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
}
