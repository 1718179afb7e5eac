mod common;

use std::fs;
use std::sync::OnceLock;

use cfalign::report::annotation;
use common::*;
use serde_json::{json, Value};

struct Fixture {
    _dir: tempfile::TempDir,
    pipeline: Pipeline,
}

fn fixture() -> &'static Pipeline {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    &FIXTURE
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let pipeline = Pipeline::build(dir.path(), 500);
            Fixture { _dir: dir, pipeline }
        })
        .pipeline
}

fn parse_cell(cell: &str) -> (f64, usize) {
    let parts: Vec<&str> = cell.split('|').collect();
    (parts[0].parse().unwrap(), parts[2].parse().unwrap())
}

#[test]
fn gen_data_is_reproducible_and_reports_correlation() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "d.json", &dataset_config(300));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = run_cmd("gen-data", &c, &a, &[]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("label correlation"));
    run_cmd("gen-data", &c, &b, &["--workers", "1"]);
    let fa = all_files(&a);
    assert!(fa.contains_key(std::path::Path::new("manifest.json")));
    assert_eq!(files_with_suffix(&a, ".cfat").len(), 3);
    let mut fb = all_files(&b);
    // run.json records its own output directory
    fb.remove(std::path::Path::new("run.json"));
    let mut fa = fa;
    fa.remove(std::path::Path::new("run.json"));
    assert_eq!(fa, fb);
    let run: Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["config"]["thresholds"], json!([0.5, 0.5, 0.5, 0.5, 0.5]));
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "d.json", &dataset_config(50));
    run_cmd("gen-data", &c, &dir.path().join("a"), &[]);
    run_cmd("gen-data", &c, &dir.path().join("b"), &["--seed", "8"]);
    let read = |p: &str| fs::read(dir.path().join(p).join("labels.cfat")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn malformed_config_exits_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("bad.json");
    fs::write(&c, "{\n  \"n_samples\": 10,\n  \"seed\": ,\n}\n").unwrap();
    let out = expect(&["gen-data", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json:3:"), "{err}");
    assert!(err.contains("line 3"), "{err}");

    fs::write(&c, r#"{"n_samples": 10, "sed": 1}"#).unwrap();
    expect(&["gen-data", "--config", c.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], 2);
    expect(&["gen-data", "--out", dir.path().to_str().unwrap()], 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "t.json", &train_config(&dir.path().join("nowhere")));
    let out = expect(&["train", "--config", c.to_str().unwrap(), "--out", dir.path().join("m").to_str().unwrap()], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    let missing = dir.path().join("absent.json");
    expect(&["align", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], 3);
}

#[test]
fn worst_group_with_zero_eta_matches_erm() {
    let p = fixture();
    let cfg = json!({
        "dataset": p.data,
        "classifier_defaults": {"hidden": [16], "epochs": 3, "seed": 5},
        "classifiers": [{"attribute": "elongation"}]
    });
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "t.json", &cfg);
    run_cmd("train", &c, &dir.path().join("erm"), &[]);
    run_cmd(
        "train",
        &c,
        &dir.path().join("wg"),
        &["--mode", "worst_group", "--eta", "0", "--sensitive", "frame"],
    );
    let read = |run: &str, f: &str| fs::read(dir.path().join(run).join("classifiers/elongation").join(f)).unwrap();
    assert_eq!(read("erm", "loss.csv"), read("wg", "loss.csv"));
    assert_eq!(read("erm", "layer0_w.cfat"), read("wg", "layer0_w.cfat"));
    assert_eq!(read("erm", "layer1_w.cfat"), read("wg", "layer1_w.cfat"));

    expect(
        &["train", "--config", c.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap(), "--mode", "worst_group"],
        2,
    );
}

#[test]
fn align_diagonal_and_svg_agree_with_csv() {
    let p = fixture();
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "a.json", &p.align_config());
    let out = dir.path().join("align");
    run_cmd("align", &c, &out, &[]);
    let csv = fs::read_to_string(out.join("alignment.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let mut means = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        for (j, cell) in cells[1..].iter().enumerate() {
            let (mean, n) = parse_cell(cell);
            if header[j + 1] == cells[0] && n > 0 {
                assert_eq!(mean, 1.0, "diagonal of {}", cells[0]);
            }
            means.push(mean);
        }
    }
    let svg = fs::read_to_string(out.join("alignment.svg")).unwrap();
    let shown: Vec<&str> = svg
        .split("class=\"cell\">")
        .skip(1)
        .map(|s| s.split('<').next().unwrap())
        .collect();
    let expected: Vec<String> = means.iter().map(|m| annotation(*m)).collect();
    assert_eq!(shown, expected);
    for f in ["prediction_correlation.csv", "label_correlation.csv", "records.csv", "flags.csv", "run.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn align_exits_5_when_nothing_passes_the_filter() {
    let p = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = p.align_config();
    cfg["alignment"]["min_base_delta"] = json!(2.0);
    let c = write_config(dir.path(), "a.json", &cfg);
    let out = expect(&["align", "--config", c.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()], 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("base-change"));
    assert!(dir.path().join("o/alignment.csv").is_file());
}

#[test]
fn cf_sweeps_and_ineligible_samples() {
    let p = fixture();
    let (base, positive, negative) = p.cf_base(3);
    let base = base.as_str();
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "neg.json", &p.cf_config(base, &[positive[0], negative]));
    let out = expect(&["cf", "--config", c.to_str().unwrap(), "--out", dir.path().join("neg").to_str().unwrap()], 6);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("sample {negative}")) && err.contains("not a positive prediction"), "{err}");

    let samples = &positive[..3];
    let c = write_config(dir.path(), "cf.json", &p.cf_config(base, samples));
    let out = dir.path().join("cf");
    run_cmd("cf", &c, &out, &[]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    for (k, &i) in samples.iter().enumerate() {
        let status = summary.lines().nth(k + 1).unwrap().split(',').nth(1).unwrap().to_string();
        let sweep = fs::read_to_string(out.join(format!("sample_{i}/sweep.csv"))).unwrap();
        let mut lines = sweep.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let base_col = header.iter().position(|h| *h == format!("base:{base}")).unwrap();
        let self_col = header.iter().position(|h| *h == format!("ds:{base}")).unwrap();
        let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        for r in &rows {
            assert_eq!(r[base_col], r[self_col]);
        }
        if status == "crossed" {
            assert!(rows.windows(2).all(|w| w[1][base_col] <= w[0][base_col]));
        }
        for f in ["sweep.svg", "original.pgm", "reconstruction.pgm", "counterfactual.pgm"] {
            assert!(out.join(format!("sample_{i}/{f}")).is_file());
        }
    }
    assert!(out.join("montage.svg").is_file());
}

#[test]
fn bias_with_zero_coefficient_leaves_relative_change_unchanged() {
    let p = fixture();
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "b.json", &p.bias_config(0.0));
    let out = dir.path().join("bias");
    run_cmd("bias", &c, &out, &[]);
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let before = report["r_before"]["mean"].as_f64().unwrap();
    let after = report["r_after"]["mean"].as_f64().unwrap();
    assert!((after - before).abs() < 0.05, "{before} vs {after}");
    assert!(out.join("r_values.csv").is_file());
    assert!(out.join("examples/montage.svg").is_file());
}

#[test]
fn rectify_resume_continues_the_beta_sequence() {
    let p = fixture();
    let dir = tempfile::tempdir().unwrap();
    let full = write_config(dir.path(), "full.json", &p.rectify_config(4));
    let part = write_config(dir.path(), "part.json", &p.rectify_config(2));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_cmd("rectify", &full, &a, &[]);
    run_cmd("rectify", &part, &b, &[]);
    run_cmd("rectify", &full, &b, &["--resume"]);
    let curves = |d: &std::path::Path| fs::read_to_string(d.join("frame/curves.csv")).unwrap();
    assert_eq!(curves(&a), curves(&b));
    assert_eq!(curves(&a).lines().count(), 5);
    for f in ["rectify.csv", "before.csv", "after.csv", "before.svg", "after.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let mut other = p.rectify_config(4);
    other["hyperparams"]["lr"] = json!(0.01);
    let other = write_config(dir.path(), "other.json", &other);
    expect(
        &["rectify", "--config", other.to_str().unwrap(), "--out", b.to_str().unwrap(), "--resume"],
        2,
    );
}
