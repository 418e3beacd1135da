use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tdcal::ingest::{self, load, load_report, load_weights, WeightsFile};
use tdcal::metrics::{build_bins, reliability_diagram, BinPolicy};
use tdcal::pipeline::{aggregate, Aggregation};
use tdcal::posthoc::{mapped_scores, AttenuationWeights};
use tdcal::TruthConfig;

fn tdcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdcal")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tdcal(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["synth", "--out-dir", p(dir), "--samples", "1500", "--sources", "4"];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.json")
}

#[test]
fn default_synth_output_loads() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let data = load(&m).unwrap();
    assert_eq!(data.ensemble.num_samples(), 1500);
    assert_eq!(data.ensemble.num_sources(), 4);
    assert_eq!(data.ensemble.num_classes(), 10);
}

#[test]
fn synth_seed_determines_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    synth(a.path(), &["--seed", "5"]);
    synth(b.path(), &["--seed", "5"]);
    synth(c.path(), &["--seed", "6"]);
    let read = |d: &Path| fs::read(d.join("source_2.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn logits_output_loads_to_the_same_ensemble() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = load(&synth(a.path(), &["--samples", "50"])).unwrap().ensemble;
    let pb = load(&synth(b.path(), &["--samples", "50", "--logits"])).unwrap().ensemble;
    for i in 0..50 {
        for (x, y) in pa.prediction(1, i).as_slice().iter().zip(pb.prediction(1, i).as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn calibrated_by_construction_has_near_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "100000", "--sources", "1", "--tau", "1", "--noise", "0"]);
    let out = dir.path().join("eval");
    ok(&["evaluate", p(&m), "--out-dir", p(&out), "--variant", "de", "--regularize", "none"]);
    let r = load_report(&out.join("report.json")).unwrap();
    assert!(r.metrics.ece.before < 0.01, "{}", r.metrics.ece.before);
}

#[test]
fn identical_sources_have_zero_hv() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "200", "--sources", "2", "--noise", "0"]);
    let out = dir.path().join("d");
    ok(&["discover", p(&m), "--out-dir", p(&out)]);
    let hv = fs::read_to_string(out.join("hv.csv")).unwrap();
    assert_eq!(hv.lines().count(), 200);
    assert!(hv.lines().all(|l| l.parse::<f64>().unwrap() == 0.0));
}

#[test]
fn discover_table_keeps_accuracy_for_atde() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let out = dir.path().join("d");
    let stdout = ok(&["discover", p(&m), "--out-dir", p(&out), "--report", "tsv"]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method\tece_kde\tece\tacc");
    let acc = |row: &str| row.split('\t').nth(3).unwrap().to_string();
    assert!(lines[1].starts_with("de\t") && lines[3].starts_with("atde\t"));
    assert_eq!(acc(lines[1]), acc(lines[3]));
    let truth = fs::read_to_string(out.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1500);
    assert_eq!(truth.lines().next().unwrap().split(',').count(), 10);
    let rel = fs::read_to_string(out.join("reliabilities.csv")).unwrap();
    assert_eq!(rel.lines().count(), 5);
}

#[test]
fn missing_manifest_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["discover", "calibrate", "evaluate"] {
        let out = tdcal(&[cmd, "/nonexistent/manifest.json", "--out-dir", p(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tdcal(&["calibrate"]).status.code(), Some(2));
    assert_eq!(tdcal(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn too_many_bins_is_an_actionable_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "40"]);
    let out = tdcal(&["calibrate", p(&m), "--out-dir", p(&dir.path().join("c")), "--bins", "30"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bins"));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "400"]);
    let out = tdcal(&["calibrate", p(&m), "--out-dir", p(&dir.path().join("c")), "--lr", "inf", "--replications", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_epochs_give_identity_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let out = dir.path().join("c");
    let args = ["calibrate", p(&m), "--out-dir", p(&out), "--epochs-hist", "0", "--epochs-kde", "0", "--replications", "2"];
    ok(&args);
    for r in 0..2 {
        let w = load_weights(&out.join(format!("weights_{r}.json"))).unwrap();
        assert!(w.psi.iter().all(|&x| x == 0.0));
    }
    let report = load_report(&out.join("report.json")).unwrap();
    for (name, pair) in report.metrics.rows() {
        assert_eq!(pair.before, pair.after, "{name}");
    }
}

#[test]
fn calibration_improves_overconfident_data() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "4000", "--sources", "6"]);
    let out = dir.path().join("c");
    ok(&["calibrate", p(&m), "--out-dir", p(&out), "--replications", "2"]);
    let r = load_report(&out.join("report.json")).unwrap();
    assert!(r.metrics.ece.after < r.metrics.ece.before);
    assert_eq!(r.metrics.acc.after, r.metrics.acc.before);
    assert_eq!(r.replications.len(), 2);
    assert!(r.metrics.ece.after_std.is_some());
}

#[test]
fn calibrate_then_evaluate_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &["--samples", "3000"]);
    let c = dir.path().join("c");
    ok(&["calibrate", p(&m), "--out-dir", p(&c), "--replications", "2", "--seed", "10"]);
    let report = load_report(&c.join("report.json")).unwrap();
    for (r, rep) in report.replications.iter().enumerate() {
        let e = dir.path().join(format!("e{r}"));
        let w = c.join(format!("weights_{r}.json"));
        ok(&["evaluate", p(&m), "--out-dir", p(&e), "--weights", p(&w)]);
        let ev = load_report(&e.join("report.json")).unwrap();
        assert_eq!(ev.metrics, rep.metrics);
        assert_eq!(ev.seed, rep.seed);
    }
}

#[test]
fn zero_weights_match_no_weights() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let data = load(&m).unwrap();
    let agg = aggregate(&data.ensemble, Aggregation::Atde, &TruthConfig::default(), true).unwrap();
    let v: Vec<f64> = agg.samples.iter().map(|s| s.winning_score()).collect();
    let bins = build_bins(&v, 15, BinPolicy::EqualMass).unwrap();
    let zero = AttenuationWeights::identity(bins, Default::default());
    let wpath = dir.path().join("zero.json");
    ingest::save_weights(&wpath, &WeightsFile::new(&zero, Aggregation::Atde, true, None)).unwrap();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let with_w = ok(&["evaluate", p(&m), "--out-dir", p(&a), "--weights", p(&wpath)]).stdout;
    let without = ok(&["evaluate", p(&m), "--out-dir", p(&b)]).stdout;
    assert_eq!(with_w, without);
    assert_eq!(fs::read(a.join("reliability.csv")).unwrap(), fs::read(b.join("reliability.csv")).unwrap());
}

#[test]
fn reliability_csv_matches_the_diagram() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let c = dir.path().join("c");
    ok(&["calibrate", p(&m), "--out-dir", p(&c), "--replications", "1"]);
    let e = dir.path().join("e");
    let w = c.join("weights_0.json");
    let svg = dir.path().join("diagram.svg");
    ok(&["evaluate", p(&m), "--out-dir", p(&e), "--weights", p(&w), "--svg", p(&svg)]);

    let wf = load_weights(&w).unwrap();
    let weights = wf.to_weights().unwrap();
    let data = load(&m).unwrap();
    let agg = aggregate(&data.ensemble, Aggregation::Atde, &TruthConfig::default(), true).unwrap();
    let split = wf.split.unwrap();
    let (_, eval) = ingest::split(agg.samples.len(), &ingest::SplitSpec { seed: split.seed, fraction: split.fraction }).unwrap();
    let subset: Vec<_> = eval.iter().map(|&i| agg.samples[i].clone()).collect();
    let scored = mapped_scores(Some(&weights), &subset);
    let conf: Vec<f64> = scored.iter().map(|s| s.confidence).collect();
    let diagram = reliability_diagram(&scored, &build_bins(&conf, 15, BinPolicy::EqualMass).unwrap());
    let mut expected = Vec::new();
    diagram.write_csv(&mut expected).unwrap();
    assert_eq!(fs::read(e.join("reliability.csv")).unwrap(), expected);

    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).expect("valid XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.attribute("class") == Some("diagonal")));
    let bars = doc.descendants().filter(|n| n.attribute("class") == Some("acc")).count();
    assert_eq!(bars, diagram.rows.iter().filter(|r| r.count > 0).count());
}

#[test]
fn json_and_tsv_reports_agree() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), &[]);
    let json = ok(&["evaluate", p(&m), "--out-dir", p(&dir.path().join("a"))]).stdout;
    let tsv = ok(&["evaluate", p(&m), "--out-dir", p(&dir.path().join("b")), "--report", "tsv"]).stdout;
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    let tsv = String::from_utf8(tsv).unwrap();
    let ece_row = tsv.lines().find(|l| l.starts_with("ece\t")).unwrap();
    let before: f64 = ece_row.split('\t').nth(1).unwrap().parse().unwrap();
    assert_eq!(v["ece"]["before"].as_f64().unwrap(), before);
}
