use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;
use trackscreen_core::evaluate::{evaluate_methods, Labels, SanctionMatch, DEFAULT_KS};
use trackscreen_core::synth::{generate, GeneratorSpec};
use trackscreen_core::{run_detector, DetectorConfig, EvaluationReport, MethodId};

const BIN: &str = env!("CARGO_BIN_EXE_trackscreen");
const SPEC: &str = "n_athletes = 200\nseed = 5\n[injection]\nfraction_doped = 0.05\nsanction_fraction = 1.0\n";

fn trackscreen(db: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--db")
        .arg(db)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("TRACKSCREEN_DB")
        .env_remove("TRACKSCREEN_PORT")
        .output()
        .unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn generated(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    spec
}

#[test]
fn generate_ingest_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("cli.db");
    let data = dir.path().join("data");
    let spec = generated(dir.path());
    let summary = ok_json(trackscreen(&db, &["generate", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    assert_eq!(summary["athletes"], 200);

    let files: Vec<String> = ["results.csv", "sanctions.csv", "competitions.csv"]
        .iter()
        .map(|f| data.join(f).to_str().unwrap().to_string())
        .collect();
    let mut args = vec!["ingest"];
    args.extend(files.iter().map(String::as_str));
    let outcomes = ok_json(trackscreen(&db, &args));
    let kinds: Vec<&str> = outcomes.as_array().unwrap().iter().map(|o| o["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["competitions", "results", "sanctions"]);
    // re-ingesting stores nothing new
    let again = ok_json(trackscreen(&db, &args));
    assert!(again.as_array().unwrap().iter().all(|o| o["stored"] == 0));

    let slice = "100m-men:men:2010-01-01:2025-12-31:legal";
    let detected = ok_json(trackscreen(&db, &["detect", "--slice", slice, "--methods", "zscore,iqr"]));
    let ran: Vec<&str> =
        detected["methods"].as_array().unwrap().iter().map(|m| m["method_id"].as_str().unwrap()).collect();
    assert_eq!(ran, ["zscore", "iqr"]);

    let report_path = dir.path().join("report.json");
    let out = trackscreen(&db, &["evaluate", "--slice", slice, "--out", report_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("zscore"));
    let report: EvaluationReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();

    // golden: the same evaluation computed in-process from the generated dataset
    let ds = generate(&toml::from_str::<GeneratorSpec>(SPEC).unwrap()).unwrap();
    let histories: Vec<_> = ds
        .histories()
        .into_iter()
        .filter_map(|mut h| {
            h.performances.retain(|p| p.wind_legal);
            (!h.performances.is_empty()).then_some(h)
        })
        .collect();
    let cfg = DetectorConfig::default();
    let results: Vec<_> =
        [MethodId::ZScore, MethodId::Iqr].iter().map(|&m| run_detector(m, &histories, &cfg).unwrap()).collect();
    let labels = Labels::from_sanctions(&ds.sanctions, SanctionMatch::AnyDate);
    let golden = evaluate_methods(&results, &labels, slice, &DEFAULT_KS);
    assert_eq!(report, golden);

    let export = dir.path().join("export");
    ok_json(trackscreen(&db, &["export-report", "--slice", slice, "--out", export.to_str().unwrap()]));
    assert!(export.join("report.json").exists() && export.join("report.txt").exists());
}

#[test]
fn errors_are_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("e.db");
    let out = trackscreen(&db, &["evaluate", "--slice", "100m-men:men:2010-01-01:2025-12-31:legal"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr.split(|b| *b == b'\n').rev().find(|l| !l.is_empty()).unwrap().to_vec()).unwrap();
    assert_eq!(err["code"], "not_materialized");

    let out = trackscreen(&db, &["detect", "--slice", "100m-men", "--methods", "nonsense"]);
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap();
    assert!(serde_json::from_str::<Value>(last).unwrap()["message"].is_string());
}

#[test]
fn serve_shuts_down_on_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("s.db");
    let mut child = Command::new(BIN)
        .arg("--db")
        .arg(&db)
        .args(["serve", "--port", "0"])
        .env("RUST_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut line = String::new();
    while Instant::now() < deadline {
        line.clear();
        if stderr.read_line(&mut line).unwrap() == 0 || line.contains("listening") {
            break;
        }
    }
    assert!(line.contains("listening"), "{line}");
    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let status = child.wait().unwrap();
    let mut rest = String::new();
    stderr.read_to_string(&mut rest).unwrap();
    assert!(status.success(), "{rest}");
    assert!(rest.contains("shutting down"));
}
