//! Acceptance suite: one line per criterion, `PASS` or `FAIL` with the measured numbers.
//!
//! Run with `cargo test -p trackscreen-service --test acceptance`. The process exits
//! non-zero when any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;
use trackscreen_core::detect::bayes::{fit_hier_data, HierData, HierModelSpec, McmcSettings};
use trackscreen_core::detect::copula::{copula_fit, copula_flag, CopulaModel};
use trackscreen_core::detect::{DetectionEntry, PerformanceRef};
use trackscreen_core::evaluate::{evaluate_methods, Labels};
use trackscreen_core::synth::{
    gaussian_histories, generate, group_histories, hierarchical_histories, oracle_flags, GeneratorSpec, HierParams,
    InjectionSpec, OracleRule, PerfKey,
};
use trackscreen_core::{run_detector, AthleteHistory, DetectionResult, DetectorConfig, EntryStatus, MethodId, Store};
use trackscreen_service::files::ingest_files;
use trackscreen_service::{router, AppState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn entry(athlete: &str, flagged: bool) -> DetectionEntry {
    DetectionEntry {
        performance: PerformanceRef { athlete_id: athlete.to_string(), index: 0, competition_id: "C".into() },
        status: EntryStatus::Scored,
        flagged,
        score: Some(if flagged { 1.0 } else { 0.0 }),
        explanation: String::new(),
    }
}

/// Published athlete-level rows: method, TP, FP, P, R, F1 (25 sanctioned athletes).
const TABLE_III: [(MethodId, usize, usize, f64, f64, f64); 8] = [
    (MethodId::ExcessPerformance, 2, 224, 0.009, 0.080, 0.016),
    (MethodId::BayesHier, 4, 707, 0.006, 0.160, 0.011),
    (MethodId::IsolationForest, 6, 1848, 0.003, 0.240, 0.006),
    (MethodId::Iqr, 0, 5, 0.000, 0.000, 0.000),
    (MethodId::Copula, 0, 16, 0.000, 0.000, 0.000),
    (MethodId::GbtResidual, 0, 53, 0.000, 0.000, 0.000),
    (MethodId::Mad, 0, 0, 0.000, 0.000, 0.000),
    (MethodId::ZScore, 0, 0, 0.000, 0.000, 0.000),
];

fn criterion_1() -> Outcome {
    let sanctioned: Vec<String> = (0..25).map(|i| format!("S{i:02}")).collect();
    let labels = Labels::from_ids(sanctioned.iter().cloned());
    let results: Vec<DetectionResult> = TABLE_III
        .iter()
        .map(|&(m, tp, fp, ..)| {
            let mut entries: Vec<DetectionEntry> =
                sanctioned.iter().enumerate().map(|(i, id)| entry(id, i < tp)).collect();
            entries.extend((0..fp).map(|i| entry(&format!("F{i:05}"), true)));
            DetectionResult::new(m, entries, Vec::new())
        })
        .collect();
    let report = evaluate_methods(&results, &labels, "fixture", &[200]);
    let round3 = |x: f64| (x * 1000.0).round() / 1000.0;
    let mut bad = Vec::new();
    for &(m, _, _, p, r, f1) in &TABLE_III {
        let got = report.method(m).expect("row present");
        let triple = (round3(got.precision), round3(got.recall), round3(got.f1));
        if triple != (p, r, f1) {
            bad.push(format!("{m}: got {triple:?}, expected ({p}, {r}, {f1})"));
        }
    }
    let ex = report.method(MethodId::ExcessPerformance).unwrap();
    outcome(
        bad.is_empty() && report.sanctioned_count == 25,
        if bad.is_empty() {
            format!("8/8 rows exact at 3 d.p. (excess {:.3}/{:.3}/{:.3})", ex.precision, ex.recall, ex.f1)
        } else {
            bad.join("; ")
        },
    )
}

fn flag_keys(result: &DetectionResult, histories: &HashMap<&str, &AthleteHistory>) -> BTreeSet<PerfKey> {
    result
        .flagged_entries()
        .map(|e| PerfKey::of(&histories[e.performance.athlete_id.as_str()].performances[e.performance.index as usize]))
        .collect()
}

fn criterion_2() -> Outcome {
    let data = generate(&GeneratorSpec {
        n_athletes: 1000,
        injection: InjectionSpec { fraction_doped: 0.02, ..InjectionSpec::default() },
        seed: 2024,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let histories = group_histories(&data.performances);
    let by_id: HashMap<&str, &AthleteHistory> = histories.iter().map(|h| (h.athlete_id.as_str(), h)).collect();
    let cfg = DetectorConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for (method, rule) in [
        (MethodId::ZScore, OracleRule::Zscore),
        (MethodId::Mad, OracleRule::Mad),
        (MethodId::Iqr, OracleRule::Iqr),
        (MethodId::ExcessPerformance, OracleRule::Excess),
    ] {
        let detected = flag_keys(&run_detector(method, &histories, &cfg).unwrap(), &by_id);
        let oracle = oracle_flags(&data.performances, rule, &cfg);
        let same = detected == oracle;
        pass &= same;
        parts.push(format!(
            "{method} {}/{}{}",
            detected.len(),
            oracle.len(),
            if same { "" } else { " MISMATCH" }
        ));
    }
    outcome(pass, format!("{} rows; detector/oracle flags: {}", data.performances.len(), parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();

    // z-score on 10^6 Gaussian draws
    let gauss = gaussian_histories(1000, 1000, 11.0, 0.12, 31);
    let z = run_detector(MethodId::ZScore, &gauss, &DetectorConfig::default()).unwrap();
    let rate = z.flagged_count() as f64 / 1e6;
    let ok = (rate - 0.003).abs() <= 0.0005;
    pass &= ok;
    parts.push(format!("zscore {:.3}% of 10^6{}", rate * 100.0, if ok { "" } else { " OUT" }));

    // posterior predictive check on data drawn from the model itself
    let hier = hierarchical_histories(50, 100, 30, &HierParams::default(), 32);
    let b = run_detector(MethodId::BayesHier, &hier, &DetectorConfig::default()).unwrap();
    let n: usize = hier.iter().map(|h| h.len()).sum();
    let rate = b.flagged_count() as f64 / n as f64;
    let ok = (rate - 0.05).abs() <= 0.015;
    pass &= ok;
    parts.push(format!("bayes {:.2}% of {n}{}", rate * 100.0, if ok { "" } else { " OUT" }));

    // quantile-based methods on a generated slice
    let data = generate(&GeneratorSpec { n_athletes: 2000, seed: 33, ..GeneratorSpec::default() }).unwrap();
    let histories = data.histories();
    let cfg = DetectorConfig::default();
    for (method, fraction) in
        [(MethodId::IsolationForest, cfg.iforest_contamination), (MethodId::Copula, cfg.copula_density_quantile)]
    {
        let r = run_detector(method, &histories, &cfg).unwrap();
        let scored = r.entries.iter().filter(|e| e.status == EntryStatus::Scored).count();
        let expected = (fraction * scored as f64).round() as i64;
        let got = r.flagged_count() as i64;
        let ok = (got - expected).abs() <= 1;
        pass &= ok;
        parts.push(format!("{method} {got} vs {expected} of {scored}{}", if ok { "" } else { " OUT" }));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Outcome {
    let data = generate(&GeneratorSpec {
        n_athletes: 5000,
        injection: InjectionSpec { fraction_doped: 0.01, effect_seconds: 0.4, ..InjectionSpec::default() },
        seed: 4,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let histories = data.histories();
    let injected: BTreeSet<String> = data.manifest.injected.iter().map(|a| a.athlete_id.clone()).collect();
    let labels = Labels::from_ids(injected.iter().cloned());
    let cfg = DetectorConfig::default();
    let results: Vec<DetectionResult> =
        MethodId::ALL.iter().map(|&m| run_detector(m, &histories, &cfg).unwrap()).collect();
    let report = evaluate_methods(&results, &labels, "injection", &[50]);
    let recall = |m| report.method(m).unwrap().recall;
    let (ex, bh) = (recall(MethodId::ExcessPerformance), recall(MethodId::BayesHier));
    let consensus = &report.consensus[0];
    let (best_method, best_single) = report
        .methods
        .iter()
        .map(|m| (m.method_id, m.precision))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    // Largest in-sample |z| for n values is (n - 1) / sqrt(n), so the -2.5 rule cannot
    // fire with fewer than 9 performances; report that ceiling next to the measurement.
    let lens: HashMap<&str, usize> = histories.iter().map(|h| (h.athlete_id.as_str(), h.len())).collect();
    let reachable = injected.iter().filter(|a| lens[a.as_str()] >= 9).count() as f64 / injected.len() as f64;
    let pass = ex >= 0.6 && bh >= 0.6 && consensus.precision > best_single;
    outcome(
        pass,
        format!(
            "{} injected; recall excess {ex:.3} (ceiling for n>=9: {reachable:.3}), bayes {bh:.3}; \
             consensus>=2 precision {:.4} ({} athletes) vs best single {best_method} {best_single:.4}",
            injected.len(),
            consensus.precision,
            consensus.athletes
        ),
    )
}

fn criterion_5() -> Outcome {
    let params = HierParams { mu_alpha: 11.0, ..HierParams::default() };
    let settings = McmcSettings::from_config(&DetectorConfig::default());
    let mut covered = 0;
    let mut max_rhat: f64 = 0.0;
    let mut all_healthy = true;
    for rep in 0..20u64 {
        let hs = hierarchical_histories(100, 10, 90, &params, 500 + rep);
        let refs: Vec<&AthleteHistory> = hs.iter().collect();
        let data = HierData::from_histories(&refs, 3);
        let fit = fit_hier_data(&data, &HierModelSpec::default(), &McmcSettings { seed: rep, ..settings.clone() })
            .unwrap();
        let (mean, sd) = (fit.hyper_mean(0), fit.hyper_sd(0));
        if (mean - 11.0).abs() <= 2.0 * sd {
            covered += 1;
        }
        max_rhat = max_rhat.max(fit.diagnostics.max_rhat);
        all_healthy &= fit.is_healthy();
    }
    outcome(
        covered >= 18 && all_healthy,
        format!("mu_alpha within 2 SD in {covered}/20 fits; max R-hat {max_rhat:.4}"),
    )
}

fn criterion_6() -> Outcome {
    let data = generate(&GeneratorSpec { n_athletes: 800, seed: 6, ..GeneratorSpec::default() }).unwrap();
    let rows: Vec<[f64; 3]> = data
        .performances
        .iter()
        .filter_map(|p| Some([p.time_seconds(), p.wind_mps?, p.reaction_time_s?]))
        .collect();
    let q = DetectorConfig::default().copula_density_quantile;
    let flags = |rows: &[[f64; 3]]| -> Vec<bool> {
        let (model, _) = copula_fit(rows, q).unwrap();
        let opt: Vec<Option<[f64; 3]>> = rows.iter().copied().map(Some).collect();
        copula_flag(&model, &opt).into_iter().map(|o| o.unwrap().1).collect()
    };
    let base = flags(&rows);
    let transforms: [(&str, usize, fn(f64) -> f64); 3] = [
        ("time^3", 0, |x| x * x * x),
        ("exp(wind)", 1, f64::exp),
        ("-1/reaction", 2, |x| -1.0 / x),
    ];
    let mut pass = true;
    let mut parts = vec![format!("{} rows, {} flagged", rows.len(), base.iter().filter(|f| **f).count())];
    for (name, f, t) in transforms {
        let moved: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| {
                let mut r = *r;
                r[f] = t(r[f]);
                r
            })
            .collect();
        let same = flags(&moved) == base;
        pass &= same;
        parts.push(format!("{name} {}", if same { "unchanged" } else { "CHANGED" }));
    }
    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let model = CopulaModel::with_correlation(&rows, identity, q);
    let worst = rows.iter().map(|r| model.log_density(r).abs()).fold(0.0, f64::max);
    let grid = (1..50)
        .flat_map(|i| (1..50).map(move |j| [i as f64 / 50.0, j as f64 / 50.0, ((i * j) % 49 + 1) as f64 / 50.0]))
        .map(|u| model.log_density_u(&u).abs())
        .fold(0.0, f64::max);
    let zero = worst.max(grid) <= 1e-9;
    pass &= zero;
    parts.push(format!("R=I max |log c| {:.1e}", worst.max(grid)));
    outcome(pass, parts.join("; "))
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Value, Option<f64>, Duration) {
    let start = Instant::now();
    let res = app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
    let status = res.status();
    let timing = res
        .headers()
        .get("server-timing")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.split("dur=").nth(1))
        .and_then(|d| d.parse().ok());
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null), timing, start.elapsed())
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec::table_one_scale();
    let data = generate(&spec).unwrap();
    data.write_to_dir(dir.path()).unwrap();
    drop(data);
    let store = Arc::new(Store::open(dir.path().join("scale.db"), 64).unwrap());
    let files: Vec<_> =
        ["competitions.csv", "results.csv", "sanctions.csv"].iter().map(|f| dir.path().join(f)).collect();
    let start = Instant::now();
    ingest_files(&store, &files).unwrap();
    let ingest_s = start.elapsed().as_secs_f64();
    let counts = store.counts().unwrap();
    let exact = counts.performances == 381_447 && counts.athletes == 31_604 && counts.sanctions == 25;

    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    rt.block_on(async {
        let app = router(AppState::new(Arc::clone(&store), 42), None);
        let slice = store.list_slices().unwrap()[0].slice.clone();
        let req = json!({"slice": slice, "method_ids": ["zscore", "mad", "iqr", "excess_performance", "iforest"]});
        let res = app
            .clone()
            .oneshot(
                Request::post("/api/detect")
                    .header("content-type", "application/json")
                    .body(Body::from(req.to_string()))
                    .unwrap(),
            )
            .await
            .unwrap();
        let run: Value =
            serde_json::from_slice(&axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap()).unwrap();
        let id = run["run_id"].as_str().unwrap().to_string();
        let detect_start = Instant::now();
        loop {
            let (_, info, _, _) = get(&app, &format!("/api/runs/{id}")).await;
            match info["status"].as_str() {
                Some("done") => break,
                Some("failed") => return outcome(false, format!("detection failed: {info}")),
                _ => tokio::time::sleep(Duration::from_millis(200)).await,
            }
        }
        let detect_s = detect_start.elapsed().as_secs_f64();
        let uri = format!("/api/screen?slice={}&method=excess_performance", slice.replace(':', "%3A"));
        let (cold_status, page, cold_ms, _) = get(&app, &uri).await;
        let (warm_status, _, warm_ms, warm_wall) = get(&app, &uri).await;
        let warm_ms = warm_ms.unwrap_or(f64::INFINITY);
        let pass = exact && ingest_s < 300.0 && cold_status == 200 && warm_status == 200 && warm_ms < 500.0;
        outcome(
            pass,
            format!(
                "stored {} rows / {} athletes / {} sanctions; ingest {ingest_s:.1} s; detect(5 methods) {detect_s:.1} s; \
                 screen cold {:.1} ms, warm {warm_ms:.2} ms server ({:.2} ms wall), {} flagged athletes",
                counts.performances,
                counts.athletes,
                counts.sanctions,
                cold_ms.unwrap_or(f64::NAN),
                warm_wall.as_secs_f64() * 1000.0,
                page["total_flagged"]
            ),
        )
    })
}

fn criterion_8() -> Outcome {
    let data = generate(&GeneratorSpec {
        n_athletes: 600,
        injection: InjectionSpec { fraction_doped: 0.02, ..InjectionSpec::default() },
        seed: 8,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let histories = data.histories();
    let cfg = DetectorConfig::default();
    let mut differing = Vec::new();
    for m in MethodId::ALL {
        let a = run_detector(m, &histories, &cfg).unwrap().canonical_bytes();
        let b = run_detector(m, &histories, &cfg).unwrap().canonical_bytes();
        if a != b {
            differing.push(m.as_str());
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "8/8 detectors byte-identical across runs".to_string()
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 metric arithmetic", criterion_1),
        ("2 oracle equivalence", criterion_2),
        ("3 calibration", criterion_3),
        ("4 injection recovery", criterion_4),
        ("5 bayesian self-consistency", criterion_5),
        ("6 copula invariance", criterion_6),
        ("7 scale and latency", criterion_7),
        ("8 determinism", criterion_8),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {name}: {} ({:.1} s) - {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
        if !result.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
