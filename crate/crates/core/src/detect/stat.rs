//! Per-athlete rules: z-score, robust z (MAD), Tukey fences and excess performance.
//!
//! All rules score each performance against a baseline computed from the athlete's full
//! in-slice history, including the performance itself. The functions here take plain
//! value slices; [`run_rule`] applies them to histories using whole centiseconds so that
//! medians and hinges are exact.
//!
//! Quartiles are Tukey hinges: the medians of the lower and upper halves of the sorted
//! sample, excluding the overall median when `n` is odd.

use rayon::prelude::*;

use super::{
    perf_ref, unscored_entries, AthleteHistory, DetectionEntry, DetectionResult, DetectorConfig,
    EntryStatus, MethodId,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AthleteBaseline {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub median: f64,
    pub mad: f64,
    pub q1: f64,
    pub q3: f64,
    pub n: usize,
}

impl AthleteBaseline {
    /// `None` for an empty sample.
    pub fn compute(values: &[f64]) -> Option<AthleteBaseline> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            let ss: f64 = values.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = median_sorted(&sorted);
        let (lower, upper) = if n == 1 {
            (&sorted[..], &sorted[..])
        } else {
            (&sorted[..n / 2], &sorted[(n + 1) / 2..])
        };
        let mut dev: Vec<f64> = sorted.iter().map(|x| (x - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        Some(AthleteBaseline {
            mean,
            std,
            median,
            mad: median_sorted(&dev),
            q1: median_sorted(lower),
            q3: median_sorted(upper),
            n,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn fences(&self, multiplier: f64) -> (f64, f64) {
        let k = multiplier * self.iqr();
        (self.q1 - k, self.q3 + k)
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuleOutcome {
    pub score: f64,
    pub flagged: bool,
}

/// `z = (x - mean) / sd`, flagged when `|z| > z_threshold`. A zero SD scores everything 0.
pub fn zscore_detect(values: &[f64], config: &DetectorConfig) -> Vec<RuleOutcome> {
    let Some(b) = AthleteBaseline::compute(values) else {
        return Vec::new();
    };
    values
        .iter()
        .map(|&x| {
            if b.std == 0.0 {
                return RuleOutcome { score: 0.0, flagged: false };
            }
            let z = (x - b.mean) / b.std;
            RuleOutcome { score: z, flagged: z.abs() > config.z_threshold }
        })
        .collect()
}

/// `z* = 0.6745 (x - median) / MAD`, flagged when `|z*| > mad_threshold`. A zero MAD
/// scores everything 0.
pub fn mad_detect(values: &[f64], config: &DetectorConfig) -> Vec<RuleOutcome> {
    let Some(b) = AthleteBaseline::compute(values) else {
        return Vec::new();
    };
    values
        .iter()
        .map(|&x| {
            if b.mad == 0.0 {
                return RuleOutcome { score: 0.0, flagged: false };
            }
            let z = config.mad_scale * (x - b.median) / b.mad;
            RuleOutcome { score: z, flagged: z.abs() > config.mad_threshold }
        })
        .collect()
}

/// Distance beyond the nearest Tukey fence (negative when inside), flagged when outside.
pub fn iqr_detect(values: &[f64], config: &DetectorConfig) -> Vec<RuleOutcome> {
    let Some(b) = AthleteBaseline::compute(values) else {
        return Vec::new();
    };
    let (lo, hi) = b.fences(config.iqr_multiplier);
    values
        .iter()
        .map(|&x| RuleOutcome {
            score: (lo - x).max(x - hi),
            flagged: x < lo || x > hi,
        })
        .collect()
}

/// `EP = (x - mean_i) / sd_i`, flagged when `EP < excess_threshold` (fast side only).
pub fn excess_detect(values: &[f64], config: &DetectorConfig) -> Vec<RuleOutcome> {
    let Some(b) = AthleteBaseline::compute(values) else {
        return Vec::new();
    };
    values
        .iter()
        .map(|&x| {
            if b.std == 0.0 {
                return RuleOutcome { score: 0.0, flagged: false };
            }
            let ep = (x - b.mean) / b.std;
            RuleOutcome { score: ep, flagged: ep < config.excess_threshold }
        })
        .collect()
}

fn explain(method: MethodId, x: f64, o: &RuleOutcome, b: &AthleteBaseline, config: &DetectorConfig) -> String {
    let s = |cs: f64| cs / 100.0;
    match method {
        MethodId::ZScore if b.std == 0.0 => "all times equal; z-score undefined".into(),
        MethodId::ZScore => format!(
            "{:.2} s is {:.2} SD from career mean {:.3} s (SD {:.3} s, n={})",
            s(x), o.score, s(b.mean), s(b.std), b.n
        ),
        MethodId::Mad if b.mad == 0.0 => "MAD is 0 (degenerate scale); no flags".into(),
        MethodId::Mad => format!(
            "{:.2} s vs career median {:.2} s (MAD {:.3} s): robust z {:.2}",
            s(x), s(b.median), s(b.mad), o.score
        ),
        MethodId::Iqr => {
            let (lo, hi) = b.fences(config.iqr_multiplier);
            format!(
                "{:.2} s outside fences [{:.3}, {:.3}] s (Q1 {:.3}, Q3 {:.3})",
                s(x), s(lo), s(hi), s(b.q1), s(b.q3)
            )
        }
        MethodId::ExcessPerformance if b.std == 0.0 => "all times equal; no trajectory deviation".into(),
        _ => format!(
            "{:.2} s is {:.2} SD faster than personal baseline {:.3} s (SD {:.3} s)",
            s(x), -o.score, s(b.mean), s(b.std)
        ),
    }
}

fn rule_fn(method: MethodId) -> fn(&[f64], &DetectorConfig) -> Vec<RuleOutcome> {
    match method {
        MethodId::ZScore => zscore_detect,
        MethodId::Mad => mad_detect,
        MethodId::Iqr => iqr_detect,
        MethodId::ExcessPerformance => excess_detect,
        other => panic!("{other} is not a per-athlete rule"),
    }
}

pub(crate) fn run_rule(
    method: MethodId,
    histories: &[&AthleteHistory],
    config: &DetectorConfig,
) -> DetectionResult {
    let rule = rule_fn(method);
    let entries: Vec<DetectionEntry> = histories
        .par_iter()
        .flat_map_iter(|h| {
            if h.len() < config.min_history {
                let why = format!("{} performances, {} required", h.len(), config.min_history);
                return unscored_entries(h, EntryStatus::InsufficientHistory, &why);
            }
            let values = h.times_centis();
            let baseline = AthleteBaseline::compute(&values).expect("non-empty history");
            let degenerate = match method {
                MethodId::Mad => baseline.mad == 0.0,
                MethodId::Iqr => false,
                _ => baseline.std == 0.0,
            };
            rule(&values, config)
                .into_iter()
                .enumerate()
                .map(|(i, o)| DetectionEntry {
                    performance: perf_ref(h, i),
                    status: EntryStatus::Scored,
                    flagged: o.flagged,
                    score: Some(if method == MethodId::Iqr { o.score / 100.0 } else { o.score }),
                    explanation: if o.flagged || (degenerate && i == 0) {
                        explain(method, values[i], &o, &baseline, config)
                    } else {
                        String::new()
                    },
                })
                .collect()
        })
        .collect();
    DetectionResult::new(method, entries, Vec::new())
}
