//! Gradient-boosted regression of time on context, flagging large residuals.
//!
//! Squared-error boosting with depth-limited trees grown on histogram bins. Features with
//! at most `MAX_BINS` distinct values are binned exactly; wider ones use quantile cuts.
//! Residuals are in-sample. The cutoff is the order statistic that leaves
//! `round((1 - q) N)` residuals strictly above it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::build_features;
use super::iforest::sort_entries;
use super::{
    perf_ref, unscored_entries, AthleteHistory, DetectContext, DetectionEntry, DetectionResult, DetectorConfig,
    EntryStatus, MethodId,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MAX_BINS: usize = 256;
pub const MIN_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GbtError {
    #[error("residual model needs at least {MIN_ROWS} rows, got {0}")]
    TooFewRows(usize),
    #[error("all targets are equal")]
    DegenerateTarget,
    #[error("training loss increased at stage {stage}: {before} -> {after}")]
    LossIncreased { stage: usize, before: f64, after: f64 },
    #[error("feature matrix length {len} is not a multiple of {n_features}")]
    Shape { len: usize, n_features: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegNode {
    Split { feature: u16, threshold: f64, left: u32, right: u32 },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegNode>,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                RegNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature as usize] <= *threshold { *left as usize } else { *right as usize };
                }
                RegNode::Leaf { value } => return *value,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedResidualModel {
    pub format_version: u32,
    pub n_features: usize,
    pub base_prediction: f64,
    pub learning_rate: f64,
    pub stages: Vec<RegressionTree>,
    pub residual_quantile: f64,
    pub residual_cutoff: f64,
    /// Mean squared error after the base prediction and after each stage.
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

impl From<&DetectorConfig> for GbtParams {
    fn from(c: &DetectorConfig) -> Self {
        GbtParams { n_trees: c.gbt_trees, max_depth: c.gbt_depth, learning_rate: c.gbt_learning_rate }
    }
}

/// Per-feature split candidates. A value `x` falls in bin `#{cuts < x}`; splitting after
/// bin `b` sends `x <= cuts[b]` left.
struct Binned {
    cuts: Vec<Vec<f64>>,
    /// Row-major bin indices.
    bins: Vec<u16>,
    n_features: usize,
}

impl Binned {
    fn new(data: &[f64], n_features: usize) -> Binned {
        let n = data.len() / n_features;
        let mut cuts = Vec::with_capacity(n_features);
        for f in 0..n_features {
            let mut col: Vec<f64> = (0..n).map(|r| data[r * n_features + f]).collect();
            col.sort_by(f64::total_cmp);
            let mut uniq = col.clone();
            uniq.dedup();
            let c: Vec<f64> = if uniq.len() <= MAX_BINS {
                uniq.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
            } else {
                let mut q: Vec<f64> = (1..MAX_BINS).map(|k| col[k * (n - 1) / MAX_BINS]).collect();
                q.dedup();
                q.retain(|&v| v < uniq[uniq.len() - 1]);
                q
            };
            cuts.push(c);
        }
        let bins = data
            .par_chunks(n_features)
            .flat_map_iter(|row| {
                row.iter()
                    .zip(&cuts)
                    .map(|(x, c)| c.partition_point(|v| v < x) as u16)
                    .collect::<Vec<_>>()
            })
            .collect();
        Binned { cuts, bins, n_features }
    }

    fn bin(&self, row: usize, f: usize) -> usize {
        self.bins[row * self.n_features + f] as usize
    }
}

struct SplitChoice {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split(binned: &Binned, rows: &[u32], grad: &[f64]) -> Option<SplitChoice> {
    let total: f64 = rows.iter().map(|&r| grad[r as usize]).sum();
    let n = rows.len() as f64;
    let parent = total * total / n;
    let mut best: Option<SplitChoice> = None;
    for f in 0..binned.n_features {
        let nb = binned.cuts[f].len() + 1;
        if nb < 2 {
            continue;
        }
        let mut sum = vec![0.0f64; nb];
        let mut cnt = vec![0u32; nb];
        for &r in rows {
            let b = binned.bin(r as usize, f);
            sum[b] += grad[r as usize];
            cnt[b] += 1;
        }
        let (mut gl, mut nl) = (0.0, 0u32);
        for b in 0..nb - 1 {
            gl += sum[b];
            nl += cnt[b];
            let nr = rows.len() as u32 - nl;
            if nl == 0 || nr == 0 {
                continue;
            }
            let gr = total - gl;
            let gain = gl * gl / f64::from(nl) + gr * gr / f64::from(nr) - parent;
            if gain > best.as_ref().map_or(1e-12 * n, |s| s.gain) {
                best = Some(SplitChoice { feature: f, bin: b, gain });
            }
        }
    }
    best
}

fn grow_tree(binned: &Binned, grad: &[f64], max_depth: usize, learning_rate: f64) -> RegressionTree {
    let mut tree = RegressionTree { nodes: Vec::new() };
    let all: Vec<u32> = (0..grad.len() as u32).collect();
    grow_node(&mut tree, binned, all, grad, 0, max_depth, learning_rate);
    tree
}

fn grow_node(
    tree: &mut RegressionTree,
    binned: &Binned,
    rows: Vec<u32>,
    grad: &[f64],
    depth: usize,
    max_depth: usize,
    lr: f64,
) -> u32 {
    let id = tree.nodes.len() as u32;
    let mean = rows.iter().map(|&r| grad[r as usize]).sum::<f64>() / rows.len() as f64;
    tree.nodes.push(RegNode::Leaf { value: lr * mean });
    if depth >= max_depth || rows.len() < 2 {
        return id;
    }
    let Some(split) = best_split(binned, &rows, grad) else {
        return id;
    };
    let (l, r): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| binned.bin(r as usize, split.feature) <= split.bin);
    let left = grow_node(tree, binned, l, grad, depth + 1, max_depth, lr);
    let right = grow_node(tree, binned, r, grad, depth + 1, max_depth, lr);
    tree.nodes[id as usize] = RegNode::Split {
        feature: split.feature as u16,
        threshold: binned.cuts[split.feature][split.bin],
        left,
        right,
    };
    id
}

fn mse(targets: &[f64], pred: &[f64]) -> f64 {
    targets.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / targets.len() as f64
}

impl BoostedResidualModel {
    /// Fits on a row-major matrix; `residual_cutoff` is filled from the training residuals.
    pub fn fit(
        data: &[f64],
        n_features: usize,
        targets: &[f64],
        params: GbtParams,
        residual_quantile: f64,
    ) -> Result<Self, GbtError> {
        if n_features == 0 || data.len() != targets.len() * n_features {
            return Err(GbtError::Shape { len: data.len(), n_features });
        }
        let n = targets.len();
        if n < MIN_ROWS {
            return Err(GbtError::TooFewRows(n));
        }
        if targets.iter().all(|&y| y == targets[0]) {
            return Err(GbtError::DegenerateTarget);
        }
        let binned = Binned::new(data, n_features);
        let base = targets.iter().sum::<f64>() / n as f64;
        let mut pred = vec![base; n];
        let mut train_loss = vec![mse(targets, &pred)];
        let mut stages = Vec::with_capacity(params.n_trees);
        let mut grad = vec![0.0; n];
        for stage in 0..params.n_trees {
            for i in 0..n {
                grad[i] = targets[i] - pred[i];
            }
            let tree = grow_tree(&binned, &grad, params.max_depth, params.learning_rate);
            pred.par_iter_mut()
                .zip(data.par_chunks(n_features))
                .for_each(|(p, row)| *p += tree.predict(row));
            let before = *train_loss.last().unwrap();
            let after = mse(targets, &pred);
            if after > before * (1.0 + 1e-12) + 1e-15 {
                return Err(GbtError::LossIncreased { stage, before, after });
            }
            train_loss.push(after);
            stages.push(tree);
        }
        let residuals: Vec<f64> = targets.iter().zip(&pred).map(|(y, p)| (y - p).abs()).collect();
        Ok(BoostedResidualModel {
            format_version: MODEL_FORMAT_VERSION,
            n_features,
            base_prediction: base,
            learning_rate: params.learning_rate,
            stages,
            residual_quantile,
            residual_cutoff: residual_cutoff(&residuals, residual_quantile),
            train_loss,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        // same accumulation order as training so in-sample residuals reproduce exactly
        self.stages.iter().fold(self.base_prediction, |acc, t| acc + t.predict(row))
    }
}

/// Value such that `round((1 - q) n)` of `residuals` lie strictly above it when there
/// are no ties.
pub fn residual_cutoff(residuals: &[f64], quantile: f64) -> f64 {
    let n = residuals.len();
    if n == 0 {
        return f64::INFINITY;
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let above = (((1.0 - quantile) * n as f64).round() as usize).min(n - 1);
    sorted[n - 1 - above]
}

/// Fits on context-only features and flags residuals above the cutoff.
pub fn gbt_fit_and_detect(
    context: &[[f64; 3]],
    targets: &[f64],
    config: &DetectorConfig,
) -> Result<(BoostedResidualModel, Vec<(f64, bool)>), GbtError> {
    let data: Vec<f64> = context.iter().flatten().copied().collect();
    let model = BoostedResidualModel::fit(&data, 3, targets, config.into(), config.gbt_residual_quantile)?;
    let out = context
        .par_iter()
        .zip(targets)
        .map(|(row, y)| {
            let r = (y - model.predict(row)).abs();
            (r, r > model.residual_cutoff)
        })
        .collect();
    Ok((model, out))
}

pub(crate) fn run(
    histories: &[&AthleteHistory],
    config: &DetectorConfig,
    ctx: &DetectContext,
) -> Result<DetectionResult, GbtError> {
    let (eligible, short): (Vec<&AthleteHistory>, Vec<&AthleteHistory>) =
        histories.iter().partition(|h| h.len() >= config.min_history);
    let (links, rows) = build_features(&eligible, &ctx.competition_levels);
    let context: Vec<[f64; 3]> = rows.iter().map(|r| r.context()).collect();
    let targets: Vec<f64> = rows.iter().map(|r| r.time_seconds).collect();
    let mut entries: Vec<DetectionEntry> = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    match gbt_fit_and_detect(&context, &targets, config) {
        Ok((model, scored)) => {
            for (i, (link, (r, flagged))) in links.iter().zip(scored).enumerate() {
                let h = eligible[link.history];
                let (row, y) = (&context[i], targets[i]);
                entries.push(DetectionEntry {
                    performance: perf_ref(h, link.performance),
                    status: EntryStatus::Scored,
                    flagged,
                    score: Some(r),
                    explanation: if flagged {
                        format!(
                            "{:.2} s vs {:.2} s expected from context (wind {:+.1}, round {}, level {}); residual {:.3} s > cutoff {:.3} s",
                            y,
                            model.predict(row),
                            row[0],
                            row[1],
                            row[2],
                            r,
                            model.residual_cutoff
                        )
                    } else {
                        String::new()
                    },
                });
            }
        }
        Err(e @ (GbtError::TooFewRows(_) | GbtError::DegenerateTarget)) => {
            warnings.push(format!("gbt_residual skipped: {e}"));
            let why = e.to_string();
            for h in &eligible {
                entries.extend(unscored_entries(h, EntryStatus::Skipped, &why));
            }
        }
        Err(e) => return Err(e),
    }
    for h in short {
        let why = format!("{} performances, {} required", h.len(), config.min_history);
        entries.extend(unscored_entries(h, EntryStatus::InsufficientHistory, &why));
    }
    sort_entries(&mut entries);
    Ok(DetectionResult::new(MethodId::GbtResidual, entries, warnings))
}
