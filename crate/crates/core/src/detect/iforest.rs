//! Isolation forest over per-performance feature rows.
//!
//! Each tree is grown on a subsample of `psi = min(256, N)` rows to a height limit of
//! `ceil(log2 psi)`. A point's path length is the depth of the leaf it lands in plus
//! `c(size)` for the rows still unseparated there, and the anomaly score is
//! `s = 2^(-E[h] / c(psi))`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{build_features, FeatureVector};
use super::{perf_ref, AthleteHistory, DetectContext, DetectionEntry, DetectionResult, DetectorConfig, EntryStatus, MethodId};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MAX_SUBSAMPLE: usize = 256;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful binary search tree lookup among `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: u16, threshold: f64, left: u32, right: u32 },
    Leaf { size: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow(data: &[f64], n_features: usize, rows: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow_node(data, n_features, rows, 0, height_limit, rng);
        tree
    }

    fn grow_node(
        &mut self,
        data: &[f64],
        nf: usize,
        rows: Vec<usize>,
        depth: usize,
        height_limit: usize,
        rng: &mut ChaCha8Rng,
    ) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { size: rows.len() as u32 });
        if depth >= height_limit || rows.len() <= 1 {
            return id;
        }
        let mut candidates: Vec<(usize, f64, f64)> = Vec::with_capacity(nf);
        for f in 0..nf {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &r in &rows {
                let v = data[r * nf + f];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi > lo {
                candidates.push((f, lo, hi));
            }
        }
        if candidates.is_empty() {
            return id;
        }
        let (feature, lo, hi) = candidates[rng.gen_range(0..candidates.len())];
        let threshold = rng.gen_range(lo..hi);
        // x <= t goes left; t < hi keeps both sides non-empty
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| data[r * nf + feature] <= threshold);
        let left = self.grow_node(data, nf, left_rows, depth + 1, height_limit, rng);
        let right = self.grow_node(data, nf, right_rows, depth + 1, height_limit, rng);
        self.nodes[id as usize] = Node::Split { feature: feature as u16, threshold, left, right };
        id
    }

    pub fn path_length(&self, row: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0.0;
        loop {
            match &self.nodes[node] {
                Node::Split { feature, threshold, left, right } => {
                    node = if row[*feature as usize] <= *threshold { *left as usize } else { *right as usize };
                    depth += 1.0;
                }
                Node::Leaf { size } => return depth + average_path_length(*size as usize),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left as usize).max(walk(nodes, *right as usize)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub format_version: u32,
    pub n_features: usize,
    pub subsample_size: usize,
    pub height_limit: usize,
    pub c_norm: f64,
    pub trees: Vec<IsolationTree>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IForestError {
    #[error("isolation forest needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("feature matrix length {len} is not a multiple of {n_features}")]
    Shape { len: usize, n_features: usize },
}

impl IsolationForestModel {
    /// Fits on a row-major matrix with `n_features` columns. Tree `k` draws from its own
    /// ChaCha stream so the forest is identical regardless of thread scheduling.
    pub fn fit(data: &[f64], n_features: usize, n_trees: usize, seed: u64) -> Result<Self, IForestError> {
        if n_features == 0 || data.len() % n_features != 0 {
            return Err(IForestError::Shape { len: data.len(), n_features });
        }
        let n = data.len() / n_features;
        if n < 2 {
            return Err(IForestError::TooFewRows(n));
        }
        let psi = n.min(MAX_SUBSAMPLE);
        let height_limit = (psi as f64).log2().ceil() as usize;
        let trees = (0..n_trees)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let mut rows = sample(&mut rng, n, psi).into_vec();
                rows.sort_unstable();
                IsolationTree::grow(data, n_features, rows, height_limit, &mut rng)
            })
            .collect();
        Ok(IsolationForestModel {
            format_version: MODEL_FORMAT_VERSION,
            n_features,
            subsample_size: psi,
            height_limit,
            c_norm: average_path_length(psi),
            trees,
        })
    }

    pub fn mean_path_length(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        score_from_path(self.mean_path_length(row), self.c_norm)
    }

    pub fn score_all(&self, data: &[f64]) -> Vec<f64> {
        data.par_chunks(self.n_features).map(|row| self.score(row)).collect()
    }
}

/// `2^(-E[h] / c)`; with `c = 0` (a single-row subsample) every score is 1.
pub fn score_from_path(mean_path: f64, c_norm: f64) -> f64 {
    if c_norm <= 0.0 {
        return 1.0;
    }
    2f64.powf(-mean_path / c_norm)
}

/// Flags the `round(fraction * n)` highest scores; equal scores keep input order.
pub fn top_fraction_flags(scores: &[f64], fraction: f64) -> Vec<bool> {
    let k = ((fraction * scores.len() as f64).round() as usize).min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; scores.len()];
    for &i in &order[..k] {
        flags[i] = true;
    }
    flags
}

/// Fits a forest on `features` and flags the top contamination fraction.
pub fn iforest_detect(
    features: &[FeatureVector],
    config: &DetectorConfig,
) -> Result<(IsolationForestModel, Vec<(f64, bool)>), IForestError> {
    let data: Vec<f64> = features.iter().flat_map(|f| f.as_array()).collect();
    let model = IsolationForestModel::fit(&data, FeatureVector::NAMES.len(), config.iforest_trees, config.seed)?;
    let scores = model.score_all(&data);
    let flags = top_fraction_flags(&scores, config.iforest_contamination);
    Ok((model, scores.into_iter().zip(flags).collect()))
}

pub(crate) fn run(histories: &[&AthleteHistory], config: &DetectorConfig, ctx: &DetectContext) -> DetectionResult {
    let (eligible, short): (Vec<&AthleteHistory>, Vec<&AthleteHistory>) =
        histories.iter().partition(|h| h.len() >= config.min_history);
    let (links, rows) = build_features(&eligible, &ctx.competition_levels);
    let mut entries = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    match iforest_detect(&rows, config) {
        Ok((model, scored)) => {
            for ((link, row), (s, flagged)) in links.iter().zip(&rows).zip(scored) {
                let h = eligible[link.history];
                entries.push(DetectionEntry {
                    performance: perf_ref(h, link.performance),
                    status: EntryStatus::Scored,
                    flagged,
                    score: Some(s),
                    explanation: if flagged {
                        format!(
                            "isolation score {:.3} (mean path {:.2}, c(psi) {:.2}); time {:.2} s, wind {:+.1}, recent form {:.2} s",
                            s,
                            model.mean_path_length(&row.as_array()),
                            model.c_norm,
                            row.time_seconds,
                            row.wind_mps,
                            row.recent_form
                        )
                    } else {
                        String::new()
                    },
                });
            }
        }
        Err(e) => {
            warnings.push(format!("iforest skipped: {e}"));
            for h in &eligible {
                entries.extend(super::unscored_entries(h, EntryStatus::Skipped, "too few rows"));
            }
        }
    }
    for h in short {
        let why = format!("{} performances, {} required", h.len(), config.min_history);
        entries.extend(super::unscored_entries(h, EntryStatus::InsufficientHistory, &why));
    }
    sort_entries(&mut entries);
    DetectionResult::new(MethodId::IsolationForest, entries, warnings)
}

pub(crate) fn sort_entries(entries: &mut [DetectionEntry]) {
    entries.sort_by(|a, b| {
        a.performance
            .athlete_id
            .cmp(&b.performance.athlete_id)
            .then(a.performance.index.cmp(&b.performance.index))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn c_of_n() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        let c256 = average_path_length(256);
        let expected = 2.0 * (255f64.ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0;
        assert!((c256 - expected).abs() < 1e-12);
        assert!(average_path_length(3) > 1.0);
    }

    #[test]
    fn expected_path_equal_to_c_scores_half() {
        let c = average_path_length(100);
        assert!((score_from_path(c, c) - 0.5).abs() < 1e-15);
        assert!(score_from_path(0.0, c) == 1.0);
    }

    fn cluster_with_outlier(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        for _ in 0..255 {
            data.push(normal.sample(&mut rng));
            data.push(normal.sample(&mut rng));
        }
        data.extend([5.0, 5.0]);
        data
    }

    #[test]
    fn far_outlier_is_flagged_across_seeds() {
        for seed in 0..10 {
            let data = cluster_with_outlier(1000 + seed);
            let model = IsolationForestModel::fit(&data, 2, 100, seed).unwrap();
            let scores = model.score_all(&data);
            let flags = top_fraction_flags(&scores, 0.1);
            assert!(flags[255], "seed {seed}");
            let top = scores.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(scores[255], top);
            assert!(scores.iter().all(|&s| s > 0.0 && s <= 1.0));
        }
    }

    #[test]
    fn trees_respect_height_limit() {
        let data = cluster_with_outlier(7);
        let model = IsolationForestModel::fit(&data, 2, 50, 3).unwrap();
        assert_eq!(model.subsample_size, 256);
        assert_eq!(model.height_limit, 8);
        assert!(model.trees.iter().all(|t| t.depth() <= 8));
        assert!(model.c_norm > 0.0);
    }

    #[test]
    fn contamination_count_is_exact() {
        let data: Vec<f64> = (0..1000).map(|i| ((i * 37) % 1000) as f64).collect();
        let model = IsolationForestModel::fit(&data, 1, 20, 1).unwrap();
        let flags = top_fraction_flags(&model.score_all(&data), 0.1);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 100);
    }

    #[test]
    fn ties_break_by_input_order() {
        let flags = top_fraction_flags(&[0.5, 0.7, 0.7, 0.7, 0.1], 0.4);
        assert_eq!(flags, [false, true, true, false, false]);
    }

    #[test]
    fn seeded_fit_is_reproducible() {
        let data = cluster_with_outlier(11);
        let a = IsolationForestModel::fit(&data, 2, 30, 9).unwrap();
        let b = IsolationForestModel::fit(&data, 2, 30, 9).unwrap();
        assert_eq!(a, b);
        let c = IsolationForestModel::fit(&data, 2, 30, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_rows() {
        assert_eq!(IsolationForestModel::fit(&[1.0], 1, 10, 0), Err(IForestError::TooFewRows(1)));
    }
}
