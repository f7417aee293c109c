//! Gaussian copula over (time, wind, reaction time).
//!
//! Marginals are empirical: a value's pseudo-observation is its mid-rank over `n + 1`,
//! so ties share a value and nothing lands on 0 or 1. Normal scores `z = Phi^-1(u)` give
//! the correlation matrix `R`, shrunk toward the identity by the smallest amount that
//! keeps it positive definite. Each row is scored by the copula log-density
//!
//! ```text
//! log c(z) = -1/2 log det R - 1/2 z' (R^-1 - I) z
//! ```
//!
//! which depends only on the dependence structure, not on the marginals.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use super::iforest::sort_entries;
use super::{
    perf_ref, unscored_entries, AthleteHistory, DetectionEntry, DetectionResult, DetectorConfig, EntryStatus,
    MethodId,
};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MIN_ROWS: usize = 50;
pub const FEATURE_NAMES: [&str; 3] = ["time_seconds", "wind_mps", "reaction_time_s"];
/// Smallest eigenvalue accepted for the regularized correlation matrix.
pub const MIN_EIGENVALUE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CopulaError {
    #[error("copula needs at least {MIN_ROWS} complete rows, got {0}")]
    TooFewRows(usize),
}

/// Inverse standard normal CDF.
pub fn phi_inv(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMarginal {
    sorted: Vec<f64>,
}

impl EmpiricalMarginal {
    pub fn new(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        EmpiricalMarginal { sorted }
    }

    /// Mid-rank of `v` among the training values, over `n + 1`.
    pub fn cdf(&self, v: f64) -> f64 {
        let below = self.sorted.partition_point(|x| *x < v);
        let ties = self.sorted.partition_point(|x| *x <= v) - below;
        (below as f64 + (ties as f64 + 1.0) / 2.0) / (self.sorted.len() as f64 + 1.0)
    }

    pub fn is_constant(&self) -> bool {
        self.sorted.first() == self.sorted.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub format_version: u32,
    pub n_train: usize,
    pub marginals: Vec<EmpiricalMarginal>,
    /// Row-major 3x3.
    pub correlation: [[f64; 3]; 3],
    /// Shrinkage toward the identity applied to restore positive definiteness.
    pub epsilon: f64,
    /// Constant features, modelled as independent of the others.
    pub degenerate: Vec<usize>,
    pub density_quantile: f64,
    pub density_cutoff: f64,
    inverse: [[f64; 3]; 3],
    log_det: f64,
}

fn to_matrix(a: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

fn to_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut a = [[0.0; 3]; 3];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    a
}

/// Smallest `eps` in `[0, 1]` with `(1 - eps) R + eps I` having eigenvalues at least
/// [`MIN_EIGENVALUE`].
pub fn regularize(r: &Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let min_eig = SymmetricEigen::new(*r).eigenvalues.min();
    if min_eig >= MIN_EIGENVALUE {
        return (*r, 0.0);
    }
    let eps = ((MIN_EIGENVALUE - min_eig) / (1.0 - min_eig)).clamp(0.0, 1.0);
    (r * (1.0 - eps) + Matrix3::identity() * eps, eps)
}

/// Copula log-density of normal scores `z` under correlation `R` given its inverse and
/// log-determinant.
pub fn log_density(inverse: &[[f64; 3]; 3], log_det: f64, z: &[f64; 3]) -> f64 {
    let mut q = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let d = if i == j { 1.0 } else { 0.0 };
            q += z[i] * (inverse[i][j] - d) * z[j];
        }
    }
    -0.5 * log_det - 0.5 * q
}

impl CopulaModel {
    /// Model with a given correlation matrix and marginals fitted to `rows`; the cutoff
    /// is taken over `rows`.
    pub fn with_correlation(rows: &[[f64; 3]], correlation: [[f64; 3]; 3], quantile: f64) -> Self {
        let marginals: Vec<EmpiricalMarginal> =
            (0..3).map(|f| EmpiricalMarginal::new(&rows.iter().map(|r| r[f]).collect::<Vec<_>>())).collect();
        let r = to_matrix(&correlation);
        let chol = r.cholesky().expect("correlation must be positive definite");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut model = CopulaModel {
            format_version: MODEL_FORMAT_VERSION,
            n_train: rows.len(),
            marginals,
            correlation,
            epsilon: 0.0,
            degenerate: Vec::new(),
            density_quantile: quantile,
            density_cutoff: f64::NEG_INFINITY,
            inverse: to_array(&chol.inverse()),
            log_det,
        };
        let mut dens: Vec<f64> = rows.iter().map(|r| model.log_density(r)).collect();
        dens.sort_by(f64::total_cmp);
        let k = ((quantile * dens.len() as f64).round() as usize).min(dens.len().saturating_sub(1));
        model.density_cutoff = dens.get(k).copied().unwrap_or(f64::NEG_INFINITY);
        model
    }

    pub fn normal_scores(&self, row: &[f64; 3]) -> [f64; 3] {
        let mut z = [0.0; 3];
        for f in 0..3 {
            z[f] = phi_inv(self.marginals[f].cdf(row[f]));
        }
        z
    }

    pub fn pseudo_observations(&self, row: &[f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for f in 0..3 {
            u[f] = self.marginals[f].cdf(row[f]);
        }
        u
    }

    pub fn log_density(&self, row: &[f64; 3]) -> f64 {
        log_density(&self.inverse, self.log_det, &self.normal_scores(row))
    }

    /// Log-density from pseudo-observations directly.
    pub fn log_density_u(&self, u: &[f64; 3]) -> f64 {
        let z = [phi_inv(u[0]), phi_inv(u[1]), phi_inv(u[2])];
        log_density(&self.inverse, self.log_det, &z)
    }
}

/// Fits marginals and the normal-scores correlation on complete rows. Returns warnings
/// for constant features.
pub fn copula_fit(rows: &[[f64; 3]], quantile: f64) -> Result<(CopulaModel, Vec<String>), CopulaError> {
    let n = rows.len();
    if n < MIN_ROWS {
        return Err(CopulaError::TooFewRows(n));
    }
    let marginals: Vec<EmpiricalMarginal> =
        (0..3).map(|f| EmpiricalMarginal::new(&rows.iter().map(|r| r[f]).collect::<Vec<_>>())).collect();
    let degenerate: Vec<usize> = (0..3).filter(|&f| marginals[f].is_constant()).collect();
    let mut warnings: Vec<String> = degenerate
        .iter()
        .map(|&f| format!("constant feature {}: treated as independent", FEATURE_NAMES[f]))
        .collect();
    let z: Vec<[f64; 3]> = rows
        .iter()
        .map(|r| {
            let mut z = [0.0; 3];
            for f in 0..3 {
                z[f] = phi_inv(marginals[f].cdf(r[f]));
            }
            z
        })
        .collect();
    let mut mean = [0.0; 3];
    for zr in &z {
        for f in 0..3 {
            mean[f] += zr[f] / n as f64;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for zr in &z {
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += (zr[i] - mean[i]) * (zr[j] - mean[j]);
            }
        }
    }
    let mut r = Matrix3::identity();
    for i in 0..3 {
        for j in 0..3 {
            if i != j && !degenerate.contains(&i) && !degenerate.contains(&j) {
                r[(i, j)] = cov[i][j] / (cov[i][i] * cov[j][j]).sqrt();
            }
        }
    }
    let (r, epsilon) = regularize(&r);
    if epsilon > 0.0 {
        warnings.push(format!("correlation shrunk toward identity by {epsilon:.3e}"));
    }
    let mut model = CopulaModel::with_correlation(rows, to_array(&r), quantile);
    model.epsilon = epsilon;
    model.degenerate = degenerate;
    Ok((model, warnings))
}

/// Log-density and flag per row; rows missing a feature are `None`.
pub fn copula_flag(model: &CopulaModel, rows: &[Option<[f64; 3]>]) -> Vec<Option<(f64, bool)>> {
    rows.par_iter()
        .map(|r| {
            r.map(|row| {
                let d = model.log_density(&row);
                (d, d < model.density_cutoff)
            })
        })
        .collect()
}

fn features(p: &crate::ingest::PerformanceRecord) -> Option<[f64; 3]> {
    Some([p.time_seconds(), p.wind_mps?, p.reaction_time_s?])
}

pub(crate) fn run(histories: &[&AthleteHistory], config: &DetectorConfig) -> DetectionResult {
    let (eligible, short): (Vec<&AthleteHistory>, Vec<&AthleteHistory>) =
        histories.iter().partition(|h| h.len() >= config.min_history);
    let rows: Vec<Option<[f64; 3]>> =
        eligible.iter().flat_map(|h| h.performances.iter().map(features)).collect();
    let complete: Vec<[f64; 3]> = rows.iter().flatten().copied().collect();
    let mut entries: Vec<DetectionEntry> = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();
    match copula_fit(&complete, config.copula_density_quantile) {
        Ok((model, w)) => {
            warnings.extend(w);
            let scored = copula_flag(&model, &rows);
            let mut k = 0;
            for h in &eligible {
                for (j, p) in h.performances.iter().enumerate() {
                    let entry = match scored[k] {
                        Some((d, flagged)) => {
                            let u = if flagged {
                                model.pseudo_observations(&features(p).expect("complete row"))
                            } else {
                                [0.0; 3]
                            };
                            DetectionEntry {
                                performance: perf_ref(h, j),
                                status: EntryStatus::Scored,
                                flagged,
                                score: Some(d),
                                explanation: if flagged {
                                    format!(
                                        "log copula density {:.3} < cutoff {:.3}; u = (time {:.3}, wind {:.3}, reaction {:.3})",
                                        d, model.density_cutoff, u[0], u[1], u[2]
                                    )
                                } else {
                                    String::new()
                                },
                            }
                        }
                        None => DetectionEntry {
                            performance: perf_ref(h, j),
                            status: EntryStatus::MissingFeatures,
                            flagged: false,
                            score: None,
                            explanation: "wind or reaction time missing".into(),
                        },
                    };
                    entries.push(entry);
                    k += 1;
                }
            }
        }
        Err(e) => {
            warnings.push(format!("copula skipped: {e}"));
            for h in &eligible {
                entries.extend(unscored_entries(h, EntryStatus::Skipped, &e.to_string()));
            }
        }
    }
    for h in short {
        let why = format!("{} performances, {} required", h.len(), config.min_history);
        entries.extend(unscored_entries(h, EntryStatus::InsufficientHistory, &why));
    }
    sort_entries(&mut entries);
    DetectionResult::new(MethodId::Copula, entries, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_rows(n: usize, rho12: f64, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let c: f64 = rng.sample(StandardNormal);
                [a, rho12 * a + (1.0 - rho12 * rho12).sqrt() * b, c]
            })
            .collect()
    }

    #[test]
    fn marginal_mid_ranks() {
        let m = EmpiricalMarginal::new(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(m.cdf(1.0), 1.0 / 5.0);
        assert_eq!(m.cdf(2.0), 2.5 / 5.0);
        assert_eq!(m.cdf(3.0), 4.0 / 5.0);
        assert!(m.cdf(-100.0) > 0.0 && m.cdf(100.0) < 1.0);
    }

    #[test]
    fn phi_inv_matches_known_quantiles() {
        assert!(phi_inv(0.5).abs() < 1e-15);
        assert!((phi_inv(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((phi_inv(0.05) + 1.6448536269514722).abs() < 1e-12);
    }

    #[test]
    fn independent_features_give_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<[f64; 3]> = (0..1000).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let (m, _) = copula_fit(&rows, 0.05).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m.correlation[i][j].abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn comonotone_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                let x: f64 = rng.gen();
                [x, x.exp(), rng.gen()]
            })
            .collect();
        let (m, _) = copula_fit(&rows, 0.05).unwrap();
        assert!(m.correlation[0][1] >= 0.99);
        assert!(m.epsilon >= 0.0);
        let eig = SymmetricEigen::new(to_matrix(&m.correlation)).eigenvalues.min();
        assert!(eig > 0.0);
    }

    #[test]
    fn identity_correlation_has_zero_density() {
        let rows = gaussian_rows(200, 0.0, 3);
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = CopulaModel::with_correlation(&rows, id, 0.05);
        for r in &rows {
            assert!(m.log_density(r).abs() < 1e-9);
        }
        let flags = copula_flag(&m, &rows.iter().map(|r| Some(*r)).collect::<Vec<_>>());
        assert!(flags.iter().all(|f| !f.unwrap().1));
    }

    #[test]
    fn anti_dependent_extreme_is_flagged() {
        let rows = gaussian_rows(2000, 0.8, 4);
        let (m, _) = copula_fit(&rows, 0.05).unwrap();
        assert!((m.correlation[0][1] - 0.8).abs() < 0.05);
        assert!(m.log_density_u(&[0.99, 0.01, 0.5]) < m.density_cutoff);
        let flagged = copula_flag(&m, &rows.iter().map(|r| Some(*r)).collect::<Vec<_>>())
            .iter()
            .filter(|f| f.unwrap().1)
            .count();
        assert!(flagged.abs_diff(100) <= 1, "{flagged}");
    }

    #[test]
    fn constant_feature_is_independent() {
        let rows: Vec<[f64; 3]> = gaussian_rows(300, 0.6, 5).into_iter().map(|r| [r[0], r[1], 0.15]).collect();
        let (m, warnings) = copula_fit(&rows, 0.05).unwrap();
        assert_eq!(m.degenerate, vec![2]);
        assert_eq!(warnings.len(), 1);
        assert_eq!(m.correlation[0][2], 0.0);
        assert_eq!(m.correlation[2][2], 1.0);
        assert!(m.correlation[0][1] > 0.5);
    }

    #[test]
    fn regularization_is_minimal() {
        let r = Matrix3::new(1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let (reg, eps) = regularize(&r);
        assert!(eps > 0.0 && eps < 1e-5);
        let min = SymmetricEigen::new(reg).eigenvalues.min();
        assert!((min - MIN_EIGENVALUE).abs() < 1e-12);
        let (same, eps) = regularize(&Matrix3::identity());
        assert_eq!(eps, 0.0);
        assert_eq!(same, Matrix3::identity());
    }

    #[test]
    fn too_few_rows() {
        assert_eq!(copula_fit(&gaussian_rows(49, 0.0, 1), 0.05).unwrap_err(), CopulaError::TooFewRows(49));
    }
}
