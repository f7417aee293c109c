//! Hierarchical linear trajectory model with posterior predictive flagging.
//!
//! ```text
//! y_ij ~ N(alpha_i + beta_i t_ij, sigma^2)
//! alpha_i ~ N(mu_alpha, tau_alpha^2)      beta_i ~ N(mu_beta, tau_beta^2)
//! mu_alpha ~ N(11, 1)   mu_beta ~ N(0, 0.1^2)   tau_alpha, tau_beta, sigma ~ HalfNormal(1)
//! ```
//!
//! `t_ij` is years since the athlete's first performance in the slice.
//!
//! Inference is Gibbs sampling. Each athlete's `(alpha_i, beta_i)` is drawn jointly from
//! its bivariate normal conditional using per-athlete sufficient statistics, the
//! population means have conjugate normal updates, and the scales are updated by slice
//! sampling on the log scale. Every sweep also re-draws all four means and scales jointly
//! in the non-centered parameterization (`alpha_i = mu + tau * eta_i` with `eta` held
//! fixed), which is what keeps the sampler mixing when a population scale is close to
//! zero or when intercepts and slopes are strongly correlated.
//!
//! The predictive tail probability of each performance is averaged analytically over the
//! replicate noise: `p = mean_draws Phi((y - alpha_i - beta_i t) / sigma)`.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use super::iforest::sort_entries;
use super::{
    perf_ref, unscored_entries, AthleteHistory, DetectionEntry, DetectionResult, DetectorConfig, EntryStatus,
    MethodId,
};

pub const HYPER_NAMES: [&str; 5] = ["mu_alpha", "mu_beta", "tau_alpha", "tau_beta", "sigma"];
/// Upper bound on stored per-athlete draws (f32 values) across all chains.
pub const DEFAULT_LATENT_BUDGET: usize = 24_000_000;
pub const RHAT_HEALTHY: f64 = 1.05;

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Error)]
pub enum BayesError {
    #[error("hierarchical model needs at least {needed} athletes with enough history, got {got}")]
    TooFewAthletes { needed: usize, got: usize },
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierModelSpec {
    pub mu_alpha_mean: f64,
    pub mu_alpha_sd: f64,
    pub mu_beta_mean: f64,
    pub mu_beta_sd: f64,
    pub tau_alpha_scale: f64,
    pub tau_beta_scale: f64,
    pub sigma_scale: f64,
}

impl Default for HierModelSpec {
    fn default() -> Self {
        HierModelSpec {
            mu_alpha_mean: 11.0,
            mu_alpha_sd: 1.0,
            mu_beta_mean: 0.0,
            mu_beta_sd: 0.1,
            tau_alpha_scale: 1.0,
            tau_beta_scale: 1.0,
            sigma_scale: 1.0,
        }
    }
}

impl HierModelSpec {
    pub fn validate(&self) -> Result<(), BayesError> {
        let scales = [
            self.mu_alpha_sd,
            self.mu_beta_sd,
            self.tau_alpha_scale,
            self.tau_beta_scale,
            self.sigma_scale,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(BayesError::InvalidSpec("prior scales must be positive".into()));
        }
        if !(self.mu_alpha_mean.is_finite() && self.mu_beta_mean.is_finite()) {
            return Err(BayesError::InvalidSpec("prior means must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcSettings {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub latent_budget: usize,
}

impl McmcSettings {
    pub fn from_config(c: &DetectorConfig) -> Self {
        McmcSettings {
            chains: c.mcmc_chains,
            warmup: c.mcmc_warmup,
            draws: c.mcmc_draws,
            seed: c.seed,
            latent_budget: DEFAULT_LATENT_BUDGET,
        }
    }
}

/// One athlete's observations with the sufficient statistics the sampler needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AthleteData {
    pub athlete_id: String,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    n: f64,
    st: f64,
    stt: f64,
    sy: f64,
    sty: f64,
    syy: f64,
}

impl AthleteData {
    /// `y` is shifted by `offset` before the statistics are formed.
    fn new(athlete_id: String, t: Vec<f64>, y: Vec<f64>, offset: f64) -> Self {
        let mut d = AthleteData { athlete_id, t, y, n: 0.0, st: 0.0, stt: 0.0, sy: 0.0, sty: 0.0, syy: 0.0 };
        for (&t, &y) in d.t.iter().zip(&d.y) {
            let y = y - offset;
            d.n += 1.0;
            d.st += t;
            d.stt += t * t;
            d.sy += y;
            d.sty += t * y;
            d.syy += y * y;
        }
        d
    }

    /// `sum_j (y_j - a - b t_j)^2` in shifted units.
    fn ss(&self, a: f64, b: f64) -> f64 {
        self.syy - 2.0 * a * self.sy - 2.0 * b * self.sty
            + self.n * a * a
            + 2.0 * a * b * self.st
            + b * b * self.stt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierData {
    pub athletes: Vec<AthleteData>,
    /// Constant subtracted from every time inside the sampler for numerical stability.
    offset: f64,
}

impl HierData {
    /// `(athlete_id, t, y)` triples with `t` in years and `y` in seconds.
    pub fn new(athletes: Vec<(String, Vec<f64>, Vec<f64>)>) -> Self {
        let (sum, count) = athletes
            .iter()
            .fold((0.0, 0usize), |(s, c), a| (s + a.2.iter().sum::<f64>(), c + a.2.len()));
        let offset = if count > 0 { sum / count as f64 } else { 0.0 };
        HierData {
            athletes: athletes
                .into_iter()
                .map(|(id, t, y)| AthleteData::new(id, t, y, offset))
                .collect(),
            offset,
        }
    }

    pub fn from_histories(histories: &[&AthleteHistory], min_history: usize) -> Self {
        HierData::new(
            histories
                .iter()
                .filter(|h| h.len() >= min_history)
                .map(|h| (h.athlete_id.clone(), years_since_first(h), h.times_seconds()))
                .collect(),
        )
    }

    pub fn n_obs(&self) -> usize {
        self.athletes.iter().map(|a| a.y.len()).sum()
    }
}

/// Years elapsed since the athlete's first performance in the history.
pub fn years_since_first(h: &AthleteHistory) -> Vec<f64> {
    let first = h.performances[0].date;
    h.performances
        .iter()
        .map(|p| (p.date - first).num_days() as f64 / DAYS_PER_YEAR)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub hyper: Vec<ParamDiagnostic>,
    /// Split R-hat of `[alpha_i, beta_i]` per athlete, from all post-warmup draws.
    #[serde(skip)]
    pub latent_rhat: Vec<[f64; 2]>,
    pub max_rhat: f64,
    pub worst_parameter: String,
    pub min_hyper_ess: f64,
    pub healthy: bool,
}

/// Running mean and variance of one parameter over half a chain.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn var(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub spec: HierModelSpec,
    pub athlete_ids: Vec<String>,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// Every `latent_thin`-th draw of the athlete parameters is kept.
    pub latent_thin: usize,
    hyper: Vec<Vec<[f64; 5]>>,
    /// Per chain, `[stored draw][athlete][alpha, beta]` flattened.
    latent: Vec<Vec<f32>>,
    /// Per chain and half, per athlete `[alpha, beta]`.
    latent_moments: Vec<[Vec<[Moments; 2]>; 2]>,
    pub diagnostics: Diagnostics,
}

impl PosteriorSample {
    pub fn n_athletes(&self) -> usize {
        self.athlete_ids.len()
    }

    pub fn stored_latent_draws(&self) -> usize {
        self.draws_per_chain.div_ceil(self.latent_thin)
    }

    pub fn hyper_draw(&self, chain: usize, draw: usize) -> [f64; 5] {
        self.hyper[chain][draw]
    }

    /// Draws of hyperparameter `k` (index into [`HYPER_NAMES`]), one vector per chain.
    pub fn hyper_chains(&self, k: usize) -> Vec<Vec<f64>> {
        self.hyper.iter().map(|c| c.iter().map(|d| d[k]).collect()).collect()
    }

    pub fn latent_draw(&self, chain: usize, stored: usize, athlete: usize) -> (f64, f64) {
        let i = (stored * self.n_athletes() + athlete) * 2;
        (f64::from(self.latent[chain][i]), f64::from(self.latent[chain][i + 1]))
    }

    /// Stored `(alpha_i, beta_i)` draws per chain.
    pub fn latent_chains(&self, athlete: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let s = self.stored_latent_draws();
        (0..self.chains)
            .map(|c| (0..s).map(|d| self.latent_draw(c, d, athlete)).unzip::<f64, f64, Vec<f64>, Vec<f64>>())
            .unzip()
    }

    pub fn hyper_mean(&self, k: usize) -> f64 {
        let all: Vec<f64> = self.hyper_chains(k).concat();
        all.iter().sum::<f64>() / all.len() as f64
    }

    pub fn hyper_sd(&self, k: usize) -> f64 {
        let all: Vec<f64> = self.hyper_chains(k).concat();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        (all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (all.len() - 1) as f64).sqrt()
    }

    /// Posterior means of `(alpha_i, beta_i)` from the stored draws.
    pub fn latent_mean(&self, athlete: usize) -> (f64, f64) {
        let s = self.stored_latent_draws();
        let (mut a, mut b) = (0.0, 0.0);
        for c in 0..self.chains {
            for d in 0..s {
                let (x, y) = self.latent_draw(c, d, athlete);
                a += x;
                b += y;
            }
        }
        let n = (self.chains * s) as f64;
        (a / n, b / n)
    }

    pub fn is_healthy(&self) -> bool {
        self.diagnostics.healthy
    }

    /// Long-format CSV: `chain,draw,parameter,athlete_id,value`. Athlete parameters are
    /// written only for stored (thinned) draws and only when `include_latent` is set.
    pub fn write_csv<W: Write>(&self, out: W, include_latent: bool) -> io::Result<()> {
        let mut w = io::BufWriter::new(out);
        writeln!(w, "chain,draw,parameter,athlete_id,value")?;
        for (c, chain) in self.hyper.iter().enumerate() {
            for (d, h) in chain.iter().enumerate() {
                for (name, v) in HYPER_NAMES.iter().zip(h) {
                    writeln!(w, "{c},{d},{name},,{v}")?;
                }
            }
        }
        if include_latent {
            for c in 0..self.chains {
                for s in 0..self.stored_latent_draws() {
                    for (i, id) in self.athlete_ids.iter().enumerate() {
                        let (a, b) = self.latent_draw(c, s, i);
                        let d = s * self.latent_thin;
                        writeln!(w, "{c},{d},alpha,{id},{a}")?;
                        writeln!(w, "{c},{d},beta,{id},{b}")?;
                    }
                }
            }
        }
        w.flush()
    }
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One univariate slice sampling update with stepping out and shrinkage.
fn slice_sample<R: Rng>(x0: f64, logp: impl Fn(f64) -> f64, width: f64, rng: &mut R) -> f64 {
    let e: f64 = Exp1.sample(rng);
    let level = logp(x0) - e;
    let mut lo = x0 - width * rng.gen::<f64>();
    let mut hi = lo + width;
    for _ in 0..32 {
        if logp(lo) <= level {
            break;
        }
        lo -= width;
    }
    for _ in 0..32 {
        if logp(hi) <= level {
            break;
        }
        hi += width;
    }
    for _ in 0..200 {
        let x1 = rng.gen_range(lo..hi);
        if logp(x1) > level {
            return x1;
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    x0
}

/// Conditional of a scale `tau` given `m` centered values with sum of squares `ss` under
/// a HalfNormal(`scale`) prior, sampled on `u = ln tau`.
fn update_scale<R: Rng>(tau: f64, m: f64, ss: f64, scale: f64, rng: &mut R) -> f64 {
    let logp = |u: f64| {
        let t2 = (2.0 * u).exp();
        -(m - 1.0) * u - ss / (2.0 * t2) - t2 / (2.0 * scale * scale)
    };
    slice_sample(tau.ln(), logp, 1.0, rng).exp()
}

/// `ln p(y | mu_a, mu_b, tau_a, tau_b, sigma)` with every `(alpha_i, beta_i)` integrated
/// out, up to a constant. Each athlete contributes a closed form in its sufficient statistics.
fn collapsed_loglik(data: &HierData, mu_a: f64, mu_b: f64, tau_a: f64, tau_b: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let (pa, pb) = (1.0 / (tau_a * tau_a), 1.0 / (tau_b * tau_b));
    let (ln_s, ln_ta, ln_tb) = (sigma.ln(), tau_a.ln(), tau_b.ln());
    data.athletes
        .iter()
        .map(|d| {
            let p11 = d.n / s2 + pa;
            let p12 = d.st / s2;
            let p22 = d.stt / s2 + pb;
            let b1 = d.sy / s2 + mu_a * pa;
            let b2 = d.sty / s2 + mu_b * pb;
            let det = p11 * p22 - p12 * p12;
            let fit = (p22 * b1 * b1 - 2.0 * p12 * b1 * b2 + p11 * b2 * b2) / det;
            let quad = d.syy / s2 + mu_a * mu_a * pa + mu_b * mu_b * pb - fit;
            -d.n * ln_s - ln_ta - ln_tb - 0.5 * det.ln() - 0.5 * quad
        })
        .sum()
}

/// Slice update of one scale on `u = ln x` from its collapsed conditional under a
/// HalfNormal(`scale`) prior. `with` rebuilds the log-likelihood for a candidate value.
fn update_collapsed<R: Rng>(x: f64, scale: f64, with: impl Fn(f64) -> f64, rng: &mut R) -> f64 {
    let logp = |u: f64| {
        let v = u.exp();
        let ll = with(v);
        if ll.is_finite() {
            ll - v * v / (2.0 * scale * scale) + u
        } else {
            f64::NEG_INFINITY
        }
    };
    slice_sample(x.ln(), logp, 1.0, rng).exp()
}

struct ChainOutput {
    hyper: Vec<[f64; 5]>,
    latent: Vec<f32>,
    moments: [Vec<[Moments; 2]>; 2],
}

struct State {
    mu_a: f64,
    mu_b: f64,
    tau_a: f64,
    tau_b: f64,
    sigma: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

fn init_state<R: Rng>(data: &HierData, rng: &mut R) -> State {
    let alpha: Vec<f64> = data
        .athletes
        .iter()
        .map(|a| a.sy / a.n + 0.05 * std_normal(rng))
        .collect();
    let na = alpha.len() as f64;
    let mean_a = alpha.iter().sum::<f64>() / na;
    let sd_a = (alpha.iter().map(|a| (a - mean_a).powi(2)).sum::<f64>() / na).sqrt();
    let within: f64 = data.athletes.iter().map(|a| a.syy - a.sy * a.sy / a.n).sum::<f64>();
    let pooled = (within.max(0.0) / data.n_obs() as f64).sqrt();
    State {
        mu_a: mean_a + 0.1 * std_normal(rng),
        mu_b: 0.01 * std_normal(rng),
        tau_a: sd_a * rng.gen_range(0.5..1.5) + 0.01,
        tau_b: rng.gen_range(0.01..0.1),
        sigma: pooled * rng.gen_range(0.7..1.3) + 0.01,
        beta: vec![0.0; alpha.len()],
        alpha,
    }
}

fn sweep<R: Rng>(s: &mut State, data: &HierData, spec: &HierModelSpec, rng: &mut R) {
    let athletes = &data.athletes;
    let na = athletes.len() as f64;
    let mu_a_prior = spec.mu_alpha_mean - data.offset;

    // scales from their conditionals with the athlete effects integrated out; the
    // effects are redrawn right after, so the collapsed steps leave the target intact
    let (ma, mb) = (s.mu_a, s.mu_b);
    let (ta, sg) = (s.tau_a, s.sigma);
    s.tau_b = update_collapsed(s.tau_b, spec.tau_beta_scale, |v| collapsed_loglik(data, ma, mb, ta, v, sg), rng);
    let tb = s.tau_b;
    s.tau_a = update_collapsed(s.tau_a, spec.tau_alpha_scale, |v| collapsed_loglik(data, ma, mb, v, tb, sg), rng);
    let ta = s.tau_a;
    s.sigma = update_collapsed(s.sigma, spec.sigma_scale, |v| collapsed_loglik(data, ma, mb, ta, tb, v), rng);

    // athlete intercepts and slopes, jointly
    let s2 = s.sigma * s.sigma;
    let (pa, pb) = (1.0 / (s.tau_a * s.tau_a), 1.0 / (s.tau_b * s.tau_b));
    for (i, a) in athletes.iter().enumerate() {
        let p11 = a.n / s2 + pa;
        let p12 = a.st / s2;
        let p22 = a.stt / s2 + pb;
        let b1 = a.sy / s2 + s.mu_a * pa;
        let b2 = a.sty / s2 + s.mu_b * pb;
        let det = p11 * p22 - p12 * p12;
        let m1 = (p22 * b1 - p12 * b2) / det;
        let m2 = (p11 * b2 - p12 * b1) / det;
        let l11 = p11.sqrt();
        let l21 = p12 / l11;
        let l22 = (p22 - l21 * l21).max(f64::MIN_POSITIVE).sqrt();
        let x2 = std_normal(rng) / l22;
        let x1 = (std_normal(rng) - l21 * x2) / l11;
        s.alpha[i] = m1 + x1;
        s.beta[i] = m2 + x2;
    }

    // centered population means
    let prec = 1.0 / (spec.mu_alpha_sd * spec.mu_alpha_sd) + na * pa;
    let mean = (mu_a_prior / (spec.mu_alpha_sd * spec.mu_alpha_sd) + s.alpha.iter().sum::<f64>() * pa) / prec;
    s.mu_a = mean + std_normal(rng) / prec.sqrt();
    let prec = 1.0 / (spec.mu_beta_sd * spec.mu_beta_sd) + na * pb;
    let mean = (spec.mu_beta_mean / (spec.mu_beta_sd * spec.mu_beta_sd) + s.beta.iter().sum::<f64>() * pb) / prec;
    s.mu_b = mean + std_normal(rng) / prec.sqrt();

    // centered population scales
    let ss_a: f64 = s.alpha.iter().map(|a| (a - s.mu_a).powi(2)).sum();
    s.tau_a = update_scale(s.tau_a, na, ss_a, spec.tau_alpha_scale, rng);
    let ss_b: f64 = s.beta.iter().map(|b| (b - s.mu_b).powi(2)).sum();
    s.tau_b = update_scale(s.tau_b, na, ss_b, spec.tau_beta_scale, rng);

    // observation noise
    let ss: f64 = athletes
        .iter()
        .zip(s.alpha.iter().zip(&s.beta))
        .map(|(d, (&a, &b))| d.ss(a, b))
        .sum::<f64>()
        .max(0.0);
    s.sigma = update_scale(s.sigma, data.n_obs() as f64, ss, spec.sigma_scale, rng);
    let s2 = s.sigma * s.sigma;

    // non-centered step: with eta held fixed, (mu_a, tau_a, mu_b, tau_b) are the
    // coefficients of a linear regression on (1, eta_a, t, eta_b t) and are drawn jointly.
    // The scales get symmetric priors here and any negative draw is folded back into eta.
    let eta_a: Vec<f64> = s.alpha.iter().map(|a| (a - s.mu_a) / s.tau_a).collect();
    let eta_b: Vec<f64> = s.beta.iter().map(|b| (b - s.mu_b) / s.tau_b).collect();
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xty = Vector4::<f64>::zeros();
    for ((d, &ea), &eb) in athletes.iter().zip(&eta_a).zip(&eta_b) {
        let (c0, c1) = (Vector4::new(1.0, ea, 0.0, 0.0), Vector4::new(0.0, 0.0, 1.0, eb));
        xtx += d.n * c0 * c0.transpose()
            + d.st * (c0 * c1.transpose() + c1 * c0.transpose())
            + d.stt * c1 * c1.transpose();
        xty += d.sy * c0 + d.sty * c1;
    }
    let prior_prec = Vector4::new(
        1.0 / (spec.mu_alpha_sd * spec.mu_alpha_sd),
        1.0 / (spec.tau_alpha_scale * spec.tau_alpha_scale),
        1.0 / (spec.mu_beta_sd * spec.mu_beta_sd),
        1.0 / (spec.tau_beta_scale * spec.tau_beta_scale),
    );
    let prior_mean = Vector4::new(mu_a_prior, 0.0, spec.mu_beta_mean, 0.0);
    let prec = xtx / s2 + Matrix4::from_diagonal(&prior_prec);
    if let Some(chol) = prec.cholesky() {
        let mean = chol.solve(&(xty / s2 + prior_prec.component_mul(&prior_mean)));
        let z = Vector4::from_fn(|_, _| std_normal(rng));
        // L^T x = z gives x ~ N(0, prec^-1)
        let x = chol.l().transpose().solve_upper_triangular(&z).expect("triangular factor is invertible");
        let theta = mean + x;
        if theta[1] != 0.0 && theta[3] != 0.0 {
            s.mu_a = theta[0];
            s.tau_a = theta[1].abs();
            s.mu_b = theta[2];
            s.tau_b = theta[3].abs();
            for (a, e) in s.alpha.iter_mut().zip(&eta_a) {
                *a = theta[0] + theta[1] * e;
            }
            for (b, e) in s.beta.iter_mut().zip(&eta_b) {
                *b = theta[2] + theta[3] * e;
            }
        }
    }
}

fn run_chain(data: &HierData, spec: &HierModelSpec, settings: &McmcSettings, chain: usize, thin: usize) -> ChainOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xB4E5_0000_0000_0000);
    rng.set_stream(chain as u64);
    let na = data.athletes.len();
    let mut s = init_state(data, &mut rng);
    for _ in 0..settings.warmup {
        sweep(&mut s, data, spec, &mut rng);
    }
    let mut hyper = Vec::with_capacity(settings.draws);
    let mut latent = Vec::with_capacity(settings.draws.div_ceil(thin) * na * 2);
    let mut moments = [vec![[Moments::default(); 2]; na], vec![[Moments::default(); 2]; na]];
    let half = settings.draws / 2;
    for d in 0..settings.draws {
        sweep(&mut s, data, spec, &mut rng);
        hyper.push([s.mu_a + data.offset, s.mu_b, s.tau_a, s.tau_b, s.sigma]);
        if d % thin == 0 {
            for (a, b) in s.alpha.iter().zip(&s.beta) {
                latent.push((a + data.offset) as f32);
                latent.push(*b as f32);
            }
        }
        // split halves for R-hat; the middle draw of an odd count is dropped
        let part = if d < half {
            Some(0)
        } else if d >= settings.draws - half {
            Some(1)
        } else {
            None
        };
        if let Some(p) = part {
            for (m, (a, b)) in moments[p].iter_mut().zip(s.alpha.iter().zip(&s.beta)) {
                m[0].push(*a);
                m[1].push(*b);
            }
        }
    }
    ChainOutput { hyper, latent, moments }
}

/// Fits the model to prepared data. A single athlete is allowed here.
pub fn fit_hier_data(data: &HierData, spec: &HierModelSpec, settings: &McmcSettings) -> Result<PosteriorSample, BayesError> {
    spec.validate()?;
    if data.athletes.is_empty() {
        return Err(BayesError::TooFewAthletes { needed: 1, got: 0 });
    }
    if settings.chains == 0 || settings.draws == 0 {
        return Err(BayesError::InvalidSpec("chains and draws must be positive".into()));
    }
    let na = data.athletes.len();
    let per_chain = settings.draws * na * 2;
    let thin = (per_chain * settings.chains).div_ceil(settings.latent_budget.max(1)).max(1);
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|c| run_chain(data, spec, settings, c, thin))
        .collect();
    let mut hyper = Vec::with_capacity(settings.chains);
    let mut latent = Vec::with_capacity(settings.chains);
    let mut latent_moments = Vec::with_capacity(settings.chains);
    for o in outputs {
        hyper.push(o.hyper);
        latent.push(o.latent);
        latent_moments.push(o.moments);
    }
    let mut sample = PosteriorSample {
        spec: spec.clone(),
        athlete_ids: data.athletes.iter().map(|a| a.athlete_id.clone()).collect(),
        chains: settings.chains,
        draws_per_chain: settings.draws,
        latent_thin: thin,
        hyper,
        latent,
        latent_moments,
        diagnostics: Diagnostics {
            hyper: Vec::new(),
            latent_rhat: Vec::new(),
            max_rhat: f64::NAN,
            worst_parameter: String::new(),
            min_hyper_ess: f64::NAN,
            healthy: false,
        },
    };
    sample.diagnostics = mcmc_diagnostics(&sample);
    Ok(sample)
}

/// Fits the model to every history with at least `min_history` performances.
pub fn fit_hier(histories: &[&AthleteHistory], config: &DetectorConfig) -> Result<PosteriorSample, BayesError> {
    let data = HierData::from_histories(histories, config.min_history);
    if data.athletes.len() < 2 {
        return Err(BayesError::TooFewAthletes { needed: 2, got: data.athletes.len() });
    }
    fit_hier_data(&data, &HierModelSpec::default(), &McmcSettings::from_config(config))
}

fn rhat_from_moments(parts: &[Moments]) -> f64 {
    let m = parts.len() as f64;
    let n = parts.iter().map(|p| p.n).fold(f64::INFINITY, f64::min);
    if parts.len() < 2 || n < 2.0 {
        return f64::NAN;
    }
    let w = parts.iter().map(|p| p.var()).sum::<f64>() / m;
    let grand = parts.iter().map(|p| p.mean).sum::<f64>() / m;
    let b_over_n = parts.iter().map(|p| (p.mean - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w == 0.0 {
        return if b_over_n == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn halves(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect()
}

/// Split R-hat: each chain is cut in half and the halves are compared as chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let parts: Vec<Moments> = halves(chains)
        .into_iter()
        .map(|h| {
            let mut m = Moments::default();
            h.iter().for_each(|&x| m.push(x));
            m
        })
        .collect();
    rhat_from_moments(&parts)
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let acov = |c: &[f64], mean: f64, lag: usize| -> f64 {
        (0..n - lag).map(|i| (c[i] - mean) * (c[i + lag] - mean)).sum::<f64>() / n as f64
    };
    let nf = n as f64;
    let var0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| acov(c, mu, 0) * nf / (nf - 1.0)).collect();
    let w = var0.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = if m > 1 {
        means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    if var_plus <= 0.0 {
        return (m * n) as f64;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains.iter().zip(&means).map(|(c, &mu)| acov(c, mu, lag)).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = if lag == 0 { 1.0 + rho(1) } else { rho(lag) + rho(lag + 1) };
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        lag += 2;
    }
    (m * n) as f64 / tau.max(1.0 / ((m * n) as f64).log10().max(1.0))
}

/// Split R-hat and ESS for the population parameters, split R-hat for every athlete
/// parameter. Healthy iff every R-hat is below 1.05.
pub fn mcmc_diagnostics(sample: &PosteriorSample) -> Diagnostics {
    let hyper: Vec<ParamDiagnostic> = HYPER_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let chains = sample.hyper_chains(k);
            ParamDiagnostic { name: name.to_string(), rhat: split_rhat(&chains), ess: effective_sample_size(&chains) }
        })
        .collect();
    let latent_rhat: Vec<[f64; 2]> = (0..sample.n_athletes())
        .map(|i| {
            let r = |j: usize| {
                let parts: Vec<Moments> = sample
                    .latent_moments
                    .iter()
                    .flat_map(|halves| [halves[0][i][j], halves[1][i][j]])
                    .collect();
                rhat_from_moments(&parts)
            };
            [r(0), r(1)]
        })
        .collect();
    let mut max_rhat = f64::NEG_INFINITY;
    let mut worst = String::new();
    let mut consider = |r: f64, name: &dyn Fn() -> String| {
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r > max_rhat {
            max_rhat = r;
            worst = name();
        }
    };
    for p in &hyper {
        consider(p.rhat, &|| p.name.clone());
    }
    for (i, r) in latent_rhat.iter().enumerate() {
        consider(r[0], &|| format!("alpha[{}]", sample.athlete_ids[i]));
        consider(r[1], &|| format!("beta[{}]", sample.athlete_ids[i]));
    }
    let min_hyper_ess = hyper.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min);
    Diagnostics {
        healthy: max_rhat < RHAT_HEALTHY,
        hyper,
        latent_rhat,
        max_rhat,
        worst_parameter: worst,
        min_hyper_ess,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpcOutcome {
    /// Posterior predictive probability that a replicate is at most the observed time.
    pub p_lower: f64,
    /// Tail probability used for flagging: two-sided by default, `p_lower` when one-sided.
    pub p_value: f64,
    pub flagged: bool,
}

/// Posterior predictive check of every performance; `None` for athletes not in the fit.
pub fn ppc_flag(
    sample: &PosteriorSample,
    histories: &[&AthleteHistory],
    config: &DetectorConfig,
) -> Vec<Option<Vec<PpcOutcome>>> {
    let index: HashMap<&str, usize> = sample.athlete_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let stored = sample.stored_latent_draws();
    let sigmas: Vec<Vec<f64>> = (0..sample.chains)
        .map(|c| (0..stored).map(|s| sample.hyper_draw(c, s * sample.latent_thin)[4]).collect())
        .collect();
    let total = (sample.chains * stored) as f64;
    histories
        .par_iter()
        .map(|h| {
            let &i = index.get(h.athlete_id.as_str())?;
            let t = years_since_first(h);
            let y = h.times_seconds();
            let mut acc = vec![0.0; y.len()];
            for (c, sig) in sigmas.iter().enumerate() {
                for (s, &sigma) in sig.iter().enumerate() {
                    let (a, b) = sample.latent_draw(c, s, i);
                    for j in 0..y.len() {
                        acc[j] += phi((y[j] - a - b * t[j]) / sigma);
                    }
                }
            }
            Some(
                acc.into_iter()
                    .map(|sum| {
                        let p = sum / total;
                        let p_value = if config.bayes_one_sided { p } else { (2.0 * p.min(1.0 - p)).min(1.0) };
                        PpcOutcome { p_lower: p, p_value, flagged: p_value < config.bayes_p_threshold }
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Times simulated from the prior: one athlete per draw, observed at `t` years.
pub fn prior_predictive<R: Rng>(spec: &HierModelSpec, t: f64, draws: usize, rng: &mut R) -> Vec<f64> {
    let half = |scale: f64, rng: &mut R| (scale * std_normal(rng)).abs();
    (0..draws)
        .map(|_| {
            let mu_a = spec.mu_alpha_mean + spec.mu_alpha_sd * std_normal(rng);
            let mu_b = spec.mu_beta_mean + spec.mu_beta_sd * std_normal(rng);
            let tau_a = half(spec.tau_alpha_scale, rng);
            let tau_b = half(spec.tau_beta_scale, rng);
            let sigma = half(spec.sigma_scale, rng);
            let a = mu_a + tau_a * std_normal(rng);
            let b = mu_b + tau_b * std_normal(rng);
            a + b * t + sigma * std_normal(rng)
        })
        .collect()
}

pub(crate) fn run(histories: &[&AthleteHistory], config: &DetectorConfig) -> DetectionResult {
    let mut warnings = Vec::new();
    let mut entries: Vec<DetectionEntry> = Vec::new();
    let short = |h: &AthleteHistory| format!("{} performances, {} required", h.len(), config.min_history);
    let sample = match fit_hier(histories, config) {
        Ok(s) => s,
        Err(e) => {
            warnings.push(format!("bayes_hier skipped: {e}"));
            for h in histories {
                if h.len() < config.min_history {
                    entries.extend(unscored_entries(h, EntryStatus::InsufficientHistory, &short(h)));
                } else {
                    entries.extend(unscored_entries(h, EntryStatus::Skipped, &e.to_string()));
                }
            }
            return DetectionResult::new(MethodId::BayesHier, entries, warnings);
        }
    };
    if !sample.is_healthy() {
        warnings.push(format!(
            "sampler diagnostics failed: max R-hat {:.3} at {}",
            sample.diagnostics.max_rhat, sample.diagnostics.worst_parameter
        ));
    }
    let index: HashMap<&str, usize> = sample.athlete_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let sigma = sample.hyper_mean(4);
    for (h, outcome) in histories.iter().zip(ppc_flag(&sample, histories, config)) {
        let Some(outcomes) = outcome else {
            entries.extend(unscored_entries(h, EntryStatus::InsufficientHistory, &short(h)));
            continue;
        };
        let (a, b) = sample.latent_mean(index[h.athlete_id.as_str()]);
        let t = years_since_first(h);
        for (j, o) in outcomes.into_iter().enumerate() {
            entries.push(DetectionEntry {
                performance: perf_ref(h, j),
                status: EntryStatus::Scored,
                flagged: o.flagged,
                score: Some(o.p_value),
                explanation: if o.flagged {
                    format!(
                        "p = {:.4}; {:.2} s vs predicted {:.2} s at {:.1} yr (alpha {:.2} s, beta {:+.3} s/yr, sigma {:.3} s)",
                        o.p_value,
                        h.performances[j].time_seconds(),
                        a + b * t[j],
                        t[j],
                        a,
                        b,
                        sigma
                    )
                } else {
                    String::new()
                },
            });
        }
    }
    sort_entries(&mut entries);
    DetectionResult::new(MethodId::BayesHier, entries, warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(seed: u64) -> McmcSettings {
        McmcSettings { chains: 4, warmup: 200, draws: 500, seed, latent_budget: DEFAULT_LATENT_BUDGET }
    }

    /// Data simulated from the model with the given population parameters.
    fn simulate(n_athletes: usize, per: usize, mu_a: f64, seed: u64) -> HierData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let athletes = (0..n_athletes)
            .map(|i| {
                let a = mu_a + 0.3 * std_normal(&mut rng);
                let b = -0.02 + 0.03 * std_normal(&mut rng);
                let t: Vec<f64> = (0..per).map(|j| j as f64 * 0.4).collect();
                let y = t.iter().map(|t| a + b * t + 0.1 * std_normal(&mut rng)).collect();
                (format!("A{i:03}"), t, y)
            })
            .collect();
        HierData::new(athletes)
    }

    #[test]
    fn recovers_population_intercept() {
        let data = simulate(60, 8, 11.0, 1);
        let s = fit_hier_data(&data, &HierModelSpec::default(), &settings(3)).unwrap();
        let (m, sd) = (s.hyper_mean(0), s.hyper_sd(0));
        assert!((m - 11.0).abs() < 2.0 * sd + 0.02, "mu_alpha {m} sd {sd}");
        assert!((s.hyper_mean(4) - 0.1).abs() < 0.02);
        assert!(s.is_healthy(), "{:?}", s.diagnostics);
        assert!(s.hyper.iter().flatten().all(|d| d[2] > 0.0 && d[3] > 0.0 && d[4] > 0.0));
        assert_eq!(s.hyper.iter().map(|c| c.len()).sum::<usize>(), 4 * 500);
    }

    #[test]
    fn single_athlete_shrinks_toward_prior_mean() {
        let data = HierData::new(vec![("X".into(), vec![0.0, 0.5, 1.0], vec![13.0, 13.1, 12.9])]);
        let spec = HierModelSpec { tau_alpha_scale: 0.05, sigma_scale: 1.0, ..HierModelSpec::default() };
        let s = fit_hier_data(&data, &spec, &settings(5)).unwrap();
        let (a, _) = s.latent_mean(0);
        assert!(a < 13.0 && a > 11.0, "alpha {a}");
    }

    #[test]
    fn precondition_errors() {
        let empty = HierData::new(vec![]);
        assert!(matches!(
            fit_hier_data(&empty, &HierModelSpec::default(), &settings(1)),
            Err(BayesError::TooFewAthletes { .. })
        ));
        let bad = HierModelSpec { sigma_scale: 0.0, ..HierModelSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rhat_detects_disagreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let iid: Vec<Vec<f64>> = (0..4).map(|_| (0..1000).map(|_| std_normal(&mut rng)).collect()).collect();
        let r = split_rhat(&iid);
        assert!((r - 1.0).abs() < 0.01, "{r}");
        let ess = effective_sample_size(&iid);
        assert!(ess > 3000.0 && ess < 5000.0, "{ess}");
        let mut offset = iid.clone();
        offset[1].iter_mut().for_each(|x| *x += 10.0);
        assert!(split_rhat(&offset) > 1.5);
    }

    #[test]
    fn ess_of_autocorrelated_chain_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        x = 0.9 * x + std_normal(&mut rng);
                        x
                    })
                    .collect()
            })
            .collect();
        // AR(1) with phi 0.9: n (1 - phi) / (1 + phi) ~ 421
        let ess = effective_sample_size(&chains);
        assert!(ess > 250.0 && ess < 650.0, "{ess}");
    }

    #[test]
    fn collapsed_likelihood_matches_dense_normal() {
        use nalgebra::{DMatrix, DVector};
        let data = HierData::new(vec![
            ("a".into(), vec![0.0, 0.5, 1.2, 2.0], vec![10.9, 10.8, 10.85, 10.7]),
            ("b".into(), vec![0.0, 0.1, 3.0], vec![11.3, 11.2, 11.0]),
        ]);
        // y_i ~ N(X_i mu, X_i D X_i' + sigma^2 I), summed over athletes
        let dense = |mu_a: f64, mu_b: f64, ta: f64, tb: f64, s: f64| -> f64 {
            data.athletes
                .iter()
                .map(|d| {
                    let n = d.t.len();
                    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { d.t[i] });
                    let dm = DMatrix::from_diagonal(&DVector::from_vec(vec![ta * ta, tb * tb]));
                    let cov = &x * dm * x.transpose() + DMatrix::identity(n, n) * (s * s);
                    let y = DVector::from_iterator(n, d.y.iter().map(|v| v - data.offset));
                    let r = y - &x * DVector::from_vec(vec![mu_a, mu_b]);
                    let chol = cov.cholesky().unwrap();
                    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                    -0.5 * logdet - 0.5 * r.dot(&chol.solve(&r))
                })
                .sum()
        };
        let base = (0.2, -0.05, 0.3, 0.04, 0.1);
        for alt in [(0.1, 0.0, 0.5, 0.01, 0.2), (-0.3, 0.02, 0.05, 0.2, 0.07)] {
            let c = collapsed_loglik(&data, alt.0, alt.1, alt.2, alt.3, alt.4)
                - collapsed_loglik(&data, base.0, base.1, base.2, base.3, base.4);
            let d = dense(alt.0, alt.1, alt.2, alt.3, alt.4) - dense(base.0, base.1, base.2, base.3, base.4);
            assert!((c - d).abs() < 1e-9, "{c} vs {d}");
        }
    }

    #[test]
    fn ppc_tails() {
        let data = simulate(30, 10, 11.0, 7);
        let s = fit_hier_data(&data, &HierModelSpec::default(), &settings(11)).unwrap();
        // score hand-built values against athlete 0's fit
        let (a, b) = s.latent_mean(0);
        let sigma = s.hyper_mean(4);
        let stored = s.stored_latent_draws();
        let p_at = |y: f64, t: f64| {
            let mut acc = 0.0;
            for c in 0..s.chains {
                for d in 0..stored {
                    let (aa, bb) = s.latent_draw(c, d, 0);
                    acc += phi((y - aa - bb * t) / s.hyper_draw(c, d * s.latent_thin)[4]);
                }
            }
            acc / (s.chains * stored) as f64
        };
        let p_mid = p_at(a + b * 1.0, 1.0);
        assert!((2.0 * p_mid.min(1.0 - p_mid)) > 0.9);
        let p_fast = p_at(a + b * 1.0 - 4.0 * sigma, 1.0);
        assert!(2.0 * p_fast < 0.05);
    }

    #[test]
    fn prior_predictive_centers_near_eleven() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ys = prior_predictive(&HierModelSpec::default(), 0.0, 20001, &mut rng);
        ys.sort_by(f64::total_cmp);
        let median = ys[10000];
        assert!((median - 11.0).abs() < 0.1, "{median}");
    }

    #[test]
    fn csv_export() {
        let data = simulate(3, 4, 11.0, 2);
        let st = McmcSettings { chains: 2, warmup: 10, draws: 5, seed: 1, latent_budget: 12 };
        let s = fit_hier_data(&data, &HierModelSpec::default(), &st).unwrap();
        assert_eq!(s.latent_thin, 5);
        let mut buf = Vec::new();
        s.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("chain,draw,parameter,athlete_id,value\n"));
        // 2 chains x 5 draws x 5 hypers + 2 chains x 1 stored x 3 athletes x 2
        assert_eq!(text.lines().count(), 1 + 50 + 12);
        assert!(text.contains(",alpha,A001,"));
    }
}
