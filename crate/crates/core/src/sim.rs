//! Synthetic sparse longitudinal data from a known SFPCA truth, and scoring
//! of how well a fit recovers it.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Standardization, Subject};
use crate::error::{Error, Result};
use crate::psis::LooUnit;
use crate::rotate::{match_columns, RotatedDraws};
use crate::sampler::SamplerConfig;
use crate::spline::{uniform_grid, OrthonormalBasis, DEFAULT_QUAD_POINTS};
use crate::workflow::{fit_model, prepare, FittedModel};

const DEFAULT_TRUTH: &str = include_str!("../data/default_truth.json");

/// Grid used for curve-level errors.
pub const CURVE_GRID: usize = 101;

/// Generator parameters. Coefficients refer to the orthonormal cubic basis
/// with `internal_knots` on [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub internal_knots: Vec<f64>,
    pub theta_mu: Vec<f64>,
    /// Loading columns, each of length q.
    pub theta: Vec<Vec<f64>>,
    /// Score variances `D`.
    pub score_variances: Vec<f64>,
    pub sigma2: f64,
    pub n_subjects: usize,
    /// Candidate time points `N_T`, equally spaced on [0, 1].
    pub n_candidates: usize,
    /// Mean number of visits `μ_T`.
    pub mean_visits: f64,
    pub seed: u64,
}

impl SimulationTruth {
    /// The shipped synthetic truth: two components, one internal knot.
    pub fn default_truth() -> Self {
        serde_json::from_str(DEFAULT_TRUTH).expect("bundled truth is valid JSON")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let truth: SimulationTruth = serde_json::from_str(&text)?;
        truth.validate()?;
        Ok(truth)
    }

    pub fn q(&self) -> usize {
        self.theta_mu.len()
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    /// Expected share of candidate slots left unobserved, `1 - μ_T / N_T`.
    pub fn missingness(&self) -> f64 {
        1.0 - self.mean_visits / self.n_candidates as f64
    }

    /// Copy with a different scenario (subjects, missingness) and seed.
    pub fn scenario(&self, n_subjects: usize, missingness: f64, seed: u64) -> Self {
        SimulationTruth {
            n_subjects,
            mean_visits: (1.0 - missingness) * self.n_candidates as f64,
            seed,
            ..self.clone()
        }
    }

    pub fn theta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.q(), self.k(), |a, j| self.theta[j][a])
    }

    pub fn basis(&self) -> Result<OrthonormalBasis> {
        OrthonormalBasis::build(&self.internal_knots, DEFAULT_QUAD_POINTS)
    }

    /// Score variances and noise may be zero (noise-free designs); loadings
    /// must be orthonormal.
    pub fn validate(&self) -> Result<()> {
        let q = self.internal_knots.len() + crate::spline::ORDER;
        let bad = |m: String| Err(Error::Validation(m));
        if self.theta_mu.len() != q {
            return bad(format!("theta_mu has {} entries, basis has {q}", self.theta_mu.len()));
        }
        if self.theta.is_empty() || self.theta.iter().any(|c| c.len() != q) {
            return bad(format!("every loading column needs {q} entries"));
        }
        if self.score_variances.len() != self.k() {
            return bad("one score variance per component is required".into());
        }
        if self.score_variances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || !(self.sigma2 >= 0.0) {
            return bad("variances must be finite and non-negative".into());
        }
        let theta = self.theta_matrix();
        let err = (theta.transpose() * &theta - DMatrix::identity(self.k(), self.k())).abs().max();
        if err > 1e-10 {
            return bad(format!("loading columns are not orthonormal (error {err:e})"));
        }
        if self.n_subjects == 0 || self.n_candidates == 0 {
            return bad("need at least one subject and one candidate time".into());
        }
        if !(self.mean_visits > 0.0 && self.mean_visits <= self.n_candidates as f64) {
            return bad(format!(
                "mean visits {} must lie in (0, {}]",
                self.mean_visits, self.n_candidates
            ));
        }
        Ok(())
    }

    pub fn candidate_times(&self) -> Vec<f64> {
        uniform_grid(self.n_candidates)
    }

    /// `b(t)ᵀ θ_μ` on `grid`.
    pub fn mean_curve(&self, basis: &OrthonormalBasis, grid: &[f64]) -> Result<Vec<f64>> {
        Ok((basis.evaluate(grid)? * DVector::from_column_slice(&self.theta_mu)).iter().copied().collect())
    }
}

/// Draws one dataset.
///
/// Visit counts are `Poisson(μ_T)` redrawn until they fall in `[1, N_T]`;
/// when `μ_T = N_T` every subject is observed at every candidate time.
/// Visit times are chosen uniformly without replacement among the slots.
pub fn generate(truth: &SimulationTruth) -> Result<LongitudinalDataset> {
    truth.validate()?;
    let basis = truth.basis()?;
    let candidates = truth.candidate_times();
    let b_all = basis.evaluate(&candidates)?;
    let theta = truth.theta_matrix();
    let mu = DVector::from_column_slice(&truth.theta_mu);
    let n_t = truth.n_candidates;
    let full = truth.mean_visits >= n_t as f64;
    let poisson = if full {
        None
    } else {
        Some(Poisson::new(truth.mean_visits).map_err(|e| Error::Validation(e.to_string()))?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(truth.seed);
    let width = truth.n_subjects.to_string().len();
    let sigma = truth.sigma2.sqrt();
    let mut subjects = Vec::with_capacity(truth.n_subjects);
    for i in 0..truth.n_subjects {
        let n_i = match &poisson {
            None => n_t,
            Some(p) => loop {
                let n = p.sample(&mut rng) as usize;
                if (1..=n_t).contains(&n) {
                    break n;
                }
            },
        };
        let mut slots = sample_indices(&mut rng, n_t, n_i).into_vec();
        slots.sort_unstable();
        let alpha = DVector::from_iterator(
            truth.k(),
            truth.score_variances.iter().map(|d| d.sqrt() * rng.sample::<f64, _>(StandardNormal)),
        );
        let coef = &mu + &theta * alpha;
        let mut times = Vec::with_capacity(n_i);
        let mut values = Vec::with_capacity(n_i);
        for &s in &slots {
            let m: f64 = b_all.row(s).iter().zip(coef.iter()).map(|(b, c)| b * c).sum();
            let e: f64 = rng.sample(StandardNormal);
            times.push(candidates[s]);
            values.push(m + sigma * e);
        }
        subjects.push(Subject {
            id: format!("s{:0width$}", i + 1),
            times,
            values,
        });
    }
    LongitudinalDataset::new(subjects)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Mean squared error of the posterior-mean `θ_μ` coefficients.
    pub mse_mean: f64,
    /// Mean squared error of the posterior-mean loadings after matching
    /// columns and signs to the truth.
    pub mse_fpc: f64,
    /// Mean squared error of the mean curve on a uniform grid.
    pub curve_mse_mean: f64,
    /// Mean squared error of the matched component curves on a uniform grid.
    pub curve_mse_fpc: f64,
}

/// Posterior-mean `θ_μ` on the outcome scale of the generator:
/// `mean · c + sd · θ_μ`, where `c` holds the coefficients of the constant 1.
pub fn mean_coefficients_on_data_scale(
    fit: &RotatedDraws,
    basis: &OrthonormalBasis,
    standardization: &Standardization,
) -> Vec<f64> {
    let c = basis.constant_coefficients();
    fit.mean_theta_mu()
        .iter()
        .zip(&c)
        .map(|(t, c)| standardization.mean * c + standardization.sd * t)
        .collect()
}

/// Compares a fit (made on the truth's basis) with the truth.
pub fn score_recovery(
    fit: &RotatedDraws,
    standardization: &Standardization,
    truth: &SimulationTruth,
) -> Result<RecoveryScore> {
    if fit.k() != truth.k() || fit.q() != truth.q() {
        return Err(Error::Scoring(format!(
            "fit has q = {}, k = {}; truth has q = {}, k = {}",
            fit.q(),
            fit.k(),
            truth.q(),
            truth.k()
        )));
    }
    let basis = truth.basis()?;
    let mu_hat = mean_coefficients_on_data_scale(fit, &basis, standardization);
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let mse_mean = mse(&mu_hat, &truth.theta_mu);
    let theta_true = truth.theta_matrix();
    let aligned = align_to(&fit.mean_theta_star(), &theta_true);
    let mse_fpc = mse(aligned.as_slice(), theta_true.as_slice());
    let grid = uniform_grid(CURVE_GRID);
    let b = basis.evaluate(&grid)?;
    let curve_hat = &b * DVector::from_vec(mu_hat);
    let curve_true = &b * DVector::from_column_slice(&truth.theta_mu);
    let comp_hat = &b * &aligned;
    let comp_true = &b * &theta_true;
    Ok(RecoveryScore {
        mse_mean,
        mse_fpc,
        curve_mse_mean: mse(curve_hat.as_slice(), curve_true.as_slice()),
        curve_mse_fpc: mse(comp_hat.as_slice(), comp_true.as_slice()),
    })
}

/// Columns of `estimate` reordered and sign-flipped to match `truth`.
pub fn align_to(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let (order, signs) = match_columns(estimate, truth);
    let mut out = DMatrix::zeros(truth.nrows(), truth.ncols());
    for (dst, (&src, &s)) in order.iter().zip(&signs).enumerate() {
        out.set_column(dst, &(estimate.column(src) * s));
    }
    out
}

/// Sampler settings for simulation fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFitConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
}

impl Default for SimFitConfig {
    fn default() -> Self {
        SimFitConfig {
            chains: 4,
            warmup_iters: 1000,
            sampling_iters: 1000,
        }
    }
}

/// Scenario of a grid run: number of subjects and missing proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n_subjects: usize,
    pub missingness: f64,
}

/// Deterministic child seed (SplitMix64 finalizer over the inputs).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulated dataset fitted with the true dimensions and knots.
#[derive(Debug)]
pub struct SimulatedFit {
    pub truth: SimulationTruth,
    pub fit: FittedModel,
    pub standardization: Standardization,
    pub score: RecoveryScore,
}

/// Generates data for `truth`, fits with its `k` and knots, and scores it.
pub fn simulate_and_fit(truth: &SimulationTruth, config: &SimFitConfig) -> Result<SimulatedFit> {
    let data = generate(truth)?;
    let prepared = prepare(&data, Some((0.0, 1.0)))?;
    let basis = Arc::new(truth.basis()?);
    let sampler = SamplerConfig {
        chains: config.chains,
        warmup_iters: config.warmup_iters,
        sampling_iters: config.sampling_iters,
        seed: truth.seed,
        ..SamplerConfig::default()
    };
    let fit = fit_model(&prepared, basis, truth.k(), &sampler, LooUnit::Marginal)?;
    let score = score_recovery(&fit.rotated, &prepared.standardization, truth)?;
    Ok(SimulatedFit {
        truth: truth.clone(),
        standardization: prepared.standardization,
        fit,
        score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub scenario: usize,
    pub n_subjects: usize,
    pub missingness: f64,
    pub rep: usize,
    pub seed: u64,
    pub mse_mean: Option<f64>,
    pub mse_fpc: Option<f64>,
    pub curve_mse_mean: Option<f64>,
    pub curve_mse_fpc: Option<f64>,
    pub max_rhat: Option<f64>,
    /// Empty on success.
    pub error: String,
}

impl GridRow {
    pub fn succeeded(&self) -> bool {
        self.error.is_empty()
    }
}

/// Runs `reps` replicates of every scenario. Failed replicates are kept as
/// rows with an error message. Rows come back ordered by (scenario, rep).
pub fn run_grid(
    base: &SimulationTruth,
    scenarios: &[Scenario],
    reps: usize,
    master_seed: u64,
    config: &SimFitConfig,
) -> Result<Vec<GridRow>> {
    if reps == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..scenarios.len()).flat_map(|s| (0..reps).map(move |r| (s, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(s, r)| {
            let sc = scenarios[s];
            let seed = derive_seed(master_seed, s as u64, r as u64);
            let truth = base.scenario(sc.n_subjects, sc.missingness, seed);
            let mut row = GridRow {
                scenario: s,
                n_subjects: sc.n_subjects,
                missingness: sc.missingness,
                rep: r,
                seed,
                mse_mean: None,
                mse_fpc: None,
                curve_mse_mean: None,
                curve_mse_fpc: None,
                max_rhat: None,
                error: String::new(),
            };
            match simulate_and_fit(&truth, config) {
                Ok(f) => {
                    row.max_rhat = f.fit.convergence.max_rhat;
                    if f.fit.failed() {
                        row.error = format!("not converged (max R-hat {:?})", f.fit.convergence.max_rhat);
                    }
                    row.mse_mean = Some(f.score.mse_mean);
                    row.mse_fpc = Some(f.score.mse_fpc);
                    row.curve_mse_mean = Some(f.score.curve_mse_mean);
                    row.curve_mse_fpc = Some(f.score.curve_mse_fpc);
                }
                Err(e) => row.error = e.to_string(),
            }
            row
        })
        .collect();
    Ok(rows)
}

/// Long-format table: one row per (scenario, rep).
pub fn write_grid_csv<W: Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario",
        "n_subjects",
        "missing",
        "rep",
        "seed",
        "mse_mean",
        "mse_fpc",
        "curve_mse_mean",
        "curve_mse_fpc",
        "max_rhat",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.scenario.to_string(),
            r.n_subjects.to_string(),
            r.missingness.to_string(),
            r.rep.to_string(),
            r.seed.to_string(),
            opt(r.mse_mean),
            opt(r.mse_fpc),
            opt(r.curve_mse_mean),
            opt(r.curve_mse_fpc),
            opt(r.max_rhat),
            r.error.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<grid writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_truth_is_valid() {
        let t = SimulationTruth::default_truth();
        t.validate().unwrap();
        assert_eq!((t.q(), t.k()), (5, 2));
        assert_eq!(t.missingness(), 0.0);
    }

    #[test]
    fn full_design_observes_every_slot() {
        let t = SimulationTruth::default_truth().scenario(5, 0.0, 3);
        let d = generate(&t).unwrap();
        assert!(d.subjects().iter().all(|s| s.len() == t.n_candidates));
    }

    #[test]
    fn noise_free_zero_scores_lie_on_the_mean() {
        let mut t = SimulationTruth::default_truth().scenario(20, 0.8, 9);
        t.sigma2 = 0.0;
        t.score_variances = vec![0.0, 0.0];
        let d = generate(&t).unwrap();
        let basis = t.basis().unwrap();
        for s in d.subjects() {
            assert!(!s.is_empty());
            let m = t.mean_curve(&basis, &s.times).unwrap();
            for (y, mu) in s.values.iter().zip(&m) {
                assert!((y - mu).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = SimulationTruth::default_truth().scenario(10, 0.5, 4);
        assert_eq!(generate(&t).unwrap(), generate(&t).unwrap());
    }

    #[test]
    fn invalid_truth_is_rejected() {
        let mut t = SimulationTruth::default_truth();
        t.theta[0][0] += 0.1;
        assert!(t.validate().is_err());
        let mut t = SimulationTruth::default_truth();
        t.mean_visits = 11.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn sign_flipped_truth_aligns_exactly() {
        let t = SimulationTruth::default_truth();
        let theta = t.theta_matrix();
        let mut flipped = theta.clone();
        flipped.column_mut(0).neg_mut();
        flipped.swap_columns(0, 1);
        assert!((align_to(&flipped, &theta) - &theta).abs().max() < 1e-15);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 1), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(5, 2, 3), derive_seed(5, 2, 3));
    }
}
