//! Pareto-smoothed importance sampling leave-one-out cross-validation.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pareto shape above which a unit's LOO estimate is unreliable.
pub const KHAT_BAD: f64 = 0.7;
/// Shape above which a warning is warranted.
pub const KHAT_WARN: f64 = 0.5;
/// Shape reported for a tail with no spread (nothing to smooth).
pub const KHAT_FLAT: f64 = -10.0;
pub const MIN_TAIL: usize = 5;

const PRIOR: f64 = 3.0;
const MIN_GRID: usize = 30;

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_mean_exp(x: &[f64]) -> f64 {
    log_sum_exp(x) - (x.len() as f64).ln()
}

/// Log importance ratios `log r = -loglik` for an S × N log-likelihood matrix.
pub fn importance_ratios(loglik: &DMatrix<f64>) -> DMatrix<f64> {
    -loglik
}

/// Tail length `ceil(0.2 S)`, at least [`MIN_TAIL`].
pub fn tail_length(s: usize) -> usize {
    ((0.2 * s as f64).ceil() as usize).max(MIN_TAIL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub khat: f64,
    pub sigma_hat: f64,
    pub threshold: f64,
    pub tail_len: usize,
}

impl GpdFit {
    /// Quantile function of the fitted distribution, including the threshold.
    pub fn quantile(&self, p: f64) -> f64 {
        self.threshold + gpd_quantile(p, self.khat, self.sigma_hat)
    }
}

/// Quantile of a generalized Pareto distribution with location 0.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * ((-k * (-p).ln_1p()).exp_m1()) / k
    }
}

/// Log density of a generalized Pareto distribution with location 0.
pub fn gpd_log_density(x: f64, k: f64, sigma: f64) -> f64 {
    if x < 0.0 || sigma <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if k.abs() < 1e-12 {
        return -sigma.ln() - x / sigma;
    }
    let z = 1.0 + k * x / sigma;
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 / k + 1.0) * z.ln()
}

/// Empirical-Bayes fit of a generalized Pareto distribution to exceedances
/// (Zhang and Stephens). `threshold` is recorded but not used in the fit.
pub fn fit_gpd_tail(exceedances: &[f64], threshold: f64) -> Result<GpdFit> {
    let n = exceedances.len();
    if n < MIN_TAIL {
        return Err(Error::InsufficientTail(n));
    }
    let mut x = exceedances.to_vec();
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Evaluation("exceedances must be finite and non-negative".into()));
    }
    x.sort_by(f64::total_cmp);
    let x_max = x[n - 1];
    if x_max <= 0.0 {
        return Err(Error::DegenerateTail);
    }
    let m = MIN_GRID + (n as f64).sqrt() as usize;
    // First quartile; fall back to a positive value if many exceedances are zero.
    let mut xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    if xstar <= 0.0 {
        xstar = x.iter().copied().find(|v| *v > 0.0).unwrap_or(x_max);
    }
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / PRIOR / xstar)
        .collect();
    let profile = |t: f64| -> f64 {
        let a = -t;
        let k = x.iter().map(|v| (a * v).ln_1p()).sum::<f64>() / n as f64;
        n as f64 * ((a / k).ln() - k - 1.0)
    };
    let l_theta: Vec<f64> = theta.iter().map(|&t| profile(t)).collect();
    // Grid points where the profile is undefined (a/k <= 0) get zero weight.
    let finite: Vec<f64> = l_theta.iter().map(|v| if v.is_nan() { f64::NEG_INFINITY } else { *v }).collect();
    let norm = log_sum_exp(&finite);
    let theta_hat: f64 = theta.iter().zip(&finite).map(|(t, l)| t * (l - norm).exp()).sum();
    let k = x.iter().map(|v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    if !k.is_finite() || !(sigma > 0.0) {
        return Err(Error::Evaluation(format!("Pareto fit failed (k = {k}, sigma = {sigma})")));
    }
    Ok(GpdFit {
        khat: k,
        sigma_hat: sigma,
        threshold,
        tail_len: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedWeights {
    /// Log weights after tail replacement and truncation (unnormalized).
    pub log_weights: Vec<f64>,
    pub khat: f64,
    pub tail_len: usize,
}

/// Pareto-smooths one unit's log importance ratios.
///
/// The `M = ceil(0.2 S)` largest ratios are replaced, in rank order, by
/// quantiles of a generalized Pareto fit to their exceedances over the
/// largest remaining ratio; all weights are then capped at `S^{3/4}` times
/// the mean smoothed weight. Work is done on ratios scaled by their maximum.
pub fn smooth_weights(log_ratios: &[f64]) -> Result<SmoothedWeights> {
    let s = log_ratios.len();
    let m = tail_length(s);
    if m >= s {
        return Err(Error::InsufficientTail(s.saturating_sub(1)));
    }
    let shift = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Evaluation("non-finite log importance ratio".into()));
    }
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - shift).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let tail = &order[s - m..];
    let cutoff = lw[order[s - m - 1]];
    let exp_cutoff = cutoff.exp();
    let exceed: Vec<f64> = tail.iter().map(|&i| (lw[i].exp() - exp_cutoff).max(0.0)).collect();
    let khat = if exceed.iter().all(|v| *v == 0.0) {
        KHAT_FLAT
    } else {
        let fit = fit_gpd_tail(&exceed, exp_cutoff)?;
        for (z, &i) in tail.iter().enumerate() {
            let p = (z as f64 + 0.5) / m as f64;
            lw[i] = fit.quantile(p).ln();
        }
        fit.khat
    };
    let log_cap = 0.75 * (s as f64).ln() + log_mean_exp(&lw);
    for v in lw.iter_mut() {
        if *v > log_cap {
            *v = log_cap;
        }
    }
    for v in lw.iter_mut() {
        *v += shift;
    }
    Ok(SmoothedWeights {
        log_weights: lw,
        khat,
        tail_len: m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LooUnit {
    /// Whole subject, scores integrated out against their prior. Leaving a
    /// subject out leaves its scores at the prior, so this is the exact
    /// importance-sampling target for subject-level LOO.
    #[default]
    Marginal,
    /// Whole subject, likelihood conditional on the subject's sampled
    /// scores. Cheaper but the scores are dominated by the subject's own
    /// data, which makes the importance weights heavy-tailed.
    Conditional,
    /// Single observation.
    Observation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub elppd: f64,
    /// `sqrt(N · var(pointwise))`.
    pub se: f64,
    pub pointwise: Vec<f64>,
    pub khat: Vec<f64>,
    pub n_bad: usize,
    /// Units with `khat > 0.7`.
    pub bad_units: Vec<usize>,
    pub n_warn: usize,
    pub draws: usize,
    pub tail_len: usize,
    pub unit: LooUnit,
}

impl std::str::FromStr for LooUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(LooUnit::Marginal),
            "conditional" => Ok(LooUnit::Conditional),
            "observation" => Ok(LooUnit::Observation),
            other => Err(Error::Config(format!(
                "unknown LOO unit '{other}' (expected marginal, conditional or observation)"
            ))),
        }
    }
}

impl LooReport {
    pub fn n_units(&self) -> usize {
        self.pointwise.len()
    }

    /// `unit,khat` rows, one per held-out unit.
    pub fn write_khat_csv<W: Write>(&self, writer: W, unit_ids: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "id", "khat", "flagged"])?;
        for (i, k) in self.khat.iter().enumerate() {
            let id = unit_ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            w.write_record([i.to_string(), id, k.to_string(), (*k > KHAT_BAD).to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<khat writer>", e))?;
        Ok(())
    }
}

/// `sqrt(N · sample variance)` of a pointwise vector.
pub fn pointwise_se(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (n as f64 * var).sqrt()
}

/// PSIS-LOO from an S × N log-likelihood matrix (rows are draws).
pub fn compute_loo(loglik: &DMatrix<f64>, unit: LooUnit) -> Result<LooReport> {
    let (s, n) = loglik.shape();
    if loglik.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("log-likelihood matrix has non-finite entries".into()));
    }
    let log_ratios = importance_ratios(loglik);
    let per_unit: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let lr: Vec<f64> = log_ratios.column(i).iter().copied().collect();
            let sw = smooth_weights(&lr)?;
            let num: Vec<f64> = sw.log_weights.iter().zip(loglik.column(i).iter()).map(|(w, l)| w + l).collect();
            Ok((log_sum_exp(&num) - log_sum_exp(&sw.log_weights), sw.khat))
        })
        .collect();
    let mut pointwise = Vec::with_capacity(n);
    let mut khat = Vec::with_capacity(n);
    for r in per_unit {
        let (p, k) = r?;
        pointwise.push(p);
        khat.push(k);
    }
    let bad_units: Vec<usize> = (0..n).filter(|&i| khat[i] > KHAT_BAD).collect();
    Ok(LooReport {
        elppd: pointwise.iter().sum(),
        se: pointwise_se(&pointwise),
        n_bad: bad_units.len(),
        n_warn: khat.iter().filter(|k| **k > KHAT_WARN).count(),
        bad_units,
        pointwise,
        khat,
        draws: s,
        tail_len: tail_length(s),
        unit,
    })
}

/// Model identity for comparisons: number of components and internal knots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelLabel {
    pub pcs: usize,
    pub knots: usize,
}

impl std::fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} PCs, {} knots", self.pcs, self.knots)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: ModelLabel,
    pub elppd: f64,
    /// Difference to the best model (0 for the best).
    pub delta: f64,
    pub se_delta: f64,
    pub tied: bool,
    pub n_bad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Sorted by elppd, best first.
    pub rows: Vec<ComparisonRow>,
    pub recommended: ModelLabel,
}

/// Ranks models by elppd. A model whose deficit to the best is within one
/// standard error of the difference is tied with it; among the best and
/// its ties the model with the fewest components, then fewest knots, is
/// recommended.
pub fn compare_models(models: &[(ModelLabel, &LooReport)]) -> Result<Comparison> {
    let Some((_, first)) = models.first() else {
        return Err(Error::Comparison("no models to compare".into()));
    };
    let n = first.n_units();
    if let Some((label, r)) = models.iter().find(|(_, r)| r.n_units() != n) {
        return Err(Error::Comparison(format!(
            "model {label} has {} units, expected {n}",
            r.n_units()
        )));
    }
    let mut idx: Vec<usize> = (0..models.len()).collect();
    idx.sort_by(|&a, &b| {
        models[b]
            .1
            .elppd
            .total_cmp(&models[a].1.elppd)
            .then_with(|| parsimony(&models[a].0, &models[b].0))
    });
    let best = models[idx[0]].1;
    let rows: Vec<ComparisonRow> = idx
        .iter()
        .map(|&m| {
            let (label, r) = models[m];
            let diff: Vec<f64> = r.pointwise.iter().zip(&best.pointwise).map(|(a, b)| a - b).collect();
            let delta = r.elppd - best.elppd;
            let se_delta = pointwise_se(&diff);
            ComparisonRow {
                label,
                elppd: r.elppd,
                delta,
                se_delta,
                tied: delta.abs() <= se_delta,
                n_bad: r.n_bad,
            }
        })
        .collect();
    let recommended = rows
        .iter()
        .filter(|r| r.tied)
        .map(|r| r.label)
        .min_by(parsimony)
        .unwrap_or(rows[0].label);
    Ok(Comparison { rows, recommended })
}

fn parsimony(a: &ModelLabel, b: &ModelLabel) -> std::cmp::Ordering {
    a.pcs.cmp(&b.pcs).then(a.knots.cmp(&b.knots))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_flip_sign() {
        let ll = DMatrix::from_row_slice(1, 2, &[0.0, -2.3]);
        let r = importance_ratios(&ll);
        assert_eq!(r[(0, 0)], 0.0);
        assert_eq!(r[(0, 1)], 2.3);
    }

    #[test]
    fn tail_length_rounds_up_with_floor() {
        assert_eq!(tail_length(10_000), 2000);
        assert_eq!(tail_length(101), 21);
        assert_eq!(tail_length(10), 5);
    }

    #[test]
    fn flat_ratios_give_uniform_weights() {
        let sw = smooth_weights(&[1.5; 100]).unwrap();
        assert_eq!(sw.khat, KHAT_FLAT);
        assert!(sw.log_weights.iter().all(|w| *w == 1.5));
    }

    #[test]
    fn constant_columns_reproduce_the_likelihood() {
        let ll = DMatrix::from_fn(200, 3, |_, i| -(i as f64) - 0.25);
        let r = compute_loo(&ll, LooUnit::Conditional).unwrap();
        for i in 0..3 {
            assert!((r.pointwise[i] - ll[(0, i)]).abs() < 1e-12);
        }
        assert!((r.elppd - r.pointwise.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        assert!(matches!(smooth_weights(&[0.0, 1.0, 2.0]), Err(Error::InsufficientTail(_))));
        assert!(matches!(fit_gpd_tail(&[1.0; 4], 0.0), Err(Error::InsufficientTail(4))));
        assert!(matches!(fit_gpd_tail(&[0.0; 8], 0.0), Err(Error::DegenerateTail)));
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &k in &[-0.3, 0.0, 0.4, 1.2] {
            for &p in &[0.01, 0.5, 0.99] {
                let x = gpd_quantile(p, k, 2.0);
                let cdf = if k == 0.0 {
                    1.0 - (-x / 2.0).exp()
                } else {
                    1.0 - (1.0 + k * x / 2.0).powf(-1.0 / k)
                };
                assert!((cdf - p).abs() < 1e-12, "k {k} p {p}");
            }
        }
    }

    fn report(pointwise: Vec<f64>) -> LooReport {
        LooReport {
            elppd: pointwise.iter().sum(),
            se: pointwise_se(&pointwise),
            khat: vec![0.1; pointwise.len()],
            pointwise,
            n_bad: 0,
            bad_units: vec![],
            n_warn: 0,
            draws: 100,
            tail_len: 20,
            unit: LooUnit::Conditional,
        }
    }

    #[test]
    fn identical_reports_tie_and_prefer_parsimony() {
        let a = report(vec![-1.0, -2.0, -1.5]);
        let big = ModelLabel { pcs: 3, knots: 2 };
        let small = ModelLabel { pcs: 2, knots: 2 };
        let c = compare_models(&[(big, &a), (small, &a)]).unwrap();
        assert_eq!(c.recommended, small);
        assert!(c.rows.iter().all(|r| r.tied && r.delta == 0.0 && r.se_delta == 0.0));
    }

    #[test]
    fn mismatched_units_is_an_error() {
        let a = report(vec![-1.0, -2.0]);
        let b = report(vec![-1.0]);
        let l = ModelLabel { pcs: 1, knots: 1 };
        assert!(matches!(compare_models(&[(l, &a), (l, &b)]), Err(Error::Comparison(_))));
    }
}
