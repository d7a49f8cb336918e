//! Convergence diagnostics: rank-normalized split R-hat and effective sample
//! sizes (Geyer initial monotone sequence), plus a per-parameter report.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::SampleOutput;

/// R-hat threshold above which a parameter is flagged.
pub const RHAT_THRESHOLD: f64 = 1.01;

/// Minimum draws per chain for split statistics.
pub const MIN_DRAWS_PER_CHAIN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhatStatus {
    Ok,
    Flagged,
    /// Every draw identical: the ratio is undefined.
    Degenerate,
    /// Fewer than two chains or too few draws.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub rhat: Option<f64>,
    pub rhat_status: RhatStatus,
    pub ess_bulk: Option<f64>,
    pub mcse_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub parameters: Vec<ParameterSummary>,
    pub max_rhat: Option<f64>,
    pub flagged: Vec<String>,
    pub divergent: usize,
    pub divergence_rate: f64,
    pub treedepth_saturated: usize,
    pub mean_accept_stat: f64,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    pub fn has_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flat_map(|c| c.first()).next();
    match first {
        Some(&f) => chains.iter().flatten().all(|&v| v == f),
        None => true,
    }
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces draws by normal scores of their pooled fractional ranks
/// (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut pooled: Vec<(f64, usize)> = chains
        .iter()
        .flatten()
        .copied()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &pooled[i..=j] {
            ranks[item.1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let s = total as f64;
    let mut it = ranks.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| normal.inverse_cdf((it.next().unwrap() - 0.375) / (s + 0.25)))
                .collect()
        })
        .collect()
}

/// Classic R-hat on already-split chains.
fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_var(c)).collect();
    let b = n * sample_var(&means);
    let w = vars.iter().sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split R-hat: the larger of the bulk value and the value
/// on draws folded around the median. `None` if fewer than two chains, too
/// few draws, or all draws identical.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.len() < 2 || chains.iter().any(|c| c.len() < 4) || is_constant(chains) {
        return None;
    }
    let split_chains = split(chains);
    let bulk = rhat_basic(&rank_normalize(&split_chains));
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let median = crate::spline::quantile_sorted(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = split_chains
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let tail = if is_constant(&folded) {
        bulk
    } else {
        rhat_basic(&rank_normalize(&folded))
    };
    let r = bulk.max(tail);
    r.is_finite().then_some(r)
}

/// Effective sample size of already-prepared chains of equal length.
fn ess_of(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| v - mu).collect())
        .collect();
    let nf = n as f64;
    // Mean over chains of the biased autocovariance at `lag`.
    let acov = |lag: usize| -> f64 {
        centered
            .iter()
            .map(|c| (0..n - lag).map(|t| c[t] * c[t + lag]).sum::<f64>() / nf)
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let mean_var = acov0 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 0;
    while t + 5 < n && (rho_even + rho_odd) > 0.0 {
        t += 2;
        rho_even = 1.0 - (mean_var - acov(t)) / var_plus;
        rho_odd = 1.0 - (mean_var - acov(t + 1)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t] = rho_even;
            rho[t + 1] = rho_odd;
        }
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t] = rho_even;
    }
    // Initial monotone sequence.
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t]).max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size (rank-normalized split chains).
pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 8) || is_constant(chains) {
        return None;
    }
    let e = ess_of(&rank_normalize(&split(chains)));
    e.is_finite().then_some(e)
}

/// Effective sample size for the mean (split chains, no rank transform);
/// the denominator of the Monte Carlo standard error of the mean.
pub fn ess_mean(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || chains.iter().any(|c| c.len() < 8) || is_constant(chains) {
        return None;
    }
    let e = ess_of(&split(chains));
    e.is_finite().then_some(e)
}

/// Monte Carlo standard error of the mean of `chains`.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Option<f64> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let ess = ess_mean(chains)?;
    Some((sample_var(&pooled) / ess).sqrt())
}

pub fn summarize(name: &str, chains: &[Vec<f64>]) -> ParameterSummary {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mu = mean(&pooled);
    let sd = if pooled.len() > 1 { sample_var(&pooled).sqrt() } else { 0.0 };
    let enough = chains.len() >= 2 && chains.iter().all(|c| c.len() >= MIN_DRAWS_PER_CHAIN);
    let (rhat, status) = if is_constant(chains) {
        (None, RhatStatus::Degenerate)
    } else if !enough {
        (None, RhatStatus::Unavailable)
    } else {
        match split_rhat(chains) {
            Some(r) if r > RHAT_THRESHOLD => (Some(r), RhatStatus::Flagged),
            Some(r) => (Some(r), RhatStatus::Ok),
            None => (None, RhatStatus::Unavailable),
        }
    };
    ParameterSummary {
        name: name.to_string(),
        mean: mu,
        sd,
        rhat,
        rhat_status: status,
        ess_bulk: ess_bulk(chains),
        mcse_mean: mcse_mean(chains),
    }
}

/// Convergence report over named scalar quantities, each given as one
/// sequence per chain, plus the sampler statistics of `output`.
pub fn diagnose(output: &SampleOutput, quantities: &[(String, Vec<Vec<f64>>)]) -> ConvergenceReport {
    let parameters: Vec<ParameterSummary> = quantities
        .iter()
        .map(|(name, chains)| summarize(name, chains))
        .collect();
    let max_rhat = parameters
        .iter()
        .filter_map(|p| p.rhat)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    let flagged: Vec<String> = parameters
        .iter()
        .filter(|p| p.rhat_status == RhatStatus::Flagged)
        .map(|p| p.name.clone())
        .collect();
    let mut warnings = Vec::new();
    if output.n_chains() < 2 {
        warnings.push("R-hat unavailable with a single chain".to_string());
    }
    if !flagged.is_empty() {
        warnings.push(format!(
            "{} quantities have R-hat above {RHAT_THRESHOLD}",
            flagged.len()
        ));
    }
    if let Some(w) = output.divergence_warning() {
        warnings.push(w);
    }
    let saturated = output.n_max_treedepth();
    if saturated > 0 {
        warnings.push(format!("{saturated} transitions hit the maximum tree depth"));
    }
    let n = output.n_draws().max(1) as f64;
    ConvergenceReport {
        chains: output.n_chains(),
        draws_per_chain: output.draws_per_chain(),
        parameters,
        max_rhat,
        flagged,
        divergent: output.n_divergent(),
        divergence_rate: output.divergence_rate(),
        treedepth_saturated: saturated,
        mean_accept_stat: output
            .chains
            .iter()
            .map(|c| c.accept_stat.iter().sum::<f64>())
            .sum::<f64>()
            / n,
        warnings,
    }
}

/// Report over every coordinate of a generic sampler run.
pub fn diagnose_all(output: &SampleOutput, names: &[String]) -> ConvergenceReport {
    let quantities: Vec<(String, Vec<Vec<f64>>)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), output.coordinate_chains(i)))
        .collect();
    diagnose(output, &quantities)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(seed: u64, m: usize, n: usize, offsets: &[f64]) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + offsets[c % offsets.len()]
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn null_rhat_close_to_one() {
        for seed in 0..5 {
            let chains = normal_chains(seed, 4, 1000, &[0.0]);
            let r = split_rhat(&chains).unwrap();
            assert!((0.99..=1.02).contains(&r), "seed {seed}: {r}");
        }
    }

    #[test]
    fn offset_chains_have_large_rhat() {
        let chains = normal_chains(7, 2, 500, &[0.0, 5.0]);
        assert!(split_rhat(&chains).unwrap() > 1.5);
    }

    #[test]
    fn constant_parameter_is_degenerate() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        assert_eq!(split_rhat(&chains), None);
        let s = summarize("c", &chains);
        assert_eq!(s.rhat_status, RhatStatus::Degenerate);
        assert_eq!(s.rhat, None);
    }

    #[test]
    fn single_chain_rhat_unavailable() {
        let chains = normal_chains(1, 1, 200, &[0.0]);
        assert_eq!(summarize("x", &chains).rhat_status, RhatStatus::Unavailable);
    }

    #[test]
    fn independent_draws_have_full_ess() {
        let chains = normal_chains(3, 4, 1000, &[0.0]);
        let e = ess_mean(&chains).unwrap();
        assert!((3000.0..5500.0).contains(&e), "{e}");
        let b = ess_bulk(&chains).unwrap();
        assert!((3000.0..5500.0).contains(&b), "{b}");
    }

    #[test]
    fn autocorrelated_draws_have_reduced_ess() {
        // AR(1) with phi = 0.9 has ESS ≈ n (1 - phi) / (1 + phi).
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..4000)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + z;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess_mean(&chains).unwrap();
        let expected = 16000.0 * 0.1 / 1.9;
        assert!((e / expected - 1.0).abs() < 0.3, "{e} vs {expected}");
    }
}
