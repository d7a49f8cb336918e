//! Hamiltonian Monte Carlo with No-U-Turn trajectory termination.
//!
//! Multinomial NUTS on a diagonal Euclidean metric, with dual-averaging step
//! size adaptation and windowed variance estimation during warmup. Chains run
//! independently and each owns a ChaCha stream derived from `(seed, chain)`,
//! so results do not depend on how chains are scheduled.

mod adapt;
pub mod diagnostics;
mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diagnostics::{
    diagnose, diagnose_all, ess_bulk, ess_mean, mcse_mean, split_rhat, summarize, ConvergenceReport,
    ParameterSummary, RhatStatus,
};
pub use nuts::{leapfrog, PhasePoint};

/// A differentiable log density on ℝ^d.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes ∇ log p(x) into `grad` and returns log p(x).
    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.log_density_and_gradient(x, &mut g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub target_accept: f64,
    pub max_treedepth: u32,
    pub seed: u64,
    /// Step size and metric adaptation during warmup.
    pub adapt: bool,
    /// Initial values are drawn uniformly from (-init_radius, init_radius).
    pub init_radius: f64,
    pub max_init_tries: usize,
    /// Compare the gradient against central differences at the first
    /// initialization point before sampling.
    pub check_gradient: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup_iters: 1000,
            sampling_iters: 1000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 0,
            adapt: true,
            init_radius: 2.0,
            max_init_tries: 100,
            check_gradient: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("at least one chain is required".into()));
        }
        if self.sampling_iters == 0 {
            return Err(Error::Config("sampling_iters must be at least 1".into()));
        }
        if self.adapt && self.warmup_iters < 150 {
            return Err(Error::Config(format!(
                "adaptation needs at least 150 warmup iterations, got {}",
                self.warmup_iters
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept must lie in (0, 1), got {}",
                self.target_accept
            )));
        }
        if self.max_treedepth == 0 {
            return Err(Error::Config("max_treedepth must be at least 1".into()));
        }
        if !(self.init_radius > 0.0) {
            return Err(Error::Config("init_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn chain_rng(&self, chain: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chain as u64);
        rng
    }
}

/// Retained draws and per-iteration statistics of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    pub dim: usize,
    /// `sampling_iters × dim`, row-major.
    pub draws: Vec<f64>,
    pub log_density: Vec<f64>,
    pub accept_stat: Vec<f64>,
    pub treedepth: Vec<u32>,
    pub n_leapfrog: Vec<u32>,
    pub divergent: Vec<bool>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
    pub max_treedepth: u32,
}

impl ChainOutput {
    pub fn n_draws(&self) -> usize {
        self.log_density.len()
    }

    pub fn draw(&self, iter: usize) -> &[f64] {
        &self.draws[iter * self.dim..(iter + 1) * self.dim]
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    pub fn n_max_treedepth(&self) -> usize {
        self.treedepth.iter().filter(|d| **d >= self.max_treedepth).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        self.accept_stat.iter().sum::<f64>() / self.accept_stat.len().max(1) as f64
    }

    /// Draws of a single coordinate.
    pub fn coordinate(&self, index: usize) -> Vec<f64> {
        self.draws.iter().skip(index).step_by(self.dim).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub dim: usize,
    pub chains: Vec<ChainOutput>,
}

impl SampleOutput {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, ChainOutput::n_draws)
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainOutput::n_draws).sum()
    }

    /// Draws in chain-major order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.chains
            .iter()
            .flat_map(|c| (0..c.n_draws()).map(move |s| c.draw(s)))
    }

    /// One coordinate, split by chain.
    pub fn coordinate_chains(&self, index: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.coordinate(index)).collect()
    }

    pub fn n_divergent(&self) -> usize {
        self.chains.iter().map(ChainOutput::n_divergent).sum()
    }

    pub fn divergence_rate(&self) -> f64 {
        self.n_divergent() as f64 / self.n_draws().max(1) as f64
    }

    pub fn n_max_treedepth(&self) -> usize {
        self.chains.iter().map(ChainOutput::n_max_treedepth).sum()
    }

    /// Warning emitted when more than 10% of post-warmup transitions diverged.
    pub fn divergence_warning(&self) -> Option<String> {
        let rate = self.divergence_rate();
        (rate > 0.1).then(|| {
            format!(
                "{} of {} post-warmup transitions diverged ({:.1}%)",
                self.n_divergent(),
                self.n_draws(),
                100.0 * rate
            )
        })
    }
}

/// Runs `config.chains` independent NUTS chains on `target`.
pub fn sample<T: LogDensity>(target: &T, config: &SamplerConfig) -> Result<SampleOutput> {
    sample_from(target, config, None)
}

/// As [`sample`], optionally starting every chain from `init` instead of a
/// random point.
pub fn sample_from<T: LogDensity>(target: &T, config: &SamplerConfig, init: Option<&[f64]>) -> Result<SampleOutput> {
    config.validate()?;
    let dim = target.dim();
    if let Some(x) = init {
        if x.len() != dim {
            return Err(Error::Config(format!(
                "initial point has length {} but the target has dimension {dim}",
                x.len()
            )));
        }
    }
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(target, config, c, init))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput { dim, chains })
}

fn run_chain<T: LogDensity>(target: &T, config: &SamplerConfig, chain: usize, init: Option<&[f64]>) -> Result<ChainOutput> {
    let mut rng = config.chain_rng(chain);
    let start = initialize(target, config, &mut rng, init)?;
    if config.check_gradient && chain == 0 {
        check_gradient(target, &start.x)?;
    }
    let mut sampler = nuts::Nuts::new(target, start, config.max_treedepth);
    let mut adaptation = adapt::Adaptation::new(target.dim(), config.warmup_iters, config.target_accept);

    if config.adapt {
        sampler.init_step_size(&mut rng);
        adaptation.set_mu(sampler.step_size());
    }
    for _ in 0..config.warmup_iters {
        let t = sampler.transition(&mut rng);
        if config.adapt {
            let eps = adaptation.learn_step_size(t.accept_stat);
            sampler.set_step_size(eps);
            if adaptation.learn_variance(&sampler.current().x) {
                sampler.set_inv_metric(adaptation.inv_metric().to_vec());
                sampler.init_step_size(&mut rng);
                adaptation.set_mu(sampler.step_size());
                adaptation.restart_step_size();
            }
        }
    }
    if config.adapt {
        sampler.set_step_size(adaptation.final_step_size());
    }

    let dim = target.dim();
    let n = config.sampling_iters;
    let mut out = ChainOutput {
        chain,
        dim,
        draws: Vec::with_capacity(n * dim),
        log_density: Vec::with_capacity(n),
        accept_stat: Vec::with_capacity(n),
        treedepth: Vec::with_capacity(n),
        n_leapfrog: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        step_size: sampler.step_size(),
        inv_metric: sampler.inv_metric().to_vec(),
        max_treedepth: config.max_treedepth,
    };
    for _ in 0..n {
        let t = sampler.transition(&mut rng);
        let current = sampler.current();
        out.draws.extend_from_slice(&current.x);
        out.log_density.push(current.log_density);
        out.accept_stat.push(t.accept_stat);
        out.treedepth.push(t.depth);
        out.n_leapfrog.push(t.n_leapfrog);
        out.divergent.push(t.divergent);
    }
    Ok(out)
}

fn initialize<T: LogDensity>(
    target: &T,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
    init: Option<&[f64]>,
) -> Result<PhasePoint> {
    let dim = target.dim();
    if let Some(x) = init {
        return PhasePoint::at(target, x.to_vec())
            .ok_or_else(|| Error::Initialization("density is not finite at the supplied initial point".into()));
    }
    let r = config.init_radius;
    for _ in 0..config.max_init_tries.max(1) {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..r)).collect();
        if let Some(point) = PhasePoint::at(target, x) {
            return Ok(point);
        }
    }
    Err(Error::Initialization(format!(
        "no finite log density after {} random initializations",
        config.max_init_tries
    )))
}

/// Central finite-difference check of the analytic gradient.
fn check_gradient<T: LogDensity>(target: &T, x: &[f64]) -> Result<()> {
    let dim = x.len();
    let mut grad = vec![0.0; dim];
    target.log_density_and_gradient(x, &mut grad)?;
    let mut probe = x.to_vec();
    for i in 0..dim {
        let h = 1e-5 * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = target.log_density(&probe)?;
        probe[i] = x[i] - h;
        let down = target.log_density(&probe)?;
        probe[i] = x[i];
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs()).max(1.0);
        if (fd - grad[i]).abs() > 1e-4 * scale {
            return Err(Error::Initialization(format!(
                "gradient self-test failed at coordinate {i}: analytic {} vs finite difference {fd}",
                grad[i]
            )));
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_targets::DiagGaussian;
    use super::*;

    fn quick(seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: 2,
            warmup_iters: 200,
            sampling_iters: 200,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = quick(1);
        c.warmup_iters = 100;
        assert!(c.validate().is_err());
        c.adapt = false;
        assert!(c.validate().is_ok());
        c.target_accept = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn same_seed_same_draws() {
        let target = DiagGaussian {
            mean: vec![1.0, -2.0],
            sd: vec![1.0, 3.0],
        };
        let a = sample(&target, &quick(11)).unwrap();
        let b = sample(&target, &quick(11)).unwrap();
        assert_eq!(a, b);
        let c = sample(&target, &quick(12)).unwrap();
        assert_ne!(a.chains[0].draws, c.chains[0].draws);
    }

    #[test]
    fn chains_use_distinct_streams() {
        let target = DiagGaussian {
            mean: vec![0.0],
            sd: vec![1.0],
        };
        let out = sample(&target, &quick(3)).unwrap();
        assert_ne!(out.chains[0].draws, out.chains[1].draws);
        assert_eq!(out.n_draws(), 400);
        assert!(out.iter_draws().all(|d| d.iter().all(|v| v.is_finite())));
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }

        fn log_density_and_gradient(&self, _: &[f64], _: &mut [f64]) -> Result<f64> {
            Ok(f64::NEG_INFINITY)
        }
    }

    #[test]
    fn initialization_failure_is_reported() {
        let err = sample(&Nowhere, &quick(1)).unwrap_err();
        assert!(matches!(err, Error::Initialization(_)));
    }

    struct WrongGradient;

    impl LogDensity for WrongGradient {
        fn dim(&self) -> usize {
            2
        }

        fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = -x[0];
            g[1] = x[1];
            Ok(-0.5 * (x[0] * x[0] + x[1] * x[1]))
        }
    }

    #[test]
    fn gradient_self_test_catches_bugs() {
        let err = sample(&WrongGradient, &quick(1)).unwrap_err();
        assert!(matches!(err, Error::Initialization(ref m) if m.contains("gradient")));
    }
}
