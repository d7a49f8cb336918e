use sfpca::sampler::{self, diagnose_all, mcse_mean, LogDensity, SamplerConfig};
use sfpca::Result;

struct Gaussian {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl LogDensity for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut lp = 0.0;
        for i in 0..x.len() {
            let z = (x[i] - self.mean[i]) / self.sd[i];
            lp -= 0.5 * z * z;
            grad[i] = -z / self.sd[i];
        }
        Ok(lp)
    }
}

/// Bivariate normal with unit variances and correlation `rho`.
struct Correlated {
    rho: f64,
}

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = 1.0 - self.rho * self.rho;
        let q = (x[0] * x[0] - 2.0 * self.rho * x[0] * x[1] + x[1] * x[1]) / d;
        grad[0] = -(x[0] - self.rho * x[1]) / d;
        grad[1] = -(x[1] - self.rho * x[0]) / d;
        Ok(-0.5 * q)
    }
}

fn config(seed: u64, iters: usize) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup_iters: 1000,
        sampling_iters: iters,
        seed,
        ..SamplerConfig::default()
    }
}

fn squared_deviation_chains(chains: &[Vec<f64>], center: f64) -> Vec<Vec<f64>> {
    chains
        .iter()
        .map(|c| c.iter().map(|v| (v - center).powi(2)).collect())
        .collect()
}

#[test]
fn five_dimensional_standard_normal() {
    let target = Gaussian {
        mean: vec![0.0; 5],
        sd: vec![1.0; 5],
    };
    let out = sampler::sample(&target, &config(2024, 1000)).unwrap();
    for i in 0..5 {
        let chains = out.coordinate_chains(i);
        let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let mcse = mcse_mean(&chains).unwrap();
        assert!(mean.abs() < 3.0 * mcse, "coord {i}: mean {mean}, mcse {mcse}");
        let sq = squared_deviation_chains(&chains, 0.0);
        let pooled_sq: Vec<f64> = sq.iter().flatten().copied().collect();
        let var = pooled_sq.iter().sum::<f64>() / pooled_sq.len() as f64;
        assert!((var - 1.0).abs() < 0.1, "coord {i}: variance {var}");
    }
    let names: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
    let report = diagnose_all(&out, &names);
    assert!(report.max_rhat.unwrap() < 1.01, "{:?}", report.max_rhat);
    assert_eq!(report.divergent, 0);
}

#[test]
fn shifted_scaled_normal() {
    let target = Gaussian {
        mean: vec![10.0],
        sd: vec![2.0],
    };
    let out = sampler::sample(&target, &config(99, 1000)).unwrap();
    let chains = out.coordinate_chains(0);
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let mcse = mcse_mean(&chains).unwrap();
    assert!((mean - 10.0).abs() < 3.0 * mcse, "mean {mean} mcse {mcse}");
    let sq = squared_deviation_chains(&chains, 10.0);
    let var = sq.iter().flatten().sum::<f64>() / n;
    let var_mcse = mcse_mean(&sq).unwrap();
    assert!((var - 4.0).abs() < 3.0 * var_mcse, "var {var} mcse {var_mcse}");
}

#[test]
fn correlated_covariance_converges() {
    let target = Correlated { rho: 0.8 };
    let cov_error = |iters: usize| {
        let out = sampler::sample(&target, &config(5, iters)).unwrap();
        let draws: Vec<&[f64]> = out.iter_draws().collect();
        let n = draws.len() as f64;
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        for d in &draws {
            s00 += d[0] * d[0];
            s01 += d[0] * d[1];
            s11 += d[1] * d[1];
        }
        ((s00 / n - 1.0).abs()).max((s01 / n - 0.8).abs()).max((s11 / n - 1.0).abs())
    };
    let coarse = cov_error(100);
    let fine = cov_error(4000);
    assert!(fine < 0.05, "fine error {fine}");
    assert!(fine <= coarse + 0.01, "coarse {coarse}, fine {fine}");
}

#[test]
fn draws_are_bit_identical_for_a_seed() {
    let target = Gaussian {
        mean: vec![1.0, 2.0, 3.0],
        sd: vec![0.5, 1.0, 4.0],
    };
    let cfg = SamplerConfig {
        warmup_iters: 200,
        sampling_iters: 100,
        ..config(17, 100)
    };
    let a = sampler::sample(&target, &cfg).unwrap();
    let b = sampler::sample(&target, &cfg).unwrap();
    let bits = |o: &sampler::SampleOutput| -> Vec<u64> { o.iter_draws().flatten().map(|v| v.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
}
