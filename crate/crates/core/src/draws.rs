//! Posterior draws of the SFPCA model and their CSV persistence.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::model::{ScaledPosterior, ModelSpec, ParameterLayout, ParameterVector};
use crate::sampler::{self, SampleOutput, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chain: usize,
    pub draws: usize,
    pub mean_accept_stat: f64,
    pub divergent: usize,
    pub treedepth_saturated: usize,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    layout: ParameterLayout,
    draws: Vec<ParameterVector>,
    chain: Vec<usize>,
    log_posterior: Vec<f64>,
    chains: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn from_output(layout: ParameterLayout, output: &SampleOutput) -> Result<Self> {
        if output.dim != layout.dim() {
            return Err(Error::Spec(format!(
                "sampler dimension {} does not match layout dimension {}",
                output.dim,
                layout.dim()
            )));
        }
        let mut draws = Vec::with_capacity(output.n_draws());
        let mut chain = Vec::with_capacity(output.n_draws());
        let mut log_posterior = Vec::with_capacity(output.n_draws());
        for c in &output.chains {
            for s in 0..c.n_draws() {
                draws.push(ParameterVector::unpack(layout, c.draw(s))?);
                chain.push(c.chain);
                log_posterior.push(c.log_density[s]);
            }
        }
        let chains = output
            .chains
            .iter()
            .map(|c| ChainStats {
                chain: c.chain,
                draws: c.n_draws(),
                mean_accept_stat: c.mean_accept_stat(),
                divergent: c.n_divergent(),
                treedepth_saturated: c.n_max_treedepth(),
                step_size: c.step_size,
            })
            .collect();
        let out = PosteriorDraws {
            layout,
            draws,
            chain,
            log_posterior,
            chains,
        };
        out.validate()?;
        Ok(out)
    }

    /// Builds draws directly from parameter vectors (single pseudo-chain).
    pub fn from_parameters(layout: ParameterLayout, draws: Vec<ParameterVector>) -> Result<Self> {
        let n = draws.len();
        let out = PosteriorDraws {
            layout,
            chain: vec![0; n],
            log_posterior: vec![f64::NAN; n],
            chains: vec![ChainStats {
                chain: 0,
                draws: n,
                mean_accept_stat: f64::NAN,
                divergent: 0,
                treedepth_saturated: 0,
                step_size: f64::NAN,
            }],
            draws,
        };
        out.validate()?;
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        for (s, d) in self.draws.iter().enumerate() {
            if d.layout() != self.layout {
                return Err(Error::Spec(format!("draw {s} has a mismatched layout")));
            }
            if d.pack().iter().any(|v| !v.is_finite()) || !(d.sigma() > 0.0) {
                return Err(Error::Evaluation(format!("draw {s} is not finite")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> ParameterLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draws(&self) -> &[ParameterVector] {
        &self.draws
    }

    pub fn get(&self, s: usize) -> &ParameterVector {
        &self.draws[s]
    }

    pub fn chain_of(&self, s: usize) -> usize {
        self.chain[s]
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_posterior
    }

    pub fn chain_stats(&self) -> &[ChainStats] {
        &self.chains
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Per-chain sequences of a scalar function of the draws.
    pub fn by_chain(&self, f: impl Fn(&ParameterVector) -> f64) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new(); self.chains.len()];
        let index_of = |chain: usize| self.chains.iter().position(|c| c.chain == chain).unwrap_or(0);
        for (d, &c) in self.draws.iter().zip(&self.chain) {
            out[index_of(c)].push(f(d));
        }
        out
    }

    /// CSV with columns `chain,draw,lp__` followed by the packed parameters.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "draw".to_string(), "lp__".to_string()];
        header.extend(self.layout.names());
        w.write_record(&header)?;
        let mut within = vec![0usize; self.chains.iter().map(|c| c.chain + 1).max().unwrap_or(1)];
        for ((d, &c), lp) in self.draws.iter().zip(&self.chain).zip(&self.log_posterior) {
            let mut row = vec![c.to_string(), within[c].to_string(), lp.to_string()];
            within[c] += 1;
            row.extend(d.pack().iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<draws writer>", e))?;
        Ok(())
    }

    /// Reads a draw file written by [`write_csv`](Self::write_csv). Chain
    /// statistics other than draw counts are not stored in the file and come
    /// back as NaN / zero.
    pub fn read_csv<R: Read>(layout: ParameterLayout, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let expected = 3 + layout.dim();
        let header = rdr.headers()?.clone();
        if header.len() != expected {
            return Err(Error::Format(format!(
                "draw file has {} columns, layout needs {expected}",
                header.len()
            )));
        }
        let mut draws = Vec::new();
        let mut chain = Vec::new();
        let mut lp = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec[j].parse::<f64>().map_err(|e| Error::Parse {
                    row: i + 2,
                    message: format!("column {j}: {e}"),
                })
            };
            chain.push(rec[0].parse::<usize>().map_err(|e| Error::Parse {
                row: i + 2,
                message: format!("chain: {e}"),
            })?);
            lp.push(parse(2)?);
            let packed = (3..expected).map(parse).collect::<Result<Vec<f64>>>()?;
            draws.push(ParameterVector::unpack(layout, &packed)?);
        }
        let mut ids: Vec<usize> = chain.clone();
        ids.sort_unstable();
        ids.dedup();
        let chains = ids
            .iter()
            .map(|&c| ChainStats {
                chain: c,
                draws: chain.iter().filter(|x| **x == c).count(),
                mean_accept_stat: f64::NAN,
                divergent: 0,
                treedepth_saturated: 0,
                step_size: f64::NAN,
            })
            .collect();
        let out = PosteriorDraws {
            layout,
            draws,
            chain,
            log_posterior: lp,
            chains,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Samples the (unidentified) SFPCA posterior. The sampler runs in the
/// coordinates of [`ScaledPosterior`]; stored draws and log densities are
/// mapped back to the model parameters.
pub fn sample_posterior(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    config: &SamplerConfig,
) -> Result<(PosteriorDraws, SampleOutput)> {
    let target = ScaledPosterior::new(spec, data)?;
    let mut output = sampler::sample(&target, config)?;
    let layout = spec.layout();
    for chain in &mut output.chains {
        let dim = chain.dim;
        for (u, lp) in chain.draws.chunks_mut(dim).zip(chain.log_density.iter_mut()) {
            *lp -= ScaledPosterior::log_jacobian(layout, u);
            let x = ScaledPosterior::to_model(layout, u);
            u.copy_from_slice(&x);
        }
    }
    let draws = PosteriorDraws::from_output(spec.layout(), &output)?;
    Ok((draws, output))
}

/// Convergence report on identified quantities: `θ_μ`, `log σ`, the
/// eigenvalues of `ΘᵀΘ` (invariant to the loading rotation) and `lp__`.
/// Raw loadings and scores are not monitored since they are unidentified.
pub fn fit_diagnostics(draws: &PosteriorDraws, output: &SampleOutput) -> sampler::ConvergenceReport {
    let layout = draws.layout();
    let mut quantities: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for a in 0..layout.q {
        quantities.push((format!("theta_mu[{a}]"), draws.by_chain(|p| p.theta_mu[a])));
    }
    quantities.push(("log_sigma".into(), draws.by_chain(|p| p.log_sigma)));
    for j in 0..layout.k {
        quantities.push((
            format!("lambda[{j}]"),
            draws.by_chain(|p| sorted_gram_eigenvalues(&p.theta)[j]),
        ));
    }
    quantities.push(("lp__".into(), output.chains.iter().map(|c| c.log_density.clone()).collect()));
    sampler::diagnose(output, &quantities)
}

fn sorted_gram_eigenvalues(theta: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let gram = theta.transpose() * theta;
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}
