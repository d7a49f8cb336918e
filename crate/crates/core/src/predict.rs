//! Posterior predictive replication, fitted curves and subject trajectories.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, Standardization, TimeScale};
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rotate::RotatedDraws;
use crate::spline::{quantile_sorted, uniform_grid, OrthonormalBasis};

pub const KDE_GRID_POINTS: usize = 512;
pub const DEFAULT_REPLICATES: usize = 100;

/// Silverman's rule of thumb `0.9 min(sd, IQR / 1.34) n^{-1/5}`.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 1.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut spread = sd.min(iqr / 1.34);
    if !(spread > 0.0) {
        spread = if sd > 0.0 { sd } else if sorted[0] != 0.0 { sorted[0].abs() } else { 1.0 };
    }
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian kernel density of `x` with bandwidth `bw`, evaluated on `grid`.
pub fn kde(x: &[f64], bw: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (x.len() as f64 * bw * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|g| x.iter().map(|v| (-0.5 * ((g - v) / bw).powi(2)).exp()).sum::<f64>() * norm)
        .collect()
}

/// Trapezoid integral of `f` over `grid`.
pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcBundle {
    pub grid: Vec<f64>,
    pub observed: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
    /// Posterior draw behind each replicate.
    pub draw_indices: Vec<usize>,
}

impl PpcBundle {
    pub fn n_replicates(&self) -> usize {
        self.replicates.len()
    }

    /// Fraction of grid points where the observed density lies within the
    /// pointwise min-max envelope of the replicate densities.
    pub fn envelope_coverage(&self) -> f64 {
        let inside = (0..self.grid.len())
            .filter(|&g| {
                let (lo, hi) = self
                    .replicates
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[g]), hi.max(r[g])));
                self.observed[g] >= lo && self.observed[g] <= hi
            })
            .count();
        inside as f64 / self.grid.len() as f64
    }

    /// `grid,observed,rep_1..rep_R`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["grid".to_string(), "observed".to_string()];
        header.extend((1..=self.replicates.len()).map(|r| format!("rep_{r}")));
        w.write_record(&header)?;
        for g in 0..self.grid.len() {
            let mut row = vec![self.grid[g].to_string(), self.observed[g].to_string()];
            row.extend(self.replicates.iter().map(|r| r[g].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<ppc writer>", e))?;
        Ok(())
    }
}

/// `R` evenly strided draw indices out of `S`.
pub fn strided_indices(s: usize, r: usize) -> Vec<usize> {
    (0..r).map(|j| j * s / r).collect()
}

/// Simulates one replicate dataset's pooled values from draw `p`.
fn simulate_values(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    p: &crate::model::ParameterVector,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sigma = p.sigma();
    let mut out = Vec::with_capacity(data.n_total());
    for i in 0..data.n_subjects() {
        let coef = p.subject_coefficients(i);
        let b = spec.design(i);
        for r in 0..b.nrows() {
            let m: f64 = (0..coef.len()).map(|a| b[(r, a)] * coef[a]).sum();
            let e: f64 = rng.sample(StandardNormal);
            out.push(m + sigma * e);
        }
    }
    out
}

/// Posterior predictive replicates at the observed design points, each
/// summarized by a kernel density on a grid shared with the observed data.
///
/// The grid has 512 points and spans the pooled range of the observed and
/// replicated values padded by three of the largest bandwidths, so every
/// density integrates to one on it.
pub fn replicate(
    draws: &PosteriorDraws,
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    r: usize,
    seed: u64,
) -> Result<PpcBundle> {
    let s = draws.len();
    if r == 0 || r > s {
        return Err(Error::Config(format!("replicate count {r} must be between 1 and the {s} posterior draws")));
    }
    let draw_indices = strided_indices(s, r);
    let reps: Vec<Vec<f64>> = draw_indices
        .par_iter()
        .enumerate()
        .map(|(j, &d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            simulate_values(spec, data, draws.get(d), &mut rng)
        })
        .collect();
    let observed = data.pooled_values();
    Ok(density_bundle(&observed, &reps, draw_indices))
}

/// Densities of `observed` and each replicate on one common grid.
pub fn density_bundle(observed: &[f64], replicates: &[Vec<f64>], draw_indices: Vec<usize>) -> PpcBundle {
    let bw_obs = silverman_bandwidth(observed);
    let bws: Vec<f64> = replicates.iter().map(|r| silverman_bandwidth(r)).collect();
    let max_bw = bws.iter().copied().fold(bw_obs, f64::max);
    let (lo, hi) = observed
        .iter()
        .chain(replicates.iter().flatten())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let (lo, hi) = (lo - 3.0 * max_bw, hi + 3.0 * max_bw);
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|g| lo + (hi - lo) * g as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    PpcBundle {
        observed: kde(observed, bw_obs, &grid),
        replicates: replicates.par_iter().zip(&bws).map(|(r, &bw)| kde(r, bw, &grid)).collect(),
        grid,
        draw_indices,
    }
}

/// Pointwise posterior summary of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    /// Summarizes `values[s][g]` (draw `s`, grid point `g`) with 2.5 / 50 / 97.5% quantiles.
    pub fn from_draws(values: &[Vec<f64>]) -> Self {
        let g = values.first().map_or(0, Vec::len);
        let mut band = Band {
            mean: Vec::with_capacity(g),
            median: Vec::with_capacity(g),
            lower: Vec::with_capacity(g),
            upper: Vec::with_capacity(g),
        };
        let mut col = Vec::with_capacity(values.len());
        for j in 0..g {
            col.clear();
            col.extend(values.iter().map(|v| v[j]));
            col.sort_by(f64::total_cmp);
            band.mean.push(col.iter().sum::<f64>() / col.len() as f64);
            band.median.push(quantile_sorted(&col, 0.5));
            band.lower.push(quantile_sorted(&col, 0.025));
            band.upper.push(quantile_sorted(&col, 0.975));
        }
        band
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Fraction of points where `truth` lies inside `[lower, upper]`.
    pub fn coverage(&self, truth: &[f64]) -> f64 {
        let inside = truth
            .iter()
            .enumerate()
            .filter(|(g, t)| **t >= self.lower[*g] && **t <= self.upper[*g])
            .count();
        inside as f64 / truth.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCurve {
    pub band: Band,
    /// SD across subjects of the posterior-mean scores.
    pub score_sd: f64,
    /// Posterior mean curve plus / minus `score_sd` times the component.
    pub plus_sd: Vec<f64>,
    pub minus_sd: Vec<f64>,
}

/// Fitted curves on the original outcome scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    /// Grid on the model's [0, 1] time axis.
    pub grid: Vec<f64>,
    /// The same grid on the original time axis.
    pub time: Vec<f64>,
    pub mean: Band,
    pub components: Vec<ComponentCurve>,
}

impl CurveSet {
    /// `t,time,mean,median,lower,upper`.
    pub fn write_mean_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "time", "mean", "median", "lower", "upper"])?;
        for g in 0..self.grid.len() {
            let b = &self.mean;
            w.write_record(
                [self.grid[g], self.time[g], b.mean[g], b.median[g], b.lower[g], b.upper[g]].map(|v| v.to_string()),
            )?;
        }
        w.flush().map_err(|e| Error::io("<curve writer>", e))?;
        Ok(())
    }

    /// `component,t,time,mean,median,lower,upper,plus_sd,minus_sd`.
    pub fn write_components_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["component", "t", "time", "mean", "median", "lower", "upper", "plus_sd", "minus_sd"])?;
        for (j, c) in self.components.iter().enumerate() {
            let b = &c.band;
            for g in 0..self.grid.len() {
                let mut row = vec![(j + 1).to_string()];
                row.extend(
                    [
                        self.grid[g],
                        self.time[g],
                        b.mean[g],
                        b.median[g],
                        b.lower[g],
                        b.upper[g],
                        c.plus_sd[g],
                        c.minus_sd[g],
                    ]
                    .map(|v| v.to_string()),
                );
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io("<curve writer>", e))?;
        Ok(())
    }
}

/// Population mean and component curves with pointwise 95% bands.
///
/// Curves are mapped back to the outcome scale: the mean curve as
/// `mean + sd · b(t)ᵀθ_μ`, components (deviations) as `sd · b(t)ᵀΘ*_j`.
pub fn fitted_curves(
    draws: &RotatedDraws,
    basis: &OrthonormalBasis,
    standardization: &Standardization,
    time_scale: &TimeScale,
    grid_size: usize,
) -> Result<CurveSet> {
    if draws.is_empty() {
        return Err(Error::Spec("no rotated draws to summarize".into()));
    }
    let grid = uniform_grid(grid_size);
    let b = basis.evaluate(&grid)?;
    let k = draws.k();
    let mean_draws: Vec<Vec<f64>> = draws
        .theta_mu
        .iter()
        .map(|t| {
            let v = &b * nalgebra::DVector::from_column_slice(t);
            v.iter().map(|z| standardization.inverse(*z)).collect()
        })
        .collect();
    let mean = Band::from_draws(&mean_draws);
    let (score_mean, _) = draws.score_summary();
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let comp_draws: Vec<Vec<f64>> = draws
            .draws
            .iter()
            .map(|d| {
                let v = &b * d.theta_star.column(j);
                v.iter().map(|z| standardization.inverse_deviation(*z)).collect()
            })
            .collect();
        let band = Band::from_draws(&comp_draws);
        let score_sd = column_sd(&score_mean, j);
        let plus_sd = mean.mean.iter().zip(&band.mean).map(|(m, f)| m + score_sd * f).collect();
        let minus_sd = mean.mean.iter().zip(&band.mean).map(|(m, f)| m - score_sd * f).collect();
        components.push(ComponentCurve {
            band,
            score_sd,
            plus_sd,
            minus_sd,
        });
    }
    Ok(CurveSet {
        time: grid.iter().map(|t| time_scale.to_original(*t)).collect(),
        grid,
        mean,
        components,
    })
}

fn column_sd(m: &DMatrix<f64>, j: usize) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let col = m.column(j);
    let mean = col.mean();
    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
}

/// `subject,component,mean,sd` from the rotated score draws.
pub fn write_scores_csv<W: Write>(draws: &RotatedDraws, subject_ids: &[String], writer: W) -> Result<()> {
    let (mean, sd) = draws.score_summary();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "component", "mean", "sd"])?;
    for (i, id) in subject_ids.iter().enumerate().take(mean.nrows()) {
        for j in 0..mean.ncols() {
            w.write_record([id.clone(), (j + 1).to_string(), mean[(i, j)].to_string(), sd[(i, j)].to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<scores writer>", e))?;
    Ok(())
}

/// A subject's predicted curve with its observations, on the original scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub subject: String,
    pub grid: Vec<f64>,
    pub time: Vec<f64>,
    pub band: Band,
    pub with_noise: bool,
    pub observed_time: Vec<f64>,
    pub observed_value: Vec<f64>,
}

impl Trajectory {
    /// Curve rows (`kind = fit`) followed by observation rows (`kind = obs`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kind", "time", "value", "lower", "upper"])?;
        for g in 0..self.grid.len() {
            w.write_record([
                "fit".to_string(),
                self.time[g].to_string(),
                self.band.median[g].to_string(),
                self.band.lower[g].to_string(),
                self.band.upper[g].to_string(),
            ])?;
        }
        for (t, y) in self.observed_time.iter().zip(&self.observed_value) {
            w.write_record(["obs".to_string(), t.to_string(), y.to_string(), String::new(), String::new()])?;
        }
        w.flush().map_err(|e| Error::io("<trajectory writer>", e))?;
        Ok(())
    }
}

/// Posterior 2.5 / 50 / 97.5% quantiles of `b(t)ᵀ(θ_μ + Θα_i)` on `grid`.
/// With `with_noise` each draw's curve gets independent N(0, σ²) noise,
/// giving a band for new observations instead of the curve.
#[allow(clippy::too_many_arguments)]
pub fn subject_trajectory(
    draws: &PosteriorDraws,
    basis: &OrthonormalBasis,
    data: &LongitudinalDataset,
    standardization: &Standardization,
    subject_id: &str,
    grid: &[f64],
    with_noise: bool,
    seed: u64,
) -> Result<Trajectory> {
    let i = data
        .subject_index(subject_id)
        .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))?;
    let b = basis.evaluate(grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves: Vec<Vec<f64>> = draws
        .draws()
        .iter()
        .map(|p| {
            let coef = nalgebra::DVector::from_vec(p.subject_coefficients(i));
            let v = &b * coef;
            v.iter()
                .map(|z| {
                    let noise = if with_noise {
                        p.sigma() * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    standardization.inverse(z + noise)
                })
                .collect()
        })
        .collect();
    let subject = &data.subjects()[i];
    let ts = data.time_scale();
    Ok(Trajectory {
        subject: subject_id.to_string(),
        grid: grid.to_vec(),
        time: grid.iter().map(|t| ts.to_original(*t)).collect(),
        band: Band::from_draws(&curves),
        with_noise,
        observed_time: subject.times.iter().map(|t| ts.to_original(*t)).collect(),
        observed_value: subject.values.iter().map(|y| standardization.inverse(*y)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kde_integrates_to_one() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let b = density_bundle(&x, &[x.iter().map(|v| v * 1.1).collect()], vec![0]);
        assert!((trapezoid(&b.grid, &b.observed) - 1.0).abs() < 1e-3);
        assert!((trapezoid(&b.grid, &b.replicates[0]) - 1.0).abs() < 1e-3);
        assert_eq!(b.grid.len(), KDE_GRID_POINTS);
    }

    #[test]
    fn bandwidth_matches_rule_of_thumb() {
        // sd of 1..=5 is 1.5811, IQR is 2 -> min is 1.4925.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let expected = 0.9 * (2.0f64 / 1.34) * 5f64.powf(-0.2);
        assert!((silverman_bandwidth(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn observed_as_replicates_is_fully_covered() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let b = density_bundle(&x, &[x.clone(), x.clone()], vec![0, 1]);
        assert_eq!(b.envelope_coverage(), 1.0);
        assert!(b.replicates.iter().all(|r| r == &b.observed));
    }

    #[test]
    fn strides_are_even() {
        assert_eq!(strided_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(strided_indices(4, 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn band_orders_quantiles() {
        let values: Vec<Vec<f64>> = (0..101).map(|s| vec![s as f64, -(s as f64)]).collect();
        let b = Band::from_draws(&values);
        assert_eq!(b.median, vec![50.0, -50.0]);
        for g in 0..2 {
            assert!(b.lower[g] <= b.median[g] && b.median[g] <= b.upper[g]);
        }
    }
}
