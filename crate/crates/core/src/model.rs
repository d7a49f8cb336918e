//! The SFPCA posterior over an unconstrained parameter vector.
//!
//! Each standardized trajectory is modelled as
//! `y_i = B_i θ_μ + B_i Θ α_i + ε_i`, `ε_i ~ N(0, σ² I)`, with independent
//! standard normal priors on `θ_μ`, every column of `Θ` and every `α_i`, and a
//! half-Cauchy(0, 1) prior on `σ`. The sampler works on `log σ`, so the log
//! density carries the `+ log σ` Jacobian term.
//!
//! Packed layout: `θ_μ` (q), `Θ` column-major (q·k), `α` subject-major (N·k),
//! `log σ` (1).

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::sampler::LogDensity;
use crate::spline::OrthonormalBasis;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Offsets of each block inside the packed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub q: usize,
    pub k: usize,
    pub n_subjects: usize,
}

impl ParameterLayout {
    pub fn theta_mu(&self) -> std::ops::Range<usize> {
        0..self.q
    }

    pub fn theta(&self) -> std::ops::Range<usize> {
        self.q..self.q + self.q * self.k
    }

    pub fn alpha(&self) -> std::ops::Range<usize> {
        let start = self.q + self.q * self.k;
        start..start + self.n_subjects * self.k
    }

    pub fn log_sigma(&self) -> usize {
        self.q + self.q * self.k + self.n_subjects * self.k
    }

    pub fn dim(&self) -> usize {
        self.log_sigma() + 1
    }

    /// Column names in packed order, used as CSV headers for draw files.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        names.extend((0..self.q).map(|a| format!("theta_mu[{a}]")));
        for j in 0..self.k {
            names.extend((0..self.q).map(|a| format!("Theta[{a},{j}]")));
        }
        for i in 0..self.n_subjects {
            names.extend((0..self.k).map(|j| format!("alpha[{i},{j}]")));
        }
        names.push("log_sigma".into());
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub theta_mu: Vec<f64>,
    /// q × k loadings.
    pub theta: DMatrix<f64>,
    /// N × k scores, one row per subject.
    pub alpha: DMatrix<f64>,
    pub log_sigma: f64,
}

impl ParameterVector {
    pub fn zeros(layout: ParameterLayout) -> Self {
        ParameterVector {
            theta_mu: vec![0.0; layout.q],
            theta: DMatrix::zeros(layout.q, layout.k),
            alpha: DMatrix::zeros(layout.n_subjects, layout.k),
            log_sigma: 0.0,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout {
            q: self.theta_mu.len(),
            k: self.theta.ncols(),
            n_subjects: self.alpha.nrows(),
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.dim());
        out.extend_from_slice(&self.theta_mu);
        // nalgebra storage is column-major, which is the packed Θ order.
        out.extend(self.theta.iter().copied());
        for i in 0..layout.n_subjects {
            out.extend(self.alpha.row(i).iter().copied());
        }
        out.push(self.log_sigma);
        out
    }

    pub fn unpack(layout: ParameterLayout, packed: &[f64]) -> Result<Self> {
        if packed.len() != layout.dim() {
            return Err(Error::Spec(format!(
                "packed vector has length {} but the layout needs {}",
                packed.len(),
                layout.dim()
            )));
        }
        let (q, k, n) = (layout.q, layout.k, layout.n_subjects);
        Ok(ParameterVector {
            theta_mu: packed[layout.theta_mu()].to_vec(),
            theta: DMatrix::from_column_slice(q, k, &packed[layout.theta()]),
            alpha: DMatrix::from_row_slice(n, k, &packed[layout.alpha()]),
            log_sigma: packed[layout.log_sigma()],
        })
    }

    /// Subject mean coefficients `θ_μ + Θ α_i`.
    pub fn subject_coefficients(&self, i: usize) -> Vec<f64> {
        let (q, k) = (self.theta.nrows(), self.theta.ncols());
        (0..q)
            .map(|a| self.theta_mu[a] + (0..k).map(|j| self.theta[(a, j)] * self.alpha[(i, j)]).sum::<f64>())
            .collect()
    }
}

/// Row-major `n_i × q` design matrix for one subject.
#[derive(Debug, Clone, PartialEq)]
struct Design {
    n: usize,
    rows: Vec<f64>,
}

/// Model dimensions plus per-subject design matrices `B_i`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    k: usize,
    basis: Arc<OrthonormalBasis>,
    designs: Vec<Design>,
}

impl ModelSpec {
    pub fn new(k: usize, basis: Arc<OrthonormalBasis>, data: &LongitudinalDataset) -> Result<Self> {
        let q = basis.q();
        if k == 0 || k >= q {
            return Err(Error::Spec(format!(
                "number of components k = {k} must satisfy 1 <= k < q = {q}"
            )));
        }
        let mut designs = Vec::with_capacity(data.n_subjects());
        let mut row = vec![0.0; q];
        for s in data.subjects() {
            let mut rows = Vec::with_capacity(s.len() * q);
            for &t in &s.times {
                basis.row(t, &mut row)?;
                rows.extend_from_slice(&row);
            }
            designs.push(Design { n: s.len(), rows });
        }
        Ok(ModelSpec { k, basis, designs })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> usize {
        self.basis.q()
    }

    pub fn n_subjects(&self) -> usize {
        self.designs.len()
    }

    pub fn basis(&self) -> &Arc<OrthonormalBasis> {
        &self.basis
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout {
            q: self.q(),
            k: self.k,
            n_subjects: self.n_subjects(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// `B_i` as a dense matrix.
    pub fn design(&self, i: usize) -> DMatrix<f64> {
        let d = &self.designs[i];
        DMatrix::from_row_slice(d.n, self.q(), &d.rows)
    }

    fn check_data(&self, data: &LongitudinalDataset) -> Result<()> {
        if data.n_subjects() != self.designs.len() {
            return Err(Error::Spec(format!(
                "model built for {} subjects, data has {}",
                self.designs.len(),
                data.n_subjects()
            )));
        }
        for (i, (s, d)) in data.subjects().iter().zip(&self.designs).enumerate() {
            if s.len() != d.n {
                return Err(Error::Spec(format!(
                    "subject {i} has {} observations but its design has {} rows",
                    s.len(),
                    d.n
                )));
            }
        }
        Ok(())
    }

    fn check_params(&self, packed: &[f64]) -> Result<()> {
        if packed.len() != self.dim() {
            return Err(Error::Spec(format!(
                "parameter vector has length {} but the model needs {}",
                packed.len(),
                self.dim()
            )));
        }
        if let Some(pos) = packed.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!("parameter {pos} is not finite")));
        }
        Ok(())
    }

    /// Log density and gradient on the packed vector. `per_subject`, when
    /// given, receives each subject's log-likelihood.
    fn evaluate_packed(
        &self,
        data: &LongitudinalDataset,
        x: &[f64],
        mut grad: Option<&mut [f64]>,
        mut per_subject: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_params(x)?;
        let layout = self.layout();
        let (q, k) = (layout.q, layout.k);
        let theta_mu = &x[layout.theta_mu()];
        let theta = &x[layout.theta()];
        let alpha = &x[layout.alpha()];
        let log_sigma = x[layout.log_sigma()];
        let sigma2 = (2.0 * log_sigma).exp();
        let inv_s2 = (-2.0 * log_sigma).exp();

        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut m = vec![0.0; q];
        let mut gi = vec![0.0; q];
        let mut total = 0.0;
        let mut g_log_sigma = 0.0;
        for (i, (design, subject)) in self.designs.iter().zip(data.subjects()).enumerate() {
            let a_i = &alpha[i * k..(i + 1) * k];
            for a in 0..q {
                let mut v = theta_mu[a];
                for j in 0..k {
                    v += theta[j * q + a] * a_i[j];
                }
                m[a] = v;
            }
            gi.iter_mut().for_each(|v| *v = 0.0);
            let mut ss = 0.0;
            for (r, &y) in subject.values.iter().enumerate() {
                let b = &design.rows[r * q..(r + 1) * q];
                let fitted: f64 = b.iter().zip(&m).map(|(bb, mm)| bb * mm).sum();
                let res = y - fitted;
                ss += res * res;
                for a in 0..q {
                    gi[a] += res * b[a];
                }
            }
            let n = design.n as f64;
            let ll = -n * (HALF_LOG_2PI + log_sigma) - 0.5 * ss * inv_s2;
            total += ll;
            if let Some(ps) = per_subject.as_deref_mut() {
                ps[i] = ll;
            }
            if let Some(g) = grad.as_deref_mut() {
                for v in gi.iter_mut() {
                    *v *= inv_s2;
                }
                for a in 0..q {
                    g[a] += gi[a];
                }
                let g_theta = &mut g[layout.theta()];
                for j in 0..k {
                    for a in 0..q {
                        g_theta[j * q + a] += gi[a] * a_i[j];
                    }
                }
                let g_alpha = &mut g[layout.alpha()][i * k..(i + 1) * k];
                for j in 0..k {
                    g_alpha[j] = (0..q).map(|a| theta[j * q + a] * gi[a]).sum();
                }
                g_log_sigma += -n + ss * inv_s2;
            }
        }

        total += log_prior_terms(x, layout);
        if let Some(g) = grad {
            for (gv, xv) in g[..layout.log_sigma()].iter_mut().zip(x) {
                *gv -= xv;
            }
            g[layout.log_sigma()] = g_log_sigma - 2.0 * sigma2 / (1.0 + sigma2) + 1.0;
        }
        if !total.is_finite() {
            return Err(Error::Evaluation(format!("log density is {total}")));
        }
        Ok(total)
    }
}

/// Log prior of every block plus the log-σ Jacobian.
fn log_prior_terms(x: &[f64], layout: ParameterLayout) -> f64 {
    let gaussian = &x[..layout.log_sigma()];
    let normal = -(gaussian.len() as f64) * HALF_LOG_2PI - 0.5 * gaussian.iter().map(|v| v * v).sum::<f64>();
    let log_sigma = x[layout.log_sigma()];
    normal + log_half_cauchy(log_sigma.exp()) + log_sigma
}

/// Half-Cauchy(0, 1) log density on σ > 0.
pub fn log_half_cauchy(sigma: f64) -> f64 {
    (2.0 / PI).ln() - (sigma * sigma).ln_1p()
}

/// Log joint density (likelihood + priors + Jacobian) at `p`.
pub fn log_posterior(spec: &ModelSpec, p: &ParameterVector, data: &LongitudinalDataset) -> Result<f64> {
    spec.check_data(data)?;
    check_layout(spec, p)?;
    spec.evaluate_packed(data, &p.pack(), None, None)
}

/// Exact gradient of [`log_posterior`] with respect to the packed vector,
/// returned in unpacked form.
pub fn grad_log_posterior(spec: &ModelSpec, p: &ParameterVector, data: &LongitudinalDataset) -> Result<ParameterVector> {
    spec.check_data(data)?;
    check_layout(spec, p)?;
    let mut g = vec![0.0; spec.dim()];
    spec.evaluate_packed(data, &p.pack(), Some(&mut g), None)?;
    ParameterVector::unpack(spec.layout(), &g)
}

/// Per-subject log-likelihood `log p(y_i | θ_μ, Θ, α_i, σ)`.
pub fn pointwise_loglik(spec: &ModelSpec, p: &ParameterVector, data: &LongitudinalDataset) -> Result<Vec<f64>> {
    spec.check_data(data)?;
    check_layout(spec, p)?;
    pointwise_loglik_packed(spec, &p.pack(), data)
}

pub(crate) fn pointwise_loglik_packed(spec: &ModelSpec, x: &[f64], data: &LongitudinalDataset) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.n_subjects()];
    spec.evaluate_packed(data, x, None, Some(&mut out))?;
    Ok(out)
}

/// Per-observation log-likelihood, subject by subject in storage order.
pub fn observation_loglik(spec: &ModelSpec, p: &ParameterVector, data: &LongitudinalDataset) -> Result<Vec<f64>> {
    spec.check_data(data)?;
    check_layout(spec, p)?;
    observation_loglik_packed(spec, &p.pack(), data)
}

pub(crate) fn observation_loglik_packed(spec: &ModelSpec, x: &[f64], data: &LongitudinalDataset) -> Result<Vec<f64>> {
    spec.check_params(x)?;
    let layout = spec.layout();
    let (q, k) = (layout.q, layout.k);
    let log_sigma = x[layout.log_sigma()];
    let inv_s2 = (-2.0 * log_sigma).exp();
    let theta = &x[layout.theta()];
    let alpha = &x[layout.alpha()];
    let mut out = Vec::with_capacity(data.n_total());
    let mut m = vec![0.0; q];
    for (i, (design, subject)) in spec.designs.iter().zip(data.subjects()).enumerate() {
        for a in 0..q {
            m[a] = x[a] + (0..k).map(|j| theta[j * q + a] * alpha[i * k + j]).sum::<f64>();
        }
        for (r, &y) in subject.values.iter().enumerate() {
            let b = &design.rows[r * q..(r + 1) * q];
            let res = y - b.iter().zip(&m).map(|(bb, mm)| bb * mm).sum::<f64>();
            out.push(-HALF_LOG_2PI - log_sigma - 0.5 * res * res * inv_s2);
        }
    }
    Ok(out)
}

fn check_layout(spec: &ModelSpec, p: &ParameterVector) -> Result<()> {
    if p.layout() != spec.layout() {
        return Err(Error::Spec(format!(
            "parameter layout {:?} does not match model layout {:?}",
            p.layout(),
            spec.layout()
        )));
    }
    Ok(())
}

/// A model paired with its (standardized) data, as a sampler target.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a> {
    spec: &'a ModelSpec,
    data: &'a LongitudinalDataset,
}

impl<'a> Posterior<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a LongitudinalDataset) -> Result<Self> {
        spec.check_data(data)?;
        Ok(Posterior { spec, data })
    }

    pub fn spec(&self) -> &'a ModelSpec {
        self.spec
    }

    pub fn data(&self) -> &'a LongitudinalDataset {
        self.data
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.spec.evaluate_packed(self.data, x, Some(grad), None)
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.spec.evaluate_packed(self.data, x, None, None)
    }
}

/// The posterior in sampling coordinates that remove three near-degenerate
/// directions of the model parameters.
///
/// - Scale: `Θ_j c` with `α_j / c` leaves the fit unchanged, so column norms
///   of `Θ` mix slowly. The score block stores `a_ij = α_ij s_j` with
///   `s_j = |Θ_j|`; the likelihood then sees only the direction of `Θ_j`
///   and `s_j` is pinned by the spread of the `a_j`.
/// - Location: a common shift of the scores against `θ_μ` is a prior-only
///   direction. The mean block holds `φ = θ_μ + Θ ᾱ`.
/// - That direction is still much wider than single scores, so the stored
///   block is `w_i = a_i - (1 - 1/√N) ā`, shrinking the common part by `√N`.
///
/// Log Jacobian of the map to the model vector: `(k/2) ln N - N Σ_j ln s_j`.
/// `Θ` and `log σ` are shared with the packed layout.
#[derive(Debug, Clone, Copy)]
pub struct ScaledPosterior<'a> {
    inner: Posterior<'a>,
}

impl<'a> ScaledPosterior<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a LongitudinalDataset) -> Result<Self> {
        Ok(ScaledPosterior {
            inner: Posterior::new(spec, data)?,
        })
    }

    fn block_means(layout: ParameterLayout, block: &[f64]) -> Vec<f64> {
        let (k, n) = (layout.k, layout.n_subjects);
        (0..k)
            .map(|j| (0..n).map(|i| block[i * k + j]).sum::<f64>() / n as f64)
            .collect()
    }

    fn column_norms(layout: ParameterLayout, x: &[f64]) -> Vec<f64> {
        let q = layout.q;
        x[layout.theta()].chunks(q).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// `Θ m` for a k-vector `m`.
    fn loadings_times(layout: ParameterLayout, x: &[f64], m: &[f64]) -> Vec<f64> {
        let q = layout.q;
        let theta = &x[layout.theta()];
        (0..q)
            .map(|a| m.iter().enumerate().map(|(j, mj)| theta[j * q + a] * mj).sum())
            .collect()
    }

    /// Sampling coordinates to the packed model vector.
    pub fn to_model(layout: ParameterLayout, u: &[f64]) -> Vec<f64> {
        let k = layout.k;
        let root_n = (layout.n_subjects as f64).sqrt();
        let s = Self::column_norms(layout, u);
        let mut x = u.to_vec();
        let wbar = Self::block_means(layout, &u[layout.alpha()]);
        for (i, a) in x[layout.alpha()].iter_mut().enumerate() {
            *a = (*a + (root_n - 1.0) * wbar[i % k]) / s[i % k];
        }
        let abar = Self::block_means(layout, &x[layout.alpha()]);
        for (v, t) in x[layout.theta_mu()].iter_mut().zip(Self::loadings_times(layout, u, &abar)) {
            *v -= t;
        }
        x
    }

    /// Packed model vector to sampling coordinates.
    pub fn from_model(layout: ParameterLayout, x: &[f64]) -> Vec<f64> {
        let k = layout.k;
        let shrink = 1.0 - 1.0 / (layout.n_subjects as f64).sqrt();
        let s = Self::column_norms(layout, x);
        let mut u = x.to_vec();
        let abar = Self::block_means(layout, &x[layout.alpha()]);
        for (v, t) in u[layout.theta_mu()].iter_mut().zip(Self::loadings_times(layout, x, &abar)) {
            *v += t;
        }
        for (i, a) in u[layout.alpha()].iter_mut().enumerate() {
            *a *= s[i % k];
        }
        let sbar = Self::block_means(layout, &u[layout.alpha()]);
        for (i, a) in u[layout.alpha()].iter_mut().enumerate() {
            *a -= shrink * sbar[i % k];
        }
        u
    }

    /// Log Jacobian of [`Self::to_model`] at `u`.
    pub fn log_jacobian(layout: ParameterLayout, u: &[f64]) -> f64 {
        Self::log_jacobian_from_norms(layout, &Self::column_norms(layout, u))
    }

    fn log_jacobian_from_norms(layout: ParameterLayout, s: &[f64]) -> f64 {
        let n = layout.n_subjects as f64;
        0.5 * layout.k as f64 * n.ln() - n * s.iter().map(|v| v.ln()).sum::<f64>()
    }
}

impl LogDensity for ScaledPosterior<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> Result<f64> {
        let layout = self.inner.spec.layout();
        let (q, k, n) = (layout.q, layout.k, layout.n_subjects);
        let s = Self::column_norms(layout, u);
        if s.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Evaluation("a loading column is zero".into()));
        }
        let x = Self::to_model(layout, u);
        let lp = self.inner.log_density_and_gradient(&x, grad)?;

        // θ_μ = φ - Θ ᾱ.
        let g_mu = grad[layout.theta_mu()].to_vec();
        let abar = Self::block_means(layout, &x[layout.alpha()]);
        {
            let g_theta = &mut grad[layout.theta()];
            for j in 0..k {
                for a in 0..q {
                    g_theta[j * q + a] -= g_mu[a] * abar[j];
                }
            }
        }
        let theta = &u[layout.theta()];
        let t_g: Vec<f64> = (0..k)
            .map(|j| (0..q).map(|a| theta[j * q + a] * g_mu[a]).sum::<f64>() / n as f64)
            .collect();
        for (i, g) in grad[layout.alpha()].iter_mut().enumerate() {
            *g -= t_g[i % k];
        }

        // α_ij = a_ij / s_j, plus the -N ln s_j Jacobian.
        let mut ga_dot_a = vec![0.0; k];
        for (i, g) in grad[layout.alpha()].iter().enumerate() {
            ga_dot_a[i % k] += g * x[layout.alpha().start + i] * s[i % k];
        }
        {
            let g_theta = &mut grad[layout.theta()];
            for j in 0..k {
                let c = -(ga_dot_a[j] / s[j] + n as f64) / (s[j] * s[j]);
                for a in 0..q {
                    g_theta[j * q + a] += c * theta[j * q + a];
                }
            }
        }
        let g_alpha = &mut grad[layout.alpha()];
        for (i, g) in g_alpha.iter_mut().enumerate() {
            *g /= s[i % k];
        }

        // a_i = w_i + (√N - 1) w̄.
        let sums: Vec<f64> = Self::block_means(layout, g_alpha).iter().map(|m| m * n as f64).collect();
        let c = ((n as f64).sqrt() - 1.0) / n as f64;
        for (i, g) in g_alpha.iter_mut().enumerate() {
            *g += c * sums[i % k];
        }
        Ok(lp + Self::log_jacobian_from_norms(layout, &s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spline::DEFAULT_QUAD_POINTS;

    fn setup(k: usize) -> (ModelSpec, LongitudinalDataset) {
        let basis = Arc::new(OrthonormalBasis::build(&[], DEFAULT_QUAD_POINTS).unwrap());
        let data = LongitudinalDataset::from_observations([
            ("a", 0.1, 0.0),
            ("a", 0.6, 0.0),
            ("b", 0.3, 0.0),
        ])
        .unwrap();
        (ModelSpec::new(k, basis, &data).unwrap(), data)
    }

    #[test]
    fn scaled_coordinates_round_trip_and_match_gradient() {
        let (spec, data) = setup(2);
        let layout = spec.layout();
        let x: Vec<f64> = (0..spec.dim()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect();
        let u = ScaledPosterior::from_model(layout, &x);
        let back = ScaledPosterior::to_model(layout, &u);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        let target = ScaledPosterior::new(&spec, &data).unwrap();
        let plain = Posterior::new(&spec, &data).unwrap();
        let h = 1e-6;
        let mut g = vec![0.0; spec.dim()];
        target.log_density_and_gradient(&u, &mut g).unwrap();
        for c in 0..spec.dim() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (target.log_density(&up).unwrap() - target.log_density(&dn).unwrap()) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-6 * (1.0 + fd.abs()), "coordinate {c}: {fd} vs {}", g[c]);
        }
        // The log Jacobian, checked by finite differences of the map itself.
        let dim = spec.dim();
        let mut jac = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += h;
            dn[c] -= h;
            let (xu, xd) = (ScaledPosterior::to_model(layout, &up), ScaledPosterior::to_model(layout, &dn));
            for r in 0..dim {
                jac[(r, c)] = (xu[r] - xd[r]) / (2.0 * h);
            }
        }
        let log_det = jac.determinant().abs().ln();
        let offset = target.log_density(&u).unwrap() - plain.log_density(&x).unwrap();
        assert!((offset - log_det).abs() < 1e-6, "{offset} vs {log_det}");
    }

    #[test]
    fn rejects_k_not_below_q() {
        let basis = Arc::new(OrthonormalBasis::build(&[0.5], DEFAULT_QUAD_POINTS).unwrap());
        let data = LongitudinalDataset::from_observations([("a", 0.1, 0.0)]).unwrap();
        assert!(matches!(ModelSpec::new(5, basis.clone(), &data), Err(Error::Spec(_))));
        assert!(matches!(ModelSpec::new(0, basis, &data), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_residual_pointwise() {
        let (spec, data) = setup(1);
        let p = ParameterVector::zeros(spec.layout());
        let ll = pointwise_loglik(&spec, &p, &data).unwrap();
        assert!((ll[0] + (2.0 * PI).ln()).abs() < 1e-14);
        assert!((ll[1] + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn pack_unpack_is_exact() {
        let (spec, _) = setup(2);
        let layout = spec.layout();
        let x: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = ParameterVector::unpack(layout, &x).unwrap();
        assert_eq!(p.pack(), x);
        assert_eq!(p.theta[(1, 1)], x[layout.theta().start + layout.q + 1]);
        assert_eq!(p.alpha[(1, 0)], x[layout.alpha().start + 2]);
        assert_eq!(layout.names().len(), layout.dim());
    }

    #[test]
    fn non_finite_parameter_is_an_error() {
        let (spec, data) = setup(1);
        let mut p = ParameterVector::zeros(spec.layout());
        p.theta_mu[0] = f64::NAN;
        assert!(matches!(log_posterior(&spec, &p, &data), Err(Error::Evaluation(_))));
    }

    #[test]
    fn mismatched_data_is_a_spec_error() {
        let (spec, _) = setup(1);
        let other = LongitudinalDataset::from_observations([("a", 0.1, 0.0)]).unwrap();
        let p = ParameterVector::zeros(spec.layout());
        assert!(matches!(log_posterior(&spec, &p, &other), Err(Error::Spec(_))));
    }
}
