//! Post hoc identification of the loadings.
//!
//! The sampled loadings Θ are only identified up to `Θ ↦ ΘP` with `P`
//! orthogonal. Each draw is mapped to the orthonormal representative
//! `Θ* = V_k`, the leading `k` eigenvectors of the `q × q` matrix `ΘΘᵀ`,
//! with scores `α*_i = Θ*ᵀ Θ α_i` so that `Θ* α*_i = Θ α_i`. Remaining sign
//! and order ambiguity across draws is removed by aligning every draw to a
//! common reference.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};

/// Eigenvalue `k` below this fraction of the largest means Θ lost rank.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RotatedDraw {
    /// q × k, orthonormal columns.
    pub theta_star: DMatrix<f64>,
    /// N × k.
    pub alpha_star: DMatrix<f64>,
    /// Leading `k` eigenvalues of ΘΘᵀ, in the same column order as `theta_star`.
    pub eigenvalues: Vec<f64>,
}

impl RotatedDraw {
    pub fn k(&self) -> usize {
        self.theta_star.ncols()
    }

    /// `Θ* α*ᵀ`, the q × N matrix of subject deviation coefficients.
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.theta_star * self.alpha_star.transpose()
    }

    fn permute(&mut self, order: &[usize], signs: &[f64]) {
        let theta = self.theta_star.clone();
        let alpha = self.alpha_star.clone();
        let eig = self.eigenvalues.clone();
        for (dst, (&src, &s)) in order.iter().zip(signs).enumerate() {
            self.theta_star.set_column(dst, &(theta.column(src) * s));
            self.alpha_star.set_column(dst, &(alpha.column(src) * s));
            self.eigenvalues[dst] = eig[src];
        }
    }
}

/// Rotates one draw. `theta` is q × k, `alpha` is N × k.
pub fn rotate_draw(theta: &DMatrix<f64>, alpha: &DMatrix<f64>) -> Result<RotatedDraw> {
    let (q, k) = theta.shape();
    if k == 0 || k > q {
        return Err(Error::Spec(format!("cannot rotate a {q} x {k} loading matrix")));
    }
    if alpha.ncols() != k {
        return Err(Error::Spec(format!(
            "scores have {} columns but loadings have {k}",
            alpha.ncols()
        )));
    }
    if theta.iter().chain(alpha.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite loadings or scores".into()));
    }
    let gram = theta * theta.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    let kth = eig.eigenvalues[order[k - 1]];
    if !(largest > 0.0) || kth < RANK_TOLERANCE * largest {
        let value = if largest > 0.0 { kth / largest } else { 0.0 };
        return Err(Error::RankDeficient { index: k, value });
    }
    let mut theta_star = DMatrix::zeros(q, k);
    let mut eigenvalues = Vec::with_capacity(k);
    for (j, &src) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        // Canonical sign: the largest-magnitude entry is positive.
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        theta_star.set_column(j, &v);
        eigenvalues.push(eig.eigenvalues[src]);
    }
    let alpha_star = alpha * (theta.transpose() * &theta_star);
    Ok(RotatedDraw {
        theta_star,
        alpha_star,
        eigenvalues,
    })
}

/// Column order and signs that best match `theta` to `reference`: greedy
/// on absolute inner products, then flip so each matched product is positive.
pub fn match_columns(theta: &DMatrix<f64>, reference: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = reference.ncols();
    let inner = reference.transpose() * theta;
    let mut order = vec![usize::MAX; k];
    let mut signs = vec![1.0; k];
    let mut ref_used = vec![false; k];
    let mut col_used = vec![false; theta.ncols()];
    for _ in 0..k {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for r in (0..k).filter(|&r| !ref_used[r]) {
            for c in (0..theta.ncols()).filter(|&c| !col_used[c]) {
                let v = inner[(r, c)].abs();
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        let (r, c, _) = best;
        ref_used[r] = true;
        col_used[c] = true;
        order[r] = c;
        signs[r] = if inner[(r, c)] < 0.0 { -1.0 } else { 1.0 };
    }
    (order, signs)
}

/// Aligned rotated draws with the per-draw quantities needed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedDraws {
    /// Original draw index of each retained draw.
    pub draw_index: Vec<usize>,
    pub draws: Vec<RotatedDraw>,
    /// θ_μ per retained draw.
    pub theta_mu: Vec<Vec<f64>>,
    /// σ_ε per retained draw.
    pub sigma: Vec<f64>,
    /// Draws dropped for rank deficiency, with the reason.
    pub excluded: Vec<(usize, String)>,
}

impl RotatedDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn k(&self) -> usize {
        self.draws.first().map_or(0, RotatedDraw::k)
    }

    pub fn q(&self) -> usize {
        self.draws.first().map_or(0, |d| d.theta_star.nrows())
    }

    pub fn n_subjects(&self) -> usize {
        self.draws.first().map_or(0, |d| d.alpha_star.nrows())
    }

    pub fn mean_theta_star(&self) -> DMatrix<f64> {
        mean_matrix(self.draws.iter().map(|d| &d.theta_star))
    }

    pub fn mean_alpha_star(&self) -> DMatrix<f64> {
        mean_matrix(self.draws.iter().map(|d| &d.alpha_star))
    }

    pub fn mean_theta_mu(&self) -> Vec<f64> {
        let n = self.theta_mu.len() as f64;
        let q = self.theta_mu.first().map_or(0, Vec::len);
        (0..q).map(|a| self.theta_mu.iter().map(|t| t[a]).sum::<f64>() / n).collect()
    }

    /// Posterior mean and sd of each subject's rotated scores (N × k each).
    pub fn score_summary(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mean = self.mean_alpha_star();
        let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
        for d in &self.draws {
            let dev = &d.alpha_star - &mean;
            var += dev.component_mul(&dev);
        }
        let denom = (self.draws.len() as f64 - 1.0).max(1.0);
        (mean, var.map(|v| (v / denom).sqrt()))
    }

    /// Per-draw variance shares, in component order.
    pub fn variance_shares(&self) -> Vec<Vec<f64>> {
        self.draws.iter().map(variance_shares).collect()
    }

    /// Per-draw eigenvalue shares `λ_j / Σ_l λ_l` over the `k` retained components.
    pub fn eigenvalue_shares(&self) -> Vec<Vec<f64>> {
        self.draws
            .iter()
            .map(|d| {
                let total: f64 = d.eigenvalues.iter().sum();
                d.eigenvalues.iter().map(|l| l / total).collect()
            })
            .collect()
    }

    /// Loadings in long format: `draw,component,coefficient,value`.
    pub fn write_loadings_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["draw", "component", "coefficient", "value"])?;
        for (d, s) in self.draws.iter().zip(&self.draw_index) {
            for j in 0..d.k() {
                for a in 0..d.theta_star.nrows() {
                    w.write_record([
                        s.to_string(),
                        (j + 1).to_string(),
                        a.to_string(),
                        d.theta_star[(a, j)].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<loadings writer>", e))?;
        Ok(())
    }

    /// Scores in long format: `draw,subject,component,score`.
    pub fn write_scores_csv<W: Write>(&self, writer: W, subject_ids: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["draw", "subject", "component", "score"])?;
        for (d, s) in self.draws.iter().zip(&self.draw_index) {
            for (i, id) in subject_ids.iter().enumerate().take(d.alpha_star.nrows()) {
                for j in 0..d.k() {
                    w.write_record([
                        s.to_string(),
                        id.clone(),
                        (j + 1).to_string(),
                        d.alpha_star[(i, j)].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<scores writer>", e))?;
        Ok(())
    }
}

fn mean_matrix<'a>(mats: impl Iterator<Item = &'a DMatrix<f64>>) -> DMatrix<f64> {
    let mut n = 0usize;
    let mut acc: Option<DMatrix<f64>> = None;
    for m in mats {
        n += 1;
        match acc.as_mut() {
            Some(a) => *a += m,
            None => acc = Some(m.clone()),
        }
    }
    acc.map_or_else(|| DMatrix::zeros(0, 0), |a| a / n as f64)
}

/// Share of score variance carried by each component of one draw:
/// `Var_i(α*_ij) / Σ_l Var_i(α*_il)`. With fewer than two subjects the
/// eigenvalue shares are used instead.
pub fn variance_shares(draw: &RotatedDraw) -> Vec<f64> {
    let (n, k) = draw.alpha_star.shape();
    if k == 1 {
        return vec![1.0];
    }
    let vars: Vec<f64> = if n >= 2 {
        (0..k)
            .map(|j| {
                let col = draw.alpha_star.column(j);
                let mean = col.mean();
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)
            })
            .collect()
    } else {
        draw.eigenvalues.clone()
    };
    let total: f64 = vars.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / k as f64; k];
    }
    vars.iter().map(|v| v / total).collect()
}

/// Posterior mean variance shares, plus the mean eigenvalue shares.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VarianceExplained {
    pub shares: Vec<f64>,
    pub eigenvalue_shares: Vec<f64>,
}

pub fn variance_explained(draws: &RotatedDraws) -> VarianceExplained {
    let k = draws.k();
    let mean_of = |rows: Vec<Vec<f64>>| -> Vec<f64> {
        let n = rows.len() as f64;
        (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
    };
    VarianceExplained {
        shares: mean_of(draws.variance_shares()),
        eigenvalue_shares: mean_of(draws.eigenvalue_shares()),
    }
}

/// Aligns rotated draws to a common column order and sign.
///
/// The first valid draw seeds the reference; a second pass realigns all
/// draws to the mean of the first-pass result, which is less sensitive to
/// an atypical first draw. Finally components are ordered by decreasing
/// posterior-mean variance share.
pub fn align_draws(draws: &mut [RotatedDraw]) {
    let Some(first) = draws.first() else {
        return;
    };
    let mut reference = first.theta_star.clone();
    for _ in 0..2 {
        for d in draws.iter_mut() {
            let (order, signs) = match_columns(&d.theta_star, &reference);
            d.permute(&order, &signs);
        }
        reference = mean_matrix(draws.iter().map(|d| &d.theta_star));
    }
    let k = first_k(draws);
    let shares: Vec<Vec<f64>> = draws.iter().map(variance_shares).collect();
    let mean: Vec<f64> = (0..k)
        .map(|j| shares.iter().map(|s| s[j]).sum::<f64>() / shares.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]));
    if order.iter().enumerate().any(|(i, &o)| i != o) {
        let signs = vec![1.0; k];
        for d in draws.iter_mut() {
            d.permute(&order, &signs);
        }
    }
}

fn first_k(draws: &[RotatedDraw]) -> usize {
    draws.first().map_or(0, RotatedDraw::k)
}

/// Rotates and aligns every posterior draw. Rank-deficient draws are
/// excluded and listed; an error is returned only if none survive.
pub fn identify(posterior: &PosteriorDraws) -> Result<RotatedDraws> {
    let results: Vec<Result<RotatedDraw>> = posterior
        .draws()
        .par_iter()
        .map(|p| rotate_draw(&p.theta, &p.alpha))
        .collect();
    let mut out = RotatedDraws {
        draw_index: Vec::new(),
        draws: Vec::new(),
        theta_mu: Vec::new(),
        sigma: Vec::new(),
        excluded: Vec::new(),
    };
    let mut last_error = None;
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok(d) => {
                out.draw_index.push(s);
                out.draws.push(d);
                out.theta_mu.push(posterior.get(s).theta_mu.clone());
                out.sigma.push(posterior.get(s).sigma());
            }
            Err(e) => {
                out.excluded.push((s, e.to_string()));
                last_error = Some(e);
            }
        }
    }
    if out.draws.is_empty() {
        return Err(last_error.unwrap_or_else(|| Error::Spec("no posterior draws to rotate".into())));
    }
    align_draws(&mut out.draws);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn random_draw_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let theta = random(&mut rng, 6, 2);
            let alpha = random(&mut rng, 9, 2);
            let r = rotate_draw(&theta, &alpha).unwrap();
            let ortho = r.theta_star.transpose() * &r.theta_star - DMatrix::identity(2, 2);
            assert!(max_abs(&ortho) < 1e-12);
            let recon = r.reconstruction() - &theta * alpha.transpose();
            assert!(max_abs(&recon) < 1e-12);
            assert!(r.eigenvalues[0] >= r.eigenvalues[1]);
        }
    }

    #[test]
    fn orthonormal_input_is_a_fixed_point_up_to_sign_and_order() {
        let mut theta = DMatrix::zeros(5, 2);
        theta[(1, 0)] = 1.0;
        theta[(3, 1)] = -1.0;
        let alpha = DMatrix::from_row_slice(3, 2, &[3.0, 0.5, -2.0, 0.1, 1.0, -0.4]);
        let r = rotate_draw(&theta, &alpha).unwrap();
        for j in 0..2 {
            let best = (0..2)
                .map(|c| r.theta_star.column(j).dot(&theta.column(c)).abs())
                .fold(0.0, f64::max);
            assert!((best - 1.0).abs() < 1e-12);
        }
        assert!(max_abs(&(r.reconstruction() - &theta * alpha.transpose())) < 1e-12);
    }

    #[test]
    fn identical_columns_are_rank_deficient() {
        let col = [1.0, 2.0, 0.5, -1.0, 0.3];
        let theta = DMatrix::from_fn(5, 2, |a, _| col[a]);
        let alpha = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(rotate_draw(&theta, &alpha), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn invariant_to_orthogonal_reparameterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = random(&mut rng, 6, 3);
        let alpha = random(&mut rng, 4, 3);
        let p = random(&mut rng, 3, 3).qr().q();
        let a = rotate_draw(&theta, &alpha).unwrap();
        let b = rotate_draw(&(&theta * &p), &(&alpha * &p)).unwrap();
        for j in 0..3 {
            let dot = a.theta_star.column(j).dot(&b.theta_star.column(j));
            assert!((dot.abs() - 1.0).abs() < 1e-10);
        }
        assert!(max_abs(&(a.reconstruction() - b.reconstruction())) < 1e-10);
    }

    #[test]
    fn alignment_undoes_sign_flip_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = rotate_draw(&random(&mut rng, 6, 2), &random(&mut rng, 10, 2)).unwrap();
        let mut flipped = base.clone();
        flipped.permute(&[0, 1], &[-1.0, 1.0]);
        let mut swapped = base.clone();
        swapped.permute(&[1, 0], &[1.0, 1.0]);
        let mut draws = vec![base.clone(), flipped, swapped];
        let before: Vec<DMatrix<f64>> = draws.iter().map(RotatedDraw::reconstruction).collect();
        align_draws(&mut draws);
        for (d, r) in draws.iter().zip(&before) {
            assert!(max_abs(&(&d.theta_star - &draws[0].theta_star)) < 1e-14);
            assert!(max_abs(&(d.reconstruction() - r)) < 1e-12);
        }
    }

    #[test]
    fn shares_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let r = rotate_draw(&random(&mut rng, 7, 3), &random(&mut rng, 12, 3)).unwrap();
            let s = variance_shares(&r);
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let single = rotate_draw(&random(&mut rng, 4, 1), &random(&mut rng, 5, 1)).unwrap();
        assert_eq!(variance_shares(&single), vec![1.0]);
    }
}
