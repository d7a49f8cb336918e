//! Cubic B-spline bases on [0, 1], orthonormalized in L2.
//!
//! Raw B-splines come from the Cox–de Boor recursion on a clamped knot vector.
//! The L2 inner product is evaluated with Gauss–Legendre rules placed on each
//! knot span, which is exact for products of cubic pieces, and the raw
//! functions are orthonormalized by two-pass modified Gram–Schmidt in that
//! inner product. The resulting `q × q` transform maps raw evaluations to
//! orthonormal ones at any `t`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ORDER: usize = 4;
pub const DEGREE: usize = ORDER - 1;
pub const DEFAULT_QUAD_POINTS: usize = 1001;
/// Minimum spacing enforced between tied quantile knots.
pub const KNOT_PERTURBATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnotPlacement {
    /// Empirical quantiles of the pooled observation times.
    #[default]
    Quantile,
    /// Equally spaced over [0, 1].
    Uniform,
}

/// Internal knots at the `j / (n_internal + 1)` quantiles of `times`.
pub fn place_knots(times: &[f64], n_internal: usize) -> Result<Vec<f64>> {
    place_knots_with(times, n_internal, KnotPlacement::Quantile)
}

pub fn place_knots_with(times: &[f64], n_internal: usize, placement: KnotPlacement) -> Result<Vec<f64>> {
    if n_internal == 0 {
        return Ok(Vec::new());
    }
    let raw: Vec<f64> = match placement {
        KnotPlacement::Uniform => (1..=n_internal)
            .map(|j| j as f64 / (n_internal + 1) as f64)
            .collect(),
        KnotPlacement::Quantile => {
            if times.is_empty() {
                return Err(Error::KnotPlacement("no observation times".into()));
            }
            if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::KnotPlacement(format!(
                    "time {t} is outside [0, 1]; rescale times first"
                )));
            }
            let mut sorted = times.to_vec();
            sorted.sort_by(f64::total_cmp);
            (1..=n_internal)
                .map(|j| quantile_sorted(&sorted, j as f64 / (n_internal + 1) as f64))
                .collect()
        }
    };
    separate_knots(raw)
}

/// Linear-interpolation sample quantile (the common "type 7" definition) of
/// an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pushes knots into the open interval and apart from each other by at least
/// `KNOT_PERTURBATION`.
fn separate_knots(mut knots: Vec<f64>) -> Result<Vec<f64>> {
    let eps = KNOT_PERTURBATION;
    let mut prev = 0.0;
    for k in knots.iter_mut() {
        if *k < prev + eps {
            *k = prev + eps;
        }
        prev = *k;
    }
    // Tied knots pressed against the right boundary are walked back.
    let mut next = 1.0;
    for k in knots.iter_mut().rev() {
        if *k > next - eps {
            *k = next - eps;
        }
        next = *k;
    }
    if knots.first().is_some_and(|&k| k < eps * 0.5) {
        return Err(Error::KnotPlacement(format!(
            "{} knots cannot be separated inside (0, 1)",
            knots.len()
        )));
    }
    // Perturbation is only meant to break ties; anything larger is a collision.
    for w in knots.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::KnotPlacement("knots collide after perturbation".into()));
        }
    }
    Ok(knots)
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule on [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// `total` nodes split across the spans delimited by `internal_knots`,
    /// proportionally to span length, with one Gauss–Legendre rule per span
    /// (never fewer than 4 nodes, which already integrates degree 7 exactly).
    pub fn knot_aligned(internal_knots: &[f64], total: usize) -> Result<Self> {
        let mut breaks = Vec::with_capacity(internal_knots.len() + 2);
        breaks.push(0.0);
        breaks.extend_from_slice(internal_knots);
        breaks.push(1.0);
        let spans = breaks.len() - 1;
        if total < ORDER * spans {
            return Err(Error::Config(format!(
                "{total} quadrature points cannot cover {spans} knot spans"
            )));
        }
        let mut counts: Vec<usize> = breaks
            .windows(2)
            .map(|w| (((w[1] - w[0]) * total as f64).round() as usize).max(ORDER))
            .collect();
        // Reconcile rounding against the widest span.
        let widest = breaks
            .windows(2)
            .enumerate()
            .max_by(|a, b| (a.1[1] - a.1[0]).total_cmp(&(b.1[1] - b.1[0])))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let assigned: usize = counts.iter().sum();
        if assigned > total {
            let excess = assigned - total;
            if counts[widest] < excess + ORDER {
                return Err(Error::Config(format!(
                    "{total} quadrature points are too few for the knot layout"
                )));
            }
            counts[widest] -= excess;
        } else {
            counts[widest] += total - assigned;
        }

        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for (w, &count) in breaks.windows(2).zip(&counts) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            let (x, wt) = gauss_legendre(count);
            for (xi, wi) in x.iter().zip(&wt) {
                nodes.push(a + half * (xi + 1.0));
                weights.push(half * wi);
            }
        }
        Ok(Quadrature { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Clamped knot vector: `ORDER` copies of each boundary around the internal
/// knots.
fn full_knot_vector(internal: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(internal.len() + 2 * ORDER);
    v.extend(std::iter::repeat_n(0.0, ORDER));
    v.extend_from_slice(internal);
    v.extend(std::iter::repeat_n(1.0, ORDER));
    v
}

/// Evaluates all `q` raw cubic B-splines at `t` into `out` via the
/// Cox–de Boor recursion. At `t = 1` the last span is closed on the right.
pub fn raw_bspline(internal_knots: &[f64], t: f64, out: &mut [f64]) {
    let knots = full_knot_vector(internal_knots);
    raw_bspline_full(&knots, t, out);
}

fn raw_bspline_full(knots: &[f64], t: f64, out: &mut [f64]) {
    let q = knots.len() - ORDER;
    debug_assert_eq!(out.len(), q);
    out.iter_mut().for_each(|v| *v = 0.0);
    // Span s with knots[s] <= t < knots[s + 1], restricted to DEGREE..q-1.
    let mut span = DEGREE;
    while span + 1 < q && t >= knots[span + 1] {
        span += 1;
    }
    let mut n = [0.0; ORDER];
    let mut left = [0.0; ORDER];
    let mut right = [0.0; ORDER];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { n[r] / denom } else { 0.0 };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (j, v) in n.iter().enumerate() {
        out[span - DEGREE + j] = *v;
    }
}

/// Serializable summary of a basis, enough to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSummary {
    pub q: usize,
    pub internal_knots: Vec<f64>,
    pub quad_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    internal_knots: Vec<f64>,
    full_knots: Vec<f64>,
    q: usize,
    quadrature: Quadrature,
    /// Row j holds the raw-coefficient expansion of orthonormal function j.
    transform: DMatrix<f64>,
}

impl OrthonormalBasis {
    pub fn build(internal_knots: &[f64], quad_points: usize) -> Result<Self> {
        if let Some(w) = internal_knots.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::KnotPlacement(format!(
                "internal knots must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(k) = internal_knots.iter().find(|k| !(**k > 0.0 && **k < 1.0)) {
            return Err(Error::KnotPlacement(format!(
                "internal knot {k} is not inside (0, 1)"
            )));
        }
        let q = internal_knots.len() + ORDER;
        if quad_points < 10 * q {
            return Err(Error::Config(format!(
                "need at least {} quadrature points for q = {q}, got {quad_points}",
                10 * q
            )));
        }
        let quadrature = Quadrature::knot_aligned(internal_knots, quad_points)?;
        let full_knots = full_knot_vector(internal_knots);

        let m = quadrature.len();
        let mut raw = DMatrix::<f64>::zeros(m, q);
        let mut row = vec![0.0; q];
        for (i, &x) in quadrature.nodes.iter().enumerate() {
            raw_bspline_full(&full_knots, x, &mut row);
            for j in 0..q {
                raw[(i, j)] = row[j];
            }
        }
        let transform = orthonormalize(&raw, &quadrature.weights)?;
        Ok(OrthonormalBasis {
            internal_knots: internal_knots.to_vec(),
            full_knots,
            q,
            quadrature,
            transform,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn internal_knots(&self) -> &[f64] {
        &self.internal_knots
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    pub fn summary(&self) -> BasisSummary {
        BasisSummary {
            q: self.q,
            internal_knots: self.internal_knots.clone(),
            quad_points: self.quadrature.len(),
        }
    }

    pub fn from_summary(summary: &BasisSummary) -> Result<Self> {
        let b = Self::build(&summary.internal_knots, summary.quad_points)?;
        if b.q != summary.q {
            return Err(Error::Spec(format!(
                "summary declares q = {} but knots imply q = {}",
                summary.q, b.q
            )));
        }
        Ok(b)
    }

    pub fn raw_row(&self, t: f64, out: &mut [f64]) -> Result<()> {
        check_domain(t)?;
        raw_bspline_full(&self.full_knots, t, out);
        Ok(())
    }

    /// Orthonormal basis values `b(t)` written into `out` (length q).
    pub fn row(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let mut raw = [0.0; 64];
        let raw = if self.q <= raw.len() {
            &mut raw[..self.q]
        } else {
            return self.row_alloc(t, out);
        };
        self.raw_row(t, raw)?;
        self.combine(raw, out);
        Ok(())
    }

    fn row_alloc(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let mut raw = vec![0.0; self.q];
        self.raw_row(t, &mut raw)?;
        self.combine(&raw, out);
        Ok(())
    }

    fn combine(&self, raw: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..self.q).map(|l| self.transform[(j, l)] * raw[l]).sum();
        }
    }

    /// `len(times) × q` matrix whose row m is `b(times[m])ᵀ`.
    pub fn evaluate(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(times.len(), self.q);
        let mut row = vec![0.0; self.q];
        for (m, &t) in times.iter().enumerate() {
            self.row(t, &mut row)?;
            for j in 0..self.q {
                out[(m, j)] = row[j];
            }
        }
        Ok(out)
    }

    pub fn evaluate_raw(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(times.len(), self.q);
        let mut row = vec![0.0; self.q];
        for (m, &t) in times.iter().enumerate() {
            self.raw_row(t, &mut row)?;
            for j in 0..self.q {
                out[(m, j)] = row[j];
            }
        }
        Ok(out)
    }

    /// Weighted Gram matrix `Σ_m w_m b_j(x_m) b_l(x_m)` under a quadrature.
    pub fn gram(&self, quadrature: &Quadrature) -> Result<DMatrix<f64>> {
        let values = self.evaluate(&quadrature.nodes)?;
        Ok(weighted_cross_product(&values, &quadrature.weights))
    }

    /// Coefficients of the constant function 1 in this basis.
    pub fn constant_coefficients(&self) -> Vec<f64> {
        let values = self
            .evaluate(&self.quadrature.nodes)
            .expect("quadrature nodes lie in [0, 1]");
        (0..self.q)
            .map(|j| {
                self.quadrature
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(m, w)| w * values[(m, j)])
                    .sum()
            })
            .collect()
    }
}

fn check_domain(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(t))
    }
}

pub fn weighted_cross_product(values: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let q = values.ncols();
    let mut g = DMatrix::zeros(q, q);
    for j in 0..q {
        for l in 0..=j {
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(m, w)| w * values[(m, j)] * values[(m, l)])
                .sum();
            g[(j, l)] = s;
            g[(l, j)] = s;
        }
    }
    g
}

/// Two-pass modified Gram–Schmidt on the columns of `raw` under the weighted
/// inner product. Returns the q × q coefficient matrix C with
/// `orth_j = Σ_l C[j, l] raw_l`.
fn orthonormalize(raw: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let (m, q) = raw.shape();
    let inner = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .zip(weights)
            .map(|((x, y), w)| w * x * y)
            .sum()
    };
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut coefs: Vec<Vec<f64>> = Vec::with_capacity(q);
    for j in 0..q {
        let mut v: Vec<f64> = raw.column(j).iter().copied().collect();
        let mut c = vec![0.0; q];
        c[j] = 1.0;
        let initial = inner(&v, &v).sqrt();
        for _pass in 0..2 {
            for l in 0..j {
                let proj = inner(&v, &values[l]);
                for i in 0..m {
                    v[i] -= proj * values[l][i];
                }
                for (ci, cl) in c.iter_mut().zip(&coefs[l]) {
                    *ci -= proj * cl;
                }
            }
        }
        let norm = inner(&v, &v).sqrt();
        if !(norm > 1e-10 * initial) || !norm.is_finite() {
            return Err(Error::IllConditionedBasis(format!(
                "raw basis function {j} is numerically dependent on its predecessors"
            )));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        c.iter_mut().for_each(|x| *x /= norm);
        values.push(v);
        coefs.push(c);
    }
    Ok(DMatrix::from_fn(q, q, |j, l| coefs[j][l]))
}

/// `n` equally spaced points covering [0, 1].
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev_from_identity(g: &DMatrix<f64>) -> f64 {
        let q = g.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..q {
            for j in 0..q {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(4);
        // ∫_{-1}^{1} x^6 = 2/7, exact for 4 nodes.
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert!((s - 2.0 / 7.0).abs() < 1e-14);
        let (x, w) = gauss_legendre(801);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((s - 2.0 * 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn uniform_median_knot() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let k = place_knots(&times, 1).unwrap();
        assert_eq!(k.len(), 1);
        assert!((k[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_quartile_knots() {
        // Empirical quartiles of 0, 0.01, ..., 1 are exactly 0.25, 0.5, 0.75.
        let times: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let k = place_knots(&times, 3).unwrap();
        for (a, b) in k.iter().zip([0.25, 0.5, 0.75]) {
            assert!((a - b).abs() < 1e-12, "{k:?}");
        }
    }

    #[test]
    fn no_internal_knots() {
        assert!(place_knots(&[0.2, 0.4], 0).unwrap().is_empty());
        let b = OrthonormalBasis::build(&[], DEFAULT_QUAD_POINTS).unwrap();
        assert_eq!(b.q(), 4);
    }

    #[test]
    fn tied_quantiles_are_separated() {
        let times = [0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0];
        let k = place_knots(&times, 3).unwrap();
        assert!(k[0] < k[1] && k[1] < k[2]);
        assert!((k[2] - k[0]) < 1e-5);
    }

    #[test]
    fn knots_at_boundary_are_pushed_inside() {
        let times = [0.0, 0.0, 0.0, 0.0, 1.0];
        let k = place_knots(&times, 2).unwrap();
        assert!(k[0] > 0.0 && k[1] > k[0] && k[1] < 1.0);
    }

    #[test]
    fn too_many_knots_collide() {
        let err = separate_knots(vec![0.5; 2_000_000]).unwrap_err();
        assert!(matches!(err, Error::KnotPlacement(_)));
    }

    #[test]
    fn partition_of_unity() {
        let knots = [0.2, 0.35, 0.8];
        let mut row = vec![0.0; knots.len() + ORDER];
        for i in 0..=200 {
            let t = i as f64 / 200.0;
            raw_bspline(&knots, t, &mut row);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-14, "t = {t}: {s}");
            assert!(row.iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn gram_identity_q5() {
        let b = OrthonormalBasis::build(&[0.5], 1001).unwrap();
        assert_eq!(b.quadrature().len(), 1001);
        let g = b.gram(b.quadrature()).unwrap();
        assert!(max_dev_from_identity(&g) < 1e-8);
    }

    #[test]
    fn evaluation_matches_transform_times_raw() {
        let b = OrthonormalBasis::build(&[0.3, 0.6], 200).unwrap();
        let nodes = &b.quadrature().nodes;
        let raw = b.evaluate_raw(nodes).unwrap();
        let direct = &raw * b.transform().transpose();
        let evaluated = b.evaluate(nodes).unwrap();
        assert_eq!(direct.shape(), evaluated.shape());
        for (a, c) in direct.iter().zip(evaluated.iter()) {
            assert!((a - c).abs() < 1e-13);
        }
    }

    #[test]
    fn evaluate_shape_and_domain() {
        let b = OrthonormalBasis::build(&[], 100).unwrap();
        let m = b.evaluate(&[0.3]).unwrap();
        assert_eq!(m.shape(), (1, 4));
        assert!(matches!(b.evaluate(&[1.2]), Err(Error::Domain(_))));
        assert!(matches!(b.evaluate(&[-0.01]), Err(Error::Domain(_))));
    }

    #[test]
    fn rejects_too_few_quad_points() {
        assert!(matches!(
            OrthonormalBasis::build(&[0.5], 49),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_invalid_knots() {
        assert!(OrthonormalBasis::build(&[0.5, 0.5], 200).is_err());
        assert!(OrthonormalBasis::build(&[1.0], 200).is_err());
    }

    #[test]
    fn constant_function_is_reproduced() {
        let b = OrthonormalBasis::build(&[0.25, 0.7], DEFAULT_QUAD_POINTS).unwrap();
        let c = b.constant_coefficients();
        let mut row = vec![0.0; b.q()];
        for t in [0.0, 0.13, 0.5, 0.99, 1.0] {
            b.row(t, &mut row).unwrap();
            let v: f64 = row.iter().zip(&c).map(|(x, y)| x * y).sum();
            assert!((v - 1.0).abs() < 1e-10, "{t}: {v}");
        }
    }
}
