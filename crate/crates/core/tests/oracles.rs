use std::sync::Arc;

use nalgebra::DMatrix;
use sfpca::data::{LongitudinalDataset, Subject};
use sfpca::loo::marginal_subject_loglik;
use sfpca::model::{log_posterior, ModelSpec, ParameterLayout, ParameterVector};
use sfpca::psis::{compare_models, smooth_weights, LooReport, LooUnit, ModelLabel, KHAT_BAD};
use sfpca::sim::{generate, SimulationTruth};
use sfpca::spline::OrthonormalBasis;
use statrs::distribution::{Cauchy, Continuous, Discrete, Normal, Poisson};

fn small_data() -> LongitudinalDataset {
    LongitudinalDataset::new(vec![
        Subject {
            id: "a".into(),
            times: vec![0.0, 0.3, 0.7, 1.0],
            values: vec![0.4, -0.2, 0.9, 1.3],
        },
        Subject {
            id: "b".into(),
            times: vec![0.15, 0.55],
            values: vec![-1.1, 0.2],
        },
        Subject {
            id: "c".into(),
            times: vec![0.5],
            values: vec![0.05],
        },
    ])
    .unwrap()
}

fn params(layout: ParameterLayout) -> ParameterVector {
    let mut p = ParameterVector::zeros(layout);
    let packed: Vec<f64> = (0..layout.dim()).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
    p = ParameterVector::unpack(layout, &packed).unwrap_or(p);
    p.log_sigma = -0.4;
    p
}

#[test]
fn log_posterior_matches_density_library() {
    let data = small_data();
    let basis = Arc::new(OrthonormalBasis::build(&[0.4], 1001).unwrap());
    let spec = ModelSpec::new(2, basis.clone(), &data).unwrap();
    let p = params(spec.layout());
    let sigma = p.sigma();

    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut expected = 0.0;
    for (i, s) in data.subjects().iter().enumerate() {
        let coef = p.subject_coefficients(i);
        let b = basis.evaluate(&s.times).unwrap();
        for (r, y) in s.values.iter().enumerate() {
            let m: f64 = b.row(r).iter().zip(&coef).map(|(x, c)| x * c).sum();
            expected += Normal::new(m, sigma).unwrap().ln_pdf(*y);
        }
    }
    let packed = p.pack();
    for v in &packed[..packed.len() - 1] {
        expected += std_normal.ln_pdf(*v);
    }
    // Half-Cauchy on sigma plus the log-sigma Jacobian.
    expected += Cauchy::new(0.0, 1.0).unwrap().ln_pdf(sigma) + 2f64.ln() + p.log_sigma;

    let got = log_posterior(&spec, &p, &data).unwrap();
    assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
}

#[test]
fn marginal_likelihood_matches_numerical_integration() {
    // One component: integrate the conditional likelihood against N(0, 1).
    let data = small_data();
    let basis = OrthonormalBasis::build(&[0.5], 1001).unwrap();
    let layout = ParameterLayout {
        q: 5,
        k: 1,
        n_subjects: 1,
    };
    let mut p = params(layout);
    p.log_sigma = -0.7;
    let sigma = p.sigma();
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for s in data.subjects() {
        let b = basis.evaluate(&s.times).unwrap();
        let mean = &b * nalgebra::DVector::from_column_slice(&p.theta_mu);
        let load = &b * &p.theta;
        let cond = |a: f64| -> f64 {
            (0..s.len())
                .map(|r| Normal::new(mean[r] + load[(r, 0)] * a, sigma).unwrap().pdf(s.values[r]))
                .product::<f64>()
                * std_normal.pdf(a)
        };
        // Composite Simpson on [-12, 12].
        let n = 24_000;
        let h = 24.0 / n as f64;
        let mut acc = cond(-12.0) + cond(12.0);
        for j in 1..n {
            let w = if j % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * cond(-12.0 + j as f64 * h);
        }
        let expected = (acc * h / 3.0).ln();
        let got = marginal_subject_loglik(&basis, s, &p).unwrap();
        assert!((got - expected).abs() < 1e-8, "subject {}: {got} vs {expected}", s.id);
    }
}

fn report(pointwise: Vec<f64>, khat: Vec<f64>) -> LooReport {
    let n = pointwise.len() as f64;
    let mean = pointwise.iter().sum::<f64>() / n;
    let var = pointwise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let bad_units: Vec<usize> = (0..khat.len()).filter(|&i| khat[i] > KHAT_BAD).collect();
    LooReport {
        elppd: pointwise.iter().sum(),
        se: (n * var).sqrt(),
        n_bad: bad_units.len(),
        n_warn: bad_units.len(),
        bad_units,
        pointwise,
        khat,
        draws: 1000,
        tail_len: 200,
        unit: LooUnit::Marginal,
    }
}

#[test]
fn difference_within_one_standard_error_is_a_tie() {
    // Pointwise differences with sum -1.86 and sqrt(N var) = 2.21 exactly.
    let n: f64 = 4.0;
    let mean = -1.86 / n;
    let sd = 2.21 / n.sqrt();
    // Two values at mean ± c and two at the mean: var = 2c²/3.
    let c = sd * (1.5f64).sqrt();
    let diff = [mean + c, mean - c, mean, mean];
    let best = report(vec![-10.0; 4], vec![0.2; 4]);
    let other = report(diff.iter().map(|d| -10.0 + d).collect(), vec![0.3, 0.71, 1.15, 0.1]);
    let big = ModelLabel { pcs: 3, knots: 1 };
    let small = ModelLabel { pcs: 2, knots: 1 };
    let cmp = compare_models(&[(big, &best), (small, &other)]).unwrap();
    let row = cmp.rows.iter().find(|r| r.label == small).unwrap();
    assert!((row.delta + 1.86).abs() < 1e-12);
    assert!((row.se_delta - 2.21).abs() < 1e-12);
    assert!(row.tied);
    assert_eq!(row.n_bad, 2);
    assert_eq!(cmp.recommended, small);
}

#[test]
fn heavy_tail_hits_the_cap() {
    // The cap is S^{3/4} times the pre-cap mean, which is at least the
    // post-cap mean, so a binding cap leaves max/mean >= S^{3/4}.
    let s = 4000;
    let lr: Vec<f64> = (0..s).map(|i| -1.5 * ((i as f64 + 0.5) / s as f64).ln()).collect();
    let sw = smooth_weights(&lr).unwrap();
    assert!(sw.khat > 1.0, "{}", sw.khat);
    let w: Vec<f64> = sw.log_weights.iter().map(|v| v.exp()).collect();
    let max = w.iter().copied().fold(0.0, f64::max);
    let mean_lower = w.iter().sum::<f64>() / s as f64;
    assert!(max >= mean_lower * (s as f64).powf(0.75) * (1.0 - 1e-9));
}

#[test]
fn generator_moments_match_the_truth() {
    let base = SimulationTruth::default_truth();
    let truth = base.scenario(10_000, 0.0, 77);
    let data = generate(&truth).unwrap();
    let basis = truth.basis().unwrap();
    let grid = truth.candidate_times();
    let mean = truth.mean_curve(&basis, &grid).unwrap();
    let b = basis.evaluate(&grid).unwrap();
    let phi = &b * truth.theta_matrix();
    let n = data.n_subjects() as f64;
    for (m, t) in grid.iter().enumerate() {
        let vals: Vec<f64> = data.subjects().iter().map(|s| s.values[m]).collect();
        assert!(data.subjects().iter().all(|s| s.times[m] == *t));
        let avg = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (n - 1.0);
        let expected_var: f64 = truth
            .score_variances
            .iter()
            .enumerate()
            .map(|(j, d)| d * phi[(m, j)].powi(2))
            .sum::<f64>()
            + truth.sigma2;
        assert!((avg - mean[m]).abs() < 3.0 * (expected_var / n).sqrt(), "mean at t={t}");
        // Var of the sample variance for a normal: 2σ⁴/(n-1).
        let tol = 5.0 * expected_var * (2.0 / (n - 1.0)).sqrt();
        assert!((var - expected_var).abs() < tol, "variance at t={t}: {var} vs {expected_var}");
    }
}

#[test]
fn visit_counts_follow_truncated_poisson() {
    let base = SimulationTruth::default_truth();
    let truth = base.scenario(20_000, 0.8, 78);
    let data = generate(&truth).unwrap();
    let mu = truth.mean_visits;
    let nt = truth.n_candidates as u64;
    let pois = Poisson::new(mu).unwrap();
    let mass: f64 = (1..=nt).map(|n| pois.pmf(n)).sum();
    let mean: f64 = (1..=nt).map(|n| n as f64 * pois.pmf(n)).sum::<f64>() / mass;
    let second: f64 = (1..=nt).map(|n| (n * n) as f64 * pois.pmf(n)).sum::<f64>() / mass;
    let sd = (second - mean * mean).sqrt();
    let counts: Vec<f64> = data.subjects().iter().map(|s| s.len() as f64).collect();
    let avg = counts.iter().sum::<f64>() / counts.len() as f64;
    assert!((avg - mean).abs() < 5.0 * sd / (counts.len() as f64).sqrt(), "{avg} vs {mean}");
    assert!(data.subjects().iter().all(|s| {
        s.times.windows(2).all(|w| w[0] < w[1]) && (1..=truth.n_candidates).contains(&s.len())
    }));
}

#[test]
fn marginal_likelihood_is_rotation_invariant() {
    // Θ enters only through ΘΘᵀ once the scores are integrated out.
    let data = small_data();
    let basis = OrthonormalBasis::build(&[0.5], 1001).unwrap();
    let layout = ParameterLayout {
        q: 5,
        k: 2,
        n_subjects: 1,
    };
    let p = params(layout);
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let r = DMatrix::from_row_slice(2, 2, &[c, s, s, -c]);
    let mut rotated = p.clone();
    rotated.theta = &p.theta * r;
    for subj in data.subjects() {
        let a = marginal_subject_loglik(&basis, subj, &p).unwrap();
        let b = marginal_subject_loglik(&basis, subj, &rotated).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
