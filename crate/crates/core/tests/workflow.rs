use sfpca::artifacts::{load_fit, save_fit};
use sfpca::psis::LooUnit;
use sfpca::sampler::SamplerConfig;
use sfpca::sim::{generate, SimulationTruth};
use sfpca::spline::KnotPlacement;
use sfpca::workflow::{build_basis, check_dimensions, fit_model, prepare};

fn short_config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 2,
        warmup_iters: 150,
        sampling_iters: 100,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn saved_fit_loads_back_unchanged() {
    let raw = generate(&SimulationTruth::default_truth().scenario(10, 0.4, 21)).unwrap();
    let prepared = prepare(&raw, None).unwrap();
    let basis = build_basis(&prepared.data, 1, KnotPlacement::Quantile).unwrap();
    let fit = fit_model(&prepared, basis, 2, &short_config(5), LooUnit::Marginal).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let record = save_fit(dir.path(), &raw, &prepared, &fit).unwrap();
    let loaded = load_fit(dir.path()).unwrap();

    assert_eq!(loaded.record, record);
    assert_eq!(loaded.raw, raw);
    assert_eq!(loaded.prepared.data, prepared.data);
    assert_eq!(loaded.loo, fit.loo);
    assert_eq!(loaded.draws.len(), fit.draws.len());
    for (a, b) in loaded.draws.draws().iter().zip(fit.draws.draws()) {
        assert_eq!(a, b);
    }
    assert_eq!(record.pcs, 2);
    assert_eq!(record.knots, 1);
    assert_eq!(record.n_subjects, 10);
}

#[test]
fn same_seed_gives_identical_fits() {
    let raw = generate(&SimulationTruth::default_truth().scenario(8, 0.5, 22)).unwrap();
    let prepared = prepare(&raw, None).unwrap();
    let basis = build_basis(&prepared.data, 1, KnotPlacement::Quantile).unwrap();
    let a = fit_model(&prepared, basis.clone(), 1, &short_config(9), LooUnit::Marginal).unwrap();
    let b = fit_model(&prepared, basis, 1, &short_config(9), LooUnit::Marginal).unwrap();
    assert_eq!(a.draws.draws(), b.draws.draws());
    assert_eq!(a.loo, b.loo);
}

#[test]
fn dimension_check_runs_before_fitting() {
    assert!(check_dimensions(4, 1).is_ok());
    let err = check_dimensions(5, 1).unwrap_err().to_string();
    assert!(err.contains("PCs < knots + 4 = 5"), "{err}");
    assert!(check_dimensions(0, 2).is_err());
}
