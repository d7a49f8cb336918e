use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use sfpca::artifacts::{
    self, load_fit, save_fit, unit_ids, unit_subject, write_atomic, write_atomic_with, write_json, LoadedFit,
    CURVE_POINTS, KHAT_CSV, MEAN_CURVE_CSV, PC_CURVES_CSV, PPC_CSV,
};
use sfpca::data::load_csv;
use sfpca::predict::{fitted_curves, replicate, subject_trajectory, Trajectory, DEFAULT_REPLICATES};
use sfpca::psis::{Comparison, KHAT_BAD};
use sfpca::rotate::identify;
use sfpca::sim::{derive_seed, generate, run_grid, write_grid_csv, Scenario, SimFitConfig, SimulationTruth};
use sfpca::spline::uniform_grid;
use sfpca::svg::Plot;
use sfpca::workflow::{build_basis, check_dimensions, fit_model, prepare, select};

use crate::config::{parse_list, single, Cli, Command, Flags, Format};
use crate::{plots, EXIT_WARN};

pub const SELECTION_CSV: &str = "selection.csv";
pub const SELECTION_JSON: &str = "selection.json";
pub const SIM_RESULTS_CSV: &str = "sim_results.csv";
pub const TRUTH_JSON: &str = "truth.json";

pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Fit(f) => fit(f.resolve()?),
        Command::Select(f) => select_cmd(f.resolve()?),
        Command::Diagnose(f) => diagnose(f.resolve()?),
        Command::Predict(f) => predict(f.resolve()?),
        Command::Simulate(f) => simulate(f.resolve()?),
        Command::RunGrid(f) => grid(f.resolve()?),
    }
}

fn write_svg(path: &Path, plot: Plot) -> Result<()> {
    write_atomic(path, plot.render().as_bytes())?;
    Ok(())
}

/// File-name-safe form of a subject id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn cell_dir(pcs: usize, knots: usize) -> String {
    format!("pcs{pcs}_knots{knots}")
}

fn fit(flags: Flags) -> Result<u8> {
    let pcs = single(&flags.pcs_range()?, "--pcs")?;
    let knots = single(&flags.knots_range()?, "--knots")?;
    check_dimensions(pcs, knots)?;
    let out = flags.out()?.to_path_buf();
    let unit = flags.loo_unit()?;
    let placement = flags.placement()?;
    let raw = load_csv(flags.data()?)?;
    let seed = flags.seed_or_generate();
    let sampler = flags.sampler(seed);
    sampler.validate()?;
    let prepared = prepare(&raw, None)?;
    let basis = build_basis(&prepared.data, knots, placement)?;
    let fitted = fit_model(&prepared, basis, pcs, &sampler, unit)?;
    let record = save_fit(&out, &raw, &prepared, &fitted)?;
    println!(
        "{}: elppd {:.2} (SE {:.2}), {} units with k-hat > 0.7, max R-hat {}",
        fitted.label,
        record.elppd,
        record.elppd_se,
        record.n_bad_khat,
        record.convergence.max_rhat.map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    for w in &record.warnings {
        eprintln!("warning: {w}");
    }
    if flags.format() == Format::Svg {
        let loaded = load_fit(&out)?;
        write_curves(&loaded, Format::Svg)?;
    }
    Ok(if fitted.convergence.has_warnings() || fitted.failed() {
        EXIT_WARN
    } else {
        0
    })
}

#[derive(Serialize)]
struct CellStatus {
    pcs: usize,
    knots: usize,
    dir: String,
    status: String,
}

#[derive(Serialize)]
struct SelectionRecord {
    seed: u64,
    cells: Vec<CellStatus>,
    comparison: Option<Comparison>,
}

fn select_cmd(flags: Flags) -> Result<u8> {
    let pcs = flags.pcs_range()?;
    let knots = flags.knots_range()?;
    for p in pcs.clone() {
        for q in knots.clone() {
            check_dimensions(p, q)?;
        }
    }
    let out = flags.out()?.to_path_buf();
    let unit = flags.loo_unit()?;
    let placement = flags.placement()?;
    let raw = load_csv(flags.data()?)?;
    let seed = flags.seed_or_generate();
    let sampler = flags.sampler(seed);
    sampler.validate()?;
    let prepared = prepare(&raw, None)?;
    let selection = select(&prepared, pcs, knots, placement, &sampler, unit)?;
    artifacts::ensure_dir(&out)?;
    let mut cells = Vec::new();
    let mut any_warning = false;
    for cell in &selection.cells {
        let dir = cell_dir(cell.label.pcs, cell.label.knots);
        let status = match &cell.fit {
            Ok(f) => {
                save_fit(&out.join(&dir), &raw, &prepared, f)?;
                any_warning |= f.convergence.has_warnings();
                if f.failed() {
                    any_warning = true;
                    "failed: not converged".to_string()
                } else {
                    "ok".to_string()
                }
            }
            Err(e) => {
                any_warning = true;
                format!("failed: {e}")
            }
        };
        if status != "ok" {
            eprintln!("{}: {status}", cell.label);
        }
        cells.push(CellStatus {
            pcs: cell.label.pcs,
            knots: cell.label.knots,
            dir,
            status,
        });
    }
    let Some(cmp) = &selection.comparison else {
        bail!("no grid cell produced a converged fit");
    };
    write_atomic_with(&out.join(SELECTION_CSV), |w| {
        let mut csv = csv_writer(w);
        csv.write_record(["pcs", "knots", "elppd", "delta", "se_delta", "tied", "n_bad_khat", "recommended"])?;
        for r in &cmp.rows {
            csv.write_record([
                r.label.pcs.to_string(),
                r.label.knots.to_string(),
                r.elppd.to_string(),
                r.delta.to_string(),
                r.se_delta.to_string(),
                r.tied.to_string(),
                r.n_bad.to_string(),
                (r.label == cmp.recommended).to_string(),
            ])?;
        }
        csv.flush().map_err(|e| sfpca::Error::io("<selection writer>", e))
    })?;
    write_json(
        &out.join(SELECTION_JSON),
        &SelectionRecord {
            seed,
            cells,
            comparison: Some(cmp.clone()),
        },
    )?;
    println!("{:>4} {:>6} {:>10} {:>8} {:>8} {:>6} {:>5}", "pcs", "knots", "elppd", "delta", "se", "tied", "bad_k");
    for r in &cmp.rows {
        println!(
            "{:>4} {:>6} {:>10.2} {:>8.2} {:>8.2} {:>6} {:>5}",
            r.label.pcs, r.label.knots, r.elppd, r.delta, r.se_delta, r.tied, r.n_bad
        );
    }
    println!("recommended: {}", cmp.recommended);
    Ok(if any_warning { EXIT_WARN } else { 0 })
}

fn csv_writer(w: &mut dyn std::io::Write) -> csv::Writer<&mut dyn std::io::Write> {
    csv::Writer::from_writer(w)
}

fn trajectory_name(id: &str) -> String {
    format!("subject_{}_trajectory", file_stem(id))
}

fn write_trajectory(dir: &Path, t: &Trajectory, format: Format) -> Result<()> {
    let stem = trajectory_name(&t.subject);
    write_atomic_with(&dir.join(format!("{stem}.csv")), |w| t.write_csv(w))?;
    if format == Format::Svg {
        write_svg(&dir.join(format!("{stem}.svg")), plots::trajectory(t))?;
    }
    Ok(())
}

fn diagnose(flags: Flags) -> Result<u8> {
    let dir = flags.out()?.to_path_buf();
    let fit = load_fit(&dir)?;
    let format = flags.format();
    let seed = flags.seed.unwrap_or(fit.record.seed);
    let data = &fit.prepared.data;
    let units = unit_ids(data, fit.loo.unit);
    write_atomic_with(&dir.join(KHAT_CSV), |w| fit.loo.write_khat_csv(w, &units))?;
    let r = flags.replicates.unwrap_or(DEFAULT_REPLICATES).min(fit.draws.len());
    let bundle = replicate(&fit.draws, &fit.spec, data, r, seed)?;
    write_atomic_with(&dir.join(PPC_CSV), |w| bundle.write_csv(w))?;
    if format == Format::Svg {
        write_svg(&dir.join("khat.svg"), plots::khat(&fit.loo))?;
        write_svg(&dir.join("ppc_density.svg"), plots::ppc(&bundle))?;
    }
    let bad: Vec<usize> = (0..fit.loo.khat.len()).filter(|&u| fit.loo.khat[u] > KHAT_BAD).collect();
    let mut flagged: Vec<usize> = bad.iter().filter_map(|&u| unit_subject(data, fit.loo.unit, u)).collect();
    flagged.dedup();
    let grid = uniform_grid(CURVE_POINTS);
    for &i in &flagged {
        let id = &data.subjects()[i].id;
        let t = trajectory(&fit, id, &grid, flags.with_noise, derive_seed(seed, 1, i as u64))?;
        write_trajectory(&dir, &t, format)?;
    }
    println!(
        "{} of {} LOO units with k-hat > 0.7; {} flagged subject trajectories written",
        bad.len(),
        fit.loo.n_units(),
        flagged.len()
    );
    println!("posterior predictive envelope coverage {:.3}", bundle.envelope_coverage());
    Ok(0)
}

fn trajectory(fit: &LoadedFit, id: &str, grid: &[f64], with_noise: bool, seed: u64) -> Result<Trajectory> {
    let mut t = subject_trajectory(
        &fit.draws,
        fit.spec.basis(),
        &fit.prepared.data,
        &fit.prepared.standardization,
        id,
        grid,
        with_noise,
        seed,
    )?;
    // Observations on the original scale as read from disk.
    let raw = fit.raw.subject(id)?;
    t.observed_time = raw.times.clone();
    t.observed_value = raw.values.clone();
    Ok(t)
}

fn write_curves(fit: &LoadedFit, format: Format) -> Result<()> {
    let rotated = identify(&fit.draws)?;
    let curves = fitted_curves(
        &rotated,
        fit.spec.basis(),
        &fit.prepared.standardization,
        &fit.prepared.data.time_scale(),
        CURVE_POINTS,
    )?;
    write_atomic_with(&fit.dir.join(MEAN_CURVE_CSV), |w| curves.write_mean_csv(w))?;
    write_atomic_with(&fit.dir.join(PC_CURVES_CSV), |w| curves.write_components_csv(w))?;
    if format == Format::Svg {
        write_svg(&fit.dir.join("mean_curve.svg"), plots::mean_curve(&curves))?;
        for j in 0..curves.components.len() {
            write_svg(&fit.dir.join(format!("pc{}_curves.svg", j + 1)), plots::component(&curves, j))?;
        }
    }
    Ok(())
}

fn predict(flags: Flags) -> Result<u8> {
    let dir = flags.out()?.to_path_buf();
    let fit = load_fit(&dir)?;
    let format = flags.format();
    let seed = flags.seed.unwrap_or(fit.record.seed);
    write_curves(&fit, format)?;
    let data = &fit.prepared.data;
    let ids: Vec<String> = if flags.subjects.is_empty() {
        data.subjects().iter().map(|s| s.id.clone()).collect()
    } else {
        flags.subjects.clone()
    };
    let grid = uniform_grid(CURVE_POINTS);
    for id in &ids {
        let i = data
            .subject_index(id)
            .with_context(|| format!("subject '{id}' is not in the fit"))?;
        let t = trajectory(&fit, id, &grid, flags.with_noise, derive_seed(seed, 1, i as u64))?;
        write_trajectory(&dir, &t, format)?;
    }
    println!("curves and {} subject trajectories written to {}", ids.len(), dir.display());
    Ok(0)
}

fn load_truth(flags: &Flags) -> Result<SimulationTruth> {
    Ok(match &flags.truth {
        Some(p) => SimulationTruth::load(p)?,
        None => SimulationTruth::default_truth(),
    })
}

fn simulate(flags: Flags) -> Result<u8> {
    let base = load_truth(&flags)?;
    let out = flags.out()?.to_path_buf();
    let n = match &flags.n_subjects {
        Some(s) => s.trim().parse().context("--n-subjects must be an integer")?,
        None => base.n_subjects,
    };
    let missing = match &flags.missing {
        Some(s) => s.trim().parse().context("--missing must be a number")?,
        None => base.missingness(),
    };
    let seed = flags.seed_or_generate();
    let truth = base.scenario(n, missing, seed);
    truth.validate()?;
    let data = generate(&truth)?;
    artifacts::ensure_dir(&out)?;
    write_atomic_with(&out.join(artifacts::DATA_CSV), |w| data.write_csv(w))?;
    write_json(&out.join(TRUTH_JSON), &truth)?;
    println!("{} subjects, {} observations written to {}", data.n_subjects(), data.n_total(), out.display());
    Ok(0)
}

fn grid(flags: Flags) -> Result<u8> {
    let base = load_truth(&flags)?;
    let out = flags.out()?.to_path_buf();
    let sizes: Vec<usize> = parse_list(flags.n_subjects.as_deref().unwrap_or("25,50,100"), "--n-subjects")?;
    let missing: Vec<f64> = parse_list(flags.missing.as_deref().unwrap_or("0,0.8"), "--missing")?;
    let scenarios: Vec<Scenario> = sizes
        .iter()
        .flat_map(|&n| {
            missing.iter().map(move |&m| Scenario {
                n_subjects: n,
                missingness: m,
            })
        })
        .collect();
    let seed = flags.seed_or_generate();
    let sampler = flags.sampler(seed);
    sampler.validate()?;
    let config = SimFitConfig {
        chains: sampler.chains,
        warmup_iters: sampler.warmup_iters,
        sampling_iters: sampler.sampling_iters,
    };
    let rows = run_grid(&base, &scenarios, flags.reps.unwrap_or(20), seed, &config)?;
    artifacts::ensure_dir(&out)?;
    write_atomic_with(&out.join(SIM_RESULTS_CSV), |w| write_grid_csv(&rows, w))?;
    let failed = rows.iter().filter(|r| !r.succeeded()).count();
    println!("{} fits, {failed} failed; results in {}", rows.len(), out.join(SIM_RESULTS_CSV).display());
    Ok(if failed > 0 { EXIT_WARN } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("ab-1_c"), "ab-1_c");
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }
}
