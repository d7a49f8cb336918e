//! End-to-end fitting: scaling, basis construction, sampling, rotation,
//! diagnostics and PSIS-LOO, plus model selection over a grid.

use std::ops::RangeInclusive;
use std::sync::Arc;

use crate::data::{rescale_time, rescale_time_to, standardize, LongitudinalDataset, Standardization};
use crate::draws::{fit_diagnostics, sample_posterior, PosteriorDraws};
use crate::error::{Error, Result};
use crate::loo::psis_loo;
use crate::model::ModelSpec;
use crate::psis::{compare_models, Comparison, LooReport, LooUnit, ModelLabel};
use crate::rotate::{identify, variance_explained, RotatedDraws, VarianceExplained};
use crate::sampler::{ConvergenceReport, SampleOutput, SamplerConfig};
use crate::spline::{place_knots_with, KnotPlacement, OrthonormalBasis, DEFAULT_QUAD_POINTS, ORDER};

/// A fit whose monitored R-hat exceeds this is treated as failed.
pub const FAILURE_RHAT: f64 = 1.1;

/// Data on the model's scales: times in [0, 1], pooled values standardized.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub data: LongitudinalDataset,
    pub standardization: Standardization,
}

/// Rescales times (to the observed range, or to `domain` when given) and
/// standardizes the outcome.
pub fn prepare(raw: &LongitudinalDataset, domain: Option<(f64, f64)>) -> Result<PreparedData> {
    let rescaled = match domain {
        Some((lo, hi)) => rescale_time_to(raw, lo, hi)?,
        None => rescale_time(raw)?,
    };
    let (data, standardization) = standardize(&rescaled)?;
    Ok(PreparedData { data, standardization })
}

pub fn build_basis(data: &LongitudinalDataset, n_knots: usize, placement: KnotPlacement) -> Result<Arc<OrthonormalBasis>> {
    let knots = place_knots_with(&data.pooled_times(), n_knots, placement)?;
    Ok(Arc::new(OrthonormalBasis::build(&knots, DEFAULT_QUAD_POINTS)?))
}

/// Checks `1 <= k < q = knots + 4` before any computation.
pub fn check_dimensions(pcs: usize, knots: usize) -> Result<()> {
    let q = knots + ORDER;
    if pcs == 0 || pcs >= q {
        return Err(Error::Config(format!(
            "{pcs} principal components with {knots} internal knots violates 1 <= PCs < knots + 4 = {q}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub label: ModelLabel,
    pub sampler: SamplerConfig,
    pub spec: ModelSpec,
    pub draws: PosteriorDraws,
    pub output: SampleOutput,
    pub rotated: RotatedDraws,
    pub convergence: ConvergenceReport,
    pub loo: LooReport,
    pub variance: VarianceExplained,
}

impl FittedModel {
    /// Sampler failure short of an error: missing or large R-hat.
    pub fn failed(&self) -> bool {
        self.convergence.max_rhat.is_none_or(|r| r > FAILURE_RHAT)
    }
}

pub fn fit_model(
    prepared: &PreparedData,
    basis: Arc<OrthonormalBasis>,
    k: usize,
    config: &SamplerConfig,
    unit: LooUnit,
) -> Result<FittedModel> {
    let label = ModelLabel {
        pcs: k,
        knots: basis.internal_knots().len(),
    };
    check_dimensions(label.pcs, label.knots)?;
    let spec = ModelSpec::new(k, basis, &prepared.data)?;
    let (draws, output) = sample_posterior(&spec, &prepared.data, config)?;
    let convergence = fit_diagnostics(&draws, &output);
    let rotated = identify(&draws)?;
    let variance = variance_explained(&rotated);
    let loo = psis_loo(&spec, &prepared.data, &draws, unit)?;
    Ok(FittedModel {
        label,
        sampler: config.clone(),
        spec,
        draws,
        output,
        rotated,
        convergence,
        loo,
        variance,
    })
}

#[derive(Debug)]
pub struct CellOutcome {
    pub label: ModelLabel,
    pub fit: Result<FittedModel>,
}

impl CellOutcome {
    /// The fit, if it ran and converged.
    pub fn usable(&self) -> Option<&FittedModel> {
        self.fit.as_ref().ok().filter(|f| !f.failed())
    }
}

#[derive(Debug)]
pub struct Selection {
    pub cells: Vec<CellOutcome>,
    /// `None` when no cell produced a usable fit.
    pub comparison: Option<Comparison>,
}

/// Fits every `(pcs, knots)` cell and compares the usable ones. All cells
/// share the prepared data and, for a given knot count, the same basis.
pub fn select(
    prepared: &PreparedData,
    pcs: RangeInclusive<usize>,
    knots: RangeInclusive<usize>,
    placement: KnotPlacement,
    config: &SamplerConfig,
    unit: LooUnit,
) -> Result<Selection> {
    for p in pcs.clone() {
        for q in knots.clone() {
            check_dimensions(p, q)?;
        }
    }
    let mut cells = Vec::new();
    for n_knots in knots {
        let basis = build_basis(&prepared.data, n_knots, placement)?;
        for k in pcs.clone() {
            let fit = fit_model(prepared, Arc::clone(&basis), k, config, unit);
            cells.push(CellOutcome {
                label: ModelLabel { pcs: k, knots: n_knots },
                fit,
            });
        }
    }
    let usable: Vec<(ModelLabel, &LooReport)> = cells
        .iter()
        .filter_map(|c| c.usable().map(|f| (c.label, &f.loo)))
        .collect();
    let comparison = if usable.is_empty() {
        None
    } else {
        Some(compare_models(&usable)?)
    };
    Ok(Selection { cells, comparison })
}
