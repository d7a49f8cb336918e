//! On-disk fit artifacts. Every file is written to a temporary sibling and
//! renamed into place, so an interrupted run never leaves a partial file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::data::{self, LongitudinalDataset, Standardization, TimeScale};
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::predict::{fitted_curves, write_scores_csv};
use crate::psis::{LooReport, LooUnit};
use crate::rotate::VarianceExplained;
use crate::sampler::{ConvergenceReport, SamplerConfig};
use crate::spline::{BasisSummary, OrthonormalBasis};
use crate::workflow::{FittedModel, PreparedData};

pub const SCHEMA_VERSION: u32 = 1;

pub const FIT_JSON: &str = "fit.json";
pub const DRAWS_CSV: &str = "draws.csv";
pub const DATA_CSV: &str = "data.csv";
pub const LOO_JSON: &str = "loo.json";
pub const KHAT_CSV: &str = "khat.csv";
pub const MEAN_CURVE_CSV: &str = "mean_curve.csv";
pub const PC_CURVES_CSV: &str = "pc_curves.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const LOADINGS_CSV: &str = "loadings.csv";
pub const PPC_CSV: &str = "ppc_density.csv";

/// Grid size for exported curves.
pub const CURVE_POINTS: usize = 101;

/// Writes `path` through `fill`, atomically.
pub fn write_atomic_with(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Everything needed to reload a fit, plus its headline results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub schema_version: u32,
    /// Seconds since the Unix epoch; the only field that changes between
    /// identical runs.
    pub created_unix: u64,
    pub seed: u64,
    pub pcs: usize,
    pub knots: usize,
    pub loo_unit: LooUnit,
    pub sampler: SamplerConfig,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub subject_ids: Vec<String>,
    pub standardization: Standardization,
    pub time_scale: TimeScale,
    pub basis: BasisSummary,
    pub variance_explained: VarianceExplained,
    pub excluded_draws: Vec<(usize, String)>,
    pub convergence: ConvergenceReport,
    pub elppd: f64,
    pub elppd_se: f64,
    pub n_bad_khat: usize,
    pub warnings: Vec<String>,
}

impl FitRecord {
    pub fn has_warnings(&self) -> bool {
        !self.warnings.is_empty()
    }
}

pub fn subject_ids(data: &LongitudinalDataset) -> Vec<String> {
    data.subjects().iter().map(|s| s.id.clone()).collect()
}

/// Labels of the LOO units: subject ids, or `id:j` for single observations.
pub fn unit_ids(data: &LongitudinalDataset, unit: LooUnit) -> Vec<String> {
    match unit {
        LooUnit::Marginal | LooUnit::Conditional => subject_ids(data),
        LooUnit::Observation => data
            .subjects()
            .iter()
            .flat_map(|s| (0..s.len()).map(move |j| format!("{}:{j}", s.id)))
            .collect(),
    }
}

/// Index of the subject that LOO unit `index` belongs to.
pub fn unit_subject(data: &LongitudinalDataset, unit: LooUnit, index: usize) -> Option<usize> {
    match unit {
        LooUnit::Marginal | LooUnit::Conditional => (index < data.n_subjects()).then_some(index),
        LooUnit::Observation => {
            let mut seen = 0;
            for (i, s) in data.subjects().iter().enumerate() {
                seen += s.len();
                if index < seen {
                    return Some(i);
                }
            }
            None
        }
    }
}

/// Writes the full artifact set of a fit into `dir`.
pub fn save_fit(dir: &Path, raw: &LongitudinalDataset, prepared: &PreparedData, fit: &FittedModel) -> Result<FitRecord> {
    ensure_dir(dir)?;
    let ids = subject_ids(&prepared.data);
    let mut warnings = fit.convergence.warnings.clone();
    if fit.loo.n_bad > 0 {
        warnings.push(format!("{} units have Pareto k above 0.7", fit.loo.n_bad));
    }
    if !fit.rotated.excluded.is_empty() {
        warnings.push(format!("{} draws excluded as rank deficient", fit.rotated.excluded.len()));
    }
    let record = FitRecord {
        schema_version: SCHEMA_VERSION,
        created_unix: unix_time(),
        seed: fit.sampler.seed,
        pcs: fit.label.pcs,
        knots: fit.label.knots,
        loo_unit: fit.loo.unit,
        sampler: fit.sampler.clone(),
        n_subjects: prepared.data.n_subjects(),
        n_observations: prepared.data.n_total(),
        subject_ids: ids.clone(),
        standardization: prepared.standardization,
        time_scale: prepared.data.time_scale(),
        basis: fit.spec.basis().summary(),
        variance_explained: fit.variance.clone(),
        excluded_draws: fit.rotated.excluded.clone(),
        convergence: fit.convergence.clone(),
        elppd: fit.loo.elppd,
        elppd_se: fit.loo.se,
        n_bad_khat: fit.loo.n_bad,
        warnings,
    };
    write_atomic_with(&dir.join(DATA_CSV), |w| raw.write_csv(w))?;
    write_atomic_with(&dir.join(DRAWS_CSV), |w| fit.draws.write_csv(w))?;
    write_json(&dir.join(LOO_JSON), &fit.loo)?;
    let units = unit_ids(&prepared.data, fit.loo.unit);
    write_atomic_with(&dir.join(KHAT_CSV), |w| fit.loo.write_khat_csv(w, &units))?;
    write_atomic_with(&dir.join(SCORES_CSV), |w| write_scores_csv(&fit.rotated, &ids, w))?;
    write_atomic_with(&dir.join(LOADINGS_CSV), |w| fit.rotated.write_loadings_csv(w))?;
    let curves = fitted_curves(
        &fit.rotated,
        fit.spec.basis(),
        &prepared.standardization,
        &prepared.data.time_scale(),
        CURVE_POINTS,
    )?;
    write_atomic_with(&dir.join(MEAN_CURVE_CSV), |w| curves.write_mean_csv(w))?;
    write_atomic_with(&dir.join(PC_CURVES_CSV), |w| curves.write_components_csv(w))?;
    // fit.json goes last: its presence marks a complete fit directory.
    write_json(&dir.join(FIT_JSON), &record)?;
    Ok(record)
}

/// A fit read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub dir: PathBuf,
    pub record: FitRecord,
    pub raw: LongitudinalDataset,
    pub prepared: PreparedData,
    pub spec: ModelSpec,
    pub draws: PosteriorDraws,
    pub loo: LooReport,
}

pub fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let record: FitRecord = read_json(&dir.join(FIT_JSON))?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "fit.json schema version {} is not supported (expected {SCHEMA_VERSION})",
            record.schema_version
        )));
    }
    let raw = data::read_csv(open(&dir.join(DATA_CSV))?)?;
    let rescaled = data::apply_time_scale(&raw, record.time_scale)?;
    let prepared = PreparedData {
        data: record.standardization.apply(&rescaled),
        standardization: record.standardization,
    };
    let basis = Arc::new(OrthonormalBasis::from_summary(&record.basis)?);
    let spec = ModelSpec::new(record.pcs, basis, &prepared.data)?;
    let draws = PosteriorDraws::read_csv(spec.layout(), open(&dir.join(DRAWS_CSV))?)?;
    let loo: LooReport = read_json(&dir.join(LOO_JSON))?;
    Ok(LoadedFit {
        dir: dir.to_path_buf(),
        record,
        raw,
        prepared,
        spec,
        draws,
        loo,
    })
}
