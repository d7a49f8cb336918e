//! Long-format longitudinal data: loading, validation, standardization and
//! time rescaling.
//!
//! Observations are grouped by subject in order of first appearance. Within a
//! subject times are sorted ascending and must be distinct.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBJECT_COLUMN: &str = "subject_id";
pub const TIME_COLUMN: &str = "time";
pub const VALUE_COLUMN: &str = "value";

/// One subject's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Subject {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Affine map from the stored time axis back to the original one:
/// `original = origin + span * stored`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    pub origin: f64,
    pub span: f64,
}

impl TimeScale {
    pub const IDENTITY: TimeScale = TimeScale {
        origin: 0.0,
        span: 1.0,
    };

    pub fn to_original(&self, t: f64) -> f64 {
        self.origin + self.span * t
    }

    pub fn from_original(&self, t: f64) -> f64 {
        (t - self.origin) / self.span
    }
}

impl Default for TimeScale {
    fn default() -> Self {
        TimeScale::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    time_scale: TimeScale,
}

impl LongitudinalDataset {
    /// Validates and canonicalizes subject records: times sorted within each
    /// subject, no duplicates, no non-finite entries, no empty subjects.
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let mut seen = HashMap::with_capacity(subjects.len());
        let mut out = Vec::with_capacity(subjects.len());
        for subject in subjects {
            if seen.insert(subject.id.clone(), ()).is_some() {
                return Err(Error::Validation(format!(
                    "subject '{}' appears as more than one record",
                    subject.id
                )));
            }
            out.push(canonicalize(subject)?);
        }
        Ok(LongitudinalDataset {
            subjects: out,
            time_scale: TimeScale::IDENTITY,
        })
    }

    /// Groups `(subject, time, value)` triples by subject in order of first
    /// appearance.
    pub fn from_observations<I, S>(observations: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64, f64)>,
        S: Into<String>,
    {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut subjects: Vec<Subject> = Vec::new();
        for (id, t, y) in observations {
            let id = id.into();
            let slot = match index.get(&id) {
                Some(&slot) => slot,
                None => {
                    index.insert(id.clone(), subjects.len());
                    subjects.push(Subject {
                        id,
                        times: Vec::new(),
                        values: Vec::new(),
                    });
                    subjects.len() - 1
                }
            };
            subjects[slot].times.push(t);
            subjects[slot].values.push(y);
        }
        Self::new(subjects)
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_total(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn time_scale(&self) -> TimeScale {
        self.time_scale
    }

    /// `(t_min, t_max)` over all stored times; `None` for an empty dataset.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        let mut iter = self.subjects.iter().flat_map(|s| s.times.iter().copied());
        let first = iter.next()?;
        Some(iter.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
    }

    /// Time range on the original (pre-rescaling) axis.
    pub fn original_time_range(&self) -> Option<(f64, f64)> {
        self.time_range().map(|(lo, hi)| {
            (
                self.time_scale.to_original(lo),
                self.time_scale.to_original(hi),
            )
        })
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn subject(&self, id: &str) -> Result<&Subject> {
        self.subject_index(id)
            .map(|i| &self.subjects[i])
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    /// All stored times, subject by subject.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    pub fn pooled_values(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect()
    }

    /// Flat `(subject_id, time, value)` view in storage order.
    pub fn observations(&self) -> impl Iterator<Item = (&str, f64, f64)> + '_ {
        self.subjects.iter().flat_map(|s| {
            s.times
                .iter()
                .zip(&s.values)
                .map(move |(&t, &y)| (s.id.as_str(), t, y))
        })
    }

    /// Copy of the dataset restricted to the subjects whose index satisfies
    /// `keep`. Standardization and time scale are carried over unchanged.
    pub fn filter_subjects(&self, mut keep: impl FnMut(usize) -> bool) -> Self {
        LongitudinalDataset {
            subjects: self
                .subjects
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, s)| s.clone())
                .collect(),
            time_scale: self.time_scale,
        }
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                id: s.id.clone(),
                times: s.times.clone(),
                values: s.values.iter().map(|&y| f(y)).collect(),
            })
            .collect();
        LongitudinalDataset {
            subjects,
            time_scale: self.time_scale,
        }
    }

    /// Writes `subject_id,time,value` rows; times are written on the original
    /// axis.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([SUBJECT_COLUMN, TIME_COLUMN, VALUE_COLUMN])?;
        for (id, t, y) in self.observations() {
            let t = self.time_scale.to_original(t);
            w.write_record([id, &t.to_string(), &y.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn canonicalize(mut subject: Subject) -> Result<Subject> {
    if subject.times.len() != subject.values.len() {
        return Err(Error::Validation(format!(
            "subject '{}' has {} times but {} values",
            subject.id,
            subject.times.len(),
            subject.values.len()
        )));
    }
    if subject.times.is_empty() {
        return Err(Error::Validation(format!(
            "subject '{}' has no observations",
            subject.id
        )));
    }
    if let Some((t, y)) = subject
        .times
        .iter()
        .zip(&subject.values)
        .find(|(t, y)| !t.is_finite() || !y.is_finite())
    {
        return Err(Error::Validation(format!(
            "subject '{}' has a non-finite observation (time {t}, value {y})",
            subject.id
        )));
    }
    let mut pairs: Vec<(f64, f64)> = subject
        .times
        .iter()
        .copied()
        .zip(subject.values.iter().copied())
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Validation(format!(
            "subject '{}' has duplicate observations at time {}",
            subject.id, w[0].0
        )));
    }
    subject.times = pairs.iter().map(|p| p.0).collect();
    subject.values = pairs.iter().map(|p| p.1).collect();
    Ok(subject)
}

/// Reads a long-format CSV with header `subject_id,time,value` (extra columns
/// are ignored). Row numbers in errors are file line numbers, header = 1.
pub fn read_csv<R: Read>(reader: R) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column '{name}'")))
    };
    let (c_id, c_t, c_y) = (
        column(SUBJECT_COLUMN)?,
        column(TIME_COLUMN)?,
        column(VALUE_COLUMN)?,
    );

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize, name: &str| -> Result<&str> {
            record.get(c).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field '{name}'"),
            })
        };
        let number = |c: usize, name: &str| -> Result<f64> {
            let raw = field(c, name)?;
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    message: format!("{name} '{raw}' is not a finite number"),
                }),
            }
        };
        let id = field(c_id, SUBJECT_COLUMN)?.to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                message: "empty subject_id".into(),
            });
        }
        observations.push((id, number(c_t, TIME_COLUMN)?, number(c_y, VALUE_COLUMN)?));
    }
    LongitudinalDataset::from_observations(observations)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
}

/// Pooled location/scale used to standardize outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
    pub applied: bool,
}

impl Standardization {
    pub const IDENTITY: Standardization = Standardization {
        mean: 0.0,
        sd: 1.0,
        applied: false,
    };

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    /// Back-transform a standardized level (curve value, quantile, datum).
    pub fn inverse(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }

    /// Back-transform a standardized deviation (component curve, score
    /// spread); the location is not added.
    pub fn inverse_deviation(&self, dz: f64) -> f64 {
        self.sd * dz
    }

    pub fn apply(&self, data: &LongitudinalDataset) -> LongitudinalDataset {
        data.map_values(|y| self.forward(y))
    }

    pub fn invert(&self, data: &LongitudinalDataset) -> LongitudinalDataset {
        data.map_values(|y| self.inverse(y))
    }
}

/// Pooled mean and sample standard deviation (n - 1 denominator) over all
/// observations.
pub fn pooled_moments(data: &LongitudinalDataset) -> Result<(f64, f64)> {
    let n = data.n_total();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "need at least 2 observations to standardize, found {n}"
        )));
    }
    let values = data.pooled_values();
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|y| (y - mean).powi(2)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if !(sd > f64::EPSILON * mean.abs().max(1.0)) {
        return Err(Error::DegenerateData(format!(
            "outcome is constant (sd = {sd})"
        )));
    }
    Ok((mean, sd))
}

pub fn standardize(data: &LongitudinalDataset) -> Result<(LongitudinalDataset, Standardization)> {
    let (mean, sd) = pooled_moments(data)?;
    let s = Standardization {
        mean,
        sd,
        applied: true,
    };
    Ok((s.apply(data), s))
}

/// Maps the observed time range affinely onto [0, 1].
pub fn rescale_time(data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
    let (lo, hi) = data
        .original_time_range()
        .ok_or_else(|| Error::DegenerateTime("dataset is empty".into()))?;
    if !(hi > lo) {
        return Err(Error::DegenerateTime(format!(
            "all observations share the single time {lo}"
        )));
    }
    rescale_time_to(data, lo, hi)
}

/// Maps the known time domain `[lo, hi]` (original axis) onto [0, 1]. Used
/// when the design domain is known in advance, e.g. simulated candidate
/// grids, so that sparse samples do not stretch the axis.
pub fn rescale_time_to(data: &LongitudinalDataset, lo: f64, hi: f64) -> Result<LongitudinalDataset> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateTime(format!(
            "invalid time domain [{lo}, {hi}]"
        )));
    }
    apply_time_scale(
        data,
        TimeScale {
            origin: lo,
            span: hi - lo,
        },
    )
}

/// Re-expresses the dataset's times under `target` (e.g. a stored scale).
pub fn apply_time_scale(data: &LongitudinalDataset, target: TimeScale) -> Result<LongitudinalDataset> {
    let (lo, hi) = (target.origin, target.origin + target.span);
    if !(target.span > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::DegenerateTime(format!("invalid time scale {target:?}")));
    }
    let current = data.time_scale;
    let mut subjects = Vec::with_capacity(data.subjects.len());
    for s in &data.subjects {
        let mut times = Vec::with_capacity(s.times.len());
        for &t in &s.times {
            let original = current.to_original(t);
            let mapped = target.from_original(original);
            if !(-1e-12..=1.0 + 1e-12).contains(&mapped) {
                return Err(Error::Validation(format!(
                    "time {original} of subject '{}' lies outside [{lo}, {hi}]",
                    s.id
                )));
            }
            times.push(mapped.clamp(0.0, 1.0));
        }
        subjects.push(Subject {
            id: s.id.clone(),
            times,
            values: s.values.clone(),
        });
    }
    Ok(LongitudinalDataset {
        subjects,
        time_scale: target,
    })
}
