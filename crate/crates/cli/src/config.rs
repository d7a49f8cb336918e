//! Command-line flags and the optional TOML config file they override.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use sfpca::psis::LooUnit;
use sfpca::sampler::SamplerConfig;
use sfpca::spline::KnotPlacement;

#[derive(Debug, Parser)]
#[command(name = "sfpca", version, about = "Bayesian sparse functional PCA for longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write its artifacts to --out.
    Fit(Flags),
    /// Fit every (PCs, knots) cell of a grid and recommend a model.
    Select(Flags),
    /// Pareto k, posterior predictive densities and flagged-subject trajectories for the fit in --out.
    Diagnose(Flags),
    /// Fitted curves and subject trajectories for the fit in --out.
    Predict(Flags),
    /// Simulate a dataset from a truth file (or the built-in truth).
    Simulate(Flags),
    /// Repeated simulate-and-fit over scenarios; writes sim_results.csv.
    RunGrid(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    /// CSV plus an SVG rendering of each plot.
    Svg,
}

/// Flags shared by all commands. Each one may also come from `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML file with `key = value` settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Long-format CSV with columns subject_id, time, value.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of principal components, `A` or a range `A:B`.
    #[arg(long)]
    pub pcs: Option<String>,
    /// Number of internal knots, `A` or a range `A:B`.
    #[arg(long)]
    pub knots: Option<String>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Master seed; a random one is generated, printed and stored when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (for diagnose and predict, the fit directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include measurement noise in trajectory bands.
    #[arg(long)]
    pub with_noise: bool,
    /// Posterior predictive replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// LOO unit: marginal, conditional or observation.
    #[arg(long)]
    pub loo: Option<String>,
    /// Knot placement: quantile or uniform.
    #[arg(long)]
    pub placement: Option<String>,
    /// Subject ids for predict (repeatable); all subjects when omitted.
    #[arg(long = "subject")]
    pub subjects: Vec<String>,
    /// Simulation truth JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Number of simulated subjects; a comma list for run-grid.
    #[arg(long = "n-subjects")]
    pub n_subjects: Option<String>,
    /// Missing proportion; a comma list for run-grid.
    #[arg(long)]
    pub missing: Option<String>,
    /// Replicates per scenario for run-grid.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(untagged)]
enum Value {
    Int(u64),
    Float(f64),
    Text(String),
    #[default]
    Missing,
}

impl Value {
    fn text(&self) -> Option<String> {
        match self {
            Value::Int(v) => Some(v.to_string()),
            Value::Float(v) => Some(v.to_string()),
            Value::Text(s) => Some(s.clone()),
            Value::Missing => None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    data: Option<PathBuf>,
    pcs: Value,
    knots: Value,
    chains: Option<usize>,
    warmup: Option<usize>,
    iters: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    with_noise: Option<bool>,
    replicates: Option<usize>,
    format: Option<Format>,
    loo: Option<String>,
    placement: Option<String>,
    subjects: Option<Vec<String>>,
    truth: Option<PathBuf>,
    n_subjects: Value,
    missing: Value,
    reps: Option<usize>,
}

impl Flags {
    /// Fills unset flags from `--config`, if given.
    pub fn resolve(mut self) -> Result<Flags> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let file: FileConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        self.data = self.data.or(file.data.map(rel));
        self.pcs = self.pcs.or(file.pcs.text());
        self.knots = self.knots.or(file.knots.text());
        self.chains = self.chains.or(file.chains);
        self.warmup = self.warmup.or(file.warmup);
        self.iters = self.iters.or(file.iters);
        self.seed = self.seed.or(file.seed);
        self.out = self.out.or(file.out.map(rel));
        self.with_noise = self.with_noise || file.with_noise.unwrap_or(false);
        self.replicates = self.replicates.or(file.replicates);
        self.format = self.format.or(file.format);
        self.loo = self.loo.or(file.loo);
        self.placement = self.placement.or(file.placement);
        if self.subjects.is_empty() {
            self.subjects = file.subjects.unwrap_or_default();
        }
        self.truth = self.truth.or(file.truth.map(rel));
        self.n_subjects = self.n_subjects.or(file.n_subjects.text());
        self.missing = self.missing.or(file.missing.text());
        self.reps = self.reps.or(file.reps);
        Ok(self)
    }

    pub fn data(&self) -> Result<&Path> {
        self.data.as_deref().context("--data is required")
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required")
    }

    /// The given seed, or a fresh random one (reported on stderr).
    pub fn seed_or_generate(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let seed = rand::random::<u64>() >> 1;
            eprintln!("seed: {seed}");
            seed
        })
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        let d = SamplerConfig::default();
        SamplerConfig {
            chains: self.chains.unwrap_or(d.chains),
            warmup_iters: self.warmup.unwrap_or(d.warmup_iters),
            sampling_iters: self.iters.unwrap_or(d.sampling_iters),
            seed,
            ..d
        }
    }

    pub fn loo_unit(&self) -> Result<LooUnit> {
        Ok(match &self.loo {
            Some(s) => s.parse()?,
            None => LooUnit::default(),
        })
    }

    pub fn placement(&self) -> Result<KnotPlacement> {
        match self.placement.as_deref() {
            None | Some("quantile") => Ok(KnotPlacement::Quantile),
            Some("uniform") => Ok(KnotPlacement::Uniform),
            Some(other) => bail!("unknown knot placement '{other}' (expected quantile or uniform)"),
        }
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or_default()
    }

    pub fn pcs_range(&self) -> Result<RangeInclusive<usize>> {
        parse_range(self.pcs.as_deref().context("--pcs is required")?, "--pcs")
    }

    pub fn knots_range(&self) -> Result<RangeInclusive<usize>> {
        parse_range(self.knots.as_deref().context("--knots is required")?, "--knots")
    }
}

/// `A` or `A:B` with `A <= B`.
pub fn parse_range(text: &str, flag: &str) -> Result<RangeInclusive<usize>> {
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .with_context(|| format!("{flag}: '{s}' is not a non-negative integer"))
    };
    let (a, b) = match text.split_once(':') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let a = parse(text)?;
            (a, a)
        }
    };
    if a > b {
        bail!("{flag}: empty range {text}");
    }
    Ok(a..=b)
}

/// A single value, or an error if a range was given.
pub fn single(range: &RangeInclusive<usize>, flag: &str) -> Result<usize> {
    if range.start() != range.end() {
        bail!("{flag} takes a single value for this command");
    }
    Ok(*range.start())
}

pub fn parse_list<T: std::str::FromStr>(text: &str, flag: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("{flag}: cannot parse '{s}'"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("2", "--pcs").unwrap(), 2..=2);
        assert_eq!(parse_range("1:3", "--pcs").unwrap(), 1..=3);
        assert!(parse_range("3:1", "--pcs").is_err());
        assert!(parse_range("x", "--pcs").is_err());
        assert!(single(&(1..=3), "--pcs").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "pcs = \"1:3\"\nknots = 2\nchains = 2\nseed = 5\ndata = \"d.csv\"\n").unwrap();
        let flags = Flags {
            config: Some(path),
            chains: Some(3),
            ..Flags::default()
        }
        .resolve()
        .unwrap();
        assert_eq!(flags.chains, Some(3));
        assert_eq!(flags.seed, Some(5));
        assert_eq!(flags.pcs_range().unwrap(), 1..=3);
        assert_eq!(flags.knots_range().unwrap(), 2..=2);
        assert_eq!(flags.data.unwrap(), dir.path().join("d.csv"));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "chainz = 2\n").unwrap();
        let flags = Flags {
            config: Some(path),
            ..Flags::default()
        };
        assert!(flags.resolve().is_err());
    }
}
