//! Command options. Every option can come from a flag or from the matching
//! key of a TOML config file; flags win.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use crate::CliError;

/// Copies every field of `file` that is unset in `flags`.
macro_rules! merge_fields {
    ($flags:expr, $file:expr; $($f:ident),+ $(,)?) => {{
        let mut out = $flags;
        let file = $file;
        $( if out.$f.is_none() { out.$f = file.$f; } )+
        out
    }};
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOpts {
    /// Preset name: setting1..setting8, optionally with a -desk suffix.
    #[arg(long)]
    pub preset: Option<String>,
    /// Replications.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Horizon T.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Comma-separated agent labels (default: every agent of the preset).
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<String>>,
    /// Output files; `.json` gets JSON, anything else the curve CSV.
    #[arg(long, value_delimiter = ',')]
    pub out: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl SimulateOpts {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; preset, reps, seed, horizon, agents, out, jobs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MrtSimOpts {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Outcome family: poisson, op, zip or ziop.
    #[arg(long)]
    pub family: Option<String>,
    /// Gamma shape for the overdispersed families.
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pmin: Option<f64>,
    #[arg(long)]
    pub pmax: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub out: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl MrtSimOpts {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; users, days, family, omega, reps, seed, pmin, pmax, agents, out, jobs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenMrtOpts {
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Destination MRT CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenMrtOpts {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; users, days, family, omega, seed, out)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayOpts {
    /// MRT CSV to replay.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// User-level bootstrap resamples; 1 evaluates the log once.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub agents: Option<Vec<String>>,
    #[arg(long)]
    pub pmin: Option<f64>,
    #[arg(long)]
    pub pmax: Option<f64>,
    /// Ridge weight of the per-user priors.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Results table (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl ReplayOpts {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; data, bootstrap, seed, agents, pmin, pmax, ridge, out, jobs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOpts {
    /// CSV of feature columns followed by the count outcome, or an MRT CSV
    /// with `--per-user`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// poisson, nb, zip or zinb.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// JSON file with the prior center (`{"beta": [...], "gamma": [...]}`).
    #[arg(long)]
    pub center: Option<PathBuf>,
    /// Treat the data as an MRT log and fit each user separately.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_user: Option<bool>,
    /// JSON report of every fit.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl FitOpts {
    pub fn merge(self, file: Self) -> Self {
        merge_fields!(self, file; data, model, ridge, center, per_user, out)
    }
}

/// Contents of a `--config` file: one optional table per command.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub simulate: SimulateOpts,
    #[serde(default, rename = "mrt-sim")]
    pub mrt_sim: MrtSimOpts,
    #[serde(default, rename = "gen-mrt")]
    pub gen_mrt: GenMrtOpts,
    #[serde(default)]
    pub replay: ReplayOpts,
    #[serde(default)]
    pub fit: FitOpts,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
