use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlta::{FitOptions, ModelConfig, Variant};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(name = "mlta", version, about = "Mixture of latent trait analyzers for binary bipartite networks")]
pub struct Cli {
    /// Upper bound on worker threads (starts, grid cells, replicates).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    #[serde(skip)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Dichotomize a raw survey extract and encode its covariates.
    Ingest(IngestArgs),
    /// Draw a dataset from a known model.
    Simulate(SimulateArgs),
    /// Fit one (G, D, variant) configuration.
    Fit(FitArgs),
    /// Fit a grid of configurations and pick the lowest BIC.
    Select(SelectArgs),
    /// Bootstrap standard errors and percentile intervals.
    Bootstrap(BootstrapArgs),
    /// MAP groups, predicted tie probabilities and membership by covariate.
    Predict(PredictArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Select(_) => "select",
            Command::Bootstrap(_) => "bootstrap",
            Command::Predict(_) => "predict",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Raw CSV; first column `id`.
    #[arg(long)]
    pub raw: PathBuf,
    /// JSON document with `items`, `covariates` and `missing`.
    #[arg(long)]
    pub rules: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Missing-value marker, overriding the rules file.
    #[arg(long)]
    pub missing: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EstimationArgs {
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative change of the bound that ends a start.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Cap on outer iterations per start.
    #[arg(long = "max-iter", default_value_t = 1000)]
    pub max_iter: usize,
}

impl EstimationArgs {
    pub fn options(&self) -> Result<FitOptions, CliError> {
        let opts = FitOptions {
            tol: self.tol,
            max_outer: self.max_iter,
            starts: self.starts,
            seed: self.seed,
            ..FitOptions::default()
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub groups: usize,
    #[arg(long = "trait-dim")]
    pub trait_dim: usize,
    /// Share the slopes across groups.
    #[arg(long)]
    pub constrained: bool,
}

impl ModelArgs {
    pub fn config(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig::new(self.groups, self.trait_dim, variant(self.constrained))?)
    }
}

pub fn variant(constrained: bool) -> Variant {
    if constrained {
        Variant::Constrained
    } else {
        Variant::Unconstrained
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Generating model as written by `fit`; random parameters otherwise.
    #[arg(long, conflicts_with_all = ["groups", "trait_dim", "constrained", "skills", "param_range"])]
    pub model: Option<PathBuf>,
    #[arg(long, required_unless_present = "model")]
    pub groups: Option<usize>,
    #[arg(long = "trait-dim", required_unless_present = "model")]
    pub trait_dim: Option<usize>,
    #[arg(long)]
    pub constrained: bool,
    #[arg(long)]
    pub skills: Option<usize>,
    /// Random parameters are uniform on [-range, range].
    #[arg(long = "param-range")]
    pub param_range: Option<f64>,
    /// Number of senders, with independent binary covariates.
    #[arg(long = "n", required_unless_present = "design")]
    pub n: Option<usize>,
    /// Probability that each binary covariate equals 1.
    #[arg(long = "covariate-probs", value_delimiter = ',', default_value = "0.5,0.3", conflicts_with = "design")]
    pub covariate_probs: Vec<f64>,
    /// Reuse the senders and design of an existing dataset directory.
    #[arg(long, conflicts_with = "n")]
    pub design: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Dataset directory from `ingest` or `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub est: EstimationArgs,
    /// `truth.json` from `simulate`; adds a recovery report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantChoice {
    Both,
    Unconstrained,
    Constrained,
}

impl VariantChoice {
    pub fn variants(self) -> Vec<Variant> {
        match self {
            VariantChoice::Both => vec![Variant::Unconstrained, Variant::Constrained],
            VariantChoice::Unconstrained => vec![Variant::Unconstrained],
            VariantChoice::Constrained => vec![Variant::Constrained],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BicSource {
    /// Final variational bound.
    Elbo,
    /// Gauss-Hermite log-likelihood at the fitted parameters (D <= 2).
    Quadrature,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Group counts, e.g. `1..4` (inclusive) or `1,2,4`.
    #[arg(long = "grid-g", default_value = "1..4")]
    pub grid_g: GridRange,
    #[arg(long = "grid-d", default_value = "0..3")]
    pub grid_d: GridRange,
    #[arg(long, value_enum, default_value_t = VariantChoice::Both)]
    pub variants: VariantChoice,
    #[arg(long = "bic-source", value_enum, default_value_t = BicSource::Elbo)]
    pub bic_source: BicSource,
    /// Quadrature nodes per trait dimension for `--bic-source quadrature`.
    #[arg(long, default_value_t = 80)]
    pub nodes: usize,
    #[command(flatten)]
    pub est: EstimationArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub est: EstimationArgs,
    #[arg(long = "bootstrap-samples", default_value_t = 200)]
    pub bootstrap_samples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Also write the aligned replicate matrix.
    #[arg(long)]
    pub replicates: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlugIn {
    /// Traits at their posterior means.
    Mean,
    /// Traits integrated over their posterior (D <= 2).
    Integrated,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `model.json` from `fit`, `select` or `bootstrap`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "plug-in", value_enum, default_value_t = PlugIn::Mean)]
    pub plug_in: PlugIn,
    #[arg(long, default_value_t = 80)]
    pub nodes: usize,
    /// Covariates to tabulate membership by; all of them when absent.
    #[arg(long, value_delimiter = ',')]
    pub by: Vec<String>,
}

/// Inclusive list of small non-negative integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct GridRange(pub Vec<usize>);

impl FromStr for GridRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("`{t}` is not a count"));
        let mut out = if let Some((lo, hi)) = s.split_once("..") {
            let hi = hi.strip_prefix('=').unwrap_or(hi);
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            if lo > hi {
                return Err(format!("empty range `{s}`"));
            }
            (lo..=hi).collect()
        } else {
            s.split(',').map(parse).collect::<Result<Vec<_>, _>>()?
        };
        out.sort_unstable();
        out.dedup();
        if out.is_empty() {
            return Err("empty grid".into());
        }
        Ok(GridRange(out))
    }
}

/// Flag combinations clap cannot express.
pub fn check_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    if let Some(r) = a.param_range {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(CliError::usage("--param-range must be finite and non-negative"));
        }
    }
    if a.covariate_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(CliError::usage("--covariate-probs must lie in [0, 1]"));
    }
    Ok(())
}
