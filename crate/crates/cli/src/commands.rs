use std::path::Path;

use mlta::bootstrap::align_labels;
use mlta::data::{format_real, RawSurveyTable};
use mlta::selection::quadrature_rescore;
use mlta::synth::{self, synthetic_design};
use mlta::variational::{elbo, variational_state};
use mlta::{
    adjusted_rand_index, bootstrap_se, covariate_distribution, grid_search, group_probs_by_covariate, io, map_assign,
    predicted_skill_probs, random_model, simulate as simulate_model, tie_density, BootstrapSpec, Dataset, IngestSchema,
    MltaError, MltaModel, ModelConfig, QuadratureSpec, SelectionGrid, SimTruth, TraitPlugIn,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::args::{self, BicSource, BootstrapArgs, Cli, FitArgs, IngestArgs, PlugIn, PredictArgs, SelectArgs, SimulateArgs};
use crate::error::{Class, CliError};
use crate::run::Run;

/// Settings files: absent or malformed ones are configuration errors.
fn load_config<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::new(Class::Config, "config/unreadable", format!("{what} file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| {
        let code = if e.is_data() { "config/schema" } else { "config/syntax" };
        CliError::new(Class::Config, code, format!("{what} file {}: {e}", path.display()))
    })
}

fn load_dataset(dir: &Path, run: &mut Run) -> Result<Dataset, CliError> {
    let data = io::read_dataset(dir).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("dataset {}: {}", dir.display(), err.message);
        err
    })?;
    run.input_dataset(dir)?;
    Ok(data)
}

/// Adds the CSV line of the offending respondent to record-level errors.
fn locate(e: MltaError, raw: &RawSurveyTable) -> CliError {
    let id = match &e {
        MltaError::UnknownLevel { id, .. } | MltaError::UnseenCategory { id, .. } => Some(id.clone()),
        _ => None,
    };
    let mut err = CliError::from(e);
    if let Some(line) = id.and_then(|id| raw.ids.iter().position(|x| *x == id)) {
        err.message = format!("line {}: {}", line + 2, err.message);
    }
    err
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn ingest(cli: &Cli, a: &IngestArgs) -> Result<(), CliError> {
    let schema: IngestSchema = load_config(&a.rules, "rules")?;
    let mut run = Run::new(&a.out)?;
    run.input(&a.rules)?;
    run.input(&a.raw)?;
    let missing = a.missing.clone().unwrap_or_else(|| schema.missing.clone());
    let raw = RawSurveyTable::from_csv_path(&a.raw, &missing)?;
    let (data, warnings) = mlta::ingest(&raw, &schema).map_err(|e| locate(e, &raw))?;
    for w in warnings {
        run.warn(w);
    }
    run.dataset(&data)?;

    let density = tie_density(&data.incidence);
    let shares = covariate_distribution(&data.design);
    run.write_with("summary.csv", |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["measure", "variable", "category", "value"])?;
        for (k, v) in ["senders", "skills", "dropped"].iter().zip([data.n(), data.r(), data.dropped]) {
            wtr.write_record(["count", k, "", &v.to_string()])?;
        }
        for (s, d) in data.incidence.skills.iter().zip(&density) {
            wtr.write_record(["tie_density", s, "", &format_real(*d)])?;
        }
        for (var, cat, share) in &shares {
            wtr.write_record(["covariate_share", var, cat, &format_real(*share)])?;
        }
        wtr.flush()?;
        Ok(())
    })?;
    println!("N={} R={} dropped={}", data.n(), data.r(), data.dropped);
    for (s, d) in data.incidence.skills.iter().zip(&density) {
        println!("  {s}: {d:.3}");
    }
    run.finish(cli, None)
}

pub fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<(), CliError> {
    args::check_simulate(a)?;
    let mut run = Run::new(&a.out)?;
    let design = match (&a.design, a.n) {
        (Some(dir), _) => load_dataset(dir, &mut run)?.design,
        (None, Some(n)) => synthetic_design(n, &a.covariate_probs, mlta::rng::child_seed(a.seed, 0xDE5, 0)),
        (None, None) => return Err(CliError::usage("either --n or --design is required")),
    };
    let model: MltaModel = match &a.model {
        Some(path) => {
            run.input(path)?;
            load_config(path, "model")?
        }
        None => {
            let cfg = ModelConfig::new(
                a.groups.unwrap_or_default(),
                a.trait_dim.unwrap_or_default(),
                args::variant(a.constrained),
            )?;
            let r = a.skills.unwrap_or(7);
            if r == 0 {
                return Err(CliError::usage("--skills must be at least 1"));
            }
            let range = a.param_range.unwrap_or(2.0);
            let mut m = random_model(cfg, r, design.n_cols(), range, mlta::rng::child_seed(a.seed, 0x30DE, 0))?;
            m.covariates = design.columns.clone();
            m
        }
    };
    let truth = simulate_model(&model, &design, a.seed)?;
    run.dataset(truth.dataset())?;
    run.json("truth.json", &truth)?;
    run.json("model.json", &truth.model)?;
    println!(
        "simulated N={} R={} from {} with seed {}",
        truth.dataset().n(),
        truth.dataset().r(),
        truth.model.config,
        a.seed
    );
    run.finish(cli, Some(a.seed))
}

#[derive(Debug, Serialize)]
struct Recovery {
    config: ModelConfig,
    n: usize,
    /// Mean absolute error of the aligned attractiveness parameters.
    mae_b: f64,
    max_abs_error_b: f64,
    /// Only for D = 1, where the slopes are identified up to sign.
    mae_w: Option<f64>,
    mae_beta: Option<f64>,
    adjusted_rand: Option<f64>,
    fit_elbo: f64,
    /// Bound at the generating parameters, optimized over the variational
    /// parameters only.
    truth_elbo: f64,
    /// Quadrature log-likelihoods, D <= 2 only.
    fit_loglik: Option<f64>,
    truth_loglik: Option<f64>,
    aligned_model: MltaModel,
}

fn mae(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = a.zip(b).fold((0.0, 0usize), |(s, c), (x, y)| (s + (x - y).abs(), c + 1));
    sum / count.max(1) as f64
}

fn recovery(data: &Dataset, truth: &SimTruth, fitted: &mlta::FitResult) -> Result<Recovery, CliError> {
    let t = &truth.model;
    if t.config != fitted.model.config || t.n_skills() != data.r() || t.n_covariates() != data.p() {
        return Err(CliError::new(
            Class::Config,
            "fit/truth-mismatch",
            format!("truth model {} does not match the fitted {}", t.config, fitted.model.config),
        ));
    }
    let aligned = align_labels(t, &fitted.model)?;
    let abs_b: Vec<f64> = t.items.b.iter().zip(aligned.items.b.iter()).map(|(x, y)| (x - y).abs()).collect();
    let cfg = t.config;
    let mae_w = (cfg.trait_dim == 1).then(|| mae(t.items.w.iter().copied(), aligned.items.w.iter().copied()));
    let mae_beta = (cfg.groups > 1).then(|| mae(t.gating.beta.iter().copied(), aligned.gating.beta.iter().copied()));
    let adjusted_rand = if truth.z_true.len() == data.n() {
        Some(adjusted_rand_index(&truth.z_true, &map_assign(&data.incidence.ids, &fitted.state.z).labels)?)
    } else {
        None
    };
    let state = variational_state(data, t, 1000)?;
    let truth_elbo = elbo(data.y(), data.x(), t, &state)?;
    let (fit_loglik, truth_loglik) = if cfg.trait_dim <= 2 {
        let spec = QuadratureSpec::default();
        (
            Some(synth::gh_loglik(data, &fitted.model, spec)?),
            Some(synth::gh_loglik(data, t, spec)?),
        )
    } else {
        (None, None)
    };
    Ok(Recovery {
        config: cfg,
        n: data.n(),
        mae_b: abs_b.iter().sum::<f64>() / abs_b.len().max(1) as f64,
        max_abs_error_b: abs_b.iter().copied().fold(0.0, f64::max),
        mae_w,
        mae_beta,
        adjusted_rand,
        fit_elbo: fitted.final_elbo,
        truth_elbo,
        fit_loglik,
        truth_loglik,
        aligned_model: aligned,
    })
}

pub fn fit(cli: &Cli, a: &FitArgs) -> Result<(), CliError> {
    let cfg = a.model.config()?;
    let opts = a.est.options()?;
    let truth: Option<SimTruth> = a.truth.as_deref().map(|p| load_config(p, "truth")).transpose()?;
    let mut run = Run::new(&a.out)?;
    if let Some(p) = &a.truth {
        run.input(p)?;
    }
    let data = load_dataset(&a.data, &mut run)?;
    let res = mlta::fit(&data, cfg, &opts)?;
    if !res.converged {
        run.warn(format!("best start did not converge within {} iterations", opts.max_outer));
    }
    if res.diagnostics.cap_hit {
        run.warn("an item parameter reached the |value| <= 30 cap".into());
    }
    run.json("fit.json", &res)?;
    run.json("model.json", &res.model)?;
    run.write_with("assignments.csv", |w| map_assign(&data.incidence.ids, &res.state.z).write_csv(w))?;
    println!(
        "{cfg}: elbo {:.4}, BIC {:.4}, {} of {} starts converged (best start {})",
        res.final_elbo,
        res.bic,
        res.converged_starts,
        res.starts.len(),
        res.start_index + 1
    );
    if let Some(t) = &truth {
        let rep = recovery(&data, t, &res)?;
        println!(
            "recovery: MAE(b) {:.4}, max |error| {:.4}{}",
            rep.mae_b,
            rep.max_abs_error_b,
            rep.adjusted_rand.map(|v| format!(", ARI {v:.4}")).unwrap_or_default()
        );
        run.json("recovery.json", &rep)?;
    }
    run.finish(cli, Some(opts.seed))
}

pub fn select(cli: &Cli, a: &SelectArgs) -> Result<(), CliError> {
    let opts = a.est.options()?;
    let grid = SelectionGrid {
        groups: a.grid_g.0.clone(),
        trait_dims: a.grid_d.0.clone(),
        variants: a.variants.variants(),
    };
    grid.validate()?;
    let quad = match a.bic_source {
        BicSource::Quadrature => Some(QuadratureSpec::new(a.nodes)?),
        BicSource::Elbo => None,
    };
    let mut run = Run::new(&a.out)?;
    let data = load_dataset(&a.data, &mut run)?;
    let mut table = grid_search(&data, &grid, &opts)?;
    if let Some(spec) = quad {
        table = quadrature_rescore(&table, &data, spec)?;
    }
    for c in table.cells.iter().filter(|c| c.failed()) {
        run.warn(format!("{}: {}", c.config, c.failure.as_deref().unwrap_or("failed")));
    }
    let best = table.best_cell().ok_or(MltaError::AllCellsFailed)?.clone();
    for v in &grid.variants {
        run.write_with(&format!("bic_{}.csv", v.name()), |w| table.write_bic_csv(w, *v))?;
    }
    run.json("selection.json", &table)?;
    if let Some(m) = &best.model {
        run.json("model.json", m)?;
    }
    println!(
        "selected {} with BIC {:.4} ({} cells)",
        best.config,
        best.bic.unwrap_or(f64::NAN),
        table.cells.len()
    );
    run.finish(cli, Some(opts.seed))
}

#[derive(Debug, Serialize)]
struct BootstrapSummary {
    samples: usize,
    succeeded: usize,
    failed: Vec<usize>,
    level: f64,
    min_eigenvalue: f64,
    names: Vec<String>,
    covariance: ndarray::Array2<f64>,
}

#[derive(Debug, Serialize)]
struct Replicates<'a> {
    names: &'a [String],
    replicates: &'a ndarray::Array2<f64>,
}

pub fn bootstrap(cli: &Cli, a: &BootstrapArgs) -> Result<(), CliError> {
    let cfg = a.model.config()?;
    let opts = a.est.options()?;
    let spec = BootstrapSpec {
        samples: a.bootstrap_samples,
        seed: a.est.seed,
        level: a.level,
    };
    spec.validate()?;
    let mut run = Run::new(&a.out)?;
    let data = load_dataset(&a.data, &mut run)?;
    let (point, res) = bootstrap_se(&data, cfg, &opts, &spec)?;
    if !res.failed.is_empty() {
        run.warn(format!("{} of {} replicates failed and were dropped", res.failed.len(), spec.samples));
    }
    run.json("model.json", &point.model)?;
    run.write_with("bootstrap.csv", |w| res.write_csv(w))?;
    run.json(
        "bootstrap_summary.json",
        &BootstrapSummary {
            samples: spec.samples,
            succeeded: res.replicates.nrows(),
            failed: res.failed.clone(),
            level: res.level,
            min_eigenvalue: res.min_eigenvalue(),
            names: res.names.clone(),
            covariance: res.covariance.clone(),
        },
    )?;
    if a.replicates {
        run.json(
            "replicates.json",
            &Replicates {
                names: &res.names,
                replicates: &res.replicates,
            },
        )?;
    }
    println!(
        "{cfg}: {} of {} replicates used, level {}",
        res.replicates.nrows(),
        spec.samples,
        res.level
    );
    run.finish(cli, Some(spec.seed))
}

pub fn predict(cli: &Cli, a: &PredictArgs) -> Result<(), CliError> {
    let model: MltaModel = load_config(&a.model, "model")?;
    let mode = match a.plug_in {
        PlugIn::Mean => TraitPlugIn::PosteriorMean,
        PlugIn::Integrated => {
            if model.trait_dim() > 2 {
                return Err(CliError::usage("--plug-in integrated needs a model with D <= 2"));
            }
            TraitPlugIn::Integrated(QuadratureSpec::new(a.nodes)?)
        }
    };
    let mut run = Run::new(&a.out)?;
    run.input(&a.model)?;
    let data = load_dataset(&a.data, &mut run)?;
    let state = variational_state(&data, &model, 1000)?;
    let assign = map_assign(&data.incidence.ids, &state.z);
    run.write_with("assignments.csv", |w| assign.write_csv(w))?;
    let probs = predicted_skill_probs(&model, &state, &data, mode)?;
    run.write_with("skill_probs.csv", |w| probs.write_long_csv(w))?;
    run.write_with("skill_prob_means.csv", |w| probs.write_means_csv(w))?;
    let vars: Vec<String> = if a.by.is_empty() {
        data.design.variables.iter().map(|v| v.name.clone()).collect()
    } else {
        a.by.clone()
    };
    for v in &vars {
        let table = group_probs_by_covariate(&model, &data, v)?;
        run.write_with(&format!("group_probs_{}.csv", file_stem(v)), |w| table.write_csv(w))?;
    }
    let sizes = assign.group_sizes();
    println!("{}: MAP group sizes {sizes:?}", model.config);
    run.finish(cli, None)
}
