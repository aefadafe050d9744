//! Browser bindings: simulate a two-group network, fit it, draw the fitted
//! tie-probability curves and compare BIC across a small grid.

use mlta::model::{connection_prob, GatingParams, ItemParams};
use mlta::synth::synthetic_design;
use mlta::{
    adjusted_rand_index, align_labels, fit, grid_search, map_assign, simulate, FitOptions, MltaModel, ModelConfig,
    SelectionGrid, SimTruth, Variant,
};
use ndarray::{array, Array3};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SKILLS: usize = 7;

/// Two groups with opposite skill profiles and one trait dimension.
pub fn demo_truth() -> MltaModel {
    let cfg = ModelConfig::new(2, 1, Variant::Unconstrained).unwrap();
    let mut m = MltaModel::zeros(cfg, 3, SKILLS);
    m.items = ItemParams {
        b: array![[2.0, 1.5, 2.0, 1.5, -1.5, -2.0, -1.5], [-1.5, -2.0, -1.5, -2.0, 1.5, 2.0, 2.0]],
        w: Array3::from_shape_vec(
            (2, SKILLS, 1),
            vec![1.0, 0.8, 1.2, 1.0, 0.8, 1.2, 1.0, 0.6, 1.2, 1.0, 1.4, 0.8, 1.0, 1.2],
        )
        .unwrap(),
    };
    m.gating = GatingParams {
        beta: array![[-0.3, 0.8, -0.5]],
    };
    m
}

#[derive(Serialize)]
struct FitReport {
    groups: usize,
    trait_dim: usize,
    variant: &'static str,
    elbo_trace: Vec<f64>,
    final_elbo: f64,
    bic: f64,
    converged: bool,
    group_sizes: Vec<usize>,
    adjusted_rand: f64,
}

#[derive(Serialize)]
struct Curves {
    skill: String,
    u: Vec<f64>,
    /// One curve per fitted group.
    probs: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct BicRow {
    groups: usize,
    trait_dim: usize,
    variant: &'static str,
    bic: Option<f64>,
}

#[derive(Serialize)]
struct BicGrid {
    cells: Vec<BicRow>,
    best: Option<(usize, usize, &'static str)>,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

/// One simulated dataset and the most recent fit to it.
#[wasm_bindgen]
pub struct Demo {
    truth: SimTruth,
    fitted: Option<MltaModel>,
    seed: u64,
}

#[wasm_bindgen]
impl Demo {
    /// Simulates `n` senders with two binary covariates.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, seed: u64) -> Result<Demo, JsError> {
        if n < 10 {
            return Err(JsError::new("use at least 10 senders"));
        }
        let design = synthetic_design(n, &[0.5, 0.3], seed ^ 0xD15);
        let truth = simulate(&demo_truth(), &design, seed).map_err(js_err)?;
        Ok(Demo {
            truth,
            fitted: None,
            seed,
        })
    }

    /// Column tie densities of the simulated incidence matrix.
    pub fn densities(&self) -> Vec<f64> {
        mlta::tie_density(&self.truth.dataset().incidence)
    }

    /// Fits one configuration and returns a JSON report.
    pub fn fit(&mut self, groups: usize, trait_dim: usize, constrained: bool, starts: usize) -> Result<String, JsError> {
        let variant = if constrained { Variant::Constrained } else { Variant::Unconstrained };
        let cfg = ModelConfig::new(groups, trait_dim, variant).map_err(js_err)?;
        let opts = FitOptions {
            starts: starts.max(1),
            seed: self.seed,
            ..FitOptions::default()
        };
        let data = self.truth.dataset();
        let res = fit(data, cfg, &opts).map_err(js_err)?;
        let assign = map_assign(&data.incidence.ids, &res.state.z);
        let report = FitReport {
            groups,
            trait_dim,
            variant: variant.name(),
            elbo_trace: res.elbo_trace.clone(),
            final_elbo: res.final_elbo,
            bic: res.bic,
            converged: res.converged,
            group_sizes: assign.group_sizes(),
            adjusted_rand: adjusted_rand_index(&assign.labels, &self.truth.z_true).map_err(js_err)?,
        };
        // label groups like the generating model when the shapes agree
        let truth = &self.truth.model;
        self.fitted = Some(if res.model.config == truth.config {
            align_labels(truth, &res.model).map_err(js_err)?
        } else {
            res.model
        });
        to_json(&report)
    }

    /// Tie probability against the first trait coordinate for one skill
    /// (1-based), per fitted group, other coordinates held at zero.
    pub fn curves(&self, skill: usize, points: usize) -> Result<String, JsError> {
        let m = self.fitted.as_ref().ok_or_else(|| JsError::new("fit a model first"))?;
        if skill == 0 || skill > m.n_skills() {
            return Err(JsError::new("no such skill"));
        }
        let k = skill - 1;
        let points = points.clamp(2, 500);
        let u: Vec<f64> = (0..points).map(|i| -3.0 + 6.0 * i as f64 / (points - 1) as f64).collect();
        let d = m.trait_dim();
        let probs = (0..m.n_groups())
            .map(|g| {
                let w = m.items.slope(g, k);
                u.iter()
                    .map(|&t| {
                        let mut at = vec![0.0; d];
                        if d > 0 {
                            at[0] = t;
                        }
                        connection_prob(m.items.b[[g, k]], w, &at)
                    })
                    .collect()
            })
            .collect();
        to_json(&Curves {
            skill: m.skills[k].clone(),
            u,
            probs,
        })
    }

    /// BIC over G in 1..=max_groups and D in 0..=max_dim, both variants.
    pub fn bic_grid(&self, max_groups: usize, max_dim: usize, starts: usize) -> Result<String, JsError> {
        if max_groups == 0 || max_groups > 4 || max_dim > 2 {
            return Err(JsError::new("grid limited to G <= 4 and D <= 2 in the browser"));
        }
        let grid = SelectionGrid {
            groups: (1..=max_groups).collect(),
            trait_dims: (0..=max_dim).collect(),
            variants: vec![Variant::Unconstrained, Variant::Constrained],
        };
        let opts = FitOptions {
            starts: starts.max(1),
            seed: self.seed,
            ..FitOptions::default()
        };
        let table = grid_search(self.truth.dataset(), &grid, &opts).map_err(js_err)?;
        let cells = table
            .cells
            .iter()
            .map(|c| BicRow {
                groups: c.config.groups,
                trait_dim: c.config.trait_dim,
                variant: c.config.variant.name(),
                bic: c.bic,
            })
            .collect();
        let best = table
            .best_cell()
            .map(|c| (c.config.groups, c.config.trait_dim, c.config.variant.name()));
        to_json(&BicGrid { cells, best })
    }
}
