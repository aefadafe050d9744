//! BIC model selection over a grid of (groups, trait dimension, variant).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{format_real, Dataset};
use crate::error::{MltaError, Result};
use crate::model::{self, param_count, MltaModel, ModelConfig, Variant};
use crate::synth::{self, QuadratureSpec};
use crate::rng;
use crate::variational::{fit, FitOptions, FitResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub groups: Vec<usize>,
    pub trait_dims: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl Default for SelectionGrid {
    fn default() -> Self {
        Self {
            groups: (1..=4).collect(),
            trait_dims: (0..=3).collect(),
            variants: vec![Variant::Unconstrained, Variant::Constrained],
        }
    }
}

impl SelectionGrid {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() || self.trait_dims.is_empty() || self.variants.is_empty() {
            return Err(MltaError::Config("selection grid is empty".into()));
        }
        if self.groups.contains(&0) {
            return Err(MltaError::Config("grid contains G = 0".into()));
        }
        Ok(())
    }

    /// Cells in evaluation order: variant, then D, then G.
    pub fn cells(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &d in &self.trait_dims {
                for &g in &self.groups {
                    out.push(ModelConfig {
                        groups: g,
                        trait_dim: d,
                        variant: v,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub config: ModelConfig,
    pub param_count: usize,
    pub final_elbo: Option<f64>,
    pub bic: Option<f64>,
    pub converged: bool,
    pub start_index: Option<usize>,
    /// Index of the cell whose fit this one copies (variants coincide).
    pub mirrored_from: Option<usize>,
    pub failure: Option<String>,
    /// Winning model of the cell, absent for failed cells.
    pub model: Option<MltaModel>,
}

impl CellRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub cells: Vec<CellRecord>,
    pub best: Option<usize>,
}

impl SelectionTable {
    /// Builds a table from finished records and points at the winner.
    pub fn from_records(cells: Vec<CellRecord>) -> Self {
        let best = best_index(&cells);
        Self { cells, best }
    }

    pub fn best_cell(&self) -> Option<&CellRecord> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn cell(&self, config: &ModelConfig) -> Option<&CellRecord> {
        self.cells.iter().find(|c| c.config == *config)
    }

    /// BIC layout for one variant: rows D, columns G. Failed cells are
    /// marked `FAILED`, cells outside the grid are left empty.
    pub fn write_bic_csv<W: Write>(&self, w: W, variant: Variant) -> Result<()> {
        let mut gs: Vec<usize> = self.cells.iter().map(|c| c.config.groups).collect();
        let mut ds: Vec<usize> = self.cells.iter().map(|c| c.config.trait_dim).collect();
        gs.sort_unstable();
        gs.dedup();
        ds.sort_unstable();
        ds.dedup();
        let mut wtr = csv::Writer::from_writer(w);
        let mut h = vec!["D".to_string()];
        h.extend(gs.iter().map(|g| format!("G={g}")));
        wtr.write_record(&h)?;
        for &d in &ds {
            let mut rec = vec![d.to_string()];
            for &g in &gs {
                let cfg = ModelConfig {
                    groups: g,
                    trait_dim: d,
                    variant,
                };
                rec.push(match self.cell(&cfg) {
                    None => String::new(),
                    Some(c) if c.failed() => "FAILED".into(),
                    Some(c) => c.bic.map(format_real).unwrap_or_default(),
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn better(a: &CellRecord, b: &CellRecord) -> bool {
    let (ba, bb) = (a.bic.unwrap(), b.bic.unwrap());
    if (ba - bb).abs() > 1e-9 * ba.abs().max(bb.abs()).max(1.0) {
        return ba < bb;
    }
    let key = |c: &CellRecord| (c.param_count, c.config.groups, c.config.trait_dim, c.config.variant);
    key(a) < key(b)
}

fn best_index(cells: &[CellRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if c.failed() || c.bic.is_none() {
            continue;
        }
        if best.is_none_or(|b| better(c, &cells[b])) {
            best = Some(i);
        }
    }
    best
}

/// Configuration with the smallest BIC. Ties go to fewer parameters, then
/// fewer groups, then smaller D, then the constrained variant.
pub fn select_best(table: &SelectionTable) -> Result<ModelConfig> {
    best_index(&table.cells)
        .map(|i| table.cells[i].config)
        .ok_or(MltaError::AllCellsFailed)
}

fn record_from(config: ModelConfig, n_cols: usize, r: usize, fit: Result<FitResult>) -> CellRecord {
    let p = param_count(&config, n_cols, r);
    match fit {
        Ok(f) if f.converged_starts > 0 => CellRecord {
            config,
            param_count: p,
            final_elbo: Some(f.final_elbo),
            bic: Some(f.bic),
            converged: f.converged,
            start_index: Some(f.start_index),
            mirrored_from: None,
            failure: None,
            model: Some(f.model),
        },
        Ok(f) => CellRecord {
            config,
            param_count: p,
            final_elbo: Some(f.final_elbo),
            bic: Some(f.bic),
            converged: false,
            start_index: Some(f.start_index),
            mirrored_from: None,
            failure: Some("no start converged".into()),
            model: None,
        },
        Err(e) => CellRecord {
            config,
            param_count: p,
            final_elbo: None,
            bic: None,
            converged: false,
            start_index: None,
            mirrored_from: None,
            failure: Some(e.to_string()),
            model: None,
        },
    }
}

/// Rescores a finished table with `-2 ln L + p ln N`, where `ln L` is the
/// quadrature log-likelihood at each cell's fitted parameters instead of
/// the variational bound. Cells with D > 2 are marked failed.
pub fn quadrature_rescore(table: &SelectionTable, data: &Dataset, spec: QuadratureSpec) -> Result<SelectionTable> {
    let mut cells = table.cells.clone();
    for c in cells.iter_mut() {
        let Some(m) = &c.model else { continue };
        if c.config.trait_dim > 2 {
            c.failure = Some("quadrature log-likelihood needs D <= 2".into());
            c.bic = None;
            continue;
        }
        let ll = synth::gh_loglik(data, m, spec)?;
        c.final_elbo = Some(ll);
        c.bic = Some(model::bic(ll, c.param_count, data.n()));
    }
    Ok(SelectionTable::from_records(cells))
}

/// Fits every grid cell with `opts.starts` starts and tabulates BIC.
///
/// Cells where the two variants coincide (G = 1 or D = 0) are fitted once
/// and mirrored. Cell `c` runs under a seed derived from `(opts.seed, c)`.
pub fn grid_search(data: &Dataset, grid: &SelectionGrid, opts: &FitOptions) -> Result<SelectionTable> {
    grid.validate()?;
    opts.validate()?;
    let cells = grid.cells();
    // canonical cell for each cell
    let canon: Vec<usize> = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c.variant_irrelevant() {
                cells
                    .iter()
                    .position(|o| o.groups == c.groups && o.trait_dim == c.trait_dim)
                    .unwrap_or(i)
            } else {
                i
            }
        })
        .collect();
    let unique: Vec<usize> = (0..cells.len()).filter(|&i| canon[i] == i).collect();
    let fits = rng::par_map(unique.len(), |u| {
        let idx = unique[u];
        let cell_opts = FitOptions {
            seed: rng::child_seed(opts.seed, 0x5E1E, idx as u64),
            ..opts.clone()
        };
        log::info!("fitting cell {}", cells[idx]);
        record_from(cells[idx], data.p(), data.r(), fit(data, cells[idx], &cell_opts))
    });
    let mut records: Vec<Option<CellRecord>> = vec![None; cells.len()];
    for (u, rec) in unique.iter().zip(fits) {
        records[*u] = Some(rec);
    }
    let records: Vec<CellRecord> = (0..cells.len())
        .map(|i| {
            if canon[i] == i {
                records[i].clone().unwrap()
            } else {
                let mut r = records[canon[i]].clone().unwrap();
                r.config = cells[i];
                r.mirrored_from = Some(canon[i]);
                r
            }
        })
        .collect();
    let table = SelectionTable::from_records(records);
    if table.best.is_none() {
        return Err(MltaError::AllCellsFailed);
    }
    Ok(table)
}
