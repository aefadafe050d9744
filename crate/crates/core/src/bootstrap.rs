//! Nonparametric bootstrap of the whole fit, with replicate models aligned
//! to the point estimate before averaging.

use std::io::Write;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{format_real, Dataset};
use crate::error::{MltaError, Result};
use crate::model::{MltaModel, ModelConfig, Variant};
use crate::rng;
use crate::variational::{fit, FitOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub samples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 0,
            level: 0.95,
        }
    }
}

impl BootstrapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(MltaError::Config("bootstrap needs at least 2 samples".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(MltaError::Config("confidence level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
    /// Aligned replicate estimates, one row per successful replicate.
    pub replicates: Array2<f64>,
    pub covariance: Array2<f64>,
    pub failed: Vec<usize>,
}

impl BootstrapResult {
    /// Smallest eigenvalue of the bootstrap covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let p = self.covariance.nrows();
        if p == 0 {
            return 0.0;
        }
        let m = DMatrix::from_fn(p, p, |i, j| self.covariance[[i, j]]);
        m.symmetric_eigenvalues().min()
    }

    /// `parameter, estimate, se, lower, upper`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["parameter", "estimate", "se", "lower", "upper"])?;
        for i in 0..self.names.len() {
            wtr.write_record([
                self.names[i].clone(),
                format_real(self.estimate[i]),
                format_real(self.se[i]),
                format_real(self.lower[i]),
                format_real(self.upper[i]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// N rows drawn uniformly with replacement, incidence and covariates
/// together.
pub fn resample(data: &Dataset, seed: u64) -> Dataset {
    let n = data.n();
    let mut rng = rng::stream(seed, 0);
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    data.select_rows(&rows)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    // lexicographic, identity first
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Relabels `candidate`'s groups to best match `reference` on the
/// attractiveness parameters, fixes the slope sign for D = 1, and
/// re-expresses the gating coefficients against the new group 1.
pub fn align_labels(reference: &MltaModel, candidate: &MltaModel) -> Result<MltaModel> {
    if reference.config != candidate.config
        || reference.n_skills() != candidate.n_skills()
        || reference.n_covariates() != candidate.n_covariates()
    {
        return Err(MltaError::Config("cannot align models of different shape".into()));
    }
    let cfg = candidate.config;
    let g = cfg.groups;
    let r = candidate.n_skills();
    let cost = |perm: &[usize]| -> f64 {
        (0..g)
            .map(|gi| {
                (0..r)
                    .map(|k| (reference.items.b[[gi, k]] - candidate.items.b[[perm[gi], k]]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best = (0..g).collect::<Vec<_>>();
    let mut best_cost = cost(&best);
    for p in permutations(g).into_iter().skip(1) {
        let c = cost(&p);
        if c < best_cost {
            best_cost = c;
            best = p;
        }
    }

    let mut out = candidate.clone();
    for gi in 0..g {
        for k in 0..r {
            out.items.b[[gi, k]] = candidate.items.b[[best[gi], k]];
        }
    }
    if cfg.variant == Variant::Unconstrained {
        for gi in 0..g {
            for k in 0..r {
                for d in 0..cfg.trait_dim {
                    out.items.w[[gi, k, d]] = candidate.items.w[[best[gi], k, d]];
                }
            }
        }
    }
    // linear predictor of candidate group h is x.beta_h, with beta_1 = 0
    let pc = candidate.n_covariates();
    let coef = |h: usize, j: usize| if h == 0 { 0.0 } else { candidate.gating.beta[[h - 1, j]] };
    for gi in 1..g {
        for j in 0..pc {
            out.gating.beta[[gi - 1, j]] = coef(best[gi], j) - coef(best[0], j);
        }
    }
    if cfg.trait_dim == 1 {
        for blk in 0..out.items.w.dim().0 {
            let agree: f64 = (0..r)
                .map(|k| reference.items.w[[blk, k, 0]] * out.items.w[[blk, k, 0]])
                .sum();
            if agree < 0.0 {
                for k in 0..r {
                    out.items.w[[blk, k, 0]] = -out.items.w[[blk, k, 0]];
                }
            }
        }
    }
    Ok(out)
}

fn quantile_index(s: usize, prob: f64) -> usize {
    let pos = (prob * s as f64 - 1e-9).ceil() as isize - 1;
    pos.clamp(0, s as isize - 1) as usize
}

/// Standard errors and percentile intervals from aligned replicate
/// parameter vectors (rows).
pub fn summarize(names: Vec<String>, estimate: Vec<f64>, reps: Array2<f64>, level: f64, failed: Vec<usize>) -> BootstrapResult {
    let (s, p) = reps.dim();
    // shift by the first replicate so identical replicates give exact zeros
    let shift: Array1<f64> = if s > 0 { reps.row(0).to_owned() } else { Array1::zeros(p) };
    let dev = &reps - &shift;
    let mean: Array1<f64> = dev.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(p));
    let centered = &dev - &mean;
    let covariance = centered.t().dot(&centered) / s as f64;
    let se = covariance.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let lo_i = quantile_index(s, (1.0 - level) / 2.0);
    let hi_i = quantile_index(s, (1.0 + level) / 2.0);
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for j in 0..p {
        let mut col = reps.column(j).to_vec();
        col.sort_by(f64::total_cmp);
        lower.push(col[lo_i]);
        upper.push(col[hi_i]);
    }
    BootstrapResult {
        names,
        estimate,
        se,
        lower,
        upper,
        level,
        replicates: reps,
        covariance,
        failed,
    }
}

/// Bootstraps with `reference` as the point estimate and alignment target.
pub fn bootstrap_with_reference(
    data: &Dataset,
    reference: &MltaModel,
    opts: &FitOptions,
    spec: &BootstrapSpec,
) -> Result<BootstrapResult> {
    spec.validate()?;
    let config: ModelConfig = reference.config;
    let reps = rng::par_map(spec.samples, |s| -> Option<Vec<f64>> {
        // the refit reuses the caller's starts, so only the resample varies
        let sample = resample(data, rng::child_seed(spec.seed, 0xB007, s as u64));
        match fit(&sample, config, opts) {
            Ok(f) if f.converged => align_labels(reference, &f.model).ok().map(|m| m.flatten()),
            Ok(_) => None,
            Err(e) => {
                log::debug!("bootstrap replicate {s} failed: {e}");
                None
            }
        }
    });
    let failed: Vec<usize> = reps
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| i)
        .collect();
    if failed.len() * 5 > spec.samples {
        return Err(MltaError::TooManyFailedReplicates {
            failed: failed.len(),
            total: spec.samples,
        });
    }
    let ok: Vec<Vec<f64>> = reps.into_iter().flatten().collect();
    let p = reference.flatten().len();
    let mat = Array2::from_shape_vec((ok.len(), p), ok.into_iter().flatten().collect())
        .map_err(|e| MltaError::Dimension(e.to_string()))?;
    Ok(summarize(reference.parameter_names(), reference.flatten(), mat, spec.level, failed))
}

/// Fits the point estimate, then bootstraps it.
pub fn bootstrap_se(
    data: &Dataset,
    config: ModelConfig,
    opts: &FitOptions,
    spec: &BootstrapSpec,
) -> Result<(crate::variational::FitResult, BootstrapResult)> {
    let point = fit(data, config, opts)?;
    let res = bootstrap_with_reference(data, &point.model, opts, spec)?;
    Ok((point, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn permutation_enumeration() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn two_point_covariance() {
        let reps = array![[1.0, 2.0], [3.0, -2.0]];
        let r = summarize(vec!["a".into(), "b".into()], vec![2.0, 0.0], reps, 0.95, vec![]);
        // mean (2, 0); deviations (-1, 2), (1, -2)
        assert_abs_diff_eq!(r.covariance[[0, 0]], 1.0);
        assert_abs_diff_eq!(r.covariance[[1, 1]], 4.0);
        assert_abs_diff_eq!(r.covariance[[0, 1]], -2.0);
        assert_eq!(r.se, vec![1.0, 2.0]);
        assert_eq!(r.lower, vec![1.0, -2.0]);
        assert_eq!(r.upper, vec![3.0, 2.0]);
    }

    #[test]
    fn quantile_indices() {
        assert_eq!(quantile_index(200, 0.025), 4);
        assert_eq!(quantile_index(200, 0.975), 194);
        assert_eq!(quantile_index(2, 0.025), 0);
        assert_eq!(quantile_index(2, 0.975), 1);
    }

    #[test]
    fn spec_validation() {
        assert!(BootstrapSpec { samples: 1, ..Default::default() }.validate().is_err());
        assert!(BootstrapSpec { level: 1.0, ..Default::default() }.validate().is_err());
    }
}
