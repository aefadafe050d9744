//! Synthetic data from a known model, and exact reference computations
//! (Gauss-Hermite marginal likelihood, latent-class likelihood, posterior
//! group probabilities) used to check the variational estimator.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CovariateDesign, CovariateVariable, Dataset, IncidenceMatrix, INTERCEPT};
use crate::error::{MltaError, Result};
use crate::model::{self, log_sigmoid, MltaModel, ModelConfig};
use crate::rng;

/// A simulated dataset together with the values that generated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub model: MltaModel,
    /// 0-based group label per sender.
    pub z_true: Vec<usize>,
    /// N x D trait draws.
    pub u_true: Array2<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub dataset: Option<Dataset>,
}

/// Beyond this the unscaled Hermite recurrence leaves double range.
pub const MAX_NODES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { nodes: 80 }
    }
}

impl QuadratureSpec {
    pub fn new(nodes: usize) -> Result<Self> {
        if !(5..=MAX_NODES).contains(&nodes) {
            return Err(MltaError::Config(format!(
                "quadrature needs between 5 and {MAX_NODES} nodes, got {nodes}"
            )));
        }
        Ok(Self { nodes })
    }
}

/// Draws labels, traits and ties from `model` for the senders of `x`.
pub fn simulate(model: &MltaModel, x: &CovariateDesign, seed: u64) -> Result<SimTruth> {
    model.validate()?;
    if x.n_cols() != model.n_covariates() {
        return Err(MltaError::Dimension(format!(
            "design has {} columns, model expects {}",
            x.n_cols(),
            model.n_covariates()
        )));
    }
    let n = x.n_rows();
    let (g, r, d) = (model.n_groups(), model.n_skills(), model.trait_dim());
    let mut rng = rng::stream(seed, 0);
    let mut z_true = Vec::with_capacity(n);
    let mut u_true = Array2::zeros((n, d));
    let mut y = Array2::<u8>::zeros((n, r));
    for i in 0..n {
        let eta = model.gating_probs(x.values.row(i));
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut zi = g - 1;
        for (gi, p) in eta.iter().enumerate() {
            acc += p;
            if draw < acc {
                zi = gi;
                break;
            }
        }
        z_true.push(zi);
        for a in 0..d {
            u_true[[i, a]] = StandardNormal.sample(&mut rng);
        }
        let u = u_true.row(i).to_vec();
        for k in 0..r {
            let p = model::connection_prob(model.items.b[[zi, k]], model.items.slope(zi, k), &u);
            y[[i, k]] = (rng.random::<f64>() < p) as u8;
        }
    }
    let incidence = IncidenceMatrix::new(x.ids.clone(), model.skills.clone(), y)?;
    let dataset = Dataset::new(incidence, x.clone())?;
    Ok(SimTruth {
        model: model.clone(),
        z_true,
        u_true,
        seed,
        dataset: Some(dataset),
    })
}

impl SimTruth {
    pub fn dataset(&self) -> &Dataset {
        self.dataset.as_ref().expect("simulated dataset present")
    }

    /// Writes `incidence.csv`, `design.csv`, `design_meta.json` and
    /// `truth.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::io::write_dataset(self.dataset(), dir)?;
        let f = std::fs::File::create(dir.join("truth.json"))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Design with an intercept and independent binary covariates `x1..xJ`,
/// each 1 with the given probability (reference category 0).
pub fn synthetic_design(n: usize, probs: &[f64], seed: u64) -> CovariateDesign {
    let mut rng = rng::stream(seed, 1);
    let mut values = Array2::zeros((n, probs.len() + 1));
    values.column_mut(0).fill(1.0);
    for i in 0..n {
        for (j, &p) in probs.iter().enumerate() {
            values[[i, j + 1]] = (rng.random::<f64>() < p) as u8 as f64;
        }
    }
    let mut columns = vec![INTERCEPT.to_string()];
    let mut variables = Vec::new();
    for j in 1..=probs.len() {
        columns.push(format!("x{j}=1"));
        variables.push(CovariateVariable {
            name: format!("x{j}"),
            reference: "0".into(),
            levels: vec!["1".into()],
            columns: vec![j],
        });
    }
    CovariateDesign {
        ids: (1..=n).map(|i| format!("n{i}")).collect(),
        columns,
        values,
        variables,
    }
}

/// Model with every parameter drawn uniformly from `[-range, range]`.
pub fn random_model(config: ModelConfig, r: usize, n_cols: usize, range: f64, seed: u64) -> Result<MltaModel> {
    if !(range >= 0.0 && range.is_finite()) {
        return Err(MltaError::Config("parameter range must be finite and non-negative".into()));
    }
    let mut rng = rng::stream(seed, 2);
    let mut m = MltaModel::zeros(config, n_cols, r);
    let mut draw = || if range > 0.0 { rng.random_range(-range..=range) } else { 0.0 };
    m.gating.beta.iter_mut().for_each(|v| *v = draw());
    m.items.b.iter_mut().for_each(|v| *v = draw());
    m.items.w.iter_mut().for_each(|v| *v = draw());
    m.validate()?;
    Ok(m)
}

/// Gauss-Hermite rule for weight `exp(-t^2)`. Nodes start from the
/// eigenvalues of the Jacobi matrix and are polished by Newton steps on the
/// orthonormal Hermite recurrence, which also gives the weights. Nodes are
/// returned in decreasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let jacobi = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guess: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    guess.sort_by(|a, b| b.total_cmp(a));
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = if n % 2 == 1 && i == n / 2 { 0.0 } else { guess[i] };
        let mut pp = 0.0;
        for _ in 0..20 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Product rule for a standard D-variate Gaussian: points (row-major,
/// D per point) and log weights summing (in probability) to 1.
pub fn gaussian_rule(d: usize, spec: QuadratureSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if d > 2 {
        return Err(MltaError::Config(format!(
            "quadrature oracle supports D <= 2, got D = {d}"
        )));
    }
    if d == 0 {
        return Ok((Vec::new(), vec![0.0]));
    }
    let (t, w) = gauss_hermite(spec.nodes);
    let sqrt2 = std::f64::consts::SQRT_2;
    let ln_pi_half = 0.5 * std::f64::consts::PI.ln();
    let u: Vec<f64> = t.iter().map(|v| v * sqrt2).collect();
    let lw: Vec<f64> = w.iter().map(|v| v.ln() - ln_pi_half).collect();
    if d == 1 {
        return Ok((u, lw));
    }
    let mut pts = Vec::with_capacity(2 * u.len() * u.len());
    let mut lws = Vec::with_capacity(u.len() * u.len());
    for (a, la) in u.iter().zip(&lw) {
        for (b, lb) in u.iter().zip(&lw) {
            pts.push(*a);
            pts.push(*b);
            lws.push(la + lb);
        }
    }
    Ok((pts, lws))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// `ln ∫ prod_k f(y_k | u, g) phi(u) du` for one sender and group.
pub fn log_component_likelihood(
    y: ArrayView1<u8>,
    model: &MltaModel,
    g: usize,
    rule: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let d = model.trait_dim();
    let (pts, lw) = rule;
    let mut terms = Vec::with_capacity(lw.len());
    for (q, &l) in lw.iter().enumerate() {
        let u = &pts[q * d..(q + 1) * d];
        let mut s = l;
        for (k, &yk) in y.iter().enumerate() {
            let eta = model.items.b[[g, k]] + model::dot(model.items.slope(g, k), u);
            s += if yk == 1 { log_sigmoid(eta) } else { log_sigmoid(-eta) };
        }
        terms.push(s);
    }
    log_sum_exp(&terms)
}

/// N x G matrix of `ln eta_g(x_i) + ln L_ig` by quadrature.
fn joint_log_terms(data: &Dataset, model: &MltaModel, spec: QuadratureSpec) -> Result<Array2<f64>> {
    check(data, model)?;
    let rule = gaussian_rule(model.trait_dim(), spec)?;
    let g = model.n_groups();
    let mut out = Array2::zeros((data.n(), g));
    let mut le = vec![0.0; g];
    for i in 0..data.n() {
        model::log_gating_probs_into(data.x().row(i), &model.gating, &mut le);
        for gi in 0..g {
            out[[i, gi]] = le[gi] + log_component_likelihood(data.y().row(i), model, gi, &rule);
        }
    }
    Ok(out)
}

fn check(data: &Dataset, model: &MltaModel) -> Result<()> {
    if data.r() != model.n_skills() || data.p() != model.n_covariates() {
        return Err(MltaError::Dimension("dataset and model dimensions differ".into()));
    }
    Ok(())
}

/// Marginal log-likelihood by Gauss-Hermite product quadrature (D <= 2).
pub fn gh_loglik(data: &Dataset, model: &MltaModel, spec: QuadratureSpec) -> Result<f64> {
    let t = joint_log_terms(data, model, spec)?;
    Ok(t.rows().into_iter().map(|r| log_sum_exp(r.as_slice().unwrap())).sum())
}

/// Posterior group probabilities with the trait integrated by quadrature.
pub fn exact_responsibilities(data: &Dataset, model: &MltaModel, spec: QuadratureSpec) -> Result<Array2<f64>> {
    let mut t = joint_log_terms(data, model, spec)?;
    for mut row in t.rows_mut() {
        let lse = log_sum_exp(row.as_slice().unwrap());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    Ok(t)
}

/// Exact log-likelihood of the latent class model (no trait).
pub fn lc_loglik(data: &Dataset, model: &MltaModel) -> Result<f64> {
    if model.trait_dim() != 0 {
        return Err(MltaError::Config("lc_loglik requires D = 0".into()));
    }
    check(data, model)?;
    let g = model.n_groups();
    let mut le = vec![0.0; g];
    let mut total = 0.0;
    for i in 0..data.n() {
        model::log_gating_probs_into(data.x().row(i), &model.gating, &mut le);
        for (gi, v) in le.iter_mut().enumerate() {
            for (k, &yk) in data.y().row(i).iter().enumerate() {
                let b = model.items.b[[gi, k]];
                *v += if yk == 1 { log_sigmoid(b) } else { log_sigmoid(-b) };
            }
        }
        total += log_sum_exp(&le);
    }
    Ok(total)
}

/// Population probability of a tie on each skill for design row `x`:
/// `sum_g eta_g ∫ sigmoid(b_gk + w_gk.u) phi(u) du`.
pub fn marginal_tie_probs(model: &MltaModel, x: ArrayView1<f64>, spec: QuadratureSpec) -> Result<Vec<f64>> {
    let d = model.trait_dim();
    let (pts, lw) = gaussian_rule(d, spec)?;
    let eta = model.gating_probs(x);
    Ok((0..model.n_skills())
        .map(|k| {
            eta.iter()
                .enumerate()
                .map(|(g, e)| {
                    e * lw
                        .iter()
                        .enumerate()
                        .map(|(q, l)| {
                            let u = &pts[q * d..(q + 1) * d];
                            l.exp() * model::connection_prob(model.items.b[[g, k]], model.items.slope(g, k), u)
                        })
                        .sum::<f64>()
                })
                .sum()
        })
        .collect())
}

/// `E[pi_gk(u) | y, group g]` with the trait posterior integrated by
/// quadrature.
pub fn posterior_tie_prob(
    y: ArrayView1<u8>,
    model: &MltaModel,
    g: usize,
    k: usize,
    spec: QuadratureSpec,
) -> Result<f64> {
    let d = model.trait_dim();
    let rule = gaussian_rule(d, spec)?;
    let (pts, lw) = &rule;
    let mut num = Vec::with_capacity(lw.len());
    let mut den = Vec::with_capacity(lw.len());
    for (q, &l) in lw.iter().enumerate() {
        let u = &pts[q * d..(q + 1) * d];
        let mut s = l;
        for (kk, &yk) in y.iter().enumerate() {
            let eta = model.items.b[[g, kk]] + model::dot(model.items.slope(g, kk), u);
            s += if yk == 1 { log_sigmoid(eta) } else { log_sigmoid(-eta) };
        }
        let e = model.items.b[[g, k]] + model::dot(model.items.slope(g, k), u);
        den.push(s);
        num.push(s + log_sigmoid(e));
    }
    Ok((log_sum_exp(&num) - log_sum_exp(&den)).exp())
}

/// Monte Carlo estimate of `L_ig = ∫ prod_k f(y_k | u, g) phi(u) du` with
/// antithetic pairs; returns `(estimate, standard error)`. Works for any D.
pub fn mc_component_likelihood(
    y: ArrayView1<u8>,
    model: &MltaModel,
    g: usize,
    pairs: usize,
    seed: u64,
) -> (f64, f64) {
    let d = model.trait_dim();
    let mut rng = rng::stream(seed, 2);
    let lik = |u: &[f64]| -> f64 {
        y.iter()
            .enumerate()
            .map(|(k, &yk)| {
                let e = model.items.b[[g, k]] + model::dot(model.items.slope(g, k), u);
                if yk == 1 {
                    log_sigmoid(e)
                } else {
                    log_sigmoid(-e)
                }
            })
            .sum::<f64>()
            .exp()
    };
    let mut u = vec![0.0; d];
    let mut neg = vec![0.0; d];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..pairs {
        for a in 0..d {
            u[a] = StandardNormal.sample(&mut rng);
            neg[a] = -u[a];
        }
        let v = 0.5 * (lik(&u) + lik(&neg));
        s += v;
        s2 += v * v;
    }
    let m = s / pairs as f64;
    let var = (s2 / pairs as f64 - m * m).max(0.0);
    (m, (var / pairs as f64).sqrt())
}
