//! Parameter space of the mixture: multinomial-logit gating over groups and
//! a logistic latent-trait response model within each group.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{MltaError, Result};

/// Whether the trait slopes differ across groups or are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Constrained,
    Unconstrained,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Constrained => "constrained",
            Variant::Unconstrained => "unconstrained",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub groups: usize,
    pub trait_dim: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(groups: usize, trait_dim: usize, variant: Variant) -> Result<Self> {
        if groups == 0 {
            return Err(MltaError::Config("number of groups must be at least 1".into()));
        }
        Ok(Self {
            groups,
            trait_dim,
            variant,
        })
    }

    /// Number of slope blocks stored: one shared block, or one per group.
    pub fn slope_blocks(&self) -> usize {
        match self.variant {
            Variant::Constrained => 1,
            Variant::Unconstrained => self.groups,
        }
    }

    /// True when the two variants describe the same model.
    pub fn variant_irrelevant(&self) -> bool {
        self.groups == 1 || self.trait_dim == 0
    }
}

impl std::fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "G={} D={} {}", self.groups, self.trait_dim, self.variant)
    }
}

/// Gating coefficients; row `g-2` holds the log-odds coefficients of group
/// `g` against group 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingParams {
    pub beta: Array2<f64>,
}

impl GatingParams {
    pub fn zeros(groups: usize, n_cols: usize) -> Self {
        Self {
            beta: Array2::zeros((groups.saturating_sub(1), n_cols)),
        }
    }
}

/// Attractiveness intercepts `b` (G x R) and trait slopes `w`
/// (blocks x R x D, where blocks is G or 1 for the shared-slope variant).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemParams {
    pub b: Array2<f64>,
    pub w: Array3<f64>,
}

impl ItemParams {
    pub fn zeros(config: &ModelConfig, r: usize) -> Self {
        Self {
            b: Array2::zeros((config.groups, r)),
            w: Array3::zeros((config.slope_blocks(), r, config.trait_dim)),
        }
    }

    /// Slope vector of item `k` in group `g`.
    #[inline]
    pub fn slope(&self, g: usize, k: usize) -> &[f64] {
        let block = if self.w.shape()[0] == 1 { 0 } else { g };
        let d = self.w.shape()[2];
        let start = (block * self.w.shape()[1] + k) * d;
        &self.w.as_slice().expect("slopes are contiguous")[start..start + d]
    }
}

/// A fully specified mixture of latent trait analyzers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDocument", try_from = "ModelDocument")]
pub struct MltaModel {
    pub config: ModelConfig,
    pub gating: GatingParams,
    pub items: ItemParams,
    pub skills: Vec<String>,
    pub covariates: Vec<String>,
}

impl MltaModel {
    pub fn new(
        config: ModelConfig,
        gating: GatingParams,
        items: ItemParams,
        skills: Vec<String>,
        covariates: Vec<String>,
    ) -> Result<Self> {
        let model = Self {
            config,
            gating,
            items,
            skills,
            covariates,
        };
        model.validate()?;
        Ok(model)
    }

    /// All-zero parameters with generated labels.
    pub fn zeros(config: ModelConfig, n_cols: usize, r: usize) -> Self {
        Self {
            config,
            gating: GatingParams::zeros(config.groups, n_cols),
            items: ItemParams::zeros(&config, r),
            skills: (1..=r).map(|k| format!("skill{k}")).collect(),
            covariates: std::iter::once(crate::data::INTERCEPT.to_string())
                .chain((1..n_cols).map(|j| format!("x{j}")))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.config.groups;
        let d = self.config.trait_dim;
        let r = self.skills.len();
        let p = self.covariates.len();
        let dim = |what: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(MltaError::Dimension(format!("{what} has shape {got:?}, expected {want:?}")))
            }
        };
        dim("beta", self.gating.beta.shape(), &[g - 1, p])?;
        dim("b", self.items.b.shape(), &[g, r])?;
        dim("w", self.items.w.shape(), &[self.config.slope_blocks(), r, d])?;
        let finite = self.gating.beta.iter().all(|v| v.is_finite())
            && self.items.b.iter().all(|v| v.is_finite())
            && self.items.w.iter().all(|v| v.is_finite());
        if !finite {
            return Err(MltaError::Numerical("model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.config.groups
    }

    pub fn trait_dim(&self) -> usize {
        self.config.trait_dim
    }

    pub fn n_skills(&self) -> usize {
        self.skills.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn gating_probs(&self, x: ArrayView1<f64>) -> Vec<f64> {
        gating_probs(x, &self.gating)
    }

    /// Free-parameter vector: beta (by group, covariate), then b (group,
    /// skill), then w (block, skill, dimension).
    pub fn flatten(&self) -> Vec<f64> {
        self.gating
            .beta
            .iter()
            .chain(self.items.b.iter())
            .chain(self.items.w.iter())
            .copied()
            .collect()
    }

    /// Labels for [`flatten`](Self::flatten), in the same order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in 2..=self.config.groups {
            for c in &self.covariates {
                out.push(format!("beta[{g}][{c}]"));
            }
        }
        for g in 1..=self.config.groups {
            for s in &self.skills {
                out.push(format!("b[{g}][{s}]"));
            }
        }
        let shared = self.items.w.shape()[0] == 1 && self.config.groups > 1;
        for blk in 0..self.items.w.shape()[0] {
            for s in &self.skills {
                for d in 1..=self.config.trait_dim {
                    if shared {
                        out.push(format!("w[*][{s}][{d}]"));
                    } else {
                        out.push(format!("w[{}][{s}][{d}]", blk + 1));
                    }
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.config, self.n_covariates(), self.n_skills())
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)` without cancellation.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability of a tie given attractiveness `b`, slopes `w` and trait `u`.
pub fn connection_prob(b: f64, w: &[f64], u: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), u.len());
    sigmoid(b + dot(w, u))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log gating probabilities for a single design row, written into `out`.
pub fn log_gating_probs_into(x: ArrayView1<f64>, gating: &GatingParams, out: &mut [f64]) {
    out[0] = 0.0;
    for (g, row) in gating.beta.rows().into_iter().enumerate() {
        out[g + 1] = row.dot(&x);
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + out.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in out.iter_mut() {
        *v -= lse;
    }
}

/// Prior membership probabilities for one design row `x` (intercept first).
pub fn gating_probs(x: ArrayView1<f64>, gating: &GatingParams) -> Vec<f64> {
    let mut out = vec![0.0; gating.beta.nrows() + 1];
    log_gating_probs_into(x, gating, &mut out);
    out.iter_mut().for_each(|v| *v = v.exp());
    out
}

/// Number of free parameters for a design with `n_cols` = J+1 columns and
/// `r` skills.
pub fn param_count(config: &ModelConfig, n_cols: usize, r: usize) -> usize {
    let g = config.groups;
    let slopes = match config.variant {
        Variant::Unconstrained => g * r * config.trait_dim,
        Variant::Constrained => r * config.trait_dim,
    };
    (g - 1) * n_cols + g * r + slopes
}

/// Bayesian information criterion, `-2 loglik + p ln N`.
pub fn bic(loglik: f64, p: usize, n: usize) -> f64 {
    -2.0 * loglik + p as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabeledRow {
    group: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SlopeRow {
    /// `None` for the shared block of the constrained variant.
    group: Option<usize>,
    skill: String,
    values: Vec<f64>,
}

/// On-disk layout of a model: every block labeled by group, covariate,
/// skill and trait dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    config: ModelConfig,
    covariates: Vec<String>,
    skills: Vec<String>,
    beta: Vec<LabeledRow>,
    b: Vec<LabeledRow>,
    w: Vec<SlopeRow>,
}

impl From<MltaModel> for ModelDocument {
    fn from(m: MltaModel) -> Self {
        let beta = m
            .gating
            .beta
            .rows()
            .into_iter()
            .enumerate()
            .map(|(g, r)| LabeledRow {
                group: g + 2,
                values: r.to_vec(),
            })
            .collect();
        let b = m
            .items
            .b
            .rows()
            .into_iter()
            .enumerate()
            .map(|(g, r)| LabeledRow {
                group: g + 1,
                values: r.to_vec(),
            })
            .collect();
        let blocks = m.items.w.shape()[0];
        let shared = m.config.variant == Variant::Constrained;
        let mut w = Vec::new();
        if m.config.trait_dim > 0 {
            for blk in 0..blocks {
                for (k, s) in m.skills.iter().enumerate() {
                    w.push(SlopeRow {
                        group: (!shared).then_some(blk + 1),
                        skill: s.clone(),
                        values: m.items.slope(blk, k).to_vec(),
                    });
                }
            }
        }
        ModelDocument {
            config: m.config,
            covariates: m.covariates,
            skills: m.skills,
            beta,
            b,
            w,
        }
    }
}

impl TryFrom<ModelDocument> for MltaModel {
    type Error = MltaError;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let cfg = ModelConfig::new(doc.config.groups, doc.config.trait_dim, doc.config.variant)?;
        let p = doc.covariates.len();
        let r = doc.skills.len();
        let mut model = MltaModel::zeros(cfg, p, r);
        model.skills = doc.skills;
        model.covariates = doc.covariates;
        for row in doc.beta {
            if row.group < 2 || row.group > cfg.groups || row.values.len() != p {
                return Err(MltaError::Dimension(format!("bad beta row for group {}", row.group)));
            }
            for (j, v) in row.values.into_iter().enumerate() {
                model.gating.beta[[row.group - 2, j]] = v;
            }
        }
        for row in doc.b {
            if row.group < 1 || row.group > cfg.groups || row.values.len() != r {
                return Err(MltaError::Dimension(format!("bad b row for group {}", row.group)));
            }
            for (k, v) in row.values.into_iter().enumerate() {
                model.items.b[[row.group - 1, k]] = v;
            }
        }
        for row in doc.w {
            let blk = match (row.group, cfg.variant) {
                (None, Variant::Constrained) => 0,
                (Some(g), Variant::Unconstrained) if g >= 1 && g <= cfg.groups => g - 1,
                _ => return Err(MltaError::Dimension("slope block does not match variant".into())),
            };
            let k = model
                .skills
                .iter()
                .position(|s| *s == row.skill)
                .ok_or_else(|| MltaError::Dimension(format!("unknown skill `{}`", row.skill)))?;
            if row.values.len() != cfg.trait_dim {
                return Err(MltaError::Dimension("slope vector has wrong length".into()));
            }
            for (d, v) in row.values.into_iter().enumerate() {
                model.items.w[[blk, k, d]] = v;
            }
        }
        model.validate()?;
        Ok(model)
    }
}
