//! Interpretation of a fitted model: MAP assignments, predicted tie
//! probabilities by group, and membership probabilities by covariate
//! category.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{format_real, Dataset};
use crate::error::{MltaError, Result};
use crate::model::{self, MltaModel};
use crate::synth::{self, QuadratureSpec};
use crate::variational::VariationalState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentTable {
    pub ids: Vec<String>,
    /// 0-based group labels.
    pub labels: Vec<usize>,
    pub z: Array2<f64>,
}

impl AssignmentTable {
    /// `id, group, z_1..z_G`, groups reported 1-based.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut h = vec!["id".to_string(), "group".to_string()];
        h.extend((1..=self.z.ncols()).map(|g| format!("z_{g}")));
        wtr.write_record(&h)?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone(), (self.labels[i] + 1).to_string()];
            rec.extend(self.z.row(i).iter().map(|v| format_real(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.z.ncols()];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

/// Row-wise argmax; ties go to the lowest group index.
pub fn map_assign(ids: &[String], z: &Array2<f64>) -> AssignmentTable {
    let labels = z
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (g, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = g;
                }
            }
            best
        })
        .collect();
    AssignmentTable {
        ids: ids.to_vec(),
        labels,
        z: z.clone(),
    }
}

/// Adjusted Rand index between two labelings of the same senders.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MltaError::Dimension("labelings have different lengths".into()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = Array2::<f64>::zeros((ka, kb));
    for (&i, &j) in a.iter().zip(b) {
        table[[i, j]] += 1.0;
    }
    let pairs = |n: f64| n * (n - 1.0) / 2.0;
    let index: f64 = table.iter().map(|&n| pairs(n)).sum();
    let rows: f64 = table.rows().into_iter().map(|r| pairs(r.sum())).sum();
    let cols: f64 = table.columns().into_iter().map(|c| pairs(c.sum())).sum();
    let total = pairs(a.len() as f64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        // both labelings trivial
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// How a predicted tie probability treats the trait posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraitPlugIn {
    /// Evaluate at the variational posterior mean.
    PosteriorMean,
    /// Average over the trait posterior by quadrature (D <= 2).
    Integrated(QuadratureSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillProbSummary {
    pub skills: Vec<String>,
    /// Per group, per skill: `(sender id, probability)` of MAP members.
    pub values: Vec<Vec<Vec<(String, f64)>>>,
    /// G x R means; NaN for empty groups.
    pub means: Array2<f64>,
}

impl SkillProbSummary {
    /// Long format `group, skill, id, prob`.
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["group", "skill", "id", "prob"])?;
        for (g, per_skill) in self.values.iter().enumerate() {
            for (k, vals) in per_skill.iter().enumerate() {
                for (id, p) in vals {
                    wtr.write_record([
                        (g + 1).to_string(),
                        self.skills[k].clone(),
                        id.clone(),
                        format_real(*p),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// `group, skill, mean`.
    pub fn write_means_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["group", "skill", "mean"])?;
        for ((g, k), m) in self.means.indexed_iter() {
            let v = if m.is_nan() { "NA".to_string() } else { format_real(*m) };
            wtr.write_record([(g + 1).to_string(), self.skills[k].clone(), v])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Predicted tie probabilities for each sender under its MAP group.
pub fn predicted_skill_probs(
    model: &MltaModel,
    state: &VariationalState,
    data: &Dataset,
    mode: TraitPlugIn,
) -> Result<SkillProbSummary> {
    let (g, r) = (model.n_groups(), model.n_skills());
    if state.z.dim() != (data.n(), g) || data.r() != r {
        return Err(MltaError::Dimension("fit and dataset disagree".into()));
    }
    let assign = map_assign(&data.incidence.ids, &state.z);
    let mut values = vec![vec![Vec::new(); r]; g];
    for (i, &gi) in assign.labels.iter().enumerate() {
        let mu: Vec<f64> = (0..model.trait_dim()).map(|a| state.mu[[i, gi, a]]).collect();
        for k in 0..r {
            let p = match mode {
                TraitPlugIn::PosteriorMean => {
                    model::connection_prob(model.items.b[[gi, k]], model.items.slope(gi, k), &mu)
                }
                TraitPlugIn::Integrated(spec) => {
                    synth::posterior_tie_prob(data.y().row(i), model, gi, k, spec)?
                }
            };
            values[gi][k].push((data.incidence.ids[i].clone(), p));
        }
    }
    let means = Array2::from_shape_fn((g, r), |(gi, k)| {
        let v = &values[gi][k];
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().map(|(_, p)| p).sum::<f64>() / v.len() as f64
        }
    });
    Ok(SkillProbSummary {
        skills: model.skills.clone(),
        values,
        means,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProbTable {
    pub variable: String,
    pub categories: Vec<String>,
    /// Per category: mean gating vector, or `None` when nobody is in it.
    pub rows: Vec<Option<Vec<f64>>>,
}

impl GroupProbTable {
    /// Groups as rows, categories as columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut h = vec!["group".to_string()];
        h.extend(self.categories.iter().map(|c| format!("{}={c}", self.variable)));
        wtr.write_record(&h)?;
        let g = self.rows.iter().flatten().map(Vec::len).next().unwrap_or(0);
        for gi in 0..g {
            let mut rec = vec![(gi + 1).to_string()];
            for row in &self.rows {
                rec.push(match row {
                    Some(v) => format_real(v[gi]),
                    None => "NA".into(),
                });
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Average prior membership probability over the senders observed in each
/// category of `variable`.
pub fn group_probs_by_covariate(model: &MltaModel, data: &Dataset, variable: &str) -> Result<GroupProbTable> {
    let var = data
        .design
        .variable(variable)
        .ok_or_else(|| MltaError::Config(format!("unknown covariate `{variable}`")))?;
    let cats = var.categories();
    let g = model.n_groups();
    let mut sums = vec![vec![0.0; g]; cats.len()];
    let mut counts = vec![0usize; cats.len()];
    for i in 0..data.n() {
        let c = var.category_of(data.x(), i);
        let ci = cats.iter().position(|x| *x == c).unwrap();
        let eta = model.gating_probs(data.x().row(i));
        for (s, e) in sums[ci].iter_mut().zip(eta) {
            *s += e;
        }
        counts[ci] += 1;
    }
    let rows = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    Ok(GroupProbTable {
        variable: variable.to_string(),
        categories: cats.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}
