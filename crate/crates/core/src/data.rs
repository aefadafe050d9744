//! Survey ingestion: ordinal items become binary ties, categorical covariates
//! become dummy columns against a reference category, and incomplete
//! respondents are dropped listwise.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MltaError, Result};

pub const INTERCEPT: &str = "(Intercept)";

/// Raw survey records keyed by respondent id. `None` marks a missing answer.
#[derive(Debug, Clone)]
pub struct RawSurveyTable {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Vec<Option<String>>>,
}

impl RawSurveyTable {
    pub fn new(
        ids: Vec<String>,
        columns: Vec<String>,
        cells: Vec<Vec<Option<String>>>,
    ) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(MltaError::Data(format!("duplicate respondent id `{id}`")));
            }
        }
        if cells.len() != ids.len() {
            return Err(MltaError::Dimension(format!(
                "{} ids but {} rows",
                ids.len(),
                cells.len()
            )));
        }
        if let Some((row, _)) = cells
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != columns.len())
        {
            return Err(MltaError::Data(format!(
                "row {} has the wrong number of fields",
                row + 2
            )));
        }
        Ok(Self { ids, columns, cells })
    }

    /// Reads a CSV whose first column is `id`. Fields equal to `missing`
    /// (after trimming) are recorded as missing.
    pub fn from_csv_reader<R: Read>(reader: R, missing: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("id") {
            return Err(MltaError::Data("first CSV column must be `id`".into()));
        }
        let columns: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut ids = Vec::new();
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            ids.push(rec[0].trim().to_string());
            cells.push(
                rec.iter()
                    .skip(1)
                    .map(|v| {
                        let v = v.trim();
                        (v != missing).then(|| v.to_string())
                    })
                    .collect(),
            );
        }
        Self::new(ids, columns, cells)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, missing: &str) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, missing)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How one ordinal item becomes a tie.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomizationRule {
    #[serde(alias = "name")]
    pub item: String,
    pub levels: Vec<String>,
    pub threshold: String,
    /// Columns holding the same question asked about different alters.
    /// The tie is the OR over alters after thresholding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alters: Option<Vec<String>>,
}

impl DichotomizationRule {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(MltaError::Config(format!(
                "item `{}` declares fewer than two levels",
                self.item
            )));
        }
        if !self.levels.contains(&self.threshold) {
            return Err(MltaError::Config(format!(
                "item `{}`: threshold `{}` is not one of its levels",
                self.item, self.threshold
            )));
        }
        Ok(())
    }

    fn source_columns(&self) -> Vec<&str> {
        match &self.alters {
            Some(a) if !a.is_empty() => a.iter().map(String::as_str).collect(),
            _ => vec![self.item.as_str()],
        }
    }

    fn threshold_rank(&self) -> usize {
        self.levels.iter().position(|l| l == &self.threshold).unwrap()
    }
}

/// A categorical covariate and its reference category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub levels: Vec<String>,
    pub reference: String,
}

/// The ingest configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    pub items: Vec<DichotomizationRule>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub missing: String,
}

impl IngestSchema {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// N x R binary sender-by-skill tie matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidenceMatrix {
    pub ids: Vec<String>,
    pub skills: Vec<String>,
    pub values: Array2<u8>,
}

impl IncidenceMatrix {
    pub fn new(ids: Vec<String>, skills: Vec<String>, values: Array2<u8>) -> Result<Self> {
        if values.nrows() != ids.len() || values.ncols() != skills.len() {
            return Err(MltaError::Dimension(format!(
                "incidence values are {}x{}, labels {}x{}",
                values.nrows(),
                values.ncols(),
                ids.len(),
                skills.len()
            )));
        }
        if ids.is_empty() || skills.is_empty() {
            return Err(MltaError::Data("incidence matrix must be at least 1x1".into()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(MltaError::Data("incidence entries must be 0 or 1".into()));
        }
        Ok(Self { ids, skills, values })
    }

    pub fn n_senders(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_skills(&self) -> usize {
        self.values.ncols()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend(self.skills.iter().cloned());
        wtr.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(self.values.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let (ids, names, rows) = read_numeric_csv(r)?;
        let mut values = Array2::zeros((ids.len(), names.len()));
        for (i, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                values[[i, k]] = match *v {
                    x if x == 0.0 => 0,
                    x if x == 1.0 => 1,
                    x => {
                        return Err(MltaError::Data(format!(
                            "incidence entry {x} for `{}` is not binary",
                            ids[i]
                        )))
                    }
                };
            }
        }
        Self::new(ids, names, values)
    }
}

/// One categorical variable's footprint in the design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateVariable {
    pub name: String,
    pub reference: String,
    /// Non-reference levels, aligned with `columns`.
    pub levels: Vec<String>,
    /// Design-matrix column indices of the dummies.
    pub columns: Vec<usize>,
}

impl CovariateVariable {
    /// Category label of row `i`, reading the dummies of `design`.
    pub fn category_of(&self, design: &Array2<f64>, i: usize) -> &str {
        for (lvl, &c) in self.levels.iter().zip(&self.columns) {
            if design[[i, c]] > 0.5 {
                return lvl;
            }
        }
        &self.reference
    }

    /// All categories, reference first.
    pub fn categories(&self) -> Vec<&str> {
        std::iter::once(self.reference.as_str())
            .chain(self.levels.iter().map(String::as_str))
            .collect()
    }
}

/// N x (J+1) design matrix; column 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDesign {
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
    pub variables: Vec<CovariateVariable>,
}

impl CovariateDesign {
    /// Intercept-only design for `ids`.
    pub fn intercept_only(ids: Vec<String>) -> Self {
        let n = ids.len();
        Self {
            ids,
            columns: vec![INTERCEPT.to_string()],
            values: Array2::ones((n, 1)),
            variables: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn variable(&self, name: &str) -> Option<&CovariateVariable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.nrows() != self.ids.len() || self.values.ncols() != self.columns.len() {
            return Err(MltaError::Dimension("design labels do not match values".into()));
        }
        if self.values.ncols() == 0 || self.values.column(0).iter().any(|&v| v != 1.0) {
            return Err(MltaError::Data("first design column must be the intercept".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(MltaError::Data("design contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string()];
        header.extend(self.columns.iter().cloned());
        wtr.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(self.values.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format_real(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads a design CSV. Dummy columns named `<variable>=<level>` are
    /// grouped back into variables; the reference label comes from `meta`
    /// when supplied and is otherwise recorded as `(reference)`.
    pub fn read_csv<R: Read>(r: R, meta: Option<&[CovariateVariable]>) -> Result<Self> {
        let (ids, columns, rows) = read_numeric_csv(r)?;
        let mut values = Array2::zeros((ids.len(), columns.len()));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                values[[i, j]] = *v;
            }
        }
        let variables = match meta {
            Some(m) => m.to_vec(),
            None => infer_variables(&columns),
        };
        let design = Self {
            ids,
            columns,
            values,
            variables,
        };
        design.validate()?;
        Ok(design)
    }
}

fn infer_variables(columns: &[String]) -> Vec<CovariateVariable> {
    let mut out: Vec<CovariateVariable> = Vec::new();
    for (j, c) in columns.iter().enumerate().skip(1) {
        let Some((var, lvl)) = c.split_once('=') else {
            continue;
        };
        match out.iter_mut().find(|v| v.name == var) {
            Some(v) => {
                v.levels.push(lvl.to_string());
                v.columns.push(j);
            }
            None => out.push(CovariateVariable {
                name: var.to_string(),
                reference: "(reference)".to_string(),
                levels: vec![lvl.to_string()],
                columns: vec![j],
            }),
        }
    }
    out
}

fn read_numeric_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("id") {
        return Err(MltaError::Data("first CSV column must be `id`".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| {
                    MltaError::Data(format!("line {}: `{v}` is not a number", line + 2))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((ids, names, rows))
}

/// Round-trip decimal text; whole numbers are written without a fraction.
pub fn format_real(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

/// A value paired with per-row missingness flags.
#[derive(Debug, Clone)]
pub struct Flagged<T> {
    pub value: T,
    pub missing: Vec<bool>,
}

/// Encoded covariates plus any diagnostics raised while encoding.
#[derive(Debug, Clone)]
pub struct EncodedCovariates {
    pub design: Flagged<CovariateDesign>,
    pub warnings: Vec<String>,
}

/// Incidence matrix and covariate design of the complete cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub incidence: IncidenceMatrix,
    pub design: CovariateDesign,
    pub dropped: usize,
}

impl Dataset {
    pub fn new(incidence: IncidenceMatrix, design: CovariateDesign) -> Result<Self> {
        if incidence.ids != design.ids {
            return Err(MltaError::Data(
                "incidence and design id sequences differ".into(),
            ));
        }
        design.validate()?;
        Ok(Self {
            incidence,
            design,
            dropped: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.incidence.n_senders()
    }

    pub fn r(&self) -> usize {
        self.incidence.n_skills()
    }

    /// Number of design columns, J+1.
    pub fn p(&self) -> usize {
        self.design.n_cols()
    }

    pub fn y(&self) -> &Array2<u8> {
        &self.incidence.values
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.design.values
    }

    /// Row subset (with repetition allowed) of both matrices.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let ids: Vec<String> = rows.iter().map(|&i| self.incidence.ids[i].clone()).collect();
        Self {
            incidence: IncidenceMatrix {
                ids: ids.clone(),
                skills: self.incidence.skills.clone(),
                values: self.incidence.values.select(Axis(0), rows),
            },
            design: CovariateDesign {
                ids,
                columns: self.design.columns.clone(),
                values: self.design.values.select(Axis(0), rows),
                variables: self.design.variables.clone(),
            },
            dropped: 0,
        }
    }
}

/// Turns ordinal item responses into ties.
///
/// A response is a tie iff its level rank is at least the threshold rank;
/// multi-alter items OR the thresholded alters. Rows with any missing item
/// response are flagged, never imputed.
pub fn dichotomize(
    raw: &RawSurveyTable,
    rules: &[DichotomizationRule],
) -> Result<Flagged<IncidenceMatrix>> {
    if rules.is_empty() {
        return Err(MltaError::Config("no item rules supplied".into()));
    }
    let n = raw.len();
    let mut values = Array2::<u8>::zeros((n, rules.len()));
    let mut missing = vec![false; n];
    for (k, rule) in rules.iter().enumerate() {
        rule.validate()?;
        let cols = rule
            .source_columns()
            .into_iter()
            .map(|c| {
                raw.column_index(c).ok_or_else(|| MltaError::MissingColumn {
                    item: rule.item.clone(),
                    column: c.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rank: HashMap<&str, usize> = rule
            .levels
            .iter()
            .enumerate()
            .map(|(r, l)| (l.as_str(), r))
            .collect();
        let cut = rule.threshold_rank();
        for i in 0..n {
            let mut tie = 0u8;
            for &c in &cols {
                match &raw.cells[i][c] {
                    None => missing[i] = true,
                    Some(label) => {
                        let r = *rank.get(label.as_str()).ok_or_else(|| {
                            MltaError::UnknownLevel {
                                item: rule.item.clone(),
                                id: raw.ids[i].clone(),
                                label: label.clone(),
                            }
                        })?;
                        if r >= cut {
                            tie = 1;
                        }
                    }
                }
            }
            values[[i, k]] = tie;
        }
    }
    let skills = rules.iter().map(|r| r.item.clone()).collect();
    Ok(Flagged {
        value: IncidenceMatrix::new(raw.ids.clone(), skills, values)?,
        missing,
    })
}

/// Dummy-codes categorical covariates against their reference categories
/// and prepends the intercept. Columns are named `<variable>=<level>`.
pub fn encode_covariates(raw: &RawSurveyTable, schema: &[CovariateSpec]) -> Result<EncodedCovariates> {
    let n = raw.len();
    let mut columns = vec![INTERCEPT.to_string()];
    let mut variables = Vec::with_capacity(schema.len());
    for spec in schema {
        if raw.column_index(&spec.name).is_none() {
            return Err(MltaError::MissingColumn {
                item: spec.name.clone(),
                column: spec.name.clone(),
            });
        }
        if !spec.levels.contains(&spec.reference) {
            return Err(MltaError::Config(format!(
                "covariate `{}`: reference `{}` is not among its levels",
                spec.name, spec.reference
            )));
        }
        let levels: Vec<String> = spec
            .levels
            .iter()
            .filter(|l| **l != spec.reference)
            .cloned()
            .collect();
        let start = columns.len();
        columns.extend(levels.iter().map(|l| format!("{}={l}", spec.name)));
        variables.push(CovariateVariable {
            name: spec.name.clone(),
            reference: spec.reference.clone(),
            columns: (start..start + levels.len()).collect(),
            levels,
        });
    }

    let mut values = Array2::<f64>::zeros((n, columns.len()));
    values.column_mut(0).fill(1.0);
    let mut missing = vec![false; n];
    for (spec, var) in schema.iter().zip(&variables) {
        let col = raw.column_index(&spec.name).unwrap();
        for i in 0..n {
            let Some(label) = &raw.cells[i][col] else {
                missing[i] = true;
                continue;
            };
            if !spec.levels.contains(label) {
                return Err(MltaError::UnseenCategory {
                    variable: spec.name.clone(),
                    id: raw.ids[i].clone(),
                    label: label.clone(),
                });
            }
            if let Some(pos) = var.levels.iter().position(|l| l == label) {
                values[[i, var.columns[pos]]] = 1.0;
            }
        }
    }

    let mut warnings = Vec::new();
    for (j, name) in columns.iter().enumerate().skip(1) {
        let col = values.column(j);
        let observed = col
            .iter()
            .zip(&missing)
            .filter(|(_, m)| !**m)
            .map(|(v, _)| *v);
        let (lo, hi) = observed.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        if lo == hi {
            let msg = format!("column `{name}` is constant ({lo}) after encoding");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    Ok(EncodedCovariates {
        design: Flagged {
            value: CovariateDesign {
                ids: raw.ids.clone(),
                columns,
                values,
                variables,
            },
            missing,
        },
        warnings,
    })
}

/// Listwise deletion of rows flagged in either input.
pub fn complete_cases(
    incidence: Flagged<IncidenceMatrix>,
    design: Flagged<CovariateDesign>,
) -> Result<Dataset> {
    if incidence.value.ids != design.value.ids {
        return Err(MltaError::Data("incidence and design ids are not aligned".into()));
    }
    let keep: Vec<usize> = (0..incidence.value.ids.len())
        .filter(|&i| !incidence.missing[i] && !design.missing[i])
        .collect();
    let dropped = incidence.value.ids.len() - keep.len();
    if keep.is_empty() {
        return Err(MltaError::NoCompleteCases { dropped });
    }
    let full = Dataset {
        incidence: incidence.value,
        design: design.value,
        dropped: 0,
    };
    let mut out = if dropped == 0 { full } else { full.select_rows(&keep) };
    out.dropped = dropped;
    Ok(out)
}

/// Per-skill proportion of ties.
pub fn tie_density(incidence: &IncidenceMatrix) -> Vec<f64> {
    let n = incidence.n_senders() as f64;
    incidence
        .values
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect()
}

/// Share of respondents in each category of each covariate.
pub fn covariate_distribution(design: &CovariateDesign) -> Vec<(String, String, f64)> {
    let n = design.n_rows() as f64;
    let mut out = Vec::new();
    for var in &design.variables {
        for cat in var.categories() {
            let count = (0..design.n_rows())
                .filter(|&i| var.category_of(&design.values, i) == cat)
                .count();
            out.push((var.name.clone(), cat.to_string(), count as f64 / n));
        }
    }
    out
}

/// Full ingest: dichotomize, encode, filter.
pub fn ingest(raw: &RawSurveyTable, schema: &IngestSchema) -> Result<(Dataset, Vec<String>)> {
    let incidence = dichotomize(raw, &schema.items)?;
    let encoded = encode_covariates(raw, &schema.covariates)?;
    let data = complete_cases(incidence, encoded.design)?;
    Ok((data, encoded.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const FREQ: [&str; 5] = [
        "never",
        "occasionally",
        "a few times a week",
        "most days",
        "every day",
    ];

    fn freq_rule(item: &str, alters: Option<Vec<&str>>) -> DichotomizationRule {
        DichotomizationRule {
            item: item.into(),
            levels: FREQ.iter().map(|s| s.to_string()).collect(),
            threshold: "a few times a week".into(),
            alters: alters.map(|a| a.into_iter().map(String::from).collect()),
        }
    }

    fn table(cols: &[&str], rows: &[&[&str]]) -> RawSurveyTable {
        RawSurveyTable::new(
            (0..rows.len()).map(|i| format!("r{i}")).collect(),
            cols.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| {
                    r.iter()
                        .map(|v| (!v.is_empty()).then(|| v.to_string()))
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn every_day_is_a_tie() {
        let raw = table(&["Internet use"], &[&["every day"], &["never"]]);
        let inc = dichotomize(&raw, &[freq_rule("Internet use", None)]).unwrap();
        assert_eq!(inc.value.values, array![[1u8], [0]]);
        assert_eq!(inc.missing, vec![false, false]);
    }

    #[test]
    fn alters_are_or_aggregated() {
        let raw = table(
            &["a", "b", "c", "d"],
            &[&["never", "never", "most days", "never"], &["never"; 4]],
        );
        let rule = freq_rule("Messages", Some(vec!["a", "b", "c", "d"]));
        let inc = dichotomize(&raw, &[rule]).unwrap();
        assert_eq!(inc.value.values, array![[1u8], [0]]);
        assert_eq!(inc.value.skills, vec!["Messages".to_string()]);
    }

    #[test]
    fn unknown_label_names_item_id_and_label() {
        let raw = table(&["Internet use"], &[&["daily-ish"]]);
        let err = dichotomize(&raw, &[freq_rule("Internet use", None)]).unwrap_err();
        match err {
            MltaError::UnknownLevel { item, id, label } => {
                assert_eq!(item, "Internet use");
                assert_eq!(id, "r0");
                assert_eq!(label, "daily-ish");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn absent_column_is_rejected() {
        let raw = table(&["x"], &[&["never"]]);
        assert!(matches!(
            dichotomize(&raw, &[freq_rule("Internet use", None)]),
            Err(MltaError::MissingColumn { .. })
        ));
    }

    #[test]
    fn bad_threshold_is_rejected() {
        let mut rule = freq_rule("x", None);
        rule.threshold = "sometimes".into();
        assert!(rule.validate().is_err());
        let raw = table(&["x"], &[&["never"]]);
        assert!(dichotomize(&raw, &[rule]).is_err());
    }

    #[test]
    fn education_has_two_dummies() {
        let raw = table(&["Education"], &[&["low"], &["medium"], &["high"]]);
        let spec = CovariateSpec {
            name: "Education".into(),
            levels: vec!["low".into(), "medium".into(), "high".into()],
            reference: "high".into(),
        };
        let enc = encode_covariates(&raw, &[spec]).unwrap();
        let d = &enc.design.value;
        assert_eq!(d.columns, vec![INTERCEPT, "Education=low", "Education=medium"]);
        assert_eq!(d.values, array![[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        assert!(enc.warnings.is_empty());
        assert_eq!(d.variables[0].category_of(&d.values, 2), "high");
    }

    #[test]
    fn binary_variable_gives_one_column() {
        let raw = table(&["Gender"], &[&["male"], &["female"]]);
        let spec = CovariateSpec {
            name: "Gender".into(),
            levels: vec!["male".into(), "female".into()],
            reference: "male".into(),
        };
        let d = encode_covariates(&raw, &[spec]).unwrap().design.value;
        assert_eq!(d.columns, vec![INTERCEPT, "Gender=female"]);
        assert_eq!(d.values.column(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn all_reference_gives_zero_column_and_warning() {
        let raw = table(&["Gender"], &[&["male"], &["male"]]);
        let spec = CovariateSpec {
            name: "Gender".into(),
            levels: vec!["male".into(), "female".into()],
            reference: "male".into(),
        };
        let enc = encode_covariates(&raw, &[spec]).unwrap();
        assert!(enc.design.value.values.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(enc.warnings.len(), 1);
    }

    #[test]
    fn unseen_category_is_rejected() {
        let raw = table(&["Gender"], &[&["other"]]);
        let spec = CovariateSpec {
            name: "Gender".into(),
            levels: vec!["male".into(), "female".into()],
            reference: "male".into(),
        };
        assert!(matches!(
            encode_covariates(&raw, &[spec]),
            Err(MltaError::UnseenCategory { .. })
        ));
    }

    #[test]
    fn one_missing_item_drops_one_row() {
        let rows: Vec<&[&str]> = vec![
            &["never", "male"],
            &["", "male"],
            &["every day", "female"],
            &["most days", "female"],
            &["never", "male"],
        ];
        let raw = table(&["x", "Gender"], &rows);
        let schema = IngestSchema {
            items: vec![freq_rule("x", None)],
            covariates: vec![CovariateSpec {
                name: "Gender".into(),
                levels: vec!["male".into(), "female".into()],
                reference: "male".into(),
            }],
            missing: String::new(),
        };
        let (data, _) = ingest(&raw, &schema).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.dropped, 1);
        assert_eq!(data.incidence.ids, vec!["r0", "r2", "r3", "r4"]);
        assert_eq!(data.design.ids, data.incidence.ids);
    }

    #[test]
    fn no_missing_is_identity() {
        let raw = table(&["x"], &[&["never"], &["every day"]]);
        let inc = dichotomize(&raw, &[freq_rule("x", None)]).unwrap();
        let enc = encode_covariates(&raw, &[]).unwrap();
        let data = complete_cases(inc.clone(), enc.design).unwrap();
        assert_eq!(data.dropped, 0);
        assert_eq!(data.incidence, inc.value);
    }

    #[test]
    fn all_missing_is_rejected() {
        let raw = table(&["x"], &[&[""]]);
        let inc = dichotomize(&raw, &[freq_rule("x", None)]).unwrap();
        let enc = encode_covariates(&raw, &[]).unwrap();
        assert!(matches!(
            complete_cases(inc, enc.design),
            Err(MltaError::NoCompleteCases { dropped: 1 })
        ));
    }

    #[test]
    fn density_of_small_matrices() {
        let m = IncidenceMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["s".into(), "t".into()],
            array![[1u8, 0], [1, 1]],
        )
        .unwrap();
        assert_eq!(tie_density(&m), vec![1.0, 0.5]);
        let z = IncidenceMatrix::new(vec!["a".into()], vec!["s".into()], array![[0u8]]).unwrap();
        assert_eq!(tie_density(&z), vec![0.0]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = RawSurveyTable::new(
            vec!["a".into(), "a".into()],
            vec!["x".into()],
            vec![vec![None], vec![None]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let src = "id,x,Gender\n1,never,male\n2,,female\n";
        let raw = RawSurveyTable::from_csv_reader(src.as_bytes(), "").unwrap();
        assert_eq!(raw.cells[1][0], None);
        let spec = CovariateSpec {
            name: "Gender".into(),
            levels: vec!["male".into(), "female".into()],
            reference: "male".into(),
        };
        let enc = encode_covariates(&raw, &[spec]).unwrap();
        let mut buf = Vec::new();
        enc.design.value.write_csv(&mut buf).unwrap();
        let back = CovariateDesign::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.values, enc.design.value.values);
        assert_eq!(back.variables[0].levels, vec!["female"]);
        assert_eq!(back.variables[0].columns, vec![1]);
    }
}
