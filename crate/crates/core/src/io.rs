//! File layouts shared by the pipeline stages.
//!
//! A dataset directory holds `incidence.csv`, `design.csv` and
//! `design_meta.json` (the covariate variables with their reference
//! categories).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use crate::data::{format_real, CovariateDesign, CovariateVariable, Dataset, IncidenceMatrix};
use crate::error::{MltaError, Result};

pub const INCIDENCE_FILE: &str = "incidence.csv";
pub const DESIGN_FILE: &str = "design.csv";
pub const DESIGN_META_FILE: &str = "design_meta.json";

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    data.incidence
        .write_csv(BufWriter::new(File::create(dir.join(INCIDENCE_FILE))?))?;
    data.design
        .write_csv(BufWriter::new(File::create(dir.join(DESIGN_FILE))?))?;
    write_json(dir.join(DESIGN_META_FILE), &data.design.variables)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let inc = IncidenceMatrix::read_csv(File::open(dir.join(INCIDENCE_FILE))?)?;
    let meta_path = dir.join(DESIGN_META_FILE);
    let meta: Option<Vec<CovariateVariable>> = if meta_path.exists() {
        Some(serde_json::from_reader(File::open(meta_path)?)?)
    } else {
        None
    };
    let design = CovariateDesign::read_csv(File::open(dir.join(DESIGN_FILE))?, meta.as_deref())?;
    Dataset::new(inc, design)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Writes an id-keyed real matrix with the given column header.
pub fn write_matrix_csv<W: Write>(w: W, ids: &[String], header: &[String], m: &Array2<f64>) -> Result<()> {
    if ids.len() != m.nrows() || header.len() != m.ncols() {
        return Err(MltaError::Dimension("matrix and labels disagree".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut h = vec!["id".to_string()];
    h.extend(header.iter().cloned());
    wtr.write_record(&h)?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format_real(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}
