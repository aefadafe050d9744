//! Files written by one stage read back unchanged by the next.

mod common;

use mlta::bootstrap::summarize;
use mlta::synth::SimTruth;
use mlta::*;
use ndarray::array;

fn cfg(g: usize, d: usize) -> ModelConfig {
    ModelConfig::new(g, d, Variant::Unconstrained).unwrap()
}

#[test]
fn dataset_directory_round_trip() {
    let m = common::random_model(cfg(2, 1), 5, 3, 2.0, 1);
    let tr = common::sim(&m, 40, 1);
    let dir = tempfile::tempdir().unwrap();
    tr.write_dir(dir.path()).unwrap();
    let back = io::read_dataset(dir.path()).unwrap();
    assert_eq!(&back, tr.dataset());

    let truth: SimTruth = serde_json::from_reader(std::fs::File::open(dir.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth.model, tr.model);
    assert_eq!(truth.z_true, tr.z_true);
    assert_eq!(truth.u_true, tr.u_true);
}

#[test]
fn ingested_dataset_keeps_its_categories() {
    let raw = "id,Use,Gender\n1,yes,male\n2,no,female\n3,yes,female\n4,no,male\n";
    let table = RawSurveyTable::from_csv_reader(raw.as_bytes(), "NA").unwrap();
    let schema: IngestSchema = serde_json::from_str(
        r#"{"items": [{"item": "Use", "levels": ["no", "yes"], "threshold": "yes"}],
            "covariates": [{"name": "Gender", "levels": ["male", "female"], "reference": "male"}],
            "missing": "NA"}"#,
    )
    .unwrap();
    let (data, _) = ingest(&table, &schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    io::write_dataset(&data, dir.path()).unwrap();
    let back = io::read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    let gender = back.design.variable("Gender").unwrap();
    assert_eq!(gender.reference, "male");
    assert_eq!(gender.categories(), vec!["male", "female"]);
}

#[test]
fn fitted_model_round_trip() {
    let m = common::random_model(cfg(3, 2), 4, 3, 2.0, 2);
    let tr = common::sim(&m, 60, 2);
    let f = fit(tr.dataset(), m.config, &FitOptions { starts: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("model.json");
    io::write_json(&p, &f.model).unwrap();
    let back: MltaModel = serde_json::from_reader(std::fs::File::open(&p).unwrap()).unwrap();
    assert_eq!(back, f.model);
    // the same parameters give the same bound on the same data
    let e = |m: &MltaModel| {
        let st = variational::variational_state(tr.dataset(), m, 200).unwrap();
        variational::elbo(tr.dataset().y(), tr.dataset().x(), m, &st).unwrap()
    };
    assert_eq!(e(&back), e(&f.model));
}

#[test]
fn selection_table_round_trip() {
    let m = common::separated_lc(2, 5, 3);
    let tr = common::sim(&m, 80, 3);
    let grid = SelectionGrid {
        groups: vec![1, 2],
        trait_dims: vec![0, 1],
        variants: vec![Variant::Unconstrained, Variant::Constrained],
    };
    let t = grid_search(tr.dataset(), &grid, &FitOptions { starts: 2, ..Default::default() }).unwrap();
    let back: SelectionTable = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    assert_eq!(back, t);
    assert_eq!(select_best(&back).unwrap(), select_best(&t).unwrap());
}

#[test]
fn bootstrap_table_layout() {
    let r = summarize(
        vec!["b[1,1]".into(), "beta[2,x1]".into()],
        vec![0.5, -1.0],
        array![[0.4, -1.1], [0.6, -0.9], [0.5, -1.0]],
        0.9,
        vec![],
    );
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["parameter", "estimate", "se", "lower", "upper"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, j) in rows.iter().zip(0..) {
        assert_eq!(&row[0], r.names[j]);
        let vals: Vec<f64> = (1..5).map(|c| row[c].parse().unwrap()).collect();
        assert_eq!(vals, vec![r.estimate[j], r.se[j], r.lower[j], r.upper[j]]);
    }
}
