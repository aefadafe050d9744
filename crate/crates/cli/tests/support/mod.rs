#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub fn mlta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlta"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs and insists on success.
pub fn ok(args: &[&str]) -> String {
    let out = mlta(args);
    assert!(
        out.status.success(),
        "mlta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// File name to sha256 of every primary output listed in the manifest.
pub fn output_digests(dir: &Path) -> BTreeMap<String, String> {
    let m = manifest(dir);
    m["outputs"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
        .collect()
}

pub const FREQ: [&str; 5] = ["never", "occasionally", "a few times a week", "most days", "every day"];

/// Survey-shaped extract: two single items, one item asked about three
/// alters, two categorical covariates. Respondent 7 skips a question.
pub fn write_survey(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut csv = String::from("id,Internet use,Messages a1,Messages a2,Messages a3,Volunteering,Gender,Education\n");
    for i in 0..n {
        let f = |k: usize| FREQ[(i * 7 + k * 3 + i / 5) % 5];
        let internet = if i == 7 { "NA" } else { f(0) };
        let gender = if i % 3 == 0 { "female" } else { "male" };
        let edu = ["low", "medium", "high"][(i / 2) % 3];
        csv.push_str(&format!(
            "r{i},{internet},{},{},{},{},{gender},{edu}\n",
            f(1),
            f(2),
            f(3),
            f(4)
        ));
    }
    let rules = serde_json::json!({
        "missing": "NA",
        "items": [
            {"item": "Internet use", "levels": FREQ, "threshold": "most days"},
            {"item": "Messages", "levels": FREQ, "threshold": "a few times a week",
             "alters": ["Messages a1", "Messages a2", "Messages a3"]},
            {"item": "Volunteering", "levels": FREQ, "threshold": "occasionally"}
        ],
        "covariates": [
            {"name": "Gender", "levels": ["male", "female"], "reference": "male"},
            {"name": "Education", "levels": ["low", "medium", "high"], "reference": "high"}
        ]
    });
    let raw = dir.join("raw.csv");
    let rules_path = dir.join("rules.json");
    fs::write(&raw, csv).unwrap();
    fs::write(&rules_path, serde_json::to_string_pretty(&rules).unwrap()).unwrap();
    (raw, rules_path)
}
