#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use clever_core::{Dataset, Model};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn fixture_model() -> Model {
    Model::load(fixture_path("mlp_tanh.json")).expect("fixture model loads")
}

pub fn fixture_dataset(model: &Model) -> Dataset {
    Dataset::load(fixture_path("dataset.json"), model).expect("fixture dataset loads")
}

/// Prints one verdict line straight to stdout, past the test harness's
/// output capture.
pub fn verdict(criterion: &str, pass: bool, detail: impl AsRef<str>) {
    let mut out = std::io::stdout().lock();
    let status = if pass { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "[acceptance] {status} {criterion}: {}",
        detail.as_ref()
    )
    .ok();
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want.abs()
    }
}
