//! JSON Schemas of every JSON document the library and CLI write.

use schemars::{schema_for, Schema};

use crate::experiment::ExperimentReport;
use crate::metrics::MetricsReport;
use crate::model::{ModelSidecar, SamplePrediction};
use crate::synth::{DatasetManifest, SampleRecord};

/// `(file stem, schema)` pairs; files are named `<stem>.schema.json`.
pub fn all() -> Vec<(&'static str, Schema)> {
    vec![
        ("dataset_manifest", schema_for!(DatasetManifest)),
        ("sample_record", schema_for!(SampleRecord)),
        ("model_sidecar", schema_for!(ModelSidecar)),
        ("metrics_report", schema_for!(MetricsReport)),
        ("experiment_report", schema_for!(ExperimentReport)),
        ("prediction", schema_for!(SamplePrediction)),
    ]
}

pub fn file_name(stem: &str) -> String {
    format!("{stem}.schema.json")
}
