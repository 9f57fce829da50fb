#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;

use hgnmn_core::graph::is_distribution;
use hgnmn_core::synthetic::TemplateFamily;
use hgnmn_core::train::TrainConfig;

/// A few seconds of training: enough to move every parameter.
pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        dim: 8,
        word_dim: 8,
        epochs: 2,
        batch_size: 8,
        train_size: 48,
        test_size: 24,
        seed,
        family: TemplateFamily::CrossGraph,
        ..TrainConfig::default()
    }
}

pub fn schema_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas/trace.schema.json")
}

pub fn trace_schema() -> jsonschema::JSONSchema {
    let text = std::fs::read_to_string(schema_path()).expect("schema file");
    let schema: serde_json::Value = serde_json::from_str(&text).expect("schema is JSON");
    jsonschema::JSONSchema::compile(&schema).expect("schema compiles")
}

/// Validation messages, empty when `value` conforms.
pub fn schema_errors(schema: &jsonschema::JSONSchema, value: &serde_json::Value) -> Vec<String> {
    match schema.validate(value) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{}: {e}", e.instance_path)).collect(),
    }
}

pub fn assert_distribution(weights: &[f64], what: &str) {
    assert!(
        is_distribution(weights, 1e-6),
        "{what} is not a distribution: {weights:?}"
    );
}
