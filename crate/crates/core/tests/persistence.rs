mod common;

use std::fs;

use hgnmn_core::autodiff::Tape;
use hgnmn_core::builder::SelectParams;
use hgnmn_core::controller::RunOptions;
use hgnmn_core::error::Error;
use hgnmn_core::io::{
    format_embeddings, load_annotations, read_dataset, write_dataset, AnnotationPaths, Checkpoint,
};
use hgnmn_core::synthetic::{build_graphs, SceneAnnotations};
use hgnmn_core::train::{evaluate, generate_data, train};

use common::small_config;

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = small_config(5);
    let data = generate_data(&cfg).unwrap();
    let outcome = train(&cfg, &data.world, &data.train, &data.test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let ckpt = Checkpoint::new(
        &outcome.model,
        serde_json::to_value(&cfg).unwrap(),
        cfg.ablation().unwrap(),
        outcome.rng.clone(),
    );
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.rng, outcome.rng);
    let model = loaded.clone().into_model().unwrap();

    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());

    for task in data.test.iter().take(5) {
        let bits = |m: &hgnmn_core::controller::Model| {
            let tape = Tape::new();
            let out = m.run(&tape, &task.graphs, &task.question, &RunOptions::default()).unwrap();
            tape.value(out.logits).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&outcome.model), bits(&model));
    }
    let ablation = cfg.ablation().unwrap();
    assert_eq!(
        evaluate(&model, &data.test, &ablation).unwrap().accuracy,
        outcome.metrics.accuracy
    );
}

#[test]
fn checkpoint_version_mismatch_names_both_versions() {
    let cfg = small_config(1);
    let data = generate_data(&cfg).unwrap();
    let model = hgnmn_core::controller::Model::new(cfg.model_config(&data.world), data.world.embeddings, 0)
        .unwrap();
    let ckpt = Checkpoint::new(&model, serde_json::Value::Null, cfg.ablation().unwrap(), rand::SeedableRng::seed_from_u64(0));
    let mut raw = serde_json::to_value(&ckpt).unwrap();
    raw["format_version"] = 9.into();
    let err = Checkpoint::from_json(&raw.to_string(), "x.json".as_ref()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::CheckpointVersion { found: 9, expected: 1 }));
    assert!(msg.contains('9') && msg.contains('1'), "{msg}");

    let text = serde_json::to_string(&ckpt).unwrap();
    assert!(Checkpoint::from_json(&text[..text.len() / 2], "x.json".as_ref()).is_err());
    raw["format_version"] = 1.into();
    raw["params"] = serde_json::json!({"params": []});
    assert!(Checkpoint::from_json(&raw.to_string(), "x.json".as_ref())
        .and_then(Checkpoint::into_model)
        .is_err());
}

#[test]
fn dataset_round_trip_and_empty_file() {
    let cfg = small_config(2);
    let data = generate_data(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&path, &data.train).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data.train);
    for t in &data.train {
        t.verify().unwrap();
    }

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "\n\n").unwrap();
    assert!(read_dataset(&empty).unwrap_err().to_string().contains("empty"));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{}\n").unwrap();
    assert!(read_dataset(&bad).unwrap_err().to_string().contains("line 1"));
}

const DETECTIONS: &str = r#"[
  {"bbox": [10, 10, 50, 40], "label": "cup", "score": 0.9, "feature": [1.0, 0.0]},
  {"bbox": [80, 20, 30, 60], "label": "lamp", "score": 0.7, "feature": [0.0, 1.0]}
]"#;
const CAPTIONS: &str = r#"[
  {"subject": "cup", "relation": "on", "object": "table", "attributes": ["red"]},
  {"subject": "lamp", "relation": "near", "object": "cup"}
]"#;
const TRIPLES: &str = "# head\trel\ttail\tscore
cup\tUsedFor\tdrinking\t0.9
lamp\tUsedFor\treading\t0.8
lamp\tAtLocation\tbedroom\t0.6
kite\tAtLocation\tpark\t0.9
";
const EMBEDDINGS: &str = "cup 1 0 0
lamp 0 1 0
table 0 0 1
red 1 1 0
drinking 0.5 0.5 0
reading 0 0.5 0.5
bedroom 0.2 0.2 0.2
used 0.1 0 0
for 0 0.1 0
at 0 0 0.1
location 0.3 0 0
on 1 0 1
near 0 1 1
";

fn write_fixture(dir: &std::path::Path, triples: &str, detections: &str) -> AnnotationPaths {
    let paths = AnnotationPaths {
        detections: dir.join("detections.json"),
        captions: dir.join("captions.json"),
        triples: dir.join("triples.tsv"),
        embeddings: dir.join("embeddings.txt"),
    };
    fs::write(&paths.detections, detections).unwrap();
    fs::write(&paths.captions, CAPTIONS).unwrap();
    fs::write(&paths.triples, triples).unwrap();
    fs::write(&paths.embeddings, EMBEDDINGS).unwrap();
    paths
}

#[test]
fn annotation_fixture_builds_three_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ann = load_annotations(&write_fixture(dir.path(), TRIPLES, DETECTIONS)).unwrap();
    assert_eq!(ann.triples.len(), 4);
    assert_eq!(format_embeddings(&ann.embeddings).lines().count(), 13);
    let scene = SceneAnnotations {
        detections: ann.detections,
        captions: ann.captions,
        triples: ann.triples,
    };
    let g = build_graphs(&scene, &ann.embeddings, SelectParams::default()).unwrap();
    assert_eq!(g.visual.node_labels, ["cup", "lamp"]);
    assert_eq!(g.visual.num_edges(), 2);
    assert!(g.semantic.node_labels.contains(&"red".to_owned()));
    // the kite fact is not incident to a detected object
    assert_eq!(g.commonsense.num_edges(), 3);
    assert!(!g.commonsense.node_labels.contains(&"kite".to_owned()));
    // 0.7 * 0.9 + 0.3 * 0.9 ranks first
    let last = g.commonsense.edge_dim() - 1;
    assert!((g.commonsense.edge_features.data()[last] - 0.9).abs() < 1e-12);
}

#[test]
fn annotation_problems_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let triples = "cup\tUsedFor\tdrinking\t0.9\ncup\tEats\tcake\t0.5\nlamp\tUsedFor\treading\t1.5\n";
    let detections = r#"[{"bbox": [0, 0, 0, 4], "label": "cup", "score": 0.9, "feature": [1]}]"#;
    let err = load_annotations(&write_fixture(dir.path(), triples, detections))
        .unwrap_err()
        .to_string();
    for needle in ["line 2", "line 3", "record 1", "Eats"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
    assert!(!err.contains("line 1:"), "{err}");
}
