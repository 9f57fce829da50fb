mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgnmn_core::controller::{Model, RunOptions};
use hgnmn_core::gradsuite::{random_graphs, random_model};
use hgnmn_core::graph::Modality;
use hgnmn_core::modules::ModuleKind;
use hgnmn_core::trace::{ReasoningTrace, TRACE_VERSION};
use hgnmn_core::train::{generate_data, train};

use common::{schema_errors, small_config, trace_schema};

/// Per-step weights whose argmax is `visual.find` where `active[t]`, NoOp elsewhere.
fn layout(model: &Model, active: &[bool]) -> Vec<Vec<f64>> {
    let inv = &model.inventory;
    let idx = |name: &str| inv.index_of(name).unwrap();
    active
        .iter()
        .map(|&on| {
            let mut w = vec![0.0; inv.len()];
            w[idx(if on { "visual.find" } else { "visual.noop" })] = 0.5;
            w[idx("semantic.noop")] = 0.25;
            w[idx("commonsense.noop")] = 0.25;
            w
        })
        .collect()
}

fn constructed_trace(active: &[bool]) -> ReasoningTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = random_model(&mut rng, active.len());
    let graphs = random_graphs(&mut rng, 5);
    let q: Vec<String> = ["what", "color", "is", "the", "cup"].map(String::from).to_vec();
    let opts = RunOptions {
        forced_weights: Some(layout(&model, active)),
        ..RunOptions::default()
    };
    ReasoningTrace::record(&model, &graphs, &q, &opts).unwrap()
}

#[test]
fn omit_noop_keeps_first_seven_of_twelve() {
    // a NoOp inside the program is kept; only the trailing run goes
    let mut active = [true; 12];
    active[3] = false;
    active[7..].fill(false);
    let mut trace = constructed_trace(&active);
    assert_eq!(trace.steps.len(), 12);
    let kinds: Vec<ModuleKind> = trace.steps.iter().map(|s| s.top_module_kind).collect();
    assert_eq!(kinds.iter().filter(|&&k| k == ModuleKind::NoOp).count(), 6);
    trace.omit_trailing_noops();
    assert_eq!(trace.steps.len(), 7);
    assert_eq!(trace.steps.iter().map(|s| s.step).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
    assert_eq!(trace.steps[3].top_module, "visual.noop");
    assert_eq!(trace.steps[6].top_module, "visual.find");
    trace.check(1e-9).unwrap();
}

#[test]
fn omit_noop_edge_cases() {
    let mut all_noop = constructed_trace(&[false; 12]);
    all_noop.omit_trailing_noops();
    assert!(all_noop.steps.is_empty());
    let mut none = constructed_trace(&[true; 12]);
    none.omit_trailing_noops();
    assert_eq!(none.steps.len(), 12);
}

#[test]
fn trained_traces_validate_against_schema() {
    let schema = trace_schema();
    let cfg = small_config(3);
    let data = generate_data(&cfg).unwrap();
    let outcome = train(&cfg, &data.world, &data.train, &data.test).unwrap();
    for task in data.test.iter().take(10) {
        let trace =
            ReasoningTrace::record(&outcome.model, &task.graphs, &task.question, &RunOptions::default())
                .unwrap();
        assert_eq!(trace.format_version, TRACE_VERSION);
        assert_eq!(trace.steps.len(), cfg.steps);
        assert_eq!(trace.question, task.question);
        trace.check(1e-6).unwrap();
        let value = serde_json::to_value(&trace).unwrap();
        let errors = schema_errors(&schema, &value);
        assert!(errors.is_empty(), "{errors:?}");
        let back: ReasoningTrace = serde_json::from_value(value).unwrap();
        assert_eq!(back, trace);
        for s in &trace.steps {
            let layers: Vec<Modality> = s.node_attention.iter().map(|n| n.layer).collect();
            assert_eq!(layers, Modality::ALL);
        }
    }
}

#[test]
fn schema_rejects_malformed_traces() {
    let schema = trace_schema();
    let good = serde_json::to_value(constructed_trace(&[true; 3])).unwrap();
    assert!(schema_errors(&schema, &good).is_empty());

    let mut bad = good.clone();
    bad["steps"][0]["node_attention"][1]["layer"] = "audio".into();
    assert!(!schema_errors(&schema, &bad).is_empty());
    let mut bad = good.clone();
    bad["steps"][1].as_object_mut().unwrap().remove("top_word");
    assert!(!schema_errors(&schema, &bad).is_empty());
    let mut bad = good.clone();
    bad["format_version"] = 2.into();
    assert!(!schema_errors(&schema, &bad).is_empty());
    let mut bad = good;
    bad["steps"][0]["module_weights"][0] = (-0.5).into();
    assert!(!schema_errors(&schema, &bad).is_empty());
}

#[test]
fn tampered_trace_fails_check() {
    let mut trace = constructed_trace(&[true; 4]);
    trace.steps[2].top_word = "nonsense".into();
    trace.steps[1].module_weights[0] += 0.5;
    let err = trace.check(1e-6).unwrap_err().to_string();
    assert!(err.contains("step 2") && err.contains("step 1"), "{err}");
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let cfg = small_config(8);
        let data = generate_data(&cfg).unwrap();
        let outcome = train(&cfg, &data.world, &data.train, &data.test).unwrap();
        let task = &data.test[0];
        let trace =
            ReasoningTrace::record(&outcome.model, &task.graphs, &task.question, &RunOptions::default())
                .unwrap();
        (
            serde_json::to_string(&outcome.metrics).unwrap(),
            serde_json::to_string(&trace).unwrap(),
            outcome.metrics,
        )
    };
    let (m1, t1, raw1) = run();
    let (m2, t2, raw2) = run();
    assert_eq!(m1, m2);
    assert_eq!(t1, t2);
    let bits = |m: &hgnmn_core::train::Metrics| m.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&raw1), bits(&raw2));

    let mut other = small_config(9);
    other.train_size = 48;
    let data = generate_data(&other).unwrap();
    let outcome = train(&other, &data.world, &data.train, &data.test).unwrap();
    assert_ne!(serde_json::to_string(&outcome.metrics).unwrap(), m1);
}
