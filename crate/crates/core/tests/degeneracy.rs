use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hgnmn_core::autodiff::Tape;
use hgnmn_core::controller::{Model, RunOptions};
use hgnmn_core::gradsuite::{random_graphs, random_model, random_question};
use hgnmn_core::graph::{AttentionMap, Modality};
use hgnmn_core::modules::{and, filter, GraphVars, RelateModule};
use hgnmn_core::params::ParamStore;
use hgnmn_core::tensor::Tensor;

fn noop_weights(model: &Model) -> Vec<f64> {
    let mut w = vec![0.0; model.inventory.len()];
    for m in Modality::ALL {
        w[model.inventory.index_of(&format!("{m}.noop")).unwrap()] = 1.0;
    }
    w
}

#[test]
fn noop_saturated_runs_stay_exactly_uniform() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, 12);
        let graphs = random_graphs(&mut rng, 6);
        let q = random_question(&mut rng);
        let opts = RunOptions {
            forced_weights: Some(vec![noop_weights(&model); 12]),
            ..RunOptions::default()
        };
        let tape = Tape::new();
        let out = model.run(&tape, &graphs, &q, &opts).unwrap();
        assert_eq!(out.records.len(), 12);
        for r in &out.records {
            for m in Modality::ALL {
                let n = graphs.layer(m).num_nodes();
                assert_eq!(r.node_attention[m.index()], vec![1.0 / n as f64; n], "seed {seed} {m}");
            }
        }
    }
}

#[test]
fn zero_mass_normalizes_to_uniform() {
    for n in 1..=7 {
        let tape = Tape::new();
        let y = tape.normalize_l1(tape.leaf(Tensor::zeros(&[n]))).unwrap();
        assert_eq!(tape.value(y).data(), vec![1.0 / n as f64; n].as_slice());
        let map = AttentionMap {
            layer: Modality::Visual,
            weights: vec![0.0; n],
        };
        assert_eq!(map.l1_normalize().unwrap().weights, vec![1.0 / n as f64; n]);
    }
}

#[test]
fn closed_relate_gates_give_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graphs(&mut rng, 5).commonsense;
    let mut store = ParamStore::new();
    let module = RelateModule::new(&mut store, "relate", g.edge_dim(), 4, &mut rng);
    let last = module.scorer.layers.last().unwrap();
    store.get_mut(last.weight).data_mut().fill(0.0);
    store.get_mut(last.bias.unwrap()).data_mut().fill(-1.0);
    let tape = Tape::new();
    let gv = GraphVars::new(&tape, &g);
    let a = tape.leaf(Tensor::vector(vec![1.0 / g.num_nodes() as f64; g.num_nodes()]));
    let q = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]));
    let out = module.forward(&tape, &store, &gv, a, q).unwrap();
    let n = g.num_nodes();
    assert_eq!(tape.value(out).data(), vec![1.0 / n as f64; n].as_slice());
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[test]
fn and_filter_compose_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(1..=8);
        let (x, y, z) = (random_dist(&mut rng, n), random_dist(&mut rng, n), random_dist(&mut rng, n));
        let tape = Tape::new();
        let (a, b, c) = (
            tape.leaf(Tensor::vector(x.clone())),
            tape.leaf(Tensor::vector(y.clone())),
            tape.leaf(Tensor::vector(z)),
        );
        let v = |var| tape.value(var).data().to_vec();
        // filter is and against the found map
        assert_eq!(v(filter(&tape, a, b).unwrap()), v(and(&tape, a, b).unwrap()));
        assert_eq!(v(and(&tape, a, b).unwrap()), v(and(&tape, b, a).unwrap()));
        assert_eq!(v(and(&tape, a, a).unwrap()), v(tape.normalize_l1(a).unwrap()));
        let by_hand: Vec<f64> = {
            let s: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p + q).collect();
            let t: f64 = s.iter().sum();
            s.iter().map(|e| e / t).collect()
        };
        assert_eq!(v(and(&tape, a, b).unwrap()), by_hand);
        let nested = filter(&tape, and(&tape, a, b).unwrap(), c).unwrap();
        let same = and(&tape, filter(&tape, a, b).unwrap(), c).unwrap();
        assert_eq!(v(nested), v(same));
    }
}
