use std::collections::BTreeSet;

use proptest::prelude::*;

use rca_core::checkpoint::Checkpoint;
use rca_core::data::{read_sparse, split, stratified_batches, synth_generate, topk_features, write_sparse};
use rca_core::{Corpus, Instance, MlpSpec, Mode, ModelParams, SynthConfig, Tape, Tensor};

fn matrix(max_rows: usize, max_cols: usize, mag: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| prop::collection::vec(prop::collection::vec(-mag..mag, c), r))
}

fn instance(dim: usize, domains: usize, classes: usize) -> impl Strategy<Value = Instance> {
    (
        0..domains,
        0..classes,
        prop::collection::btree_map(0..dim, 0.01..10.0f64, 0..dim.min(6)),
    )
        .prop_map(|(domain, label, feats)| Instance {
            domain,
            label,
            features: feats.into_iter().collect(),
        })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    (2usize..12, 1usize..4, 2usize..4).prop_flat_map(|(dim, domains, classes)| {
        prop::collection::vec(instance(dim, domains, classes), 0..30).prop_map(move |instances| Corpus {
            instances,
            ..Corpus::empty(dim, domains, classes)
        })
    })
}

fn synth_config() -> impl Strategy<Value = SynthConfig> {
    (1usize..4, 2usize..4, 3usize..15, 0usize..8, any::<u64>()).prop_map(|(d, c, n, extra, seed)| SynthConfig {
        num_domains: d,
        num_classes: c,
        per_cell_count: n,
        feature_dim: c + extra,
        seed,
        ..SynthConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn log_softmax_rows_normalize(rows in matrix(4, 6, 1000.0)) {
        prop_assume!(rows[0].len() >= 2);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = tape.log_softmax(x).unwrap();
        let out = tape.value(y);
        for i in 0..rows.len() {
            let s: f64 = out.row(i).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {}", s);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(rows in matrix(5, 6, 100.0)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&rows).unwrap()).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let input = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = tape.value(y).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if input >= 1e-12 {
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            } else {
                prop_assert_eq!(norm, 0.0);
            }
        }
    }

    #[test]
    fn corpus_round_trips(c in corpus()) {
        let mut buf = Vec::new();
        write_sparse(&c, &mut buf).unwrap();
        let back = read_sparse(buf.as_slice()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn topk_is_idempotent(c in corpus(), k in 1usize..8) {
        let once = topk_features(&c, k).unwrap();
        let twice = topk_features(&once, k).unwrap();
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn split_is_an_exact_partition(cfg in synth_config(), seed in any::<u64>()) {
        let c = synth_generate(&cfg).unwrap();
        let s = split(&c, (0.7, 0.1, 0.2), seed).unwrap();
        prop_assert_eq!(s.train.len() + s.dev.len() + s.test.len(), c.len());
        let key = |i: &Instance| format!("{:?}", i);
        let mut all: Vec<String> = c.instances.iter().map(key).collect();
        let mut parts: Vec<String> = [&s.train, &s.dev, &s.test]
            .iter()
            .flat_map(|p| p.instances.iter().map(key))
            .collect();
        all.sort();
        parts.sort();
        prop_assert_eq!(parts, all);
        for p in [&s.train, &s.dev, &s.test] {
            prop_assert_eq!(p.cells().len(), c.cells().len());
        }
        prop_assert_eq!(split(&c, (0.7, 0.1, 0.2), seed).unwrap(), s);
    }

    #[test]
    fn sampler_guarantees_positives(cfg in synth_config(), m in 2usize..4, cells_per_batch in 1usize..4, seed in any::<u64>()) {
        let c = synth_generate(&cfg).unwrap();
        prop_assume!(c.cells().len() >= cells_per_batch && cfg.per_cell_count >= m);
        let batches = stratified_batches(&c, m * cells_per_batch, m, seed).unwrap();
        let mut seen = BTreeSet::new();
        for b in &batches {
            for &i in b {
                prop_assert!(seen.insert(i), "index {} repeated", i);
                let (d, y) = (c.instances[i].domain, c.instances[i].label);
                prop_assert!(b.iter().any(|&j| j != i && c.instances[j].domain == d));
                prop_assert!(b.iter().any(|&j| j != i && c.instances[j].label == y));
            }
        }
        prop_assert_eq!(stratified_batches(&c, m * cells_per_batch, m, seed).unwrap(), batches);
    }

    #[test]
    fn synth_is_reproducible(cfg in synth_config()) {
        prop_assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, classes in 2usize..4) {
        let spec = MlpSpec { input_dim: 3, hidden_dims: vec![hidden], output_dim: 2, dropout_rate: 0.4 };
        let model = ModelParams::with_extractor(spec, classes, seed).unwrap();
        let mut buf = Vec::new();
        Checkpoint::new(model.clone()).write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        for ((_, a), (_, b)) in back.model.named_tensors().iter().zip(model.named_tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn eval_forward_is_pure(seed in any::<u64>(), rows in matrix(3, 3, 2.0)) {
        prop_assume!(rows[0].len() == 3);
        let spec = MlpSpec { input_dim: 3, hidden_dims: vec![4], output_dim: 2, dropout_rate: 0.4 };
        let model = ModelParams::with_extractor(spec, 2, seed).unwrap();
        let x = Tensor::from_rows(&rows).unwrap();
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        prop_assert_eq!(a.logits, b.logits);
        let mut tape = Tape::new();
        let vars = model.register(&mut tape).unwrap();
        let xv = tape.constant(x).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = model.forward(&mut tape, &vars, xv, Mode::Eval, None, &mut rng).unwrap();
        prop_assert_eq!(tape.value(out.f_d), &a.f_d);
        prop_assert_eq!(tape.value(out.f_c), &a.f_c);
    }
}

#[test]
fn shared_input_accumulates_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x), &[4.0, -3.0]);
}
