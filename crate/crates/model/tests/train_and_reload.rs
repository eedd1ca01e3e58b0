//! Training, checkpointing and the gradient check through the public API.

use nwn_model::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
use nwn_model::gradcheck::check_gradients;
use nwn_model::train::{evaluate, Split};
use nwn_model::{predict, train, InputKind, Model, ModelConfig, Pooling, Sequence, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        input: InputKind::Dense { dim: 3 },
        width: 16,
        heads: 4,
        layers: 2,
        ffn: 32,
        head_hidden: 8,
        pooling,
    }
}

/// Label 1 when the sequence contains a token whose first entry exceeds the
/// second; the order of tokens is irrelevant.
fn task(n: usize, seed: u64) -> (Vec<Sequence>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let len = rng.random_range(3..9);
        let mut fixed = Vec::new();
        for _ in 0..len {
            let a: f64 = rng.random_range(-1.0..0.0);
            fixed.extend([a, a + rng.random_range(0.2..1.0), rng.random_range(-1.0..1.0)]);
        }
        let positive = i % 2 == 0;
        if positive {
            let at = rng.random_range(0..len) * 3;
            fixed.swap(at, at + 1);
        }
        seqs.push(Sequence { ids: Vec::new(), fixed, len });
        labels.push(if positive { 1.0 } else { 0.0 });
    }
    (seqs, labels)
}

#[test]
fn trained_model_survives_a_checkpoint_round_trip() {
    let (ts, tl) = task(256, 1);
    let (vs, vl) = task(64, 2);
    let cfg = TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        max_epochs: 12,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(arch(Pooling::Max), &cfg, Split { seqs: &ts, labels: &tl }, Split { seqs: &vs, labels: &vl }).unwrap();
    let (_, acc) = evaluate(&out.model, Split { seqs: &vs, labels: &vl }).unwrap();
    assert!(acc >= 0.85, "validation accuracy {acc}");

    let header = CheckpointHeader {
        config: out.model.cfg,
        variant: Variant::Ours,
        n_reg: 0,
        t_max: 1.0,
        seed: cfg.seed,
        case: "toy".into(),
        n: 256,
        data_seed: 1,
        dataset_digest: String::new(),
        param_count: out.model.params.len(),
    };
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &header, &out.model).unwrap();
    let (h, back): (_, Model<f32>) = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(h, header);
    assert_eq!(predict(&back, &vs).unwrap(), predict(&out.model, &vs).unwrap());

    // the same seed gives the same bytes
    let again = train(arch(Pooling::Max), &cfg, Split { seqs: &ts, labels: &tl }, Split { seqs: &vs, labels: &vl }).unwrap();
    let mut bytes2 = Vec::new();
    write_checkpoint(&mut bytes2, &header, &again.model).unwrap();
    assert_eq!(bytes, bytes2);
}

#[test]
fn gradients_agree_with_finite_differences_in_f64() {
    let (seqs, labels) = task(4, 3);
    let refs: Vec<&Sequence> = seqs.iter().collect();
    for pooling in [Pooling::Max, Pooling::Mean] {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model: Model<f64> = Model::new(arch(pooling), &mut rng).unwrap();
        for c in check_gradients(&model, &refs, &labels, 60, &mut rng).unwrap() {
            assert!(c.max_rel_error < 1e-4, "{pooling:?} {} {:.2e}", c.name, c.max_rel_error);
        }
    }
}
