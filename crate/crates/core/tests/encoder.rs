use punintent_core::checkpoint;
use punintent_core::corpus::{EncodedSequence, CLS, PAD};
use punintent_core::encoder::{EncoderConfig, EncoderModel};
use punintent_core::params::Bound;
use punintent_core::tensor::{
    adam_step, finite_difference_check, AdamConfig, AdamState, FdCheckConfig, Graph,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 4,
        d_ff: 32,
        max_len: 12,
        dropout: 0.0,
        ..Default::default()
    }
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, len: usize, max_len: usize) -> EncodedSequence {
    let mut ids = vec![CLS];
    ids.extend((1..len).map(|_| rng.random_range(5..vocab)));
    ids.resize(max_len, PAD);
    EncodedSequence::new(ids, len).unwrap()
}

#[test]
fn parameter_count_matches_hand_count() {
    let cfg = EncoderConfig {
        vocab_size: 1000,
        ..Default::default()
    };
    // token 1000*64 + positions 64*64
    let embeddings = 64_000 + 4_096;
    // two layer norms, four d x d projections (bias on query, value and
    // output only), two feed-forward maps
    let layer = 2 * (64 + 64) + (4 * 64 * 64 + 3 * 64) + (64 * 256 + 256) + (256 * 64 + 64);
    let expected = embeddings + 2 * layer + 128;
    assert_eq!(expected, 168_064);
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(
        EncoderModel::init(cfg, 3).unwrap().params().num_values(),
        expected
    );
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    let cfg = EncoderConfig {
        vocab_size: 50,
        d_model: 64,
        n_heads: 5,
        ..Default::default()
    };
    assert!(EncoderModel::init(cfg, 0).is_err());

    let m = EncoderModel::init(small(50), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let too_long = random_seq(&mut rng, 50, 13, 13);
    let e = m.encode_sequence(&too_long).unwrap_err();
    assert!(e.to_string().contains("exceeds max_len"), "{e}");
}

#[test]
fn same_seed_gives_identical_parameters_and_vectors() {
    let a = EncoderModel::init(small(40), 9).unwrap();
    let b = EncoderModel::init(small(40), 9).unwrap();
    let c = EncoderModel::init(small(40), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_seq(&mut rng, 40, 7, 12);
    let ua = a.encode_sequence(&s).unwrap().0;
    let ub = b.encode_sequence(&s).unwrap().0;
    assert_eq!(
        ua.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ub.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn padding_never_changes_the_classification_vector() {
    let m = EncoderModel::init(small(60), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let len = rng.random_range(2..10);
        let s = random_seq(&mut rng, 60, len, 12);
        let u = m.encode_sequence(&s).unwrap().0;
        let pos = rng.random_range(len..12);
        let t = s.with_pad_token(pos, rng.random_range(5..60));
        assert_eq!(m.encode_sequence(&t).unwrap().0, u);

        // inside a batch with a longer neighbour the padded tail is run
        // through every layer; u must still be identical
        let long = random_seq(&mut rng, 60, 12, 12);
        let batch = m.embed(&[t.clone(), long.clone()], 8).unwrap();
        assert_eq!(batch[0], u);
        let batch2 = m.embed(&[s.with_pad_token(pos, 7), long], 8).unwrap();
        assert_eq!(batch2[0], u);
    }
}

#[test]
fn attention_rows_sum_to_one_and_ignore_padding() {
    let m = EncoderModel::init(small(30), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = [
        random_seq(&mut rng, 30, 4, 12),
        random_seq(&mut rng, 30, 9, 12),
    ];
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let out = m.forward(&mut g, &b, &batch, None).unwrap();
    let seq = out.seq;
    assert_eq!(seq, 9);
    for att in &out.attention {
        let probs = g.attention_probs(*att).unwrap();
        for (row_idx, row) in probs.chunks(seq).enumerate() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let batch_idx = row_idx / (4 * seq);
            let len = batch[batch_idx].len();
            assert!(row[len..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn different_inputs_give_different_vectors() {
    let m = EncoderModel::init(small(80), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a = random_seq(&mut rng, 80, 6, 12);
        let b = random_seq(&mut rng, 80, 6, 12);
        if a.ids() == b.ids() {
            continue;
        }
        assert_ne!(
            m.encode_sequence(&a).unwrap().0,
            m.encode_sequence(&b).unwrap().0
        );
    }
}

#[test]
fn one_step_moves_only_present_token_rows() {
    let mut m = EncoderModel::init(small(30), 7).unwrap();
    let before = m.params().clone();
    let s = EncodedSequence::new(vec![CLS, 10, 11, 12, PAD, PAD], 4).unwrap();
    let mut g = Graph::new();
    let b = m.bind(&mut g, true);
    let out = m
        .forward(&mut g, &b, std::slice::from_ref(&s), None)
        .unwrap();
    let w = g
        .constant(
            vec![1, 16],
            (0..16).map(|i| (i as f64 - 7.5) / 8.0).collect(),
        )
        .unwrap();
    let p = g.mul(out.cls, w).unwrap();
    let loss = g.reduce_mean(p).unwrap();
    let grads = g.backward(loss).unwrap();
    m.params_mut().accumulate(&grads, &b).unwrap();
    let mut state = AdamState::new(m.params().iter().map(|(_, t)| t));
    let mut ts: Vec<_> = m.params_mut().tensors_mut().collect();
    adam_step(
        &mut ts,
        &mut state,
        &AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
    )
    .unwrap();

    let old = before.get("encoder.tok_emb").unwrap();
    let new = m.params().get("encoder.tok_emb").unwrap();
    for row in 0..30 {
        let changed = old.row(row) != new.row(row);
        let present = [CLS, 10, 11, 12].contains(&row);
        assert_eq!(changed, present, "row {row}");
    }
    assert!(m.params().all_finite());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_len: 6,
        dropout: 0.0,
        ..Default::default()
    };
    let mut m = EncoderModel::init(cfg, 8).unwrap();
    // larger weights than the 0.02 init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in m.params_mut().tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    let batch = vec![
        EncodedSequence::new(vec![CLS, 5, 6, 7, PAD, PAD], 4).unwrap(),
        EncodedSequence::new(vec![CLS, 8, 9, 10, 11, 5], 6).unwrap(),
    ];
    let params: Vec<_> = m.params().iter().map(|(_, t)| t.clone()).collect();
    let cfg = FdCheckConfig {
        coords_per_tensor: 24,
        ..Default::default()
    };
    let err = finite_difference_check(&params, &cfg, |g, vars| {
        let b = Bound::new(vars.to_vec());
        let out = m.forward(g, &b, &batch, None)?;
        let mut wr = ChaCha8Rng::seed_from_u64(99);
        let n = g.data(out.states).len();
        let w = g.constant(
            g.shape(out.states).to_vec(),
            (0..n).map(|_| wr.random_range(0.5..1.5)).collect(),
        )?;
        let p = g.mul(out.states, w)?;
        g.reduce_mean(p)
    })
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = EncoderModel::init(small(50), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(
        dir.path(),
        serde_json::to_value(m.config()).unwrap(),
        "h",
        m.params(),
    )
    .unwrap();
    let (manifest, store) = checkpoint::load(dir.path(), Some("h")).unwrap();
    let cfg: EncoderConfig = serde_json::from_value(manifest.config).unwrap();
    let back = EncoderModel::from_params(cfg, &store).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seqs: Vec<_> = (0..100)
        .map(|_| {
            let len = rng.random_range(2..13);
            random_seq(&mut rng, 50, len, 12)
        })
        .collect();
    assert_eq!(m.embed(&seqs, 16).unwrap(), back.embed(&seqs, 16).unwrap());
}
