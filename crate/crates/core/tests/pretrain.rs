use punintent_core::corpus::{EncodedSequence, CLS, MASK, PAD, SPECIALS};
use punintent_core::encoder::{EncoderConfig, EncoderModel};
use punintent_core::pretrain::{
    fixed_mask, heldout_loss, mask_tokens, masked_cross_entropy, masked_perplexity, mlm_loss,
    run_pretraining, MlmBatch, MlmHead, PretrainConfig, PretrainPlan, Stage,
};
use punintent_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 40;

fn seq_of(rng: &mut ChaCha8Rng, len: usize, max_len: usize) -> EncodedSequence {
    let mut ids = vec![CLS];
    ids.extend((1..len).map(|_| rng.random_range(SPECIALS.len()..VOCAB)));
    ids.resize(max_len, PAD);
    EncodedSequence::new(ids, len).unwrap()
}

fn encoder(vocab: usize, seed: u64) -> EncoderModel {
    EncoderModel::init(
        EncoderConfig {
            vocab_size: vocab,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 16,
            dropout: 0.0,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn rate_zero_masks_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = seq_of(&mut rng, 10, 16);
    let m = mask_tokens(&s, 0.0, VOCAB, &mut rng).unwrap();
    assert_eq!(m.n_masked(), 0);
    assert_eq!(m.input, s);
    assert!(mask_tokens(&s, 1.5, VOCAB, &mut rng).is_err());
}

#[test]
fn rate_one_selects_every_eligible_token_with_an_8_1_1_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = seq_of(&mut rng, 11, 16);
    let (mut masked, mut random, mut kept) = (0usize, 0usize, 0usize);
    for _ in 0..2000 {
        let m = mask_tokens(&s, 1.0, VOCAB, &mut rng).unwrap();
        assert_eq!(m.n_masked(), 10);
        for p in m.positions() {
            let (orig, now) = (s.ids()[p], m.input.ids()[p]);
            assert_eq!(m.labels[p], Some(orig));
            if now == MASK {
                masked += 1;
            } else if now == orig {
                kept += 1;
            } else {
                assert!(now >= SPECIALS.len());
                random += 1;
            }
        }
    }
    let total = 20_000.0;
    // a random replacement can coincide with the original id (1 in 35)
    assert!((masked as f64 / total - 0.8).abs() < 0.015, "{masked}");
    assert!(
        (random as f64 / total - 0.1 * 34.0 / 35.0).abs() < 0.01,
        "{random}"
    );
    assert!(
        (kept as f64 / total - (0.1 + 0.1 / 35.0)).abs() < 0.01,
        "{kept}"
    );
}

#[test]
fn masked_fraction_concentrates_around_the_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut selected = 0;
    let mut eligible = 0;
    while eligible < 10_000 {
        let s = seq_of(&mut rng, 11, 11);
        let m = mask_tokens(&s, 0.15, VOCAB, &mut rng).unwrap();
        selected += m.n_masked();
        eligible += 10;
    }
    let frac = selected as f64 / eligible as f64;
    // binomial sd at n = 10000 is 0.0036; the band is about 2.8 sd
    assert!((0.14..=0.16).contains(&frac), "{frac}");
}

#[test]
fn cls_and_padding_are_never_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let len = rng.random_range(1..16);
        let s = seq_of(&mut rng, len, 16);
        let m = mask_tokens(&s, 0.9, VOCAB, &mut rng).unwrap();
        assert_eq!(m.labels[0], None);
        assert_eq!(m.input.ids()[0], CLS);
        assert!(m.labels[len..].iter().all(Option::is_none));
        assert!(m.input.ids()[len..].iter().all(|&i| i == PAD));
    }
}

#[test]
fn untrained_loss_is_close_to_log_vocab() {
    let vocab = 500;
    let model = encoder(vocab, 4);
    let head = MlmHead::new(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<_> = (0..64)
        .map(|_| {
            let mut ids = vec![CLS];
            ids.extend((1..12).map(|_| rng.random_range(SPECIALS.len()..vocab)));
            ids.resize(16, PAD);
            EncodedSequence::new(ids, 12).unwrap()
        })
        .collect();
    let batch = fixed_mask(&seqs, 0.15, vocab, 0).unwrap();
    let loss = mlm_loss(&model, &head, &batch).unwrap();
    let ln_v = (vocab as f64).ln();
    assert!((loss - ln_v).abs() / ln_v < 0.15, "{loss} vs {ln_v}");
}

#[test]
fn empty_mask_is_an_error() {
    let model = encoder(VOCAB, 5);
    let head = MlmHead::new(VOCAB);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = seq_of(&mut rng, 8, 16);
    let batch = MlmBatch {
        sequences: vec![mask_tokens(&s, 0.0, VOCAB, &mut rng).unwrap()],
    };
    assert!(mlm_loss(&model, &head, &batch).is_err());
}

#[test]
fn loss_ignores_unmasked_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<_> = (0..3).map(|_| seq_of(&mut rng, 9, 9)).collect();
    let batch = fixed_mask(&seqs, 0.3, VOCAB, 6).unwrap();
    assert!(batch.n_masked() > 0);
    let states = Tensor::new(
        vec![27, 8],
        (0..216).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
    .requiring_grad();
    let emb = Tensor::new(
        vec![VOCAB, 8],
        (0..VOCAB * 8)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let loss_at = |st: &Tensor| {
        let mut g = Graph::new();
        let s = g.leaf(st);
        let e = g.leaf(&emb);
        let b = g.constant(vec![VOCAB], vec![0.0; VOCAB]).unwrap();
        let l = masked_cross_entropy(&mut g, s, 9, e, b, &batch).unwrap();
        (g.item(l), g, s, l)
    };
    let (_, mut g, s, l) = loss_at(&states);
    let grads = g.backward(l).unwrap();
    let gs = grads.get(s).unwrap();
    for (b, m) in batch.sequences.iter().enumerate() {
        for pos in 0..9 {
            let row = &gs[(b * 9 + pos) * 8..][..8];
            if m.labels[pos].is_none() {
                assert!(row.iter().all(|&v| v == 0.0));
                // finite differences agree: moving an unmasked state is a no-op
                let mut bumped = states.clone();
                bumped.data_mut()[(b * 9 + pos) * 8] += 1e-3;
                assert_eq!(loss_at(&bumped).0, loss_at(&states).0);
            } else {
                assert!(row.iter().any(|&v| v != 0.0));
            }
        }
    }
}

fn toy_corpus(n: usize, seed: u64) -> Vec<EncodedSequence> {
    // four "topics" with disjoint token ranges, so context predicts content
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic = rng.random_range(0..4);
            let lo = SPECIALS.len() + topic * 8;
            let mut ids = vec![CLS];
            ids.extend((0..9).map(|_| rng.random_range(lo..lo + 8)));
            ids.resize(12, PAD);
            EncodedSequence::new(ids, 10).unwrap()
        })
        .collect()
}

#[test]
fn fifty_steps_reduce_the_loss() {
    let vocab = SPECIALS.len() + 32;
    let corpus = toy_corpus(100, 7);
    let mut model = encoder(vocab, 7);
    let mut head = MlmHead::new(vocab);
    let eval = fixed_mask(&corpus, 0.15, vocab, 70).unwrap();
    let before = heldout_loss(&model, &head, &eval, 64).unwrap();
    let plan = PretrainPlan {
        stage: Stage::Generic,
        epochs: 5,
        config: PretrainConfig {
            batch_size: 10,
            lr: 5e-3,
            ..Default::default()
        },
        seed: 7,
    };
    let history = run_pretraining(&mut model, &mut head, &plan, &corpus, &corpus).unwrap();
    assert_eq!(history.len(), 5);
    let after = heldout_loss(&model, &head, &eval, 64).unwrap();
    assert!(after < before - 0.3, "{before} -> {after}");
    assert!(history[4].train_loss < history[0].train_loss);
}

#[test]
fn zero_epochs_and_empty_corpus() {
    let corpus = toy_corpus(10, 8);
    let vocab = SPECIALS.len() + 32;
    let mut model = encoder(vocab, 8);
    let mut head = MlmHead::new(vocab);
    let before = model.clone();
    let plan = PretrainPlan {
        stage: Stage::Dapt,
        epochs: 0,
        config: PretrainConfig::default(),
        seed: 8,
    };
    assert!(run_pretraining(&mut model, &mut head, &plan, &corpus, &[])
        .unwrap()
        .is_empty());
    assert_eq!(model, before);
    let plan = PretrainPlan { epochs: 1, ..plan };
    assert!(run_pretraining(&mut model, &mut head, &plan, &[], &[]).is_err());
}

#[test]
fn perplexity_of_a_uniform_predictor_is_the_vocab_size() {
    let vocab = SPECIALS.len() + 32;
    let model = encoder(vocab, 9);
    let mut store = model.params().clone();
    store
        .get_mut("encoder.tok_emb")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let uniform = EncoderModel::from_params(model.config().clone(), &store).unwrap();
    let corpus = toy_corpus(50, 9);
    let head = MlmHead::new(vocab);
    let ppl = masked_perplexity(&uniform, &head, &corpus, 0.15, 1).unwrap();
    assert!((ppl - vocab as f64).abs() < 1e-9, "{ppl}");

    let a = masked_perplexity(&model, &head, &corpus, 0.15, 3).unwrap();
    let b = masked_perplexity(&model, &head, &corpus, 0.15, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
