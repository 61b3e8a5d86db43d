#![allow(dead_code)]

use punintent_core::corpus::{EncodedSequence, CLS, PAD};
use punintent_core::encoder::{EncoderConfig, EncoderModel};
use punintent_core::eval::EvalSet;
use punintent_core::finetune::TrainSet;
use punintent_core::heads::TaskLabel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 45;
pub const MAX_LEN: usize = 8;

pub fn encoder(seed: u64) -> EncoderModel {
    EncoderModel::init(
        EncoderConfig {
            vocab_size: VOCAB,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: MAX_LEN,
            dropout: 0.0,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

/// Class k texts draw their content tokens from a private range plus a
/// shared noise range.
pub fn text_of(rng: &mut ChaCha8Rng, class: usize) -> EncodedSequence {
    let len = rng.random_range(4..=MAX_LEN);
    let mut ids = vec![CLS];
    for _ in 1..len {
        let id = if rng.random_bool(0.6) {
            rng.random_range(5 + 10 * class..15 + 10 * class)
        } else {
            rng.random_range(25..VOCAB)
        };
        ids.push(id);
    }
    ids.resize(MAX_LEN, PAD);
    EncodedSequence::new(ids, len).unwrap()
}

/// Positives of class k look like k; Negatives recorded under k look like
/// the other class (misrouted cases).
pub fn toy_train(seed: u64, per_class: usize, negatives: bool) -> TrainSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrainSet::default();
    for i in 0..per_class {
        for k in 0..2 {
            set.push(format!("p{k}_{i}"), text_of(&mut rng, k), TaskLabel::positive(k));
            if negatives && i % 3 == 0 {
                set.push(format!("n{k}_{i}"), text_of(&mut rng, 1 - k), TaskLabel::negative(k));
            }
        }
    }
    set
}

pub fn toy_dev(seed: u64) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = EvalSet {
        intents: vec!["a".into(), "b".into()],
        ids: Vec::new(),
        classes: Vec::new(),
        labels: Vec::new(),
        true_classes: Vec::new(),
        seqs: Vec::new(),
    };
    for i in 0..60 {
        let k = i % 2;
        let y = i % 3 != 0;
        let truth = if y { k } else { 1 - k };
        set.ids.push(format!("d{i}"));
        set.classes.push(k);
        set.labels.push(y);
        set.true_classes.push(Some(truth));
        set.seqs.push(text_of(&mut rng, truth));
    }
    set
}

