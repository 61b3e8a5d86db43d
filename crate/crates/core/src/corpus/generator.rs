use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, weighted_index};

const INTENT_NAMES: [&str; 12] = [
    "track_package",
    "return_item",
    "refund_status",
    "cancel_order",
    "change_address",
    "payment_issue",
    "damaged_item",
    "account_access",
    "promo_code",
    "missing_item",
    "delivery_delay",
    "warranty_claim",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    /// Largest over smallest in-scope class size.
    pub class_skew: f64,
    pub smallest_class_docs: usize,
    /// Share of all documents that fall outside the intent taxonomy.
    pub out_of_scope_fraction: f64,
    pub keywords_per_class: usize,
    pub filler_vocab: usize,
    pub zipf_exponent: f64,
    pub out_of_scope_lexicon: usize,
    pub generic_lexicon: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Weights over 0, 1, 2, ... own-intent keywords per in-scope text.
    pub keyword_count_weights: Vec<f64>,
    /// Chance an in-scope text also carries keywords of another intent.
    pub distractor_prob: f64,
    /// Weights over 0, 1, 2, ... borrowed keywords when a distractor occurs.
    pub distractor_count_weights: Vec<f64>,
    pub out_of_scope_words_min: usize,
    pub out_of_scope_words_max: usize,
    /// Weights over 0, 1, 2, ... intent keywords inside out-of-scope texts.
    pub lure_count_weights: Vec<f64>,
    pub generic_docs: usize,
    /// Per-token rates of domain keywords and out-of-scope words in the
    /// generic corpus. Keywords there are drawn without intent structure.
    pub generic_keyword_rate: f64,
    pub generic_out_of_scope_rate: f64,
    pub lexicon_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_classes: 9,
            class_skew: 40.0,
            smallest_class_docs: 600,
            out_of_scope_fraction: 0.2,
            keywords_per_class: 12,
            filler_vocab: 400,
            zipf_exponent: 1.0,
            out_of_scope_lexicon: 60,
            generic_lexicon: 300,
            min_tokens: 6,
            max_tokens: 14,
            keyword_count_weights: vec![0.1, 0.52, 0.35, 0.022, 0.008],
            distractor_prob: 0.03,
            distractor_count_weights: vec![0.0, 0.35, 0.35, 0.3],
            out_of_scope_words_min: 2,
            out_of_scope_words_max: 4,
            lure_count_weights: vec![0.59, 0.25, 0.14, 0.014, 0.006],
            generic_docs: 6000,
            generic_keyword_rate: 0.03,
            generic_out_of_scope_rate: 0.02,
            lexicon_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        if !(self.class_skew >= 1.0) {
            return bad("class_skew must be >= 1");
        }
        if self.smallest_class_docs == 0 || self.keywords_per_class == 0 || self.filler_vocab == 0 {
            return bad("sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.out_of_scope_fraction) {
            return bad("out_of_scope_fraction must be in [0, 1)");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need 1 <= min_tokens <= max_tokens");
        }
        if self.out_of_scope_words_min > self.out_of_scope_words_max {
            return bad("out_of_scope_words_min > out_of_scope_words_max");
        }
        for (name, w) in [
            ("keyword_count_weights", &self.keyword_count_weights),
            ("distractor_count_weights", &self.distractor_count_weights),
            ("lure_count_weights", &self.lure_count_weights),
        ] {
            if w.is_empty() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(&format!("{name} must be non-negative with positive sum"));
            }
        }
        if self.n_classes > 1
            && self.distractor_count_weights.len() < 2
            && self.distractor_prob > 0.0
        {
            return bad("distractor_count_weights needs a non-zero count");
        }
        Ok(())
    }

    /// In-scope document count per class, a geometric progression from the
    /// largest (class 0) down to `smallest_class_docs`.
    pub fn class_sizes(&self) -> Vec<usize> {
        let n = self.n_classes;
        (0..n)
            .map(|c| {
                let exponent = if n == 1 {
                    0.0
                } else {
                    (n - 1 - c) as f64 / (n - 1) as f64
                };
                (self.smallest_class_docs as f64 * self.class_skew.powf(exponent)).round() as usize
            })
            .collect()
    }
}

/// Word lists behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub intents: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub out_of_scope: Vec<String>,
    pub generic: Vec<String>,
}

impl Lexicon {
    pub fn intent_index(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub text: String,
    /// `None` for out-of-scope requests.
    pub true_intent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub lexicon: Lexicon,
    pub documents: Vec<Document>,
    /// Broad-mixture text for generic pretraining.
    pub generic: Vec<String>,
}

fn make_words(rng: &mut impl Rng, count: usize, seen: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn build_lexicon(cfg: &GeneratorConfig) -> Lexicon {
    let mut rng = stream(cfg.lexicon_seed, "lexicon");
    let mut seen: HashSet<String> = HashSet::new();
    let intents = (0..cfg.n_classes)
        .map(|i| {
            INTENT_NAMES
                .get(i)
                .map_or_else(|| format!("intent_{i}"), |s| s.to_string())
        })
        .collect();
    let keywords = (0..cfg.n_classes)
        .map(|_| make_words(&mut rng, cfg.keywords_per_class, &mut seen))
        .collect();
    let fillers = make_words(&mut rng, cfg.filler_vocab, &mut seen);
    let out_of_scope = make_words(&mut rng, cfg.out_of_scope_lexicon, &mut seen);
    let generic = make_words(&mut rng, cfg.generic_lexicon, &mut seen);
    Lexicon {
        intents,
        keywords,
        fillers,
        out_of_scope,
        generic,
    }
}

struct Sampler<'a> {
    lex: &'a Lexicon,
    filler_zipf: Zipf<f64>,
    generic_zipf: Option<Zipf<f64>>,
    class_weights: Vec<f64>,
}

impl Sampler<'_> {
    fn filler(&self, rng: &mut impl Rng) -> String {
        let i = self.filler_zipf.sample(rng) as usize - 1;
        self.lex.fillers[i.min(self.lex.fillers.len() - 1)].clone()
    }

    fn keyword(&self, rng: &mut impl Rng, class: usize) -> String {
        let kw = &self.lex.keywords[class];
        kw[rng.random_range(0..kw.len())].clone()
    }

    /// A class other than `exclude`, drawn proportionally to class size.
    fn other_class(&self, rng: &mut impl Rng, exclude: Option<usize>) -> usize {
        let mut w = self.class_weights.clone();
        if let Some(e) = exclude {
            w[e] = 0.0;
        }
        weighted_index(rng, &w)
    }
}

fn finish(rng: &mut impl Rng, mut tokens: Vec<String>, len: usize, s: &Sampler) -> String {
    tokens.truncate(len);
    while tokens.len() < len {
        tokens.push(s.filler(rng));
    }
    tokens.shuffle(rng);
    tokens.join(" ")
}

/// Generates the labeled-by-construction document stream and a generic
/// corpus. Deterministic for a given config and seed.
pub fn generate_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let lex = build_lexicon(cfg);
    let sizes = cfg.class_sizes();
    let sampler = Sampler {
        lex: &lex,
        filler_zipf: Zipf::new(cfg.filler_vocab as f64, cfg.zipf_exponent)
            .map_err(|e| Error::Config(format!("generator: {e}")))?,
        generic_zipf: (cfg.generic_lexicon > 0)
            .then(|| Zipf::new(cfg.generic_lexicon as f64, cfg.zipf_exponent))
            .transpose()
            .map_err(|e| Error::Config(format!("generator: {e}")))?,
        class_weights: sizes.iter().map(|&s| s as f64).collect(),
    };
    let mut rng = stream(seed, "documents");
    let mut documents = Vec::new();

    for (class, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let own = weighted_index(&mut rng, &cfg.keyword_count_weights);
            let mut tokens: Vec<String> =
                (0..own).map(|_| sampler.keyword(&mut rng, class)).collect();
            if cfg.n_classes > 1 && rng.random::<f64>() < cfg.distractor_prob {
                let other = sampler.other_class(&mut rng, Some(class));
                let n = weighted_index(&mut rng, &cfg.distractor_count_weights);
                tokens.extend((0..n).map(|_| sampler.keyword(&mut rng, other)));
            }
            let text = finish(&mut rng, tokens, len.max(own), &sampler);
            documents.push(Document {
                text,
                true_intent: Some(class),
            });
        }
    }

    let in_scope = documents.len() as f64;
    let n_oos =
        (in_scope * cfg.out_of_scope_fraction / (1.0 - cfg.out_of_scope_fraction)).round() as usize;
    if !lex.out_of_scope.is_empty() {
        for _ in 0..n_oos {
            let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let n_words = rng.random_range(cfg.out_of_scope_words_min..=cfg.out_of_scope_words_max);
            let mut tokens: Vec<String> = (0..n_words)
                .map(|_| lex.out_of_scope[rng.random_range(0..lex.out_of_scope.len())].clone())
                .collect();
            let lures = weighted_index(&mut rng, &cfg.lure_count_weights);
            if lures > 0 {
                let lure_class = sampler.other_class(&mut rng, None);
                tokens.extend((0..lures).map(|_| sampler.keyword(&mut rng, lure_class)));
            }
            let text = finish(&mut rng, tokens, len.max(n_words + lures), &sampler);
            documents.push(Document {
                text,
                true_intent: None,
            });
        }
    }
    documents.shuffle(&mut rng);

    let mut grng = stream(seed, "generic");
    let all_keywords: Vec<&String> = lex.keywords.iter().flatten().collect();
    let generic = (0..cfg.generic_docs)
        .map(|_| {
            let len = grng.random_range(cfg.min_tokens..=cfg.max_tokens);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    let x: f64 = grng.random();
                    if x < cfg.generic_keyword_rate {
                        all_keywords[grng.random_range(0..all_keywords.len())].clone()
                    } else if x < cfg.generic_keyword_rate + cfg.generic_out_of_scope_rate
                        && !lex.out_of_scope.is_empty()
                    {
                        lex.out_of_scope[grng.random_range(0..lex.out_of_scope.len())].clone()
                    } else if let (Some(z), true) =
                        (&sampler.generic_zipf, grng.random::<f64>() < 0.5)
                    {
                        let i = z.sample(&mut grng) as usize - 1;
                        lex.generic[i.min(lex.generic.len() - 1)].clone()
                    } else {
                        sampler.filler(&mut grng)
                    }
                })
                .collect();
            tokens.join(" ")
        })
        .collect();

    Ok(GeneratedCorpus {
        lexicon: lex,
        documents,
        generic,
    })
}
