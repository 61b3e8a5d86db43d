use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::generator::{GeneratedCorpus, Lexicon};
use super::record::{CsrResponse, CurationRecord, Split};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::softmax_slice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// Std-dev of Gaussian noise added to each class's keyword count.
    pub noise: f64,
    /// Inverse temperature of the legacy model's softmax over classes.
    pub sharpness: f64,
    /// Confidence at or above which a prediction is shown to a CSR.
    pub threshold: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            noise: 0.4,
            sharpness: 2.0,
            threshold: 0.95,
            dev_fraction: 0.15,
            test_fraction: 0.25,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "curation: threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.noise >= 0.0) || !(self.sharpness > 0.0) {
            return Err(Error::Config(
                "curation: need noise >= 0 and sharpness > 0".into(),
            ));
        }
        let (d, t) = (self.dev_fraction, self.test_fraction);
        if !(d >= 0.0 && t >= 0.0 && d + t < 1.0) {
            return Err(Error::Config(
                "curation: split fractions must leave a train share".into(),
            ));
        }
        Ok(())
    }
}

/// The production model that decided which cases reached a CSR: a keyword
/// overlap count per intent, perturbed by Gaussian noise, then softmaxed.
pub struct LegacyScorer {
    keyword_class: HashMap<String, usize>,
    n_classes: usize,
    noise: Normal<f64>,
    sharpness: f64,
}

impl LegacyScorer {
    pub fn new(lexicon: &Lexicon, cfg: &CurationConfig) -> Result<Self> {
        let keyword_class = lexicon
            .keywords
            .iter()
            .enumerate()
            .flat_map(|(c, ws)| ws.iter().map(move |w| (w.clone(), c)))
            .collect();
        Ok(LegacyScorer {
            keyword_class,
            n_classes: lexicon.intents.len(),
            noise: Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?,
            sharpness: cfg.sharpness,
        })
    }

    /// Predicted class and its confidence (lowest index wins ties).
    pub fn predict(&self, text: &str, rng: &mut impl Rng) -> (usize, f64) {
        let mut scores = vec![0.0; self.n_classes];
        for tok in text.split_whitespace() {
            if let Some(&c) = self.keyword_class.get(tok) {
                scores[c] += 1.0;
            }
        }
        for s in scores.iter_mut() {
            *s = (*s + self.noise.sample(rng)) * self.sharpness;
        }
        softmax_slice(&mut scores);
        argmax(&scores)
    }
}

/// Index and value of the maximum; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Outcome of surfacing one prediction: `None` when the case stays
/// uncurated, otherwise the recorded intent and the CSR's answer.
pub fn curate(
    true_intent: Option<usize>,
    predicted: usize,
    confidence: f64,
    threshold: f64,
) -> Option<(usize, CsrResponse)> {
    if confidence < threshold {
        return None;
    }
    let answer = if true_intent == Some(predicted) {
        CsrResponse::Yes
    } else {
        CsrResponse::No
    };
    Some((predicted, answer))
}

/// Runs every generated document through the legacy model and the CSR
/// oracle, producing Positive, Negative, or Unlabeled records with splits.
pub fn simulate_curation(
    corpus: &GeneratedCorpus,
    cfg: &CurationConfig,
    seed: u64,
) -> Result<Vec<CurationRecord>> {
    cfg.validate()?;
    let scorer = LegacyScorer::new(&corpus.lexicon, cfg)?;
    let mut rng = stream(seed, "curation");
    let mut split_rng = stream(seed, "splits");
    let names = &corpus.lexicon.intents;
    let width = corpus.documents.len().to_string().len().max(6);
    Ok(corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, doc)| {
            let (pred, conf) = scorer.predict(&doc.text, &mut rng);
            let outcome = curate(doc.true_intent, pred, conf, cfg.threshold);
            let u: f64 = split_rng.random();
            let split = if u < cfg.test_fraction {
                Split::Test
            } else if u < cfg.test_fraction + cfg.dev_fraction {
                Split::Dev
            } else {
                Split::Train
            };
            CurationRecord {
                id: format!("doc-{i:0width$}"),
                text: doc.text.clone(),
                intent: outcome.map(|(k, _)| names[k].clone()),
                csr_response: outcome.map(|(_, r)| r),
                split,
                true_intent: doc.true_intent.map(|k| names[k].clone()),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surfacing_rules() {
        assert_eq!(curate(Some(0), 0, 0.95, 0.8), Some((0, CsrResponse::Yes)));
        assert_eq!(curate(Some(0), 1, 0.9, 0.8), Some((1, CsrResponse::No)));
        assert_eq!(curate(None, 0, 0.9, 0.8), Some((0, CsrResponse::No)));
        assert_eq!(curate(Some(0), 0, 0.5, 0.8), None);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        for t in [0.0, 1.0, 1.5, -0.2] {
            let cfg = CurationConfig {
                threshold: t,
                ..Default::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), (1, 0.7));
    }
}
