//! Text preprocessing, vocabulary, the curation data model, and the
//! synthetic corpus / curation simulator.

mod curation;
mod generator;
mod preprocess;
mod record;
mod view;
mod vocab;

use std::fs;
use std::path::Path;

pub use curation::{argmax, curate, simulate_curation, CurationConfig, LegacyScorer};
pub use generator::{
    build_lexicon, generate_corpus, Document, GeneratedCorpus, GeneratorConfig, Lexicon,
};
pub use preprocess::{preprocess, EMAIL_TOKEN, URL_TOKEN};
pub use record::{load_records, save_records, CsrResponse, CurationRecord, RecordKind, Split};
pub use view::TaskDataView;
pub use vocab::{EncodedSequence, Vocabulary, CLS, MASK, PAD, SEP, SPECIALS, UNK};
pub(crate) use vocab::hex;

use crate::error::{Error, Result};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const GENERIC_FILE: &str = "generic.txt";
pub const INTENTS_FILE: &str = "intents.txt";

/// Everything a run consumes: intent names, curated/uncurated records with
/// splits, and the generic pretraining corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intents: Vec<String>,
    pub records: Vec<CurationRecord>,
    pub generic: Vec<String>,
}

impl Dataset {
    pub fn synthesize(gen: &GeneratorConfig, cur: &CurationConfig, seed: u64) -> Result<Self> {
        let corpus = generate_corpus(gen, seed)?;
        let records = simulate_curation(&corpus, cur, seed)?;
        Ok(Dataset {
            intents: corpus.lexicon.intents,
            records,
            generic: corpus.generic,
        })
    }

    pub fn view(&self, split: Split) -> Result<TaskDataView> {
        TaskDataView::build(&self.records, &self.intents, split)
    }

    /// Vocabulary over the generic corpus and the training split.
    pub fn build_vocabulary(&self, max_size: usize, min_frequency: usize) -> Result<Vocabulary> {
        let texts = self.generic.iter().map(String::as_str).chain(
            self.records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| r.text.as_str()),
        );
        Vocabulary::build(texts, max_size, min_frequency)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_records(&dir.join(RECORDS_FILE), &self.records)?;
        fs::write(dir.join(GENERIC_FILE), lines(&self.generic))?;
        fs::write(dir.join(INTENTS_FILE), lines(&self.intents))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read_lines = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(name);
            if !p.exists() {
                return Err(Error::MissingPath(p));
            }
            Ok(fs::read_to_string(p)?.lines().map(str::to_string).collect())
        };
        let intents = read_lines(INTENTS_FILE)?;
        let generic = read_lines(GENERIC_FILE)?;
        let records = load_records(&dir.join(RECORDS_FILE))?;
        Ok(Dataset {
            intents,
            records,
            generic,
        })
    }
}

fn lines(items: &[String]) -> String {
    let mut s = items.join("\n");
    if !s.is_empty() {
        s.push('\n');
    }
    s
}
