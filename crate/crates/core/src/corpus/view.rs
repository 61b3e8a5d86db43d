use sha2::{Digest, Sha256};

use super::record::{CurationRecord, RecordKind, Split};
use super::vocab::hex;
use crate::error::{Error, Result};

/// The per-task training pools carved out of one split's records.
///
/// A Positive lands in the multiclass pool and, as `+`, in its intent's
/// binary pool. A Negative lands only in the rejected intent's binary pool
/// as `-`. Unlabeled records feed only the adaptive-pretraining and
/// self-training candidate pools.
#[derive(Clone, Debug)]
pub struct TaskDataView {
    intents: Vec<String>,
    records: Vec<CurationRecord>,
    classes: Vec<Option<usize>>,
    multiclass: Vec<usize>,
    binary: Vec<Vec<(usize, bool)>>,
    unlabeled: Vec<usize>,
}

impl TaskDataView {
    pub fn build(records: &[CurationRecord], intents: &[String], split: Split) -> Result<Self> {
        let records: Vec<CurationRecord> = records
            .iter()
            .filter(|r| r.split == split)
            .cloned()
            .collect();
        Self::from_records(records, intents)
    }

    pub fn from_records(records: Vec<CurationRecord>, intents: &[String]) -> Result<Self> {
        let mut classes = Vec::with_capacity(records.len());
        let mut multiclass = Vec::new();
        let mut binary = vec![Vec::new(); intents.len()];
        let mut unlabeled = Vec::new();
        for (i, r) in records.iter().enumerate() {
            r.validate()?;
            let class = match &r.intent {
                Some(name) => Some(intents.iter().position(|n| n == name).ok_or_else(|| {
                    Error::invalid(format!("record {}: unknown intent {name:?}", r.id))
                })?),
                None => None,
            };
            classes.push(class);
            match (r.kind(), class) {
                (RecordKind::Positive, Some(k)) => {
                    multiclass.push(i);
                    binary[k].push((i, true));
                }
                (RecordKind::Negative, Some(k)) => binary[k].push((i, false)),
                (RecordKind::Unlabeled, _) => unlabeled.push(i),
                _ => unreachable!("validated: curated records carry an intent"),
            }
        }
        Ok(TaskDataView {
            intents: intents.to_vec(),
            records,
            classes,
            multiclass,
            binary,
            unlabeled,
        })
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn n_classes(&self) -> usize {
        self.intents.len()
    }

    pub fn records(&self) -> &[CurationRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &CurationRecord {
        &self.records[i]
    }

    /// Recorded intent index of record `i`.
    pub fn class(&self, i: usize) -> Option<usize> {
        self.classes[i]
    }

    /// Record indices of Positives.
    pub fn multiclass_pool(&self) -> &[usize] {
        &self.multiclass
    }

    /// `(record index, accepted)` pairs for intent `k`.
    pub fn binary_pool(&self, k: usize) -> &[(usize, bool)] {
        &self.binary[k]
    }

    pub fn unlabeled_pool(&self) -> &[usize] {
        &self.unlabeled
    }

    /// Indices of curated records (Positives and Negatives).
    pub fn curated(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.records.len()).filter(|&i| self.records[i].is_curated())
    }

    /// Text for domain-adaptive pretraining: every record.
    pub fn dapt_corpus(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.text.as_str()).collect()
    }

    /// Text for task-adaptive pretraining: curated records only.
    pub fn tapt_corpus(&self) -> Vec<&str> {
        self.curated()
            .map(|i| self.records[i].text.as_str())
            .collect()
    }

    pub fn positives_per_class(&self) -> Vec<usize> {
        (0..self.n_classes())
            .map(|k| self.binary[k].iter().filter(|(_, y)| *y).count())
            .collect()
    }

    pub fn negatives_per_class(&self) -> Vec<usize> {
        (0..self.n_classes())
            .map(|k| self.binary[k].iter().filter(|(_, y)| !*y).count())
            .collect()
    }

    /// Content hash of every binary pool (record id, class, label).
    pub fn binary_pool_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, pool) in self.binary.iter().enumerate() {
            for &(i, y) in pool {
                h.update(format!(
                    "{k}\t{}\t{}\t{}\n",
                    self.records[i].id,
                    u8::from(y),
                    self.records[i].text
                ));
            }
        }
        hex(&h.finalize())
    }

    /// Exhaustively checks pool membership against each record's kind.
    pub fn validate(&self) -> Result<()> {
        let mut in_multi = vec![0usize; self.records.len()];
        let mut in_binary = vec![Vec::new(); self.records.len()];
        for &i in &self.multiclass {
            in_multi[i] += 1;
        }
        for (k, pool) in self.binary.iter().enumerate() {
            for &(i, y) in pool {
                in_binary[i].push((k, y));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            let ok = match (r.kind(), self.classes[i]) {
                (RecordKind::Positive, Some(k)) => in_multi[i] == 1 && in_binary[i] == [(k, true)],
                (RecordKind::Negative, Some(k)) => in_multi[i] == 0 && in_binary[i] == [(k, false)],
                (RecordKind::Unlabeled, _) => in_multi[i] == 0 && in_binary[i].is_empty(),
                _ => false,
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "record {} violates pool membership",
                    r.id
                )));
            }
        }
        Ok(())
    }
}
