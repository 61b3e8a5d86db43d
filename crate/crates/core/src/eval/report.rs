use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::auc::{aggregate, auc_roc};
use crate::corpus::{argmax, EncodedSequence, TaskDataView, Vocabulary};
use crate::error::{Error, Result};
use crate::model::IntentModel;

/// The curated cases of one split, encoded once.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub intents: Vec<String>,
    pub ids: Vec<String>,
    /// Recorded intent of each case.
    pub classes: Vec<usize>,
    /// Curation answer of each case.
    pub labels: Vec<bool>,
    /// Synthetic ground truth, where known.
    pub true_classes: Vec<Option<usize>>,
    pub seqs: Vec<EncodedSequence>,
}

impl EvalSet {
    pub fn from_view(view: &TaskDataView, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut set = EvalSet {
            intents: view.intents().to_vec(),
            ids: Vec::new(),
            classes: Vec::new(),
            labels: Vec::new(),
            true_classes: Vec::new(),
            seqs: Vec::new(),
        };
        for k in 0..view.n_classes() {
            for &(i, y) in view.binary_pool(k) {
                let r = view.record(i);
                set.ids.push(r.id.clone());
                set.classes.push(k);
                set.labels.push(y);
                set.true_classes
                    .push(r.true_intent.as_ref().and_then(|t| view.intents().iter().position(|n| n == t)));
                set.seqs.push(vocab.encode(&r.text, max_len)?);
            }
        }
        if set.ids.is_empty() {
            return Err(Error::invalid("evaluation split has no curated cases"));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub intent: String,
    pub auc: Option<f64>,
    pub positives: usize,
    pub negatives: usize,
}

impl ClassMetrics {
    pub fn count(&self) -> usize {
        self.positives + self.negatives
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub classes: Vec<ClassMetrics>,
    pub average: Option<f64>,
    pub weighted_average: Option<f64>,
    /// Share of cases with known ground truth whose multiclass argmax is
    /// the true intent. Needs synthetic labels, so it has no real-data
    /// counterpart.
    pub oracle_accuracy: Option<f64>,
}

/// Builds a report from per-case scores.
pub fn report_from_scores(model: &str, set: &EvalSet, scores: &[f64], predicted: Option<&[usize]>) -> MetricsReport {
    let n = set.intents.len();
    let mut classes = Vec::with_capacity(n);
    for k in 0..n {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| set.classes[i] == k).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| set.labels[i]).collect();
        let positives = l.iter().filter(|&&y| y).count();
        classes.push(ClassMetrics {
            class: k,
            intent: set.intents[k].clone(),
            auc: if idx.is_empty() { None } else { auc_roc(&s, &l) },
            positives,
            negatives: l.len() - positives,
        });
    }
    let aucs: Vec<Option<f64>> = classes.iter().map(|c| c.auc).collect();
    let counts: Vec<usize> = classes.iter().map(ClassMetrics::count).collect();
    let agg = aggregate(&aucs, &counts);
    let oracle_accuracy = predicted.and_then(|p| {
        let known: Vec<(usize, usize)> = (0..set.len())
            .filter_map(|i| set.true_classes[i].map(|t| (p[i], t)))
            .collect();
        (!known.is_empty()).then(|| known.iter().filter(|(a, b)| a == b).count() as f64 / known.len() as f64)
    });
    MetricsReport {
        model: model.to_string(),
        classes,
        average: agg.map(|a| a.0),
        weighted_average: agg.map(|a| a.1),
        oracle_accuracy,
    }
}

/// Scores every case of `set` with `model` and assembles the report.
pub fn build_report(name: &str, model: &IntentModel, set: &EvalSet) -> Result<MetricsReport> {
    let u = model.classification_vectors(&set.seqs)?;
    let scores: Vec<f64> = u.iter().zip(&set.classes).map(|(u, &k)| model.case_score(u, k)).collect();
    let n = model.n_classes();
    let predicted: Vec<usize> = u.iter().map(|u| argmax(&model.heads.class_probs(u)[..n]).0).collect();
    Ok(report_from_scores(name, set, &scores, Some(&predicted)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// One row per class, then the two aggregate rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "row", "intent", "auc_roc", "positives", "negatives"])?;
        for c in &self.classes {
            w.write_record([
                self.model.clone(),
                c.class.to_string(),
                c.intent.clone(),
                fmt_opt(c.auc),
                c.positives.to_string(),
                c.negatives.to_string(),
            ])?;
        }
        let pos: usize = self.classes.iter().map(|c| c.positives).sum();
        let neg: usize = self.classes.iter().map(|c| c.negatives).sum();
        for (row, v) in [("average", self.average), ("weighted_average", self.weighted_average)] {
            w.write_record([
                self.model.clone(),
                row.to_string(),
                String::new(),
                fmt_opt(v),
                pos.to_string(),
                neg.to_string(),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("## {}\n\n| class | intent | AUC ROC | P | N |\n|---:|---|---:|---:|---:|\n", self.model);
        for c in &self.classes {
            let auc = c.auc.map_or("n/a".to_string(), |a| format!("{:.4}", a));
            let _ = writeln!(s, "| {} | {} | {} | {} | {} |", c.class, c.intent, auc, c.positives, c.negatives);
        }
        let _ = writeln!(
            s,
            "\naverage {} / weighted average {}",
            self.average.map_or("n/a".into(), |a| format!("{a:.4}")),
            self.weighted_average.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
        if let Some(acc) = self.oracle_accuracy {
            let _ = writeln!(s, "\noracle multiclass accuracy (synthetic ground truth): {acc:.4}");
        }
        let undefined: Vec<&str> = self.classes.iter().filter(|c| c.auc.is_none()).map(|c| c.intent.as_str()).collect();
        if !undefined.is_empty() {
            let _ = writeln!(s, "\nexcluded (single-label class): {}", undefined.join(", "));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }
}

/// Writes `id,true_intent,d0,d1,...` rows.
pub fn write_embeddings_csv(path: &Path, ids: &[String], true_intents: &[Option<String>], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dims = rows.first().map_or(0, Vec::len);
    let mut header = vec!["id".to_string(), "true_intent".to_string()];
    header.extend((0..dims).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for ((id, t), r) in ids.iter().zip(true_intents).zip(rows) {
        let mut rec = vec![id.clone(), t.clone().unwrap_or_default()];
        rec.extend(r.iter().map(|v| format!("{v:.8}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
