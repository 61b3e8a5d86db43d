use serde::{Deserialize, Serialize};

/// One evaluation case of a class: the model's score and the curation
/// answer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub class: usize,
    pub score: f64,
    pub label: bool,
}

/// Area under the ROC curve from rank statistics, with half credit for tied
/// pairs. `None` when only one label is present.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        log::warn!("auc_roc undefined: {n_pos} positives, {n_neg} negatives");
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based rank within each run of equal scores
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg_rank * pos_in_run as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of the cases of one class.
pub fn class_auc(cases: &[ScoredCase]) -> Option<f64> {
    let scores: Vec<f64> = cases.iter().map(|c| c.score).collect();
    let labels: Vec<bool> = cases.iter().map(|c| c.label).collect();
    auc_roc(&scores, &labels)
}

/// Unweighted and count-weighted means over the classes whose AUC is
/// defined.
pub fn aggregate(aucs: &[Option<f64>], counts: &[usize]) -> Option<(f64, f64)> {
    assert_eq!(aucs.len(), counts.len(), "one count per class");
    let defined: Vec<(f64, f64)> = aucs
        .iter()
        .zip(counts)
        .filter_map(|(a, &c)| a.map(|a| (a, c as f64)))
        .collect();
    if defined.is_empty() {
        return None;
    }
    let avg = defined.iter().map(|(a, _)| a).sum::<f64>() / defined.len() as f64;
    let total: f64 = defined.iter().map(|(_, c)| c).sum();
    let wavg = if total > 0.0 {
        defined.iter().map(|(a, c)| a * c).sum::<f64>() / total
    } else {
        avg
    };
    Some((avg, wavg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(auc_roc(&[0.9, 0.3, 0.8], &[true, true, false]), Some(0.5));
        assert_eq!(auc_roc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), Some(1.0));
        assert_eq!(auc_roc(&[0.4; 5], &[true, false, true, false, false]), Some(0.5));
        assert_eq!(auc_roc(&[0.4, 0.5], &[true, true]), None);
    }

    #[test]
    fn aggregate_examples() {
        let (a, w) = aggregate(&[Some(0.8), Some(0.6)], &[1, 1]).unwrap();
        assert!((a - 0.7).abs() < 1e-12 && (w - 0.7).abs() < 1e-12);
        let (a, w) = aggregate(&[Some(0.8), Some(0.6)], &[3, 1]).unwrap();
        assert!((a - 0.7).abs() < 1e-12 && (w - 0.75).abs() < 1e-12);
        let (a, w) = aggregate(&[Some(0.8), None], &[3, 10]).unwrap();
        assert!((a - 0.8).abs() < 1e-12 && (w - 0.8).abs() < 1e-12);
        assert_eq!(aggregate(&[None], &[3]), None);
    }
}
