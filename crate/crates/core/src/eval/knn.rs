use crate::error::{Error, Result};

/// Accuracy of the leave-one-out kNN classifier for each k, and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub per_k: Vec<(usize, f64)>,
    pub average: f64,
    pub skipped: Vec<usize>,
}

/// The odd k from 3 to 99.
pub fn default_k_range() -> Vec<usize> {
    (3..=99).step_by(2).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Leave-one-out kNN with Euclidean distance. Votes are by majority; a tie
/// goes to the tied class of the nearest neighbour. Equal distances are
/// ordered by sample index. A k that needs more than `n - 1` neighbours is
/// skipped.
pub fn knn_probe(vectors: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> Result<KnnResult> {
    if vectors.len() != labels.len() {
        return Err(Error::invalid(format!("{} vectors for {} labels", vectors.len(), labels.len())));
    }
    let n = vectors.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let (usable, skipped): (Vec<usize>, Vec<usize>) = ks.iter().partition(|&&k| k >= 1 && k < n);
    if !skipped.is_empty() {
        log::warn!("knn_probe: skipping k {skipped:?} with {n} samples");
    }
    if usable.is_empty() {
        return Err(Error::invalid(format!("knn_probe: no usable k for {n} samples")));
    }
    let mut correct = vec![0usize; usable.len()];
    let mut neighbours: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut votes = vec![0usize; n_classes];
    for i in 0..n {
        neighbours.clear();
        neighbours.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(&vectors[i], &vectors[j]), j)));
        neighbours.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, &k) in usable.iter().enumerate() {
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, j) in &neighbours[..k] {
                votes[labels[j]] += 1;
            }
            let best = *votes.iter().max().expect("classes");
            let winner = neighbours[..k]
                .iter()
                .map(|&(_, j)| labels[j])
                .find(|&c| votes[c] == best)
                .expect("some neighbour has a top class");
            if winner == labels[i] {
                correct[slot] += 1;
            }
        }
    }
    let per_k: Vec<(usize, f64)> = usable
        .iter()
        .zip(&correct)
        .map(|(&k, &c)| (k, c as f64 / n as f64))
        .collect();
    let average = per_k.iter().map(|(_, a)| a).sum::<f64>() / per_k.len() as f64;
    Ok(KnnResult { per_k, average, skipped })
}
