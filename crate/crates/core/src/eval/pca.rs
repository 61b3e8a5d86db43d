use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    /// Input rows projected onto the components.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, &p) in self.components.iter().zip(projected) {
            x.iter_mut().zip(c).for_each(|(xi, ci)| *xi += p * ci);
        }
        x
    }
}

const MAX_ITERS: usize = 200_000;
const TOL: f64 = 1e-15;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Projects mean-centred `vectors` onto their top `target_dim` principal
/// components, found by power iteration on the covariance with deflation.
pub fn pca_reduce(vectors: &[Vec<f64>], target_dim: usize) -> Result<Pca> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if target_dim == 0 || target_dim > n.min(d) {
        return Err(Error::invalid(format!(
            "pca: target_dim {target_dim} must be in 1..={} for {n} samples of dimension {d}",
            n.min(d)
        )));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::invalid("pca: rows of unequal length"));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for v in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v[i] * v[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut work = cov.clone();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(target_dim);
    let mut ratios = Vec::with_capacity(target_dim);
    for c in 0..target_dim {
        // deterministic start that is unlikely to be orthogonal to anything
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + c * 3) % 11) as f64 / 10.0).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        for _ in 0..MAX_ITERS {
            let mut next = mat_vec(&work, &v);
            orthogonalize(&mut next, &components);
            if normalize(&mut next) < 1e-300 {
                break;
            }
            if dot(&next, &v) < 0.0 {
                next.iter_mut().for_each(|x| *x = -*x);
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < TOL {
                break;
            }
        }
        if dot(&v, &v) < 0.5 {
            // the remaining spectrum is zero; any orthonormal completion works
            v = (0..d).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
            orthogonalize(&mut v, &components);
            normalize(&mut v);
        }
        let lambda = dot(&v, &mat_vec(&cov, &v)).max(0.0);
        for i in 0..d {
            for j in 0..d {
                work[i][j] -= lambda * v[i] * v[j];
            }
        }
        ratios.push(if trace > 0.0 { lambda / trace } else { 0.0 });
        components.push(v);
    }
    let projected = centred
        .iter()
        .map(|x| components.iter().map(|c| dot(x, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance_ratio: ratios,
        projected,
    })
}
