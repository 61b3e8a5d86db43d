use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdCheckConfig {
    pub epsilon: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdCheckConfig {
    fn default() -> Self {
        FdCheckConfig {
            epsilon: 1e-5,
            coords_per_tensor: 16,
            seed: 0,
        }
    }
}

/// |a - n| / max(|a|, |n|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<F>(params: &[Tensor], loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p)).collect();
    let loss = loss_fn(&mut g, &vars)?;
    Ok(g.item(loss))
}

/// Analytic gradients of `loss_fn` for every tensor in `params`.
pub fn analytic_gradients<F>(params: &[Tensor], loss_fn: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(&p.clone().requiring_grad()))
        .collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect())
}

/// Compares `analytic` against central differences of `loss_fn` on sampled
/// coordinates, returning the maximum relative error.
pub fn compare_with_finite_differences<F>(
    params: &[Tensor],
    analytic: &[Vec<f64>],
    cfg: &FdCheckConfig,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..work.len() {
        let n = work[i].len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + cfg.epsilon;
            let plus = eval_loss(&work, &mut loss_fn)?;
            work[i].data_mut()[c] = orig - cfg.epsilon;
            let minus = eval_loss(&work, &mut loss_fn)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            worst = worst.max(relative_error(analytic[i][c], numeric));
        }
    }
    Ok(worst)
}

/// Max relative error between backprop gradients and central finite
/// differences of `loss_fn` over sampled coordinates of every tensor.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    cfg: &FdCheckConfig,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &mut loss_fn)?;
    compare_with_finite_differences(params, &analytic, cfg, loss_fn)
}
