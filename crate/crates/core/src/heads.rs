//! The multiclass head, the per-class binary heads, the joint loss over
//! both, and routed two-stage inference.

use crate::corpus::argmax;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamStore};
use crate::rng;
use crate::tensor::{sigmoid, softmax_slice, Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// An affine multiclass head with `n_outputs` classes and, optionally, one
/// affine binary head per intent class.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeads {
    d_model: usize,
    n_classes: usize,
    n_outputs: usize,
    binary: bool,
    params: ParamStore,
}

/// The supervision carried by one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskLabel {
    /// The recorded intent (for Negatives, the rejected one).
    pub class: usize,
    /// Curation answer: true for "yes".
    pub accepted: bool,
    /// Whether the binary head of `class` sees this example. False for
    /// pseudo-labels, which only feed the multiclass task.
    pub binary: bool,
}

impl TaskLabel {
    pub fn positive(class: usize) -> Self {
        TaskLabel {
            class,
            accepted: true,
            binary: true,
        }
    }

    pub fn negative(class: usize) -> Self {
        TaskLabel {
            class,
            accepted: false,
            binary: true,
        }
    }

    pub fn pseudo(class: usize) -> Self {
        TaskLabel {
            class,
            accepted: true,
            binary: false,
        }
    }
}

/// Which terms of the joint loss a batch contributes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFilter {
    All,
    Multiclass,
    Binary(usize),
}

/// Per-sample terms of the joint loss.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLossBreakdown {
    /// Multiclass cross-entropy of each sample against its recorded class.
    pub multiclass: Vec<f64>,
    /// Binary cross-entropy of every head against the sample's curation
    /// label, one n-vector per sample.
    pub binary: Vec<Vec<f64>>,
    pub total: f64,
    pub n: usize,
}

/// Two-stage prediction: class by multiclass argmax, acceptance from the
/// binary head of that class.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedPrediction {
    pub probs: Vec<f64>,
    pub class: usize,
    pub accept: f64,
}

impl TaskHeads {
    /// `n_outputs` is the multiclass width (n, or n + 1 with an extra
    /// bucket); binary heads exist only when `binary` is set.
    pub fn init(d_model: usize, n_classes: usize, n_outputs: usize, binary: bool, seed: u64) -> Result<Self> {
        if d_model == 0 || n_classes < 2 || n_outputs < n_classes {
            return Err(Error::Config(format!(
                "heads: need d_model >= 1, n_classes >= 2, n_outputs >= n_classes (got {d_model}, {n_classes}, {n_outputs})"
            )));
        }
        let mut r = rng::stream(seed, "heads.init");
        let mut params = ParamStore::new();
        params.insert("head.multiclass.weight", normal_tensor(&mut r, &[d_model, n_outputs], INIT_STD))?;
        params.insert("head.multiclass.bias", Tensor::zeros(&[n_outputs]))?;
        if binary {
            for k in 0..n_classes {
                params.insert(format!("head.binary.{k}.weight"), normal_tensor(&mut r, &[d_model, 1], INIT_STD))?;
                params.insert(format!("head.binary.{k}.bias"), Tensor::zeros(&[1]))?;
            }
        }
        Ok(TaskHeads {
            d_model,
            n_classes,
            n_outputs,
            binary,
            params,
        })
    }

    /// The multi-task layout: n-way multiclass head plus n binary heads.
    pub fn multitask(d_model: usize, n_classes: usize, seed: u64) -> Result<Self> {
        TaskHeads::init(d_model, n_classes, n_classes, true, seed)
    }

    pub fn from_params(d_model: usize, n_classes: usize, n_outputs: usize, binary: bool, store: &ParamStore) -> Result<Self> {
        let mut heads = TaskHeads::init(d_model, n_classes, n_outputs, binary, 0)?;
        for (name, t) in heads.params.clone().iter() {
            let stored = store
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing head parameter {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::shape(
                    "heads",
                    format!("{name}: stored {:?}, expected {:?}", stored.shape(), t.shape()),
                ));
            }
            let mut c = stored.clone();
            c.set_requires_grad(false);
            *heads.params.get_mut(name).expect("same layout") = c;
        }
        Ok(heads)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn has_binary(&self) -> bool {
        self.binary
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the multiclass head with that of `other`.
    pub fn copy_multiclass_from(&mut self, other: &TaskHeads) -> Result<()> {
        for name in ["head.multiclass.weight", "head.multiclass.bias"] {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing {name}")))?;
            let dst = self.params.get_mut(name).expect("layout has a multiclass head");
            if src.shape() != dst.shape() {
                return Err(Error::shape("heads", format!("{name}: {:?} vs {:?}", src.shape(), dst.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Multiclass logits `[B, n_outputs]` from classification vectors `[B, d]`.
    pub fn multiclass_logits(&self, g: &mut Graph, bound: &Bound, u: Var) -> Result<Var> {
        let y = g.matmul(u, bound.get(0))?;
        g.add_bias(y, bound.get(1))
    }

    /// Binary logits `[B, n]`, column k from head k.
    pub fn binary_logits(&self, g: &mut Graph, bound: &Bound, u: Var) -> Result<Var> {
        if !self.binary {
            return Err(Error::invalid("these heads have no binary heads"));
        }
        let mut cols = Vec::with_capacity(self.n_classes);
        for k in 0..self.n_classes {
            let y = g.matmul(u, bound.get(2 + 2 * k))?;
            cols.push(g.add_bias(y, bound.get(3 + 2 * k))?);
        }
        g.concat(&cols, 1)
    }

    fn check_labels(&self, labels: &[TaskLabel]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::invalid("joint loss: empty batch"));
        }
        if let Some(l) = labels.iter().find(|l| l.class >= self.n_classes) {
            return Err(Error::invalid(format!("label class {} outside {} classes", l.class, self.n_classes)));
        }
        Ok(())
    }

    /// Records the joint loss on `g`:
    /// `(1/N) sum_i (y_i^b l_i^m + y_i^m . l_i^b)`, restricted by `filter`.
    /// Returns (total, per-sample multiclass CE `[N]`, per-sample binary
    /// BCE `[N, n]`).
    pub fn joint_loss_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        u: Var,
        labels: &[TaskLabel],
        filter: TaskFilter,
    ) -> Result<(Var, Var, Var)> {
        self.check_labels(labels)?;
        let n = self.n_classes;
        let big_n = labels.len();
        let ml = self.multiclass_logits(g, bound, u)?;
        let classes: Vec<usize> = labels.iter().map(|l| l.class).collect();
        let lm = g.cross_entropy_rows(ml, &classes)?;
        let bl = self.binary_logits(g, bound, u)?;
        let targets: Vec<f64> = labels
            .iter()
            .flat_map(|l| std::iter::repeat_n(if l.accepted { 1.0 } else { 0.0 }, n))
            .collect();
        let lb = g.bce_with_logits(bl, &targets)?;

        let use_m = matches!(filter, TaskFilter::All | TaskFilter::Multiclass);
        let wm: Vec<f64> = labels
            .iter()
            .map(|l| if use_m && l.accepted { 1.0 } else { 0.0 })
            .collect();
        let mut wb = vec![0.0; big_n * n];
        for (i, l) in labels.iter().enumerate() {
            let on = match filter {
                TaskFilter::All => true,
                TaskFilter::Multiclass => false,
                TaskFilter::Binary(k) => k == l.class,
            };
            if on && l.binary {
                wb[i * n + l.class] = 1.0;
            }
        }
        let wm = g.constant(vec![big_n], wm)?;
        let wb = g.constant(vec![big_n, n], wb)?;
        let tm = g.mul(lm, wm)?;
        let tm = g.reduce_mean(tm)?;
        let tb = g.mul(lb, wb)?;
        let tb = g.reduce_mean(tb)?;
        // reduce_mean over [N, n] divides by N * n
        let tb = g.scale(tb, n as f64)?;
        let total = g.add(tm, tb)?;
        Ok((total, lm, lb))
    }

    /// Mean cross-entropy of the multiclass head against `targets`, which
    /// may index the extra bucket when `n_outputs > n_classes`.
    pub fn multiclass_loss_graph(&self, g: &mut Graph, bound: &Bound, u: Var, targets: &[usize]) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::invalid("multiclass loss: empty batch"));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= self.n_outputs) {
            return Err(Error::invalid(format!("target {t} outside {} outputs", self.n_outputs)));
        }
        let ml = self.multiclass_logits(g, bound, u)?;
        let ce = g.cross_entropy_rows(ml, targets)?;
        g.reduce_mean(ce)
    }

    /// The joint loss on precomputed classification vectors.
    pub fn joint_loss(&self, u: &[Vec<f64>], labels: &[TaskLabel]) -> Result<JointLossBreakdown> {
        if u.len() != labels.len() {
            return Err(Error::invalid(format!("{} vectors for {} labels", u.len(), labels.len())));
        }
        self.check_labels(labels)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let uv = g.constant(vec![u.len(), self.d_model], u.concat())?;
        let (total, lm, lb) = self.joint_loss_graph(&mut g, &b, uv, labels, TaskFilter::All)?;
        Ok(JointLossBreakdown {
            multiclass: g.data(lm).to_vec(),
            binary: g.data(lb).chunks(self.n_classes).map(<[f64]>::to_vec).collect(),
            total: g.item(total),
            n: labels.len(),
        })
    }

    /// Softmax probabilities over the multiclass outputs for one vector.
    pub fn class_probs(&self, u: &[f64]) -> Vec<f64> {
        let w = self.params.tensor(0);
        let b = self.params.tensor(1);
        let mut z = b.data().to_vec();
        for (i, &ui) in u.iter().enumerate() {
            for (zj, wj) in z.iter_mut().zip(w.row(i)) {
                *zj += ui * wj;
            }
        }
        softmax_slice(&mut z);
        z
    }

    /// Acceptance probability of binary head `k` for one vector.
    pub fn accept_prob(&self, u: &[f64], k: usize) -> f64 {
        let w = self.params.tensor(2 + 2 * k);
        let b = self.params.tensor(3 + 2 * k);
        sigmoid(b.data()[0] + u.iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>())
    }

    /// Routes one classification vector: argmax class (lowest index on
    /// ties), then that class's binary head on the same vector.
    pub fn route(&self, u: &[f64]) -> Result<RoutedPrediction> {
        if !self.binary {
            return Err(Error::invalid("routing needs binary heads"));
        }
        let probs = self.class_probs(u);
        let (class, _) = argmax(&probs[..self.n_classes]);
        Ok(RoutedPrediction {
            accept: self.accept_prob(u, class),
            class,
            probs,
        })
    }
}
