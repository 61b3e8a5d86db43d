use punintent_core::encoder::{EncoderConfig, EncoderModel};
use punintent_core::heads::{TaskFilter, TaskHeads, TaskLabel};
use punintent_core::model::{IntentModel, ModelKind};
use punintent_core::params::Bound;
use punintent_core::tensor::{adam_step, finite_difference_check, AdamConfig, AdamState, FdCheckConfig, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_heads(d: usize, n: usize, seed: u64) -> TaskHeads {
    let mut h = TaskHeads::multitask(d, n, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in h.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    h
}

fn random_u(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

/// Hand evaluation of the two heads from their raw parameters.
fn logits(h: &TaskHeads, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = h.params();
    let (w, b) = (p.get("head.multiclass.weight").unwrap(), p.get("head.multiclass.bias").unwrap());
    let n = h.n_outputs();
    let m = (0..n)
        .map(|j| b.data()[j] + (0..u.len()).map(|i| u[i] * w.data()[i * n + j]).sum::<f64>())
        .collect();
    let bin = (0..h.n_classes())
        .map(|k| {
            let w = p.get(&format!("head.binary.{k}.weight")).unwrap();
            let b = p.get(&format!("head.binary.{k}.bias")).unwrap();
            b.data()[0] + u.iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect();
    (m, bin)
}

fn ce(z: &[f64], k: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[k]
}

fn bce(z: f64, y: f64) -> f64 {
    -(y * (1.0 / (1.0 + (-z).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + z.exp())).ln())
}

#[test]
fn joint_loss_is_the_mean_of_hand_computed_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..50 {
        let (d, n) = (rng.random_range(1..6), rng.random_range(2..6));
        let h = random_heads(d, n, trial);
        let b = rng.random_range(1..12);
        let u = random_u(&mut rng, b, d);
        let labels: Vec<TaskLabel> = (0..b)
            .map(|_| {
                let k = rng.random_range(0..n);
                match rng.random_range(0..3) {
                    0 => TaskLabel::positive(k),
                    1 => TaskLabel::negative(k),
                    _ => TaskLabel::pseudo(k),
                }
            })
            .collect();
        let got = h.joint_loss(&u, &labels).unwrap();
        let mut want = 0.0;
        for (ui, l) in u.iter().zip(&labels) {
            let (zm, zb) = logits(&h, ui);
            let yb = if l.accepted { 1.0 } else { 0.0 };
            let mut c = yb * ce(&zm, l.class);
            if l.binary {
                c += bce(zb[l.class], yb);
            }
            want += c;
        }
        want /= b as f64;
        assert!((got.total - want).abs() < 1e-12, "{} vs {want}", got.total);
        assert_eq!(got.n, b);
        assert_eq!(got.binary.len(), b);
        assert!(got.binary.iter().all(|r| r.len() == n));
    }
}

#[test]
fn worked_contributions() {
    // one-dimensional u = 1 and zero weights: the biases set the logits
    let mut h = TaskHeads::multitask(1, 2, 0).unwrap();
    for t in h.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // two-class CE of class 0 = ln(1 + e^(z1 - z0)) = 0.7
    let gap = (0.7f64.exp() - 1.0).ln();
    h.params_mut().get_mut("head.multiclass.bias").unwrap().data_mut()[1] = gap;
    // BCE(z, 1) = 0.2 and BCE(z, 0) = 0.4
    let z_pos = -((0.2f64).exp() - 1.0).ln();
    let z_neg = ((0.4f64).exp() - 1.0).ln();
    h.params_mut().get_mut("head.binary.0.bias").unwrap().data_mut()[0] = z_pos;
    h.params_mut().get_mut("head.binary.1.bias").unwrap().data_mut()[0] = z_neg;
    let u = vec![vec![1.0]];
    let pos = h.joint_loss(&u, &[TaskLabel::positive(0)]).unwrap();
    assert!((pos.total - 0.9).abs() < 1e-12);
    let neg = h.joint_loss(&u, &[TaskLabel::negative(1)]).unwrap();
    assert!((neg.total - 0.4).abs() < 1e-12);
    let both = h
        .joint_loss(&[vec![1.0], vec![1.0]], &[TaskLabel::positive(0), TaskLabel::negative(1)])
        .unwrap();
    assert!((both.total - 0.65).abs() < 1e-12);
}

#[test]
fn invalid_batches_are_rejected() {
    let h = TaskHeads::multitask(3, 2, 0).unwrap();
    assert!(h.joint_loss(&[], &[]).is_err());
    assert!(h.joint_loss(&[vec![0.0; 3]], &[TaskLabel::positive(2)]).is_err());
    assert!(h.joint_loss(&[vec![0.0; 3]], &[]).is_err());
    assert!(TaskHeads::multitask(3, 1, 0).is_err());
}

fn loss_with_filter(h: &TaskHeads, u: &[Vec<f64>], labels: &[TaskLabel], f: TaskFilter) -> f64 {
    let mut g = Graph::new();
    let b = h.bind(&mut g, false);
    let uv = g.constant(vec![u.len(), h.d_model()], u.concat()).unwrap();
    let (t, _, _) = h.joint_loss_graph(&mut g, &b, uv, labels, f).unwrap();
    g.item(t)
}

#[test]
fn task_filters_select_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random_heads(4, 3, 2);
    let u = random_u(&mut rng, 6, 4);
    let labels = [
        TaskLabel::positive(0),
        TaskLabel::negative(0),
        TaskLabel::positive(1),
        TaskLabel::negative(2),
        TaskLabel::pseudo(2),
        TaskLabel::positive(2),
    ];
    let all = loss_with_filter(&h, &u, &labels, TaskFilter::All);
    let m = loss_with_filter(&h, &u, &labels, TaskFilter::Multiclass);
    let bin: f64 = (0..3).map(|k| loss_with_filter(&h, &u, &labels, TaskFilter::Binary(k))).sum();
    assert!((all - m - bin).abs() < 1e-12);
    let mut want_m = 0.0;
    for (ui, l) in u.iter().zip(&labels) {
        if l.accepted {
            want_m += ce(&logits(&h, ui).0, l.class);
        }
    }
    assert!((m - want_m / 6.0).abs() < 1e-12);
}

fn one_step(h: &mut TaskHeads, u: &[Vec<f64>], labels: &[TaskLabel]) {
    let mut g = Graph::new();
    let b = h.bind(&mut g, true);
    let uv = g.constant(vec![u.len(), h.d_model()], u.concat()).unwrap();
    let (t, _, _) = h.joint_loss_graph(&mut g, &b, uv, labels, TaskFilter::All).unwrap();
    let grads = g.backward(t).unwrap();
    h.params_mut().accumulate(&grads, &b).unwrap();
    let mut st = AdamState::new(h.params().iter().map(|(_, t)| t));
    let mut ts: Vec<_> = h.params_mut().tensors_mut().collect();
    adam_step(&mut ts, &mut st, &AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
}

fn values<'a>(h: &'a TaskHeads, name: &str) -> &'a [f64] {
    h.params().get(name).unwrap().data()
}

#[test]
fn negatives_never_move_the_multiclass_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut h = random_heads(5, 4, 3);
    let before = h.clone();
    let u = random_u(&mut rng, 8, 5);
    let labels: Vec<_> = (0..8).map(|i| TaskLabel::negative(i % 4)).collect();
    one_step(&mut h, &u, &labels);
    for name in ["head.multiclass.weight", "head.multiclass.bias"] {
        assert_eq!(values(&h, name), values(&before, name));
    }
    assert_ne!(values(&h, "head.binary.0.bias"), values(&before, "head.binary.0.bias"));
}

#[test]
fn a_positive_moves_exactly_one_binary_head_and_pseudo_labels_none() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let u = random_u(&mut rng, 1, 5);
    for k in 0..4 {
        let mut h = random_heads(5, 4, 4);
        let before = h.clone();
        one_step(&mut h, &u, &[TaskLabel::positive(k)]);
        for j in 0..4 {
            let name = format!("head.binary.{j}.weight");
            assert_eq!(values(&h, &name) != values(&before, &name), j == k);
        }
        assert_ne!(values(&h, "head.multiclass.weight"), values(&before, "head.multiclass.weight"));

        let mut h = random_heads(5, 4, 4);
        one_step(&mut h, &u, &[TaskLabel::pseudo(k)]);
        for j in 0..4 {
            let name = format!("head.binary.{j}.bias");
            assert_eq!(values(&h, &name), values(&before, &name));
        }
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random_heads(4, 3, 5);
    let u = random_u(&mut rng, 5, 4);
    let labels = [
        TaskLabel::positive(0),
        TaskLabel::negative(1),
        TaskLabel::pseudo(2),
        TaskLabel::positive(2),
        TaskLabel::negative(0),
    ];
    let params: Vec<_> = h.params().iter().map(|(_, t)| t.clone()).collect();
    let err = finite_difference_check(&params, &FdCheckConfig::default(), |g, vars| {
        let b = Bound::new(vars.to_vec());
        let uv = g.constant(vec![5, 4], u.concat())?;
        Ok(h.joint_loss_graph(g, &b, uv, &labels, TaskFilter::All)?.0)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn set_multiclass(h: &mut TaskHeads, probs: &[f64]) {
    let p = h.params_mut();
    p.get_mut("head.multiclass.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = p.get_mut("head.multiclass.bias").unwrap();
    for (bj, pj) in b.data_mut().iter_mut().zip(probs) {
        *bj = pj.ln();
    }
}

#[test]
fn routing_examples() {
    let mut h = random_heads(3, 3, 6);
    set_multiclass(&mut h, &[0.1, 0.7, 0.2]);
    let u = [0.3, -0.2, 0.9];
    let r = h.route(&u).unwrap();
    assert_eq!(r.class, 1);
    assert_eq!(r.accept, h.accept_prob(&u, 1));
    assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((r.probs[1] - 0.7).abs() < 1e-12);

    let mut h = random_heads(3, 2, 7);
    set_multiclass(&mut h, &[0.5, 0.5]);
    assert_eq!(h.route(&u).unwrap().class, 0);

    assert!(TaskHeads::init(3, 2, 2, false, 0).unwrap().route(&u).is_err());
}

#[test]
fn routing_uses_the_selected_head_on_the_same_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = random_heads(6, 5, 8);
    for u in random_u(&mut rng, 1000, 6) {
        let r = h.route(&u).unwrap();
        let (zm, zb) = logits(&h, &u);
        let best = (0..5).fold(0, |b, j| if zm[j] > zm[b] { j } else { b });
        assert_eq!(r.class, best);
        let direct = 1.0 / (1.0 + (-zb[best]).exp());
        assert!((r.accept - direct).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.accept));
    }
}

#[test]
fn argmax_is_invariant_under_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = random_heads(4, 6, 9);
    for temp in [0.1, 0.5, 3.0, 40.0] {
        let mut scaled = h.clone();
        for name in ["head.multiclass.weight", "head.multiclass.bias"] {
            scaled.params_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v /= temp);
        }
        for u in random_u(&mut rng, 200, 4) {
            assert_eq!(h.route(&u).unwrap().class, scaled.route(&u).unwrap().class);
        }
    }
}

#[test]
fn model_layouts_scores_and_checkpoints() {
    let cfg = EncoderConfig {
        vocab_size: 30,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 8,
        dropout: 0.0,
        ..Default::default()
    };
    let enc = EncoderModel::init(cfg, 1).unwrap();
    let others = IntentModel::new(ModelKind::OthersBucket, enc.clone(), 3, 1).unwrap();
    assert_eq!(others.heads.n_outputs(), 4);
    assert!(!others.heads.has_binary());
    let u = vec![0.1; 8];
    assert_eq!(others.case_score(&u, 2), others.heads.class_probs(&u)[2]);

    let mt = IntentModel::new(ModelKind::MultiTask, enc, 3, 1).unwrap();
    assert_eq!(mt.case_score(&u, 1), mt.heads.accept_prob(&u, 1));
    let names: Vec<_> = mt.heads.params().names().collect();
    assert!(names.contains(&"head.binary.2.weight"));

    let dir = tempfile::tempdir().unwrap();
    mt.save(dir.path(), "v1").unwrap();
    let back = IntentModel::load(dir.path(), "v1").unwrap();
    assert_eq!(back.kind, ModelKind::MultiTask);
    assert_eq!(back.heads.params(), mt.heads.params());
    assert!(IntentModel::load(dir.path(), "v2").is_err());
}
