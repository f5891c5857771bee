mod common;

use common::tiny;
use proptest::prelude::*;
use semrec::esu::{forward_example, Ablation, ForwardCache, ModelParams};
use semrec::training::{
    auc, backward, bce_loss, bce_with_logit, gauc, gradient_check, Grad, GradientSet, Optimizer, TrainConfig,
};
use semrec::Error;

#[test]
fn gradients_match_finite_differences_for_every_ablation() {
    for (seed, ab) in [
        Ablation::FULL,
        Ablation::BASE,
        Ablation::SEMID,
        Ablation::SIMBUCKET,
        Ablation::SIMBUCKET_SEMID,
    ]
    .into_iter()
    .enumerate()
    {
        let t = tiny(ab, seed as u64 + 1, 0.5);
        let report = gradient_check(&t.params, &t.features, &t.set, 1e-5, 1e-6).unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {report:?}", ab.label());
        assert_eq!(report.checked, t.params.num_parameters());
        for (name, n) in &report.nonzero {
            assert!(*n > 0, "{}: no gradient signal reaches {name}", ab.label());
        }
    }
}

#[test]
fn bce_closed_forms() {
    assert!((bce_loss(0.5, 0) - 2f64.ln()).abs() < 1e-15);
    assert!((bce_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
    assert!(bce_with_logit(40.0, 1) < 1e-15);
    assert!(bce_loss(1.0, 1) < 1e-12);
    assert!(bce_loss(0.0, 1).is_finite());
    assert!(bce_loss(1.0, 0).is_finite());
}

#[test]
fn batch_mean_loss_matches_scalar_recomputation() {
    let ps = [0.1, 0.7, 0.35, 0.9];
    let ys = [0u8, 1, 1, 0];
    let mean: f64 = ps.iter().zip(&ys).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / 4.0;
    let oracle = -((0.9f64).ln() + (0.7f64).ln() + (0.35f64).ln() + (0.1f64).ln()) / 4.0;
    assert!((mean - oracle).abs() < 1e-12);
}

fn gradients(params: &ModelParams, t: &common::Tiny) -> GradientSet {
    let mut g = GradientSet::zeros_like(params);
    let mut cache = ForwardCache::default();
    let scale = 1.0 / t.set.len() as f64;
    for n in 0..t.set.len() {
        let ex = t.set.get(n);
        forward_example(params, &t.features, &ex, &mut cache).unwrap();
        backward(params, &cache, ex.label, scale, &mut g).unwrap();
    }
    g
}

#[test]
fn untouched_rows_have_exactly_zero_gradient() {
    let t = tiny(Ablation::FULL, 3, 0.3);
    let g = gradients(&t.params, &t);
    let mut touched_items = std::collections::BTreeSet::new();
    for n in 0..t.set.len() {
        let ex = t.set.get(n);
        touched_items.insert(ex.target);
        touched_items.extend(ex.items.iter().copied());
    }
    let id0 = t.params.layout.id[0];
    let Grad::Sparse(s) = &g.grads[id0] else {
        panic!("id table must be sparse")
    };
    let used: std::collections::BTreeSet<u32> = touched_items.iter().map(|&i| t.features.id_rows(i)[0]).collect();
    for r in 0..t.params.tensors[id0].rows as u32 {
        if used.contains(&r) {
            assert!(s.is_touched(r));
        } else {
            assert!(!s.is_touched(r));
            assert!(s.row(r).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn duplicate_items_accumulate_per_occurrence() {
    // Give one id row to two different items, then compare against a model
    // where each occurrence owns a distinct row.
    let t = tiny(Ablation::BASE, 5, 0.5);
    let ex = t.set.get(0);
    assert!(ex.items.len() >= 2);
    let (a, b) = (ex.items[0], ex.items[1]);
    let id0 = t.params.layout.id[0];
    let (ra, rb) = (t.features.id_rows(a)[0] as usize, t.features.id_rows(b)[0] as usize);
    assert_ne!(ra, rb);
    let mut split = t.params.clone();
    let row: Vec<f64> = split.tensors[id0].row(ra).to_vec();
    split.tensors[id0].row_mut(rb).copy_from_slice(&row);

    let grads_split = gradients(&split, &t);
    // Shared model: redirect item b to row ra.
    let mut shared = t.params.clone();
    shared.tensors[id0].row_mut(rb).copy_from_slice(&row);
    let g_split = match &grads_split.grads[id0] {
        Grad::Sparse(s) => (s.row(ra as u32).to_vec(), s.row(rb as u32).to_vec()),
        _ => unreachable!(),
    };
    // With identical row values the forward passes coincide, so the shared
    // row's gradient is the sum of the two per-occurrence gradients.
    let sum: Vec<f64> = g_split.0.iter().zip(&g_split.1).map(|(x, y)| x + y).collect();
    let h = 1e-6;
    for k in 0..sum.len() {
        let mut up = shared.clone();
        let mut down = shared.clone();
        for r in [ra, rb] {
            up.tensors[id0].row_mut(r)[k] += h;
            down.tensors[id0].row_mut(r)[k] -= h;
        }
        let loss = |p: &ModelParams| -> f64 {
            let mut c = ForwardCache::default();
            (0..t.set.len())
                .map(|n| {
                    let e = t.set.get(n);
                    forward_example(p, &t.features, &e, &mut c).unwrap();
                    bce_with_logit(c.logit, e.label)
                })
                .sum::<f64>()
                / t.set.len() as f64
        };
        let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
        assert!(
            (numeric - sum[k]).abs() < 1e-6 * sum[k].abs().max(1.0),
            "{numeric} vs {}",
            sum[k]
        );
    }
}

#[test]
fn zero_gradient_without_decay_leaves_params() {
    let t = tiny(Ablation::FULL, 2, 0.1);
    let mut p = t.params.clone();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&p, &cfg);
    let zero = GradientSet::zeros_like(&p);
    opt.step(&mut p, &zero).unwrap();
    assert_eq!(p, t.params);
}

#[test]
fn decoupled_decay_shrinks_dense_only() {
    let t = tiny(Ablation::FULL, 2, 0.1);
    let mut p = t.params.clone();
    let cfg = TrainConfig {
        weight_decay: 0.5,
        dense_lr: 0.1,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&p, &cfg);
    let zero = GradientSet::zeros_like(&p);
    opt.step(&mut p, &zero).unwrap();
    for (a, b) in p.tensors.iter().zip(&t.params.tensors) {
        match a.kind {
            semrec::tensor::TensorKind::Dense => {
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert_eq!(*x, y * 0.95);
                }
            }
            semrec::tensor::TensorKind::Sparse => assert_eq!(a.data, b.data),
        }
    }
}

#[test]
fn adam_matches_hand_recurrence() {
    let t = tiny(Ablation::BASE, 4, 0.1);
    let mut p = t.params.clone();
    let cfg = TrainConfig {
        weight_decay: 0.01,
        dense_lr: 0.05,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&p, &cfg);
    let bias = p.layout.mlp.last().unwrap().1;
    let seq = [0.3, -1.2, 0.7, 0.0, 2.5];
    let (mut w, mut m, mut v) = (p.tensors[bias].data[0], 0.0f64, 0.0f64);
    for (step, &g) in seq.iter().enumerate() {
        let mut grads = GradientSet::zeros_like(&p);
        if let Grad::Dense(d) = &mut grads.grads[bias] {
            d[0] = g;
        }
        opt.step(&mut p, &grads).unwrap();
        let t = step as i32 + 1;
        w *= 1.0 - 0.05 * 0.01;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        w -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((p.tensors[bias].data[0] - w).abs() < 1e-15, "step {t}");
    }
}

#[test]
fn non_finite_gradient_rejects_the_step() {
    let t = tiny(Ablation::FULL, 2, 0.1);
    let mut p = t.params.clone();
    let mut opt = Optimizer::new(&p, &TrainConfig::default());
    let mut grads = GradientSet::zeros_like(&p);
    let wq = p.layout.wq;
    if let Grad::Dense(d) = &mut grads.grads[wq] {
        d[3] = f64::NAN;
    }
    assert!(matches!(opt.step(&mut p, &grads), Err(Error::Numeric { .. })));
    assert_eq!(p, t.params);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn gauc_examples() {
    assert_eq!(gauc(&[1, 1, 1], &[0.1, 0.5, 0.9], &[0, 0, 1]).unwrap(), 1.0);
    assert_eq!(gauc(&[1, 1, 1, 1], &[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
    let users = [1, 1, 2, 2, 2, 2, 2, 2];
    let scores = [0.2, 0.8, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
    let labels = [0, 1, 0, 1, 0, 1, 0, 1];
    assert!((gauc(&users, &scores, &labels).unwrap() - 0.625).abs() < 1e-15);
    assert!(matches!(
        gauc(&[1, 2], &[0.1, 0.2], &[1, 0]),
        Err(Error::UndefinedMetric(_))
    ));
}

fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(data in prop::collection::vec((0u8..6, 0u8..2), 2..40)) {
        let s: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let y: Vec<u8> = data.iter().map(|d| d.1).collect();
        if let Some(a) = auc(&s, &y) {
            prop_assert!((a - brute_auc(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn gauc_is_bounded_and_rank_invariant(
        data in prop::collection::vec((0u64..4, -5.0f64..5.0, 0u8..2), 4..60)
    ) {
        let users: Vec<u64> = data.iter().map(|d| d.0).collect();
        let s: Vec<f64> = data.iter().map(|d| d.1).collect();
        let y: Vec<u8> = data.iter().map(|d| d.2).collect();
        if let Ok(g) = gauc(&users, &s, &y) {
            prop_assert!((0.0..=1.0).contains(&g));
            let t: Vec<f64> = s.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
            prop_assert!((gauc(&users, &t, &y).unwrap() - g).abs() < 1e-12);
        }
    }
}
