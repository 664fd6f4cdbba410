use dashu_float::ops::SquareRoot;
use dashu_float::FBig;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimodal_core::loss::{loss_c2v, loss_total, loss_v2c, Batch, PositiveSets};
use trimodal_core::numerics::{grad_check_many, Tensor};
use trimodal_core::trainer::AdamW;

fn big(x: f64) -> FBig {
    FBig::try_from(x).unwrap().with_precision(200).value()
}

fn cos_big(a: &[f64], b: &[f64]) -> FBig {
    let dot = a.iter().zip(b).fold(big(0.0), |s, (x, y)| s + big(*x) * big(*y));
    let na = a.iter().fold(big(0.0), |s, x| s + big(*x) * big(*x)).sqrt();
    let nb = b.iter().fold(big(0.0), |s, x| s + big(*x) * big(*x)).sqrt();
    dot / (na * nb)
}

/// One direction of the loss, summed term by term in 200-bit arithmetic.
/// Anchors are rows of `anchors`; the denominator runs over rows of `others`.
fn directional_oracle(anchors: &Tensor, others: &Tensor, labels: &[usize], tau: f64) -> f64 {
    let b = labels.len();
    let mut total = big(0.0);
    for i in 0..b {
        let logits: Vec<FBig> = (0..b).map(|j| cos_big(anchors.row(i), others.row(j)) / big(tau)).collect();
        let log_denom = logits.iter().fold(big(0.0), |s, l| s + l.exp()).ln();
        let positives: Vec<usize> = (0..b).filter(|&m| labels[m] == labels[i]).collect();
        let mut inner = big(0.0);
        for &m in &positives {
            inner += &logits[m] - &log_denom;
        }
        total += inner / big(positives.len() as f64);
    }
    (-total / big(b as f64)).to_f64().value()
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Batch {
    let m = rng.gen_range(1..=b);
    Batch {
        video_embs: Tensor::uniform(&[b, d], -1.0, 1.0, rng),
        class_embs: Tensor::uniform(&[b, d], -1.0, 1.0, rng),
        labels: (0..b).map(|_| rng.gen_range(0..m)).collect(),
    }
}

#[test]
fn two_item_reference_value() {
    let e = Tensor::identity(2);
    let batch = Batch {
        video_embs: e.clone(),
        class_embs: e,
        labels: vec![0, 1],
    };
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((expected - 0.31326).abs() < 1e-5);
    assert!((batch.loss_v2c(1.0).unwrap() - expected).abs() < 1e-15);
    assert!((batch.loss_c2v(1.0).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let (b, d) = (rng.gen_range(1..7), rng.gen_range(1..9));
        let batch = random_batch(&mut rng, b, d);
        for tau in [1.0, 0.1, 0.01] {
            let v2c = directional_oracle(&batch.class_embs, &batch.video_embs, &batch.labels, tau);
            let c2v = directional_oracle(&batch.video_embs, &batch.class_embs, &batch.labels, tau);
            assert!((batch.loss_v2c(tau).unwrap() - v2c).abs() <= 1e-10);
            assert!((batch.loss_c2v(tau).unwrap() - c2v).abs() <= 1e-10);
        }
    }
}

#[test]
fn four_item_batch_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Batch {
        video_embs: Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng),
        class_embs: Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng),
        labels: vec![2, 0, 2, 1],
    };
    let oracle = directional_oracle(&batch.video_embs, &batch.class_embs, &batch.labels, 0.01);
    assert!((batch.loss_c2v(0.01).unwrap() - oracle).abs() <= 1e-10);
}

#[test]
fn total_is_the_exact_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 5, 4);
        let (a, b) = (batch.loss_v2c(0.01).unwrap(), batch.loss_c2v(0.01).unwrap());
        assert_eq!(batch.loss_total(0.01).unwrap(), (a + b) * 0.5);
    }
}

#[test]
fn c2v_is_v2c_with_roles_swapped() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let batch = random_batch(&mut rng, 4, 3);
        assert_eq!(batch.loss_c2v(0.5).unwrap(), batch.swapped().loss_v2c(0.5).unwrap());
    }
}

#[test]
fn duplicated_rows_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch = random_batch(&mut rng, 3, 4);
    let dup = |t: &Tensor| {
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| t.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        Tensor::from_rows(&rows).unwrap()
    };
    let mut labels = batch.labels.clone();
    labels.extend(batch.labels.clone());
    let doubled = Batch {
        video_embs: dup(&batch.video_embs),
        class_embs: dup(&batch.class_embs),
        labels,
    };
    let oracle = directional_oracle(&doubled.class_embs, &doubled.video_embs, &doubled.labels, 0.1);
    assert!((doubled.loss_v2c(0.1).unwrap() - oracle).abs() <= 1e-10);
}

#[test]
fn positive_sets_always_contain_anchor() {
    let labels = [3, 1, 3, 3, 0];
    let p = PositiveSets::new(&labels);
    for i in 0..labels.len() {
        assert!(p.of(i).contains(&i));
        assert!(p.of(i).iter().all(|&m| labels[m] == labels[i]));
    }
    assert_eq!(p.of(0), &[0, 2, 3]);
}

fn loss_grad_error(rng: &mut ChaCha8Rng, tau: f64, which: usize) -> f64 {
    let b = rng.gen_range(2..6);
    let d = rng.gen_range(2..6);
    let v = Tensor::uniform(&[b, d], -1.0, 1.0, rng);
    let c = Tensor::uniform(&[b, d], -1.0, 1.0, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
    grad_check_many(
        |g, x| match which {
            0 => loss_v2c(g, x[0], x[1], &labels, tau),
            1 => loss_c2v(g, x[0], x[1], &labels, tau),
            _ => loss_total(g, x[0], x[1], &labels, tau),
        },
        &[v, c],
        1e-6,
    )
    .unwrap()
}

#[test]
fn loss_gradients_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for which in 0..3 {
        for _ in 0..10 {
            let e = loss_grad_error(&mut rng, 1.0, which);
            assert!(e < 1e-4, "tau 1: {e}");
            let e = loss_grad_error(&mut rng, 0.01, which);
            assert!(e < 1e-3, "tau 0.01: {e}");
        }
    }
}

#[test]
fn optimizing_embeddings_lowers_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let mut v = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let mut c = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
    let mut opt = AdamW::new(&[&mut v, &mut c], 0.05, [0.9, 0.999], 1e-8, 0.0);
    let mut history = Vec::new();
    for _ in 0..50 {
        let mut g = trimodal_core::numerics::Graph::new();
        let (vv, cv) = (g.param(v.clone()), g.param(c.clone()));
        let loss = loss_total(&mut g, vv, cv, &labels, 0.1).unwrap();
        history.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let (gv, gc) = (grads.get(vv).unwrap().clone(), grads.get(cv).unwrap().clone());
        opt.step(&mut [&mut v, &mut c], &[Some(&gv), Some(&gc)]).unwrap();
    }
    assert!(history[49] < 0.5 * history[0], "{history:?}");
}

proptest! {
    #[test]
    fn directional_losses_are_nonnegative(seed in any::<u64>(), b in 1usize..7, d in 1usize..6, tau in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, b, d);
        prop_assert!(batch.loss_v2c(tau).unwrap() >= 0.0);
        prop_assert!(batch.loss_c2v(tau).unwrap() >= 0.0);
    }

    #[test]
    fn single_item_is_exactly_zero(seed in any::<u64>(), d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 1, d);
        prop_assert_eq!(batch.loss_v2c(0.01).unwrap(), 0.0);
        prop_assert_eq!(batch.loss_c2v(0.01).unwrap(), 0.0);
        prop_assert_eq!(batch.loss_total(0.01).unwrap(), 0.0);
    }

    #[test]
    fn joint_permutation_leaves_loss_unchanged(seed in any::<u64>(), b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, b, 3);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let take = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let shuffled = Batch {
            video_embs: take(&batch.video_embs),
            class_embs: take(&batch.class_embs),
            labels: perm.iter().map(|&i| batch.labels[i]).collect(),
        };
        for tau in [1.0, 0.01] {
            prop_assert!((shuffled.loss_v2c(tau).unwrap() - batch.loss_v2c(tau).unwrap()).abs() < 1e-12);
            prop_assert!((shuffled.loss_c2v(tau).unwrap() - batch.loss_c2v(tau).unwrap()).abs() < 1e-12);
        }
    }
}
