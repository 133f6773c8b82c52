use adacon::ecdf::{EcdfTable, MarginMatrix};
use adacon::evalviz::{angular_layout, regression_metrics, spearman};
use adacon::losses::{
    adacon_loss, adaptive_triplet_loss, gradcheck::random_unit_rows, mine_triplets, npair_loss,
    supcon_loss, EmbeddingBatch, Temperature,
};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..60)
}

/// Random batch with source ids and labels shared in groups of `m` rows.
fn grouped_batch(seed: u64, sources: usize, m: usize, dim: usize) -> EmbeddingBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<f64> = (0..sources).map(|_| rng.random::<f64>()).collect();
    let labels = (0..sources * m).map(|r| ys[r / m]).collect();
    let ids = (0..sources * m).map(|r| r / m).collect();
    EmbeddingBatch::new(random_unit_rows(&mut rng, sources * m, dim), labels, ids).unwrap()
}

fn permutation(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Anchor at e1, positive at angle `a`, negative at angle `b` in another plane.
fn ipn(a: f64, b: f64) -> EmbeddingBatch {
    EmbeddingBatch::new(
        array![[1.0, 0.0, 0.0], [a.cos(), a.sin(), 0.0], [b.cos(), 0.0, b.sin()]],
        vec![0.0, 0.0, 1.0],
        vec![0, 0, 1],
    )
    .unwrap()
}

fn ipn_margins(d: f64) -> MarginMatrix {
    let mut v = Array2::zeros((3, 3));
    for (i, j) in [(0, 2), (2, 0), (1, 2), (2, 1)] {
        v[[i, j]] = d;
    }
    MarginMatrix::from_values(v, &[0.0, 0.0, 1.0]).unwrap()
}

proptest! {
    #[test]
    fn margins_equal_twice_the_count_between(labels in labels_strategy(), probe in prop::collection::vec(-60.0f64..60.0, 2..8)) {
        let table = EcdfTable::fit(&labels).unwrap();
        let n = labels.len();
        for &a in &probe {
            for &b in &probe {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let between = labels.iter().filter(|&&y| lo < y && y <= hi).count();
                prop_assert_eq!(table.margin(a, b).unwrap(), 2.0 * between as f64 / n as f64);
            }
        }
    }

    #[test]
    fn margins_invariant_under_monotone_relabeling(labels in labels_strategy(), k in 0.1f64..3.0, c in -5.0f64..5.0) {
        let g = |y: f64| (k * y / 50.0).exp() + c;
        let table = EcdfTable::fit(&labels).unwrap();
        let mapped: Vec<f64> = labels.iter().map(|&y| g(y)).collect();
        let mapped_table = EcdfTable::fit(&mapped).unwrap();
        let batch: Vec<f64> = labels.iter().take(10).copied().collect();
        let batch_mapped: Vec<f64> = batch.iter().map(|&y| g(y)).collect();
        let m = table.margin_matrix(&batch).unwrap();
        let mm = mapped_table.margin_matrix(&batch_mapped).unwrap();
        prop_assert_eq!(m.values(), mm.values());
    }

    #[test]
    fn margin_matrix_is_symmetric_with_zero_on_equal_labels(labels in labels_strategy()) {
        let table = EcdfTable::fit(&labels).unwrap();
        let m = table.margin_matrix(&labels).unwrap();
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                if labels[i] == labels[j] {
                    prop_assert_eq!(m.get(i, j), 0.0);
                }
                prop_assert!((0.0..2.0).contains(&m.get(i, j)));
            }
        }
    }

    #[test]
    fn softplus_identity(a in 0.0f64..3.14, b in 0.0f64..3.14, d in 0.0f64..2.0, s in 0.1f64..20.0) {
        let batch = ipn(a, b);
        let r = adacon_loss(&batch, &ipn_margins(d), Temperature::new(s).unwrap()).unwrap();
        let x: f64 = s * (b.cos() - a.cos() + d);
        let softplus = if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        prop_assert!((r.per_anchor[0] - softplus).abs() <= 1e-12 * softplus.max(1.0));
    }

    #[test]
    fn adacon_increases_with_triplet_objective(a1 in 0.0f64..3.14, b1 in 0.0f64..3.14, a2 in 0.0f64..3.14, b2 in 0.0f64..3.14, d in 0.0f64..2.0) {
        let trip = |a: f64, b: f64| (2.0 - 2.0 * a.cos()) - (2.0 - 2.0 * b.cos()) + d;
        let term = |a: f64, b: f64| adacon_loss(&ipn(a, b), &ipn_margins(d), Temperature::default()).unwrap().per_anchor[0];
        let (t1, t2) = (trip(a1, b1), trip(a2, b2));
        prop_assume!((t1 - t2).abs() > 1e-9);
        prop_assert_eq!(t1 > t2, term(a1, b1) > term(a2, b2));
    }

    #[test]
    fn zero_margins_reduce_to_supcon(seed in any::<u64>(), sources in 1usize..8, m in 1usize..4, s in 0.1f64..20.0) {
        prop_assume!(sources * m >= 2);
        let batch = grouped_batch(seed, sources, m, 5);
        let t = Temperature::new(s).unwrap();
        let zero = MarginMatrix::zeros(batch.labels());
        let a = adacon_loss(&batch, &zero, t).unwrap();
        let b = supcon_loss(&batch, t).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * b.value.abs().max(1.0));
        prop_assert!((&a.grad - &b.grad).iter().all(|g| g.abs() <= 1e-12));
    }

    #[test]
    fn contrastive_losses_are_permutation_invariant(seed in any::<u64>(), sources in 2usize..7, m in 1usize..4) {
        let batch = grouped_batch(seed, sources, m, 4);
        let perm = permutation(seed ^ 1, batch.len());
        let shuffled = batch.permuted(&perm);
        let table = EcdfTable::fit(batch.labels()).unwrap();
        let t = Temperature::default();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-10 * y.abs().max(1.0);

        let a = adacon_loss(&batch, &table.margin_matrix(batch.labels()).unwrap(), t).unwrap().value;
        let a2 = adacon_loss(&shuffled, &table.margin_matrix(shuffled.labels()).unwrap(), t).unwrap().value;
        prop_assert!(close(a, a2));
        prop_assert!(close(supcon_loss(&batch, t).unwrap().value, supcon_loss(&shuffled, t).unwrap().value));
        let tr = adaptive_triplet_loss(&batch, &mine_triplets(&batch), &table).unwrap().value;
        let tr2 = adaptive_triplet_loss(&shuffled, &mine_triplets(&shuffled), &table).unwrap().value;
        prop_assert!(close(tr, tr2));
        // The designated N-pair positive is unique only with two rows per source.
        if m == 2 {
            prop_assert!(close(npair_loss(&batch).unwrap().value, npair_loss(&shuffled).unwrap().value));
        }
    }

    #[test]
    fn loss_falls_with_positive_similarity_and_rises_with_negative(a in 0.05f64..3.1, b in 0.05f64..3.1, step in 0.001f64..0.05, d in 0.0f64..2.0) {
        let term = |a: f64, b: f64| adacon_loss(&ipn(a, b), &ipn_margins(d), Temperature::default()).unwrap().per_anchor[0];
        // Smaller angle to the positive means larger cosine.
        prop_assert!(term(a - step, b) < term(a, b));
        prop_assert!(term(a, b - step) > term(a, b));
    }

    #[test]
    fn gradient_signs_follow_decision_boundary(seed in any::<u64>(), sources in 2usize..6, s in 0.5f64..15.0) {
        // Two rows per source, so anchor 0 has exactly one positive (row 1).
        let b = 2 * sources;
        let batch = grouped_batch(seed, sources, 2, 2 * b);
        let table = EcdfTable::fit(batch.labels()).unwrap();
        let t = Temperature::new(s).unwrap();
        let z = batch.embeddings();
        for r in [
            adacon_loss(&batch, &table.margin_matrix(batch.labels()).unwrap(), t).unwrap(),
            supcon_loss(&batch, t).unwrap(),
        ] {
            // Moving row `k` along `v` with v ⟂ every row except 0 and k
            // changes cos(0, k) alone, at rate v·z_0 > 0.
            for (k, sign) in [(1usize, -1.0), (2, 1.0)] {
                let v = orthogonal_part(z, 0, &[0, k]);
                prop_assume!(v.dot(&z.row(0)) > 1e-6);
                let slope = r.grad.row(k).dot(&v);
                prop_assert!(slope * sign > 0.0, "k={} slope={}", k, slope);
            }
        }
    }

    #[test]
    fn rmse_never_below_mae(p in prop::collection::vec(-10.0f64..10.0, 1..50), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = p.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
        let m = regression_metrics(&p, &t).unwrap();
        prop_assert!(m.rmse >= m.mae && m.mae >= 0.0);
    }

    #[test]
    fn spearman_depends_only_on_ranks(x in prop::collection::vec(-5.0f64..5.0, 3..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = x.iter().map(|_| rng.random::<f64>()).collect();
        let fx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 - 1.0).collect();
        let fy: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        match (spearman(&x, &y), spearman(&fx, &fy)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }

    #[test]
    fn layout_is_rotation_invariant(seed in any::<u64>(), b in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_unit_rows(&mut rng, b, 4);
        let labels: Vec<f64> = (0..b).map(|i| i as f64).collect();
        // Random orthogonal matrix by Gram-Schmidt.
        let raw = random_unit_rows(&mut rng, 4, 4);
        let mut q = Array2::<f64>::zeros((4, 4));
        for i in 0..4 {
            let mut v = raw.row(i).to_owned();
            for j in 0..i {
                let proj = v.dot(&q.row(j));
                v.scaled_add(-proj, &q.row(j));
            }
            let n = v.dot(&v).sqrt();
            q.row_mut(i).assign(&(v / n));
        }
        let rotated = z.dot(&q.t());
        let l1 = angular_layout(&EmbeddingBatch::new(z, labels.clone(), (0..b).collect()).unwrap()).unwrap();
        let l2 = angular_layout(&EmbeddingBatch::unnormalized(rotated, labels, (0..b).collect()).unwrap()).unwrap();
        let mut a1: Vec<(usize, f64)> = l1.iter().map(|p| (p.index, p.angle)).collect();
        let mut a2: Vec<(usize, f64)> = l2.iter().map(|p| (p.index, p.angle)).collect();
        a1.sort_by_key(|p| p.0);
        a2.sort_by_key(|p| p.0);
        for (x, y) in a1.iter().zip(&a2) {
            prop_assert!((x.1 - y.1).abs() < 1e-9, "{:?} vs {:?}", x, y);
        }
    }
}

/// Component of row `row` orthogonal to every row not in `keep`.
fn orthogonal_part(z: &Array2<f64>, row: usize, keep: &[usize]) -> ndarray::Array1<f64> {
    let mut basis: Vec<ndarray::Array1<f64>> = Vec::new();
    for a in (0..z.nrows()).filter(|a| !keep.contains(a)) {
        let mut u = z.row(a).to_owned();
        for e in &basis {
            let c = u.dot(e);
            u.scaled_add(-c, e);
        }
        let n = u.dot(&u).sqrt();
        if n > 1e-10 {
            basis.push(u / n);
        }
    }
    let mut v = z.row(row).to_owned();
    for e in &basis {
        let c = v.dot(e);
        v.scaled_add(-c, e);
    }
    v
}

#[test]
fn margins_grow_with_label_distance() {
    let train: Vec<f64> = (0..100).map(f64::from).collect();
    let table = EcdfTable::fit(&train).unwrap();
    let ys = [3.0, 10.0, 40.0, 90.0];
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            for k in j + 1..ys.len() {
                assert!(table.margin(ys[i], ys[k]).unwrap() > table.margin(ys[i], ys[j]).unwrap());
            }
        }
    }
}
