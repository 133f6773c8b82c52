//! Independent re-evaluations of every loss and metric, written with plain
//! loops over `Vec<Vec<f64>>` and no library helpers.

use adacon::ecdf::{EcdfTable, MarginMatrix};
use adacon::evalviz::{angular_layout, pairwise_scatter, regression_metrics, spearman};
use adacon::losses::{
    adacon_loss, adaptive_triplet_loss, gradcheck::random_unit_rows, mine_triplets, npair_loss,
    regression_loss, supcon_loss, EmbeddingBatch, RegressionKind, Temperature,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rows(z: &Array2<f64>) -> Vec<Vec<f64>> {
    z.outer_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ecdf(train: &[f64], y: f64) -> f64 {
    train.iter().filter(|&&t| t <= y).count() as f64 / train.len() as f64
}

fn oracle_contrastive(z: &[Vec<f64>], y: &[f64], d: &dyn Fn(usize, usize) -> f64, s: f64) -> f64 {
    let b = z.len();
    let mut total = 0.0;
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&j| j != i && y[j] == y[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..b {
            if a != i {
                denom += (s * (dot(&z[i], &z[a]) + d(i, a))).exp();
            }
        }
        let mut acc = 0.0;
        for &p in &pos {
            acc += ((s * dot(&z[i], &z[p])).exp() / denom).ln();
        }
        total += -acc / pos.len() as f64;
    }
    total
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Batch with `b` rows drawn from `k` distinct labels.
fn random_batch(rng: &mut ChaCha8Rng, b: usize, dim: usize, k: usize) -> EmbeddingBatch {
    let values: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    let ids: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let labels = ids.iter().map(|&i| values[i]).collect();
    EmbeddingBatch::new(random_unit_rows(rng, b, dim), labels, ids).unwrap()
}

#[test]
fn adacon_matches_direct_evaluation_b6_d4() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let batch = random_batch(&mut rng, 6, 4, 3);
    let train: Vec<f64> = (0..40)
        .map(|_| rng.random::<f64>())
        .chain(batch.labels().iter().copied())
        .collect();
    let table = EcdfTable::fit(&train).unwrap();
    let margins = table.margin_matrix(batch.labels()).unwrap();
    let s = 7.5;
    let got = adacon_loss(&batch, &margins, Temperature::new(s).unwrap()).unwrap();

    let y = batch.labels().to_vec();
    let d = |i: usize, a: usize| 2.0 * (ecdf(&train, y[i]) - ecdf(&train, y[a])).abs();
    let want = oracle_contrastive(&rows(batch.embeddings()), &y, &d, s);
    assert!(close(got.value, want, 1e-12), "{} vs {want}", got.value);
}

#[test]
fn supcon_and_adacon_match_oracle_on_many_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let b = rng.random_range(2..=12);
        let dim = rng.random_range(2..=6);
        let batch = random_batch(&mut rng, b, dim, (b / 2).max(1));
        let s = rng.random_range(0.5..10.0);
        let temp = Temperature::new(s).unwrap();
        let z = rows(batch.embeddings());
        let y = batch.labels().to_vec();

        let sup = supcon_loss(&batch, temp).unwrap().value;
        assert!(close(sup, oracle_contrastive(&z, &y, &|_, _| 0.0, s), 1e-12));

        let table = EcdfTable::fit(&y).unwrap();
        let ada = adacon_loss(&batch, &table.margin_matrix(&y).unwrap(), temp).unwrap().value;
        let d = |i: usize, a: usize| 2.0 * (ecdf(&y, y[i]) - ecdf(&y, y[a])).abs();
        assert!(close(ada, oracle_contrastive(&z, &y, &d, s), 1e-12));
    }
}

#[test]
fn npair_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let b = rng.random_range(2..=12);
        let batch = random_batch(&mut rng, b, 5, (b / 2).max(1));
        let z = rows(batch.embeddings());
        let (y, ids) = (batch.labels(), batch.source_ids());
        let mut want = 0.0;
        for i in 0..b {
            let Some(p) = (0..b).find(|&j| j != i && (ids[j] == ids[i] || y[j] == y[i])) else {
                continue;
            };
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| dot(&z[i], &z[a]).exp()).sum();
            want -= (dot(&z[i], &z[p]).exp() / denom).ln();
        }
        assert!(close(npair_loss(&batch).unwrap().value, want, 1e-12));
    }
}

#[test]
fn triplet_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let b = rng.random_range(3..=10);
        let batch = random_batch(&mut rng, b, 4, (b / 2).max(2));
        let y = batch.labels().to_vec();
        let train: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let table = EcdfTable::fit(&train).unwrap();
        let triplets = mine_triplets(&batch);
        let z = rows(batch.embeddings());
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let mut want = 0.0;
        let mut count = 0;
        for i in 0..b {
            for p in 0..b {
                if p == i || y[p] != y[i] {
                    continue;
                }
                for n in 0..b {
                    if y[n] == y[i] {
                        continue;
                    }
                    count += 1;
                    let m = 2.0 * (ecdf(&train, y[i]) - ecdf(&train, y[n])).abs();
                    want += (sq(&z[i], &z[p]) - sq(&z[i], &z[n]) + m).max(0.0);
                }
            }
        }
        assert_eq!(triplets.len(), count);
        let got = adaptive_triplet_loss(&batch, &triplets, &table).unwrap().value;
        assert!(close(got, want, 1e-12));
    }
}

#[test]
fn regression_losses_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta = rng.random_range(0.01..0.5);
        let mut l1 = 0.0;
        let mut mse = 0.0;
        let mut hub = 0.0;
        for k in 0..n {
            let r: f64 = p[k] - t[k];
            l1 += r.abs();
            mse += r * r;
            hub += if r.abs() <= delta { 0.5 * r * r } else { delta * (r.abs() - 0.5 * delta) };
        }
        let nf = n as f64;
        let v = |k| regression_loss(k, &p, &t).unwrap().value;
        assert!(close(v(RegressionKind::L1), l1 / nf, 1e-12));
        assert!(close(v(RegressionKind::Mse), mse / nf, 1e-12));
        assert!(close(v(RegressionKind::Huber { delta }), hub / nf, 1e-12));
    }
}

#[test]
fn metrics_match_spreadsheet_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 37;
    let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mean = t.iter().sum::<f64>() / n as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut tot = 0.0;
    for k in 0..n {
        abs += (p[k] - t[k]).abs();
        sq += (p[k] - t[k]).powi(2);
        tot += (t[k] - mean).powi(2);
    }
    let m = regression_metrics(&p, &t).unwrap();
    assert!((m.mae - abs / n as f64).abs() < 1e-10);
    assert!((m.rmse - (sq / n as f64).sqrt()).abs() < 1e-10);
    assert!((m.r2.unwrap() - (1.0 - sq / tot)).abs() < 1e-10);
}

/// Spearman ρ through the textbook `1 − 6Σd²/(n(n²−1))` formula, valid
/// without ties.
fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut r = vec![0.0; v.len()];
        for i in 0..v.len() {
            r[i] = v.iter().filter(|&&w| w < v[i]).count() as f64 + 1.0;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn scatter_rho_matches_rank_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = 14;
    // Powers of two make every pairwise ECDF distance distinct.
    let labels: Vec<f64> = (0..b).map(|k| (1u64 << k) as f64).collect();
    let train: Vec<f64> = (0..(1u64 << b)).map(|v| v as f64).collect();
    let table = EcdfTable::fit(&train).unwrap();
    let batch = EmbeddingBatch::new(random_unit_rows(&mut rng, b, 5), labels, (0..b).collect()).unwrap();
    let diag = pairwise_scatter(&batch, &table, usize::MAX, 0).unwrap();
    assert_eq!(diag.len(), b * (b - 1) / 2);
    let (x, y): (Vec<f64>, Vec<f64>) = diag.pairs.iter().copied().unzip();
    let want = spearman_no_ties(&x, &y);
    assert!((diag.spearman_rho.unwrap() - want).abs() < 1e-10);
    assert!((spearman(&x, &y).unwrap() - want).abs() < 1e-10);
}

#[test]
fn layout_of_coplanar_vectors() {
    let deg = std::f64::consts::PI / 180.0;
    let at = |a: f64| [a.cos(), a.sin(), 0.0];
    let z = [at(0.0), at(40.0 * deg), at(90.0 * deg)];
    let batch = EmbeddingBatch::new(
        Array2::from_shape_fn((3, 3), |(i, k)| z[i][k]),
        vec![0.0, 1.0, 2.0],
        vec![0, 1, 2],
    )
    .unwrap();
    let angles: Vec<f64> = angular_layout(&batch).unwrap().iter().map(|p| p.angle).collect();
    for (got, want) in angles.iter().zip([0.0, 0.698_131_700_797_731_8, std::f64::consts::FRAC_PI_2]) {
        assert!((got - want).abs() < 1e-9, "{angles:?}");
    }
}

#[test]
fn margin_matrix_matches_pairwise_counts() {
    let train = [0.3, 0.1, 0.1, 0.9, 0.5, 0.7];
    let table = EcdfTable::fit(&train).unwrap();
    let batch = [0.1, 0.5, 0.9, 0.2];
    let m: MarginMatrix = table.margin_matrix(&batch).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let want = 2.0 * (ecdf(&train, batch[i]) - ecdf(&train, batch[j])).abs();
            assert!((m.get(i, j) - want).abs() < 1e-15);
        }
    }
    assert!((m.values()[[0, 2]] - 4.0 / 3.0).abs() < 1e-15);
}
