//! Regression metrics and feature-space diagnostics.
//!
//! The scatter diagnostic pairs the ECDF label distance of two samples with
//! the cosine similarity of their embeddings; a representation that respects
//! label order shows a clear downward trend (negative Spearman ρ). The
//! angular layout flattens embeddings onto a half-plane for plotting.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ecdf::EcdfTable;
use crate::error::{Error, Result};
use crate::losses::EmbeddingBatch;

/// Default number of sampled pairs for [`pairwise_scatter`].
pub const DEFAULT_SCATTER_PAIRS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub n: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mae={:.6} rmse={:.6} r2={} n={}",
            self.mae,
            self.rmse,
            fmt_optional(self.r2),
            self.n
        )
    }
}

/// Formats an optional statistic, using `undefined` for `None`.
pub fn fmt_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Result<MetricsReport> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions, {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        let r = p - t;
        abs += r.abs();
        sq += r * r;
    }
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|&t| (t - mean) * (t - mean)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot);
    Ok(MetricsReport {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        r2,
        n: targets.len(),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` if either input is constant or the
/// inputs have fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `(ECDF label distance, cosine similarity)` pairs with their Spearman ρ.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterDiagnostic {
    pub pairs: Vec<(f64, f64)>,
    pub spearman_rho: Option<f64>,
}

impl ScatterDiagnostic {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Samples `n_pairs` distinct unordered row pairs uniformly without
/// replacement (all pairs if there are fewer).
pub fn pairwise_scatter(
    batch: &EmbeddingBatch,
    table: &EcdfTable,
    n_pairs: usize,
    seed: u64,
) -> Result<ScatterDiagnostic> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b, need: 2 });
    }
    let total = b * (b - 1) / 2;
    let linear: Vec<usize> = if n_pairs >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, n_pairs).into_vec()
    };
    let counts = batch
        .labels()
        .iter()
        .map(|&y| table.count_le(y))
        .collect::<Result<Vec<_>>>()?;
    let n = table.len() as f64;
    let pairs: Vec<(f64, f64)> = linear
        .into_iter()
        .map(|k| {
            let (i, j) = unrank_pair(k, b);
            let dist = counts[i].abs_diff(counts[j]) as f64 / n;
            let sim = batch.embedding(i).dot(&batch.embedding(j));
            (dist, sim)
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(ScatterDiagnostic {
        spearman_rho: spearman(&xs, &ys),
        pairs,
    })
}

/// Maps `k ∈ [0, b(b−1)/2)` to the k-th pair `(i, j)`, `i < j`, in row-major
/// order of the strict upper triangle.
fn unrank_pair(mut k: usize, b: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = b - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutPoint {
    /// Radians in `[0, π]`.
    pub angle: f64,
    pub label: f64,
    pub index: usize,
}

/// Angle between two vectors, `2·atan2(‖a‖b‖ − b‖a‖‖, ‖a‖b‖ + b‖a‖‖)`.
///
/// Equal to `arccos(cos θ)` but accurate near 0 and π, where `arccos` of a
/// rounded dot product loses half the digits.
pub fn angle_between(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    let u = &a * nb;
    let v = &b * na;
    let diff = &u - &v;
    let sum = &u + &v;
    2.0 * diff.dot(&diff).sqrt().atan2(sum.dot(&sum).sqrt())
}

/// Places the least-similar pair at angles `0` and `θ(e₁, e₂)` and every
/// other sample at its angle to `e₁`; returns points sorted by angle.
pub fn angular_layout(batch: &EmbeddingBatch) -> Result<Vec<LayoutPoint>> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { got: b, need: 2 });
    }
    let z = batch.embeddings();
    let gram = z.dot(&z.t());
    let mut first = (0, 1);
    for i in 0..b {
        for j in i + 1..b {
            if gram[[i, j]] < gram[[first.0, first.1]] {
                first = (i, j);
            }
        }
    }
    let anchor = z.row(first.0);
    let mut points: Vec<LayoutPoint> = (0..b)
        .map(|k| LayoutPoint {
            angle: if k == first.0 {
                0.0
            } else {
                angle_between(z.row(k), anchor)
            },
            label: batch.labels()[k],
            index: k,
        })
        .collect();
    points.sort_by(|p, q| p.angle.total_cmp(&q.angle).then(p.index.cmp(&q.index)));
    Ok(points)
}
