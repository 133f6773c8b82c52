use ndarray::Array2;

use super::{EmbeddingBatch, LossResult, Temperature};
use crate::ecdf::MarginMatrix;
use crate::error::{Error, Result};

/// Adaptive-margin contrastive loss.
///
/// For every anchor `i` with at least one positive,
///
/// ```text
/// term_i = −1/|P(i)| Σ_{p∈P(i)} log( exp(s·z_i·z_p) / Σ_{a≠i} exp(s·(z_i·z_a + d_ia)) )
/// ```
///
/// and `value = Σ_i term_i`. Anchors without positives contribute zero and
/// are counted in [`LossResult::skipped_anchors`].
pub fn adacon_loss(
    batch: &EmbeddingBatch,
    margins: &MarginMatrix,
    temp: Temperature,
) -> Result<LossResult> {
    if margins.size() != batch.len() {
        return Err(Error::DimensionMismatch(format!(
            "margin matrix for {} rows, batch has {}",
            margins.size(),
            batch.len()
        )));
    }
    margin_softmax(batch, Some(margins), temp.scale())
}

/// Supervised contrastive loss with each distinct label as its own class.
/// Identical to [`adacon_loss`] with all margins zero.
pub fn supcon_loss(batch: &EmbeddingBatch, temp: Temperature) -> Result<LossResult> {
    margin_softmax(batch, None, temp.scale())
}

/// Multi-class N-pair loss: one designated positive per anchor, unit scale.
///
/// The designated positive of `i` is the first other row (in batch order)
/// that shares its source id or its label. With more than one candidate the
/// choice depends on row order.
pub fn npair_loss(batch: &EmbeddingBatch) -> Result<LossResult> {
    batch.require_contrastive()?;
    let b = batch.len();
    let z = batch.embeddings();
    let gram = z.dot(&z.t());
    let mut coeff = Array2::<f64>::zeros((b, b));
    let mut terms = vec![0.0; b];
    let mut skipped = 0;
    let mut logits = Vec::with_capacity(b);

    for i in 0..b {
        let Some(p) = (0..b).find(|&j| {
            j != i && (batch.source_ids()[j] == batch.source_ids()[i] || batch.same_label(i, j))
        }) else {
            skipped += 1;
            continue;
        };
        logits.clear();
        logits.extend((0..b).filter(|&a| a != i).map(|a| gram[[i, a]]));
        let (lse, max) = log_sum_exp(&logits);
        terms[i] = lse - gram[[i, p]];
        let denom = (lse - max).exp();
        for a in (0..b).filter(|&a| a != i) {
            coeff[[i, a]] = (gram[[i, a]] - max).exp() / denom;
        }
        coeff[[i, p]] -= 1.0;
    }
    Ok(LossResult::from_terms(terms, symmetric_grad(&coeff, z), skipped))
}

fn margin_softmax(
    batch: &EmbeddingBatch,
    margins: Option<&MarginMatrix>,
    s: f64,
) -> Result<LossResult> {
    batch.require_contrastive()?;
    let b = batch.len();
    let z = batch.embeddings();
    let gram = z.dot(&z.t());
    let margin = |i: usize, a: usize| margins.map_or(0.0, |m| m.get(i, a));

    let mut coeff = Array2::<f64>::zeros((b, b));
    let mut terms = vec![0.0; b];
    let mut skipped = 0;
    let mut logits = Vec::with_capacity(b);

    for i in 0..b {
        let positives = batch.positives(i);
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        logits.clear();
        logits.extend(
            (0..b)
                .filter(|&a| a != i)
                .map(|a| s * (gram[[i, a]] + margin(i, a))),
        );
        let (lse, max) = log_sum_exp(&logits);
        let inv_p = 1.0 / positives.len() as f64;
        terms[i] = positives
            .iter()
            .map(|&p| lse - s * gram[[i, p]])
            .sum::<f64>()
            * inv_p;

        // d term_i / d cos(i, a) = s·softmax_a − s·[a ∈ P(i)]/|P(i)|
        let denom = (lse - max).exp();
        for (k, a) in (0..b).filter(|&a| a != i).enumerate() {
            coeff[[i, a]] = s * (logits[k] - max).exp() / denom;
        }
        for &p in &positives {
            coeff[[i, p]] -= s * inv_p;
        }
    }
    Ok(LossResult::from_terms(terms, symmetric_grad(&coeff, z), skipped))
}

/// Returns `(log Σ exp(x), max x)`.
fn log_sum_exp(xs: &[f64]) -> (f64, f64) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    (max + sum.ln(), max)
}

/// Gradient of `Σ_{i,a} C_ia · z_i·z_a` with respect to `Z`.
fn symmetric_grad(coeff: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    (coeff + &coeff.t()).dot(z)
}
