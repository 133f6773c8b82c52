use ndarray::Array2;

use super::{EmbeddingBatch, LossResult};
use crate::ecdf::EcdfTable;
use crate::error::{Error, Result};

/// Row indices of one (anchor, positive, negative) triplet within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Every valid triplet: each anchor with each of its positives and each of
/// its negatives.
pub fn mine_triplets(batch: &EmbeddingBatch) -> Vec<Triplet> {
    let mut out = Vec::new();
    for anchor in 0..batch.len() {
        let positives = batch.positives(anchor);
        if positives.is_empty() {
            continue;
        }
        let negatives = batch.negatives(anchor);
        for &positive in &positives {
            for &negative in &negatives {
                out.push(Triplet {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
    }
    out
}

/// Hinge triplet loss whose margin is `2·|φ(y_anchor) − φ(y_negative)|`.
///
/// `value = Σ_t max(0, ‖z_a − z_p‖² − ‖z_a − z_n‖² + margin_t)`. Works on
/// whatever embeddings the batch holds, normalized or not.
pub fn adaptive_triplet_loss(
    batch: &EmbeddingBatch,
    triplets: &[Triplet],
    table: &EcdfTable,
) -> Result<LossResult> {
    let labels = batch.labels();
    let margins = triplets
        .iter()
        .map(|t| {
            check_indices(batch, t)?;
            table.margin(labels[t.anchor], labels[t.negative])
        })
        .collect::<Result<Vec<_>>>()?;
    triplet_loss_with_margins(batch, triplets, &margins)
}

/// Hinge triplet loss with caller-supplied margins, one per triplet.
pub fn triplet_loss_with_margins(
    batch: &EmbeddingBatch,
    triplets: &[Triplet],
    margins: &[f64],
) -> Result<LossResult> {
    if margins.len() != triplets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} triplets, {} margins",
            triplets.len(),
            margins.len()
        )));
    }
    let z = batch.embeddings();
    let mut grad = Array2::<f64>::zeros(z.dim());
    let mut terms = Vec::with_capacity(triplets.len());

    for (t, &margin) in triplets.iter().zip(margins) {
        check_indices(batch, t)?;
        let (a, p, n) = (z.row(t.anchor), z.row(t.positive), z.row(t.negative));
        let ap = &a - &p;
        let an = &a - &n;
        let hinge = ap.dot(&ap) - an.dot(&an) + margin;
        if hinge > 0.0 {
            terms.push(hinge);
            // d/da = 2(a−p) − 2(a−n), d/dp = −2(a−p), d/dn = 2(a−n)
            grad.row_mut(t.anchor).scaled_add(2.0, &ap);
            grad.row_mut(t.anchor).scaled_add(-2.0, &an);
            grad.row_mut(t.positive).scaled_add(-2.0, &ap);
            grad.row_mut(t.negative).scaled_add(2.0, &an);
        } else {
            terms.push(0.0);
        }
    }
    Ok(LossResult::from_terms(terms, grad, 0))
}

fn check_indices(batch: &EmbeddingBatch, t: &Triplet) -> Result<()> {
    let b = batch.len();
    if t.anchor >= b || t.positive >= b || t.negative >= b {
        return Err(Error::DimensionMismatch(format!(
            "triplet {t:?} out of range for batch of {b}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn geometry() -> (EmbeddingBatch, Vec<Triplet>) {
        let batch = EmbeddingBatch::new(
            array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![0.5, 0.5, 0.9],
            vec![0, 0, 1],
        )
        .unwrap();
        let t = vec![Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        (batch, t)
    }

    #[test]
    fn inactive_and_active_hinge() {
        let (batch, t) = geometry();
        let r = triplet_loss_with_margins(&batch, &t, &[1.5]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
        let r = triplet_loss_with_margins(&batch, &t, &[2.5]).unwrap();
        assert!((r.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn margin_from_table() {
        let (batch, t) = geometry();
        let table = EcdfTable::fit(&[0.5, 0.7, 0.7, 0.9]).unwrap();
        // margin 2·|0.25 − 1| = 1.5 → inactive
        let r = adaptive_triplet_loss(&batch, &t, &table).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn mismatches_are_errors() {
        let (batch, t) = geometry();
        assert!(triplet_loss_with_margins(&batch, &t, &[]).is_err());
        let bad = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 3,
        }];
        assert!(triplet_loss_with_margins(&batch, &bad, &[1.0]).is_err());
    }

    #[test]
    fn mining_covers_all_valid_triplets() {
        let (batch, _) = geometry();
        let t = mine_triplets(&batch);
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.negative == 2));
    }
}
