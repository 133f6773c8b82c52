//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{
    adacon_loss, adaptive_triplet_loss, mine_triplets, npair_loss, regression_loss, supcon_loss,
    EmbeddingBatch, LossKind, Temperature, Triplet,
};
use crate::ecdf::EcdfTable;
use crate::error::{Error, Result};

/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares `analytic` against a coordinate-wise central difference of `f`
/// around `point` and returns the largest [`relative_error`].
pub fn finite_difference_check<F>(
    point: &Array2<f64>,
    analytic: &Array2<f64>,
    step: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&Array2<f64>) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!("step must be > 0, got {step}")));
    }
    if point.dim() != analytic.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point {:?}, gradient {:?}",
            point.dim(),
            analytic.dim()
        )));
    }
    let mut probe = point.clone();
    let mut worst = 0.0_f64;
    for idx in 0..point.len() {
        let (r, c) = (idx / point.ncols(), idx % point.ncols());
        let x = point[[r, c]];
        probe[[r, c]] = x + step;
        let up = f(&probe)?;
        probe[[r, c]] = x - step;
        let down = f(&probe)?;
        probe[[r, c]] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NotDifferentiable(format!(
                "non-finite loss when perturbing coordinate ({r}, {c})"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[[r, c]], numeric));
    }
    Ok(worst)
}

/// One random point at which every loss in [`LossKind`] can be evaluated.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub batch: EmbeddingBatch,
    pub table: EcdfTable,
    pub temperature: Temperature,
    pub triplets: Vec<Triplet>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
}

impl GradCheckCase {
    /// Batch size in `[3, max_batch]`, dimension in `[2, max_dim]`, labels
    /// drawn from a few distinct values so that most anchors have positives.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_batch: usize, max_dim: usize) -> Self {
        let b = rng.random_range(3..=max_batch.max(3));
        let d = rng.random_range(2..=max_dim.max(2));
        let distinct = (b / 2).max(2);
        let values: Vec<f64> = (0..distinct).map(|_| rng.random::<f64>() * 3.0).collect();
        let mut source_ids = Vec::with_capacity(b);
        let labels: Vec<f64> = (0..b)
            .map(|_| {
                let k = rng.random_range(0..distinct);
                source_ids.push(k);
                values[k]
            })
            .collect();
        let embeddings = random_unit_rows(rng, b, d);
        let batch =
            EmbeddingBatch::new(embeddings, labels.clone(), source_ids).expect("valid batch");

        let mut train: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 3.0).collect();
        train.extend_from_slice(&values);
        let table = EcdfTable::fit(&train).expect("finite labels");
        let temperature = Temperature::new(rng.random_range(0.5..10.0)).expect("positive");
        let triplets = mine_triplets(&batch);
        let predictions = (0..b).map(|_| rng.random_range(-1.0..4.0)).collect();
        Self {
            batch,
            table,
            temperature,
            triplets,
            predictions,
            targets: labels,
        }
    }

    fn margins(&self) -> Result<crate::ecdf::MarginMatrix> {
        self.table.margin_matrix(self.batch.labels())
    }

    fn embedding_loss(&self, kind: LossKind, batch: &EmbeddingBatch) -> Result<super::LossResult> {
        match kind {
            LossKind::AdaCon => adacon_loss(batch, &self.margins()?, self.temperature),
            LossKind::SupCon => supcon_loss(batch, self.temperature),
            LossKind::NPair => npair_loss(batch),
            LossKind::Triplet => adaptive_triplet_loss(batch, &self.triplets, &self.table),
            _ => unreachable!("regression kinds handled separately"),
        }
    }
}

/// Runs [`finite_difference_check`] for one loss at one case.
pub fn check_loss(kind: LossKind, case: &GradCheckCase, step: f64) -> Result<f64> {
    if let Some(reg) = kind.regression_kind() {
        let analytic = regression_loss(reg, &case.predictions, &case.targets)?.grad;
        let point = column(&case.predictions);
        return finite_difference_check(&point, &analytic, step, |p| {
            let preds: Vec<f64> = p.iter().copied().collect();
            Ok(regression_loss(reg, &preds, &case.targets)?.value)
        });
    }
    let analytic = case.embedding_loss(kind, &case.batch)?.grad;
    finite_difference_check(case.batch.embeddings(), &analytic, step, |e| {
        let probed = case.batch.with_embeddings(e.clone());
        Ok(case.embedding_loss(kind, &probed)?.value)
    })
}

/// `rows × dim` matrix of independent uniformly distributed unit vectors.
pub fn random_unit_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, dim), || rng.sample::<f64, _>(StandardNormal));
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column shape")
}
