//! Empirical CDF of training labels and the adaptive margins built on it.
//!
//! `φ(y) = #{ j : y_j ≤ y } / n` over the training labels. The margin between
//! two batch samples is `2·|φ(y_i) − φ(y_j)|`, so it encodes both the label
//! order and the fraction of training mass lying between the two labels.
//!
//! Everything is computed from integer counts, which makes margins exactly
//! invariant under any strictly increasing relabeling.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sorted training labels. Immutable after [`EcdfTable::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfTable {
    sorted: Vec<f64>,
}

impl EcdfTable {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        if let Some(&bad) = labels.iter().find(|y| !y.is_finite()) {
            return Err(Error::InvalidLabel(bad));
        }
        let mut sorted = labels.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn sorted_labels(&self) -> &[f64] {
        &self.sorted
    }

    /// Number of training labels `≤ y`.
    pub fn count_le(&self, y: f64) -> Result<usize> {
        if !y.is_finite() {
            return Err(Error::InvalidLabel(y));
        }
        Ok(self.sorted.partition_point(|&v| v <= y))
    }

    /// `φ(y)`. Zero below the fitted range, one at or above its maximum.
    pub fn transform(&self, y: f64) -> Result<f64> {
        Ok(self.count_le(y)? as f64 / self.sorted.len() as f64)
    }

    pub fn transform_all(&self, ys: &[f64]) -> Result<Vec<f64>> {
        ys.iter().map(|&y| self.transform(y)).collect()
    }

    /// `2·|φ(a) − φ(b)|`.
    pub fn margin(&self, a: f64, b: f64) -> Result<f64> {
        let (ca, cb) = (self.count_le(a)?, self.count_le(b)?);
        Ok(self.margin_from_counts(ca, cb))
    }

    fn margin_from_counts(&self, ca: usize, cb: usize) -> f64 {
        2.0 * ca.abs_diff(cb) as f64 / self.sorted.len() as f64
    }

    pub fn margin_matrix(&self, batch_labels: &[f64]) -> Result<MarginMatrix> {
        let counts = batch_labels
            .iter()
            .map(|&y| self.count_le(y))
            .collect::<Result<Vec<_>>>()?;
        let b = counts.len();
        let values = Array2::from_shape_fn((b, b), |(i, j)| {
            self.margin_from_counts(counts[i], counts[j])
        });
        Ok(MarginMatrix {
            values,
            batch_labels: batch_labels.to_vec(),
        })
    }
}

/// Pairwise adaptive margins over one batch.
///
/// Symmetric with a zero diagonal; equal labels always get a zero margin.
/// Entries lie in `[0, 2)` for labels inside the fitted range and reach 2
/// only when one label is below every training label and the other is at or
/// above the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginMatrix {
    values: Array2<f64>,
    batch_labels: Vec<f64>,
}

impl MarginMatrix {
    /// All-zero margins; reduces AdaCon to SupCon.
    pub fn zeros(batch_labels: &[f64]) -> Self {
        let b = batch_labels.len();
        Self {
            values: Array2::zeros((b, b)),
            batch_labels: batch_labels.to_vec(),
        }
    }

    /// Wraps an arbitrary square matrix. Used to force margins in tests and
    /// experiments; no symmetry check is applied.
    pub fn from_values(values: Array2<f64>, batch_labels: &[f64]) -> Result<Self> {
        let b = batch_labels.len();
        if values.dim() != (b, b) {
            return Err(Error::DimensionMismatch(format!(
                "margin values {:?} for {} labels",
                values.dim(),
                b
            )));
        }
        Ok(Self {
            values,
            batch_labels: batch_labels.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.batch_labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn batch_labels(&self) -> &[f64] {
        &self.batch_labels
    }

    /// Reorders rows and columns: entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let b = perm.len();
        Self {
            values: Array2::from_shape_fn((b, b), |(i, j)| self.values[[perm[i], perm[j]]]),
            batch_labels: perm.iter().map(|&p| self.batch_labels[p]).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EcdfTable {
        EcdfTable::fit(&[0.5, 0.7, 0.7, 0.9]).unwrap()
    }

    #[test]
    fn fit_counts_ties_with_le() {
        let t = table();
        let phi = t.transform_all(&[0.5, 0.7, 0.7, 0.9]).unwrap();
        assert_eq!(phi, vec![0.25, 0.75, 0.75, 1.0]);
    }

    #[test]
    fn single_label_maps_to_one() {
        for y in [-3.0, 0.0, 1e9] {
            let t = EcdfTable::fit(&[y]).unwrap();
            assert_eq!(t.transform(y).unwrap(), 1.0);
        }
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(EcdfTable::fit(&[]), Err(Error::EmptyLabelSet)));
        assert!(matches!(
            EcdfTable::fit(&[1.0, f64::NAN]),
            Err(Error::InvalidLabel(_))
        ));
        assert!(matches!(
            EcdfTable::fit(&[f64::INFINITY]),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn transform_in_and_out_of_range() {
        let t = table();
        assert_eq!(t.transform(0.6).unwrap(), 0.25);
        assert_eq!(t.transform(0.4).unwrap(), 0.0);
        assert_eq!(t.transform(5.0).unwrap(), 1.0);
        assert!(matches!(t.transform(f64::NAN), Err(Error::InvalidLabel(_))));
    }

    #[test]
    fn margin_examples() {
        let t = table();
        let m = t.margin_matrix(&[0.5, 0.9]).unwrap();
        assert_eq!(m.get(0, 1), 1.5);
        assert_eq!(m.get(1, 0), 1.5);
        assert_eq!(m.get(0, 0), 0.0);
        let m = t.margin_matrix(&[0.7, 0.7]).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn margin_under_exp_relabeling() {
        let train = [0.5, 0.7, 0.7, 0.9];
        let batch = [0.9, 0.5, 0.7, 0.6, 2.0];
        let exp = |v: &[f64]| v.iter().map(|y| y.exp()).collect::<Vec<_>>();
        let a = EcdfTable::fit(&train).unwrap().margin_matrix(&batch).unwrap();
        let b = EcdfTable::fit(&exp(&train))
            .unwrap()
            .margin_matrix(&exp(&batch))
            .unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn margin_propagates_invalid_label() {
        assert!(table().margin_matrix(&[0.5, f64::NAN]).is_err());
    }

    #[test]
    fn from_values_checks_shape() {
        assert!(MarginMatrix::from_values(Array2::zeros((2, 3)), &[0.0, 1.0]).is_err());
    }
}
