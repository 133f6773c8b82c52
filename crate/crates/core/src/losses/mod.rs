//! Contrastive and regression losses with analytic input gradients.
//!
//! Contrastive losses take already-normalized embeddings and return the
//! gradient with respect to those embeddings; chaining through the
//! normalization is the model's job. Regression losses return the gradient
//! with respect to the predictions as a `B×1` matrix.

mod contrastive;
pub mod gradcheck;
mod regression;
mod triplet;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use contrastive::{adacon_loss, npair_loss, supcon_loss};
pub use gradcheck::{check_loss, finite_difference_check, relative_error, GradCheckCase};
pub use regression::{regression_loss, RegressionKind};
pub use triplet::{adaptive_triplet_loss, mine_triplets, triplet_loss_with_margins, Triplet};

/// Allowed deviation of an embedding norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Default contrastive scale `s` (temperature 0.1).
pub const DEFAULT_SCALE: f64 = 10.0;

/// A batch of projected features with their labels and source sample ids.
///
/// Positives of row `i` are the other rows whose label equals `labels[i]`
/// (exact equality unless a tolerance is set); negatives are all rows with a
/// different label. Both sets are derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    embeddings: Array2<f64>,
    labels: Vec<f64>,
    source_ids: Vec<usize>,
    label_tolerance: f64,
}

impl EmbeddingBatch {
    /// Builds a batch of unit-norm embeddings.
    pub fn new(embeddings: Array2<f64>, labels: Vec<f64>, source_ids: Vec<usize>) -> Result<Self> {
        let batch = Self::unnormalized(embeddings, labels, source_ids)?;
        for (row, z) in batch.embeddings.rows().into_iter().enumerate() {
            let norm = z.dot(&z).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(batch)
    }

    /// Builds a batch without the unit-norm check, e.g. for a triplet loss on
    /// raw features.
    pub fn unnormalized(
        embeddings: Array2<f64>,
        labels: Vec<f64>,
        source_ids: Vec<usize>,
    ) -> Result<Self> {
        let b = embeddings.nrows();
        if labels.len() != b || source_ids.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "{} embeddings, {} labels, {} source ids",
                b,
                labels.len(),
                source_ids.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|y| !y.is_finite()) {
            return Err(Error::InvalidLabel(bad));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding entry".into()));
        }
        Ok(Self {
            embeddings,
            labels,
            source_ids,
            label_tolerance: 0.0,
        })
    }

    /// Treats labels within `tol` of each other as equal. Off (zero) by default.
    pub fn with_label_tolerance(mut self, tol: f64) -> Self {
        self.label_tolerance = tol.max(0.0);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn same_label(&self, i: usize, j: usize) -> bool {
        let (a, b) = (self.labels[i], self.labels[j]);
        if self.label_tolerance == 0.0 {
            a == b
        } else {
            (a - b).abs() <= self.label_tolerance
        }
    }

    pub fn positives(&self, i: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| j != i && self.same_label(i, j))
            .collect()
    }

    pub fn negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.same_label(i, j)).collect()
    }

    /// Same labels and ids with replaced embeddings; no norm check. Used by
    /// finite-difference probing, which leaves the unit sphere.
    pub(crate) fn with_embeddings(&self, embeddings: Array2<f64>) -> Self {
        debug_assert_eq!(embeddings.dim(), self.embeddings.dim());
        Self {
            embeddings,
            labels: self.labels.clone(),
            source_ids: self.source_ids.clone(),
            label_tolerance: self.label_tolerance,
        }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let embeddings =
            Array2::from_shape_fn((perm.len(), d), |(i, k)| self.embeddings[[perm[i], k]]);
        Self {
            embeddings,
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
            source_ids: perm.iter().map(|&p| self.source_ids[p]).collect(),
            label_tolerance: self.label_tolerance,
        }
    }

    fn require_contrastive(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::BatchTooSmall {
                got: self.len(),
                need: 2,
            });
        }
        Ok(())
    }
}

/// Scalar loss, its per-anchor decomposition, and the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Per-anchor terms for contrastive losses, per-triplet terms for the
    /// triplet loss, per-sample terms for regression losses.
    pub per_anchor: Vec<f64>,
    /// `B×d` for embedding losses, `B×1` for regression losses.
    pub grad: Array2<f64>,
    /// Anchors that had no positive and contributed zero.
    pub skipped_anchors: usize,
}

impl LossResult {
    pub(crate) fn from_terms(per_anchor: Vec<f64>, grad: Array2<f64>, skipped: usize) -> Self {
        Self {
            value: per_anchor.iter().sum(),
            per_anchor,
            grad,
            skipped_anchors: skipped,
        }
    }

    /// Gradient of a regression loss as a flat vector.
    pub fn grad_vector(&self) -> Vec<f64> {
        self.grad.iter().copied().collect()
    }
}

/// Contrastive scale factor `s`; larger means a sharper softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidParameter(format!("scale s must be > 0, got {s}")));
        }
        Ok(Self(s))
    }

    pub fn scale(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_SCALE)
    }
}

/// Every loss the crate knows, by its command-line name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    AdaCon,
    SupCon,
    NPair,
    Triplet,
    L1,
    Mse,
    Huber(f64),
}

/// Huber threshold used when none is given.
pub const DEFAULT_HUBER_DELTA: f64 = 0.05;

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::AdaCon,
        LossKind::SupCon,
        LossKind::NPair,
        LossKind::Triplet,
        LossKind::L1,
        LossKind::Mse,
        LossKind::Huber(DEFAULT_HUBER_DELTA),
    ];

    pub fn is_regression(self) -> bool {
        matches!(self, LossKind::L1 | LossKind::Mse | LossKind::Huber(_))
    }

    pub fn regression_kind(self) -> Option<RegressionKind> {
        match self {
            LossKind::L1 => Some(RegressionKind::L1),
            LossKind::Mse => Some(RegressionKind::Mse),
            LossKind::Huber(delta) => Some(RegressionKind::Huber { delta }),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::AdaCon => "adacon",
            LossKind::SupCon => "supcon",
            LossKind::NPair => "npair",
            LossKind::Triplet => "triplet",
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
            LossKind::Huber(_) => "huber",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "adacon" => LossKind::AdaCon,
            "supcon" => LossKind::SupCon,
            "npair" => LossKind::NPair,
            "triplet" | "adaptive_triplet" => LossKind::Triplet,
            "l1" => LossKind::L1,
            "mse" => LossKind::Mse,
            "huber" => LossKind::Huber(DEFAULT_HUBER_DELTA),
            other => return Err(Error::InvalidParameter(format!("unknown loss '{other}'"))),
        })
    }
}
