//! Manifold alignment losses: entrywise L1 agreement between the Gram
//! matrices of a frozen and a tuned feature set, at batch level (global) and
//! per-sample token level (local), plus the analytic gradient through row
//! normalization.

use crate::linalg::{self, FeatureMatrix};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarError {
    #[error("paired feature sets must share a shape: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("token lists must have equal length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Batch-level [CLS] features of the same samples through the frozen and the
/// tuned model. Row i of both sides refers to the same sample.
#[derive(Debug, Clone)]
pub struct BatchPair {
    frozen_cls: FeatureMatrix,
    tuned_cls: FeatureMatrix,
}

impl BatchPair {
    pub fn new(frozen_cls: FeatureMatrix, tuned_cls: FeatureMatrix) -> Result<Self, MarError> {
        if frozen_cls.data().dim() != tuned_cls.data().dim() {
            return Err(MarError::ShapeMismatch {
                left: frozen_cls.data().dim(),
                right: tuned_cls.data().dim(),
            });
        }
        Ok(Self { frozen_cls, tuned_cls })
    }

    pub fn frozen(&self) -> &FeatureMatrix {
        &self.frozen_cls
    }

    pub fn tuned(&self) -> &FeatureMatrix {
        &self.tuned_cls
    }
}

/// Per-sample token matrices ([CLS] at index 0, then M patch tokens) for the
/// two model sides.
#[derive(Debug, Clone)]
pub struct TokenPair {
    frozen_tokens: Vec<FeatureMatrix>,
    tuned_tokens: Vec<FeatureMatrix>,
}

impl TokenPair {
    pub fn new(
        frozen_tokens: Vec<FeatureMatrix>,
        tuned_tokens: Vec<FeatureMatrix>,
    ) -> Result<Self, MarError> {
        if frozen_tokens.len() != tuned_tokens.len() {
            return Err(MarError::LengthMismatch {
                left: frozen_tokens.len(),
                right: tuned_tokens.len(),
            });
        }
        for (a, b) in frozen_tokens.iter().zip(tuned_tokens.iter()) {
            if a.data().dim() != b.data().dim() {
                return Err(MarError::ShapeMismatch {
                    left: a.data().dim(),
                    right: b.data().dim(),
                });
            }
        }
        Ok(Self { frozen_tokens, tuned_tokens })
    }

    pub fn len(&self) -> usize {
        self.frozen_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen_tokens.is_empty()
    }

    pub fn frozen(&self) -> &[FeatureMatrix] {
        &self.frozen_tokens
    }

    pub fn tuned(&self) -> &[FeatureMatrix] {
        &self.tuned_tokens
    }
}

fn l1_gram_gap(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    let sa = linalg::gram(a);
    let sb = linalg::gram(b);
    let n = sa.n();
    let mut total = 0.0;
    for (x, y) in sa.data().iter().zip(sb.data().iter()) {
        total += (x - y).abs();
    }
    total / (n * n) as f64
}

/// Global alignment: (1/N^2) sum |S_ij - S'_ij| over batch Gram matrices.
pub fn mar_global(batch: &BatchPair) -> f64 {
    l1_gram_gap(&batch.frozen_cls, &batch.tuned_cls)
}

/// Local alignment: per-sample intra-token Gram gap, averaged over samples.
pub fn mar_local(tokens: &TokenPair) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let sum: f64 = tokens
        .frozen_tokens
        .iter()
        .zip(tokens.tuned_tokens.iter())
        .map(|(a, b)| l1_gram_gap(a, b))
        .sum();
    sum / tokens.len() as f64
}

/// Global plus local alignment.
pub fn mar_total(batch: &BatchPair, tokens: &TokenPair) -> f64 {
    mar_global(batch) + mar_local(tokens)
}

/// Gradients of `mar_total` with respect to the *pre-normalization* tuned
/// features.
#[derive(Debug, Clone)]
pub struct MarGradient {
    /// d(total)/d(raw tuned CLS), N x d.
    pub cls: Array2<f64>,
    /// d(total)/d(raw tuned tokens), one (M+1) x d block per sample.
    pub tokens: Vec<Array2<f64>>,
}

/// sign with the subgradient convention sign(0) = 0, so the loss has an
/// exactly zero gradient at initialization where tuned == frozen.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the L1 Gram gap w.r.t. the raw (unnormalized) second side.
///
/// With Z = normalize_rows(U), S' = Z Z^T and L = (1/n^2) sum |S'-S|:
/// dL/dZ = (G + G^T) Z with G_ij = sign(S'_ij - S_ij)/n^2, then each row is
/// pulled back through z = u/||u|| via du = (g - (g.z) z)/||u||.
fn l1_gram_gap_grad_raw(frozen: &FeatureMatrix, tuned_raw: &Array2<f64>) -> Array2<f64> {
    let tuned = FeatureMatrix::normalize_rows(tuned_raw).expect("tuned features must normalize");
    let s = linalg::gram(frozen);
    let s_prime = linalg::gram(&tuned);
    let n = s.n();
    let scale = 1.0 / (n * n) as f64;

    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            g[[i, j]] = sign0(s_prime.data()[[i, j]] - s.data()[[i, j]]) * scale;
        }
    }
    let g_sym = &g + &g.t();
    let grad_z = g_sym.dot(tuned.data());

    let mut grad_raw = Array2::<f64>::zeros(tuned_raw.dim());
    for i in 0..n {
        let u = tuned_raw.row(i);
        let norm = u.dot(&u).sqrt();
        let z = tuned.data().row(i);
        let gz = grad_z.row(i);
        let dot = gz.dot(&z);
        for c in 0..tuned_raw.ncols() {
            grad_raw[[i, c]] = (gz[c] - dot * z[c]) / norm;
        }
    }
    grad_raw
}

/// Analytic gradient of `mar_total` w.r.t. every raw tuned feature
/// coordinate — batch CLS features and per-sample token matrices.
pub fn mar_gradient(
    frozen_cls: &FeatureMatrix,
    tuned_cls_raw: &Array2<f64>,
    frozen_tokens: &[FeatureMatrix],
    tuned_tokens_raw: &[Array2<f64>],
) -> MarGradient {
    assert_eq!(
        frozen_cls.data().dim(),
        tuned_cls_raw.dim(),
        "CLS shapes must agree"
    );
    assert_eq!(
        frozen_tokens.len(),
        tuned_tokens_raw.len(),
        "token counts must agree"
    );
    let cls = l1_gram_gap_grad_raw(frozen_cls, tuned_cls_raw);
    let n = frozen_tokens.len().max(1) as f64;
    let tokens = frozen_tokens
        .iter()
        .zip(tuned_tokens_raw.iter())
        .map(|(frozen, raw)| {
            let mut g = l1_gram_gap_grad_raw(frozen, raw);
            g.mapv_inplace(|v| v / n);
            g
        })
        .collect();
    MarGradient { cls, tokens }
}
