//! Query-support sculpting: a supervised contrastive objective over image
//! features and frozen class prototypes, applied at the output layer and at
//! selected intermediate layers with geometrically decaying weights.

use crate::linalg::FeatureMatrix;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HmsError {
    #[error("query {query} has no positive support other than itself")]
    EmptyPositives { query: usize },
    #[error("label count {labels} does not match feature rows {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("feature dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("depth {depth} invalid for {layers} layers")]
    BadDepth { depth: usize, layers: usize },
    #[error("expected {expected} per-layer query/support sets, got {got}")]
    LayerCountMismatch { expected: usize, got: usize },
}

/// Sculpting configuration: which encoder blocks participate and the
/// temperature annealing endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct HmsConfig {
    /// 1-based block indices where sculpting applies, shallowest first,
    /// always ending at the output layer.
    pub layer_set: Vec<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Number of final layers covered (= layer_set.len()).
    pub depth: usize,
}

impl HmsConfig {
    /// Sculpt the last `depth` of `total_layers` blocks.
    pub fn last_layers(
        total_layers: usize,
        depth: usize,
        tau_start: f64,
        tau_end: f64,
    ) -> Result<Self, HmsError> {
        if depth == 0 || depth > total_layers {
            return Err(HmsError::BadDepth {
                depth,
                layers: total_layers,
            });
        }
        assert!(tau_start > 0.0 && tau_end > 0.0, "temperatures must be positive");
        let layer_set = ((total_layers - depth + 1)..=total_layers).collect();
        Ok(Self {
            layer_set,
            tau_start,
            tau_end,
            depth,
        })
    }
}

impl Default for HmsConfig {
    /// Last two layers, temperature annealed 0.5 -> 0.07.
    fn default() -> Self {
        Self::last_layers(3, 2, 0.5, 0.07).unwrap()
    }
}

/// Queries (image features, two augmented views per source image) plus the
/// support set: the queries themselves followed by the class prototypes.
#[derive(Debug, Clone)]
pub struct QuerySupport {
    pub queries: FeatureMatrix,
    pub supports: FeatureMatrix,
    pub query_labels: Vec<usize>,
    pub support_labels: Vec<usize>,
    /// Index of each query's own entry inside the support set (excluded from
    /// both the positive set and the softmax denominator).
    pub support_is_self: Vec<usize>,
}

/// Concatenate image features and prototypes into a query/support task.
/// Positives are same-label supports, excluding the query's own entry.
pub fn build_query_support(
    image_feats: &FeatureMatrix,
    image_labels: &[usize],
    prototypes: &FeatureMatrix,
    prototype_labels: &[usize],
) -> Result<QuerySupport, HmsError> {
    let n_q = image_feats.n_rows();
    if image_labels.len() != n_q {
        return Err(HmsError::LabelMismatch {
            labels: image_labels.len(),
            rows: n_q,
        });
    }
    if prototype_labels.len() != prototypes.n_rows() {
        return Err(HmsError::LabelMismatch {
            labels: prototype_labels.len(),
            rows: prototypes.n_rows(),
        });
    }
    if image_feats.dim() != prototypes.dim() {
        return Err(HmsError::DimMismatch {
            left: image_feats.dim(),
            right: prototypes.dim(),
        });
    }

    let d = image_feats.dim();
    let total = n_q + prototypes.n_rows();
    let mut stacked = Array2::<f64>::zeros((total, d));
    for i in 0..n_q {
        stacked.row_mut(i).assign(&image_feats.row(i));
    }
    for k in 0..prototypes.n_rows() {
        stacked.row_mut(n_q + k).assign(&prototypes.row(k));
    }
    let supports = FeatureMatrix::from_unit_rows(stacked)
        .expect("inputs are unit-norm feature matrices");

    let mut support_labels = image_labels.to_vec();
    support_labels.extend_from_slice(prototype_labels);

    let qs = QuerySupport {
        queries: image_feats.clone(),
        supports,
        query_labels: image_labels.to_vec(),
        support_labels,
        support_is_self: (0..n_q).collect(),
    };

    for (i, &label) in qs.query_labels.iter().enumerate() {
        let has_positive = qs
            .support_labels
            .iter()
            .enumerate()
            .any(|(j, &sl)| j != qs.support_is_self[i] && sl == label);
        if !has_positive {
            return Err(HmsError::EmptyPositives { query: i });
        }
    }
    Ok(qs)
}

/// Contrastive loss for one query against its denominator set, computed
/// from the similarity row. `positive[j]` marks positives; entries cover
/// the denominator set only (self already excluded).
fn sculpt_from_sims(sims: &[f64], positive: &[bool], tau_prime: f64) -> f64 {
    debug_assert_eq!(sims.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    debug_assert!(n_pos >= 1, "caller guarantees a positive exists");

    // log-sum-exp with max subtraction; tau' as small as 0.05 puts logits
    // near +-20 and the naive form would overflow-squash the softmax.
    let logits: Vec<f64> = sims.iter().map(|&s| s / tau_prime).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();

    let mut loss = 0.0;
    for (j, &is_pos) in positive.iter().enumerate() {
        if is_pos {
            loss += lse - logits[j];
        }
    }
    loss / n_pos as f64
}

/// Per-query sculpting loss (the query feature is row `q_index` of
/// `qs.queries`).
pub fn sculpt_query_loss(qs: &QuerySupport, q_index: usize, tau_prime: f64) -> f64 {
    assert!(tau_prime > 0.0, "temperature must be positive");
    let q = qs.queries.row(q_index);
    let label = qs.query_labels[q_index];
    let self_idx = qs.support_is_self[q_index];

    let mut sims = Vec::with_capacity(qs.supports.n_rows() - 1);
    let mut positive = Vec::with_capacity(qs.supports.n_rows() - 1);
    for j in 0..qs.supports.n_rows() {
        if j == self_idx {
            continue;
        }
        sims.push(q.dot(&qs.supports.row(j)));
        positive.push(qs.support_labels[j] == label);
    }
    sculpt_from_sims(&sims, &positive, tau_prime)
}

/// Mean sculpting loss over all queries.
pub fn sculpt_loss(qs: &QuerySupport, tau_prime: f64) -> f64 {
    let n = qs.queries.n_rows();
    let total: f64 = (0..n).map(|i| sculpt_query_loss(qs, i, tau_prime)).sum();
    total / n as f64
}

/// Gradient of `sculpt_loss` with respect to the (unit-norm) query features,
/// accounting for each query's second role as a support. Prototypes are
/// frozen and receive no gradient.
pub fn sculpt_loss_grad(qs: &QuerySupport, tau_prime: f64) -> Array2<f64> {
    let n_q = qs.queries.n_rows();
    let n_s = qs.supports.n_rows();
    let d = qs.queries.dim();
    let inv_nq = 1.0 / n_q as f64;

    // dL/d logits, laid out per (query, support); self entries stay zero.
    let mut coeff = Array2::<f64>::zeros((n_q, n_s));
    for i in 0..n_q {
        let q = qs.queries.row(i);
        let self_idx = qs.support_is_self[i];
        let label = qs.query_labels[i];

        let mut logits = vec![f64::NEG_INFINITY; n_s];
        for j in 0..n_s {
            if j != self_idx {
                logits[j] = q.dot(&qs.supports.row(j)) / tau_prime;
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits
            .iter()
            .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
            .sum();
        let n_pos = (0..n_s)
            .filter(|&j| j != self_idx && qs.support_labels[j] == label)
            .count();
        for j in 0..n_s {
            if j == self_idx {
                continue;
            }
            let softmax = (logits[j] - max).exp() / denom;
            let target = if qs.support_labels[j] == label {
                1.0 / n_pos as f64
            } else {
                0.0
            };
            coeff[[i, j]] = inv_nq * (softmax - target);
        }
    }

    let mut grad = Array2::<f64>::zeros((n_q, d));
    for i in 0..n_q {
        for j in 0..n_s {
            let c = coeff[[i, j]];
            if c == 0.0 {
                continue;
            }
            // Query role: dL/dq_i += c * s_j / tau'.
            let s_row = qs.supports.row(j);
            for k in 0..d {
                grad[[i, k]] += c * s_row[k] / tau_prime;
            }
            // Support role: supports 0..n_q are the queries themselves.
            if j < n_q {
                let q_row = qs.queries.row(i);
                for k in 0..d {
                    grad[[j, k]] += c * q_row[k] / tau_prime;
                }
            }
        }
    }
    grad
}

/// Weights for the selected layers, shallowest first: the final layer gets
/// weight 1 and each preceding layer half the weight of its successor.
pub fn layer_decay_weights(layer_count: usize, depth: usize) -> Result<Vec<f64>, HmsError> {
    if depth == 0 || depth > layer_count {
        return Err(HmsError::BadDepth {
            depth,
            layers: layer_count,
        });
    }
    Ok((0..depth).map(|i| 0.5f64.powi((depth - 1 - i) as i32)).collect())
}

/// Cosine annealing of the sculpting temperature across epochs.
pub fn tau_schedule(epoch: usize, total_epochs: usize, cfg: &HmsConfig) -> f64 {
    assert!(epoch < total_epochs, "epoch out of range");
    if total_epochs == 1 {
        return cfg.tau_start;
    }
    let progress = epoch as f64 / (total_epochs - 1) as f64;
    cfg.tau_end + (cfg.tau_start - cfg.tau_end) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Weighted sum of per-layer sculpting losses. `per_layer` is ordered
/// shallowest first with the output layer last, matching
/// [`layer_decay_weights`].
pub fn hms_total(
    per_layer: &[QuerySupport],
    cfg: &HmsConfig,
    tau_prime: f64,
) -> Result<f64, HmsError> {
    if per_layer.len() != cfg.depth {
        return Err(HmsError::LayerCountMismatch {
            expected: cfg.depth,
            got: per_layer.len(),
        });
    }
    let weights = layer_decay_weights(cfg.layer_set[cfg.depth - 1], cfg.depth)?;
    Ok(per_layer
        .iter()
        .zip(weights.iter())
        .map(|(qs, w)| w * sculpt_loss(qs, tau_prime))
        .sum())
}
