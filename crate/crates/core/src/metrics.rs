//! Representation-drift and separability metrics: rank correlation of
//! representational dissimilarity matrices, Calinski-Harabasz, silhouette,
//! Hellinger distance, and mean cosine feature shift.

use crate::linalg::{FeatureMatrix, GramMatrix};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("vectors must have equal length >= 2 (got {left} and {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("input is constant; rank correlation undefined")]
    DegenerateInput,
    #[error("clustering needs >= 2 classes and more points than classes")]
    DegenerateClustering,
    #[error("input is not a probability vector ({reason})")]
    NotAProbability { reason: String },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// Average ranks (1-based); ties share the mean of their rank range.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricError::DegenerateInput);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Representational similarity: Spearman correlation of the strict upper
/// triangles of the two dissimilarity matrices 1 - S.
pub fn rsa(s_a: &GramMatrix, s_b: &GramMatrix) -> Result<f64, MetricError> {
    let n = s_a.n();
    if s_b.n() != n {
        return Err(MetricError::ShapeMismatch {
            left: (n, n),
            right: (s_b.n(), s_b.n()),
        });
    }
    if n < 3 {
        return Err(MetricError::LengthMismatch { left: n, right: n });
    }
    let mut a = Vec::with_capacity(n * (n - 1) / 2);
    let mut b = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            a.push(1.0 - s_a.data()[[i, j]]);
            b.push(1.0 - s_b.data()[[i, j]]);
        }
    }
    spearman(&a, &b)
}

fn class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

fn centroids(points: &Array2<f64>, labels: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let d = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &label) in points.rows().into_iter().zip(labels.iter()) {
        counts[label] += 1;
        let mut target = sums.row_mut(label);
        target += &row;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mut row = sums.row_mut(c);
            row.mapv_inplace(|v| v / count as f64);
        }
    }
    (sums, counts)
}

/// Calinski-Harabasz index: (between-SS / (k-1)) / (within-SS / (N-k)) in
/// Euclidean geometry. Returns 0 when the class centroids coincide and
/// +infinity when clusters are perfectly tight around distinct centroids.
pub fn calinski_harabasz(points: &Array2<f64>, labels: &[usize]) -> Result<f64, MetricError> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(MetricError::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    let k = class_count(labels);
    if k < 2 || n <= k {
        return Err(MetricError::DegenerateClustering);
    }
    let (cents, counts) = centroids(points, labels, k);
    if counts.iter().any(|&c| c == 0) {
        return Err(MetricError::DegenerateClustering);
    }

    let d = points.ncols();
    let mut overall = vec![0.0; d];
    for row in points.rows() {
        for (j, &v) in row.iter().enumerate() {
            overall[j] += v;
        }
    }
    for v in overall.iter_mut() {
        *v /= n as f64;
    }

    let mut between = 0.0;
    for c in 0..k {
        let mut sq = 0.0;
        for j in 0..d {
            let diff = cents[[c, j]] - overall[j];
            sq += diff * diff;
        }
        between += counts[c] as f64 * sq;
    }
    let mut within = 0.0;
    for (row, &label) in points.rows().into_iter().zip(labels.iter()) {
        for (j, &v) in row.iter().enumerate() {
            let diff = v - cents[[label, j]];
            within += diff * diff;
        }
    }

    if between == 0.0 {
        return Ok(0.0);
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Per-point silhouette scores (b - a) / max(a, b) with Euclidean distance;
/// singleton-cluster points score 0 by convention.
pub fn silhouette_samples(points: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>, MetricError> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(MetricError::LengthMismatch {
            left: labels.len(),
            right: n,
        });
    }
    let k = class_count(labels);
    if k < 2 || n <= k {
        return Err(MetricError::DegenerateClustering);
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(MetricError::DegenerateClustering);
    }

    let dist = |i: usize, j: usize| -> f64 {
        points
            .row(i)
            .iter()
            .zip(points.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let mut scores = vec![0.0; n];
    for i in 0..n {
        let own = labels[i];
        if counts[own] < 2 {
            continue; // singleton contributes s = 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist(i, j);
            }
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            scores[i] = (b - a) / denom;
        }
    }
    Ok(scores)
}

/// Mean silhouette score over all points.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> Result<f64, MetricError> {
    let scores = silhouette_samples(points, labels)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Hellinger distance sqrt(1 - sum_i sqrt(p_i q_i)), bounded in [0, 1].
pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(MetricError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| x < 0.0) {
            return Err(MetricError::NotAProbability {
                reason: format!("{name} has a negative entry"),
            });
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricError::NotAProbability {
                reason: format!("{name} sums to {sum}"),
            });
        }
    }
    let bc: f64 = p.iter().zip(q.iter()).map(|(&a, &b)| (a * b).sqrt()).sum();
    Ok((1.0 - bc).max(0.0).sqrt())
}

/// Mean cosine shift between paired unit features: mean_i (1 - <z_i, z'_i>).
pub fn cosine_shift(z: &FeatureMatrix, z_prime: &FeatureMatrix) -> Result<f64, MetricError> {
    if z.data().dim() != z_prime.data().dim() {
        return Err(MetricError::ShapeMismatch {
            left: z.data().dim(),
            right: z_prime.data().dim(),
        });
    }
    let n = z.n_rows();
    let total: f64 = (0..n).map(|i| 1.0 - z.row(i).dot(&z_prime.row(i))).sum();
    Ok(total / n as f64)
}

/// A metric that was either computed or explicitly skipped with a reason.
/// Skipped metrics are never silently zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Skipped(String),
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Skipped(_) => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            MetricValue::Value(v) => fmt_sig9(*v),
            MetricValue::Skipped(reason) => format!("skipped:{reason}"),
        }
    }
}

/// 9 significant digits, scientific notation; the report interchange format.
pub fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// The evaluated metric bundle attached to a training epoch or an audit.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rsa: MetricValue,
    pub calinski_harabasz: MetricValue,
    pub silhouette: MetricValue,
    pub hellinger_mean: MetricValue,
    pub spearman_logits_mean: MetricValue,
    pub cosine_shift_mean: MetricValue,
}

impl MetricReport {
    /// Flat `metric=value` lines.
    pub fn to_kv_block(&self) -> String {
        let mut out = String::new();
        for (key, v) in [
            ("rsa", &self.rsa),
            ("calinski_harabasz", &self.calinski_harabasz),
            ("silhouette", &self.silhouette),
            ("hellinger_mean", &self.hellinger_mean),
            ("spearman_logits_mean", &self.spearman_logits_mean),
            ("cosine_shift_mean", &self.cosine_shift_mean),
        ] {
            out.push_str(key);
            out.push('=');
            out.push_str(&v.render());
            out.push('\n');
        }
        out
    }
}
