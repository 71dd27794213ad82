//! Dense feature-matrix primitives: row normalization, Gram matrices and
//! cosine-distance matrices.
//!
//! Everything downstream (transport bounds, alignment losses, metrics) is
//! built on these three types. All arithmetic is f64.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("row {row} has near-zero norm {norm:e}; cannot normalize")]
    ZeroRow { row: usize, norm: f64 },
    #[error("matrix must be non-empty (got {rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// N rows of d-dimensional unit-norm feature vectors.
///
/// Rows are normalized at construction; a zero row is rejected rather than
/// silently passed through.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    /// Normalize every row of `raw` to unit Euclidean norm.
    pub fn normalize_rows(raw: &Array2<f64>) -> Result<Self, LinalgError> {
        let (n, d) = raw.dim();
        if n == 0 || d == 0 {
            return Err(LinalgError::Empty { rows: n, cols: d });
        }
        if let Some((row, col)) = first_non_finite(raw) {
            return Err(LinalgError::NonFinite { row, col });
        }
        let mut data = raw.clone();
        for (i, mut row) in data.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm <= 1e-12 {
                return Err(LinalgError::ZeroRow { row: i, norm });
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(Self { data })
    }

    /// Wrap rows that are already unit-norm (within 1e-9). Used where the
    /// caller has constructed exact unit vectors and renormalizing would
    /// perturb them.
    pub fn from_unit_rows(data: Array2<f64>) -> Result<Self, LinalgError> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(LinalgError::Empty { rows: n, cols: d });
        }
        for (i, row) in data.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
                return Err(LinalgError::ZeroRow { row: i, norm });
            }
        }
        Ok(Self { data })
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn row(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.data.row(i)
    }
}

/// N x N matrix of pairwise inner products of unit-norm rows.
///
/// Symmetric, unit diagonal, positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    data: Array2<f64>,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }
}

/// N x N cosine-distance matrix, D = 1 - S entrywise.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    data: Array2<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Build directly from a square distance matrix. Used by transport code
    /// paths that start from distances rather than features.
    pub fn from_square(data: Array2<f64>) -> Result<Self, LinalgError> {
        let (n, m) = data.dim();
        if n != m || n == 0 {
            return Err(LinalgError::ShapeMismatch {
                left: (n, m),
                right: (n, n.max(1)),
            });
        }
        if let Some((row, col)) = first_non_finite(&data) {
            return Err(LinalgError::NonFinite { row, col });
        }
        Ok(Self { data })
    }
}

/// S_ij = <row_i, row_j>.
pub fn gram(features: &FeatureMatrix) -> GramMatrix {
    let z = features.data();
    GramMatrix { data: z.dot(&z.t()) }
}

/// D = 1 - gram(F) entrywise.
pub fn cosine_distance_matrix(features: &FeatureMatrix) -> DistanceMatrix {
    let s = gram(features);
    DistanceMatrix {
        data: s.data.mapv(|v| 1.0 - v),
    }
}

fn first_non_finite(m: &Array2<f64>) -> Option<(usize, usize)> {
    for ((i, j), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Some((i, j));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Eigenvalues of a small symmetric matrix via cyclic Jacobi rotations.
    /// Test oracle only; never used at runtime.
    fn jacobi_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
        let n = m.nrows();
        let mut a = m.clone();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off += a[[i, j]] * a[[i, j]];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[[p, q]].abs() < 1e-15 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[[k, p]];
                        let akq = a[[k, q]];
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[[p, k]];
                        let aqk = a[[q, k]];
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[[i, i]]).collect()
    }

    fn seeded_raw(n: usize, d: usize, seed: u64) -> Array2<f64> {
        // Small deterministic LCG; keeps the test free of RNG plumbing.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        Array2::from_shape_fn((n, d), |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn normalize_rows_divides_by_norm() {
        let f = FeatureMatrix::normalize_rows(&array![[3.0, 4.0]]).unwrap();
        assert!((f.data()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((f.data()[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_rows_keeps_unit_rows() {
        let raw = array![[1.0, 0.0], [0.0, 1.0]];
        let f = FeatureMatrix::normalize_rows(&raw).unwrap();
        assert_eq!(f.data(), &raw);
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let err = FeatureMatrix::normalize_rows(&array![[0.0, 0.0]]).unwrap_err();
        assert!(matches!(err, LinalgError::ZeroRow { row: 0, .. }));
    }

    #[test]
    fn normalize_rows_rejects_non_finite() {
        let err = FeatureMatrix::normalize_rows(&array![[1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, LinalgError::NonFinite { row: 0, col: 1 }));
    }

    #[test]
    fn gram_of_orthonormal_axes_is_identity() {
        let f = FeatureMatrix::normalize_rows(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = gram(&f);
        assert_eq!(s.data(), &array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn gram_three_rows_matches_inner_products() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let f = FeatureMatrix::normalize_rows(&array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let s = gram(&f);
        let expected = 0.70711;
        assert!((s.data()[[0, 2]] - expected).abs() < 1e-5);
        assert!((s.data()[[1, 2]] - expected).abs() < 1e-5);
        assert!((s.data()[[0, 2]] - r).abs() < 1e-12);
        assert_eq!(s.data()[[0, 1]], 0.0);
    }

    #[test]
    fn gram_diagonal_is_ones() {
        let f = FeatureMatrix::normalize_rows(&seeded_raw(7, 5, 11)).unwrap();
        let s = gram(&f);
        for i in 0..7 {
            assert!((s.data()[[i, i]] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_distance_of_orthonormal_pair() {
        let f = FeatureMatrix::normalize_rows(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = cosine_distance_matrix(&f);
        assert_eq!(d.data(), &array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn cosine_distance_of_antipodal_pair_is_two() {
        let f = FeatureMatrix::normalize_rows(&array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let d = cosine_distance_matrix(&f);
        assert_eq!(d.data()[[0, 1]], 2.0);
        assert_eq!(d.data()[[1, 0]], 2.0);
    }

    #[test]
    fn cosine_distance_single_row_is_zero() {
        let f = FeatureMatrix::normalize_rows(&array![[2.0, 1.0, 2.0]]).unwrap();
        let d = cosine_distance_matrix(&f);
        assert_eq!(d.n(), 1);
        assert!(d.data()[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn gram_is_psd_small_n() {
        for seed in 0..5u64 {
            let f = FeatureMatrix::normalize_rows(&seeded_raw(8, 4, seed + 3)).unwrap();
            let s = gram(&f);
            let eigs = jacobi_eigenvalues(s.data());
            let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min >= -1e-8, "smallest eigenvalue {min} for seed {seed}");
        }
    }

    #[test]
    fn gram_symmetric_within_tolerance() {
        let f = FeatureMatrix::normalize_rows(&seeded_raw(9, 6, 42)).unwrap();
        let s = gram(&f);
        for i in 0..9 {
            for j in 0..9 {
                assert!((s.data()[[i, j]] - s.data()[[j, i]]).abs() < 1e-12);
            }
        }
    }

    /// Gram-Schmidt orthogonalization, shared by the rotation-invariance tests.
    pub(crate) fn random_orthogonal(d: usize, seed: u64) -> Array2<f64> {
        let raw = seeded_raw(d, d, seed.wrapping_add(77));
        let mut q = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            let mut v = raw.row(i).to_owned();
            // Two passes of classical Gram-Schmidt for numerical headroom.
            for _ in 0..2 {
                for j in 0..i {
                    let proj = v.dot(&q.row(j));
                    let qj = q.row(j).to_owned();
                    v.zip_mut_with(&qj, |a, b| *a -= proj * b);
                }
            }
            let norm = v.dot(&v).sqrt();
            assert!(norm > 1e-8, "degenerate random matrix");
            v.mapv_inplace(|x| x / norm);
            q.row_mut(i).assign(&v);
        }
        q
    }

    proptest! {
        #[test]
        fn gram_invariant_under_rotation(seed in 0u64..200, n in 2usize..8, d in 2usize..8) {
            let f = FeatureMatrix::normalize_rows(&seeded_raw(n, d, seed)).unwrap();
            let q = random_orthogonal(d, seed);
            let rotated = f.data().dot(&q);
            let fr = FeatureMatrix::normalize_rows(&rotated).unwrap();
            let s = gram(&f);
            let sr = gram(&fr);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((s.data()[[i, j]] - sr.data()[[i, j]]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn distance_is_exact_complement_of_gram(seed in 0u64..200, n in 1usize..9, d in 1usize..9) {
            let f = FeatureMatrix::normalize_rows(&seeded_raw(n, d, seed)).unwrap();
            let s = gram(&f);
            let dm = cosine_distance_matrix(&f);
            for i in 0..n {
                for j in 0..n {
                    // Construction identity, bitwise: D is exactly fl(1 - S).
                    prop_assert_eq!(dm.data()[[i, j]].to_bits(), (1.0 - s.data()[[i, j]]).to_bits());
                    // The re-summed value returns to 1 up to one final rounding.
                    // (Exact equality is impossible for all similarities, e.g.
                    // s = -0.49999999999999967 gives fl(fl(1-s)+s) != 1.)
                    prop_assert!((dm.data()[[i, j]] + s.data()[[i, j]] - 1.0).abs() <= f64::EPSILON);
                }
            }
        }

        #[test]
        fn normalize_rows_idempotent(seed in 0u64..200, n in 1usize..9, d in 1usize..9) {
            let f = FeatureMatrix::normalize_rows(&seeded_raw(n, d, seed)).unwrap();
            let again = FeatureMatrix::normalize_rows(f.data()).unwrap();
            for (a, b) in f.data().iter().zip(again.data().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
