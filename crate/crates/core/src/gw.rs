//! Metric-measure spaces, couplings, and a desk-scale Gromov-Wasserstein
//! upper estimator.
//!
//! The estimator never claims the true optimum: it enumerates all N!
//! permutation couplings (N <= 6), the natural diagonal coupling, and the
//! product coupling, and returns the best of those. Every searched coupling
//! is feasible, so the result is a certified upper bound. The key algebraic
//! fact exercised by the tests is that the natural-coupling cost collapses
//! to the scaled entrywise L_p difference of the two Gram matrices.

use crate::linalg::{DistanceMatrix, FeatureMatrix, GramMatrix};
use itertools::Itertools;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GwError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("exact enumeration supports at most {max} points, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("expected uniform weights on both spaces")]
    WeightMismatch,
    #[error("weights must be nonnegative and sum to 1 (sum = {sum})")]
    BadWeights { sum: f64 },
}

/// Exponent of the transport objective. The alignment loss instantiates
/// p = 1; p = 2 exercises the general bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwOrder {
    P1,
    P2,
}

impl GwOrder {
    pub fn exponent(self) -> f64 {
        match self {
            GwOrder::P1 => 1.0,
            GwOrder::P2 => 2.0,
        }
    }

    fn pow(self, x: f64) -> f64 {
        match self {
            GwOrder::P1 => x.abs(),
            GwOrder::P2 => x * x,
        }
    }
}

/// A discrete metric probability space: pairwise distances plus a weight
/// vector over the points.
#[derive(Debug, Clone)]
pub struct MetricSpace {
    distances: DistanceMatrix,
    weights: Array1<f64>,
}

impl MetricSpace {
    /// Uniform measure 1/N on every point.
    pub fn uniform(distances: DistanceMatrix) -> Self {
        let n = distances.n();
        Self {
            distances,
            weights: Array1::from_elem(n, 1.0 / n as f64),
        }
    }

    pub fn with_weights(distances: DistanceMatrix, weights: Array1<f64>) -> Result<Self, GwError> {
        let n = distances.n();
        if weights.len() != n {
            return Err(GwError::ShapeMismatch {
                left: (n, n),
                right: (weights.len(), 1),
            });
        }
        let sum: f64 = weights.sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(GwError::BadWeights { sum });
        }
        Ok(Self { distances, weights })
    }

    /// Cosine-distance space with uniform weights over the feature rows.
    pub fn from_features(features: &FeatureMatrix) -> Self {
        Self::uniform(crate::linalg::cosine_distance_matrix(features))
    }

    pub fn len(&self) -> usize {
        self.distances.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn distances(&self) -> &DistanceMatrix {
        &self.distances
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    fn is_uniform(&self) -> bool {
        let n = self.len() as f64;
        self.weights.iter().all(|&w| (w - 1.0 / n).abs() <= 1e-12)
    }
}

/// A transport plan between two discrete measures.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    plan: Array2<f64>,
}

impl Coupling {
    pub fn new(plan: Array2<f64>) -> Self {
        Self { plan }
    }

    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    /// Diagonal coupling pairing point i with point i at mass 1/n.
    pub fn natural(n: usize) -> Self {
        assert!(n >= 1, "natural coupling needs n >= 1");
        let mut plan = Array2::zeros((n, n));
        for i in 0..n {
            plan[[i, i]] = 1.0 / n as f64;
        }
        Self { plan }
    }

    /// Independence coupling mu (x) nu.
    pub fn product(mu: &Array1<f64>, nu: &Array1<f64>) -> Self {
        let plan = Array2::from_shape_fn((mu.len(), nu.len()), |(i, k)| mu[i] * nu[k]);
        Self { plan }
    }

    /// Coupling concentrated on a permutation: mass 1/n at (i, sigma(i)).
    pub fn from_permutation(sigma: &[usize]) -> Self {
        let n = sigma.len();
        let mut plan = Array2::zeros((n, n));
        for (i, &k) in sigma.iter().enumerate() {
            plan[[i, k]] = 1.0 / n as f64;
        }
        Self { plan }
    }
}

/// True iff `pi` has marginals `mu` / `nu` within 1e-10 and no entry below
/// -1e-15.
pub fn validate_coupling(pi: &Coupling, mu: &Array1<f64>, nu: &Array1<f64>) -> bool {
    let (n, m) = pi.plan.dim();
    if mu.len() != n || nu.len() != m {
        return false;
    }
    if pi.plan.iter().any(|&v| v < -1e-15) {
        return false;
    }
    for i in 0..n {
        let row_sum: f64 = pi.plan.row(i).sum();
        if (row_sum - mu[i]).abs() > 1e-10 {
            return false;
        }
    }
    for k in 0..m {
        let col_sum: f64 = pi.plan.column(k).sum();
        if (col_sum - nu[k]).abs() > 1e-10 {
            return false;
        }
    }
    true
}

/// The transport objective before the 1/p root:
/// sum over (i,j,k,l) of |D_X[i,j] - D_Y[k,l]|^p pi_ik pi_jl.
///
/// Evaluated as the literal quadruple sum; this is the reference route the
/// Gram-bound identity is checked against.
pub fn coupling_cost(
    x: &MetricSpace,
    y: &MetricSpace,
    pi: &Coupling,
    p: GwOrder,
) -> Result<f64, GwError> {
    let n = x.len();
    let m = y.len();
    if pi.plan.dim() != (n, m) {
        return Err(GwError::ShapeMismatch {
            left: (n, m),
            right: pi.plan.dim(),
        });
    }
    let dx = x.distances.data();
    let dy = y.distances.data();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..m {
            let pik = pi.plan[[i, k]];
            if pik == 0.0 {
                continue;
            }
            for j in 0..n {
                for l in 0..m {
                    let pjl = pi.plan[[j, l]];
                    if pjl == 0.0 {
                        continue;
                    }
                    total += p.pow(dx[[i, j]] - dy[[k, l]]) * pik * pjl;
                }
            }
        }
    }
    Ok(total)
}

/// (1/N^2) sum over (i,j) of |S'_ij - S_ij|^p.
///
/// Equals the natural-coupling cost for cosine-distance spaces built from
/// the same Gram matrices.
pub fn gram_bound(s: &GramMatrix, s_prime: &GramMatrix, p: GwOrder) -> Result<f64, GwError> {
    let n = s.n();
    if s_prime.n() != n {
        return Err(GwError::ShapeMismatch {
            left: (n, n),
            right: (s_prime.n(), s_prime.n()),
        });
    }
    let a = s.data();
    let b = s_prime.data();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += p.pow(b[[i, j]] - a[[i, j]]);
        }
    }
    Ok(total / (n * n) as f64)
}

/// Which coupling family achieved the reported estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingKind {
    /// Index map i -> sigma[i].
    Permutation(Vec<usize>),
    Natural,
    Product,
}

impl CouplingKind {
    pub fn describe(&self) -> String {
        match self {
            CouplingKind::Permutation(sigma) => format!("permutation {sigma:?}"),
            CouplingKind::Natural => "natural".to_string(),
            CouplingKind::Product => "product".to_string(),
        }
    }
}

/// Families included in the enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchMethod {
    pub permutations_enumerated: usize,
    pub natural_included: bool,
    pub product_included: bool,
}

/// Upper estimate of GW_p together with the coupling that achieved it.
#[derive(Debug, Clone)]
pub struct GwEstimate {
    pub value: f64,
    pub order_p: GwOrder,
    pub coupling: Coupling,
    pub achieved_by: CouplingKind,
    pub method: SearchMethod,
}

/// Default cap on exact permutation enumeration (6! = 720 couplings).
pub const DEFAULT_MAX_EXACT_N: usize = 6;

/// Minimize the transport objective over all permutation couplings, the
/// natural coupling, and the product coupling; return the p-th root of the
/// best cost. Requires equal sizes and uniform weights.
///
/// Permutations are enumerated in lexicographic order and ties keep the
/// earliest minimizer, so the identity permutation wins whenever it is
/// optimal.
pub fn gw_estimate(
    x: &MetricSpace,
    y: &MetricSpace,
    p: GwOrder,
    max_exact_n: usize,
) -> Result<GwEstimate, GwError> {
    let n = x.len();
    if y.len() != n {
        return Err(GwError::ShapeMismatch {
            left: (n, n),
            right: (y.len(), y.len()),
        });
    }
    if n > max_exact_n {
        return Err(GwError::TooLarge { n, max: max_exact_n });
    }
    if !x.is_uniform() || !y.is_uniform() {
        return Err(GwError::WeightMismatch);
    }

    let dx = x.distances.data();
    let dy = y.distances.data();
    let scale = 1.0 / (n * n) as f64;

    let mut best_cost = f64::INFINITY;
    let mut best_kind = CouplingKind::Natural;
    let mut permutations_enumerated = 0usize;

    for sigma in (0..n).permutations(n) {
        permutations_enumerated += 1;
        let mut cost = 0.0;
        for i in 0..n {
            for j in 0..n {
                cost += p.pow(dx[[i, j]] - dy[[sigma[i], sigma[j]]]);
            }
        }
        cost *= scale;
        if cost < best_cost {
            best_cost = cost;
            best_kind = CouplingKind::Permutation(sigma);
        }
    }

    let natural = Coupling::natural(n);
    let natural_cost = coupling_cost(x, y, &natural, p)?;
    if natural_cost < best_cost {
        best_cost = natural_cost;
        best_kind = CouplingKind::Natural;
    }

    let product = Coupling::product(x.weights(), y.weights());
    let product_cost = coupling_cost(x, y, &product, p)?;
    if product_cost < best_cost {
        best_cost = product_cost;
        best_kind = CouplingKind::Product;
    }

    let coupling = match &best_kind {
        CouplingKind::Permutation(sigma) => Coupling::from_permutation(sigma),
        CouplingKind::Natural => natural,
        CouplingKind::Product => product,
    };

    Ok(GwEstimate {
        value: best_cost.powf(1.0 / p.exponent()),
        order_p: p,
        coupling,
        achieved_by: best_kind,
        method: SearchMethod {
            permutations_enumerated,
            natural_included: true,
            product_included: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use ndarray::array;
    use proptest::prelude::*;

    fn space_from_offdiag(n: usize, offdiag: f64) -> MetricSpace {
        let d = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { offdiag });
        MetricSpace::uniform(DistanceMatrix::from_square(d).unwrap())
    }

    fn seeded_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(5);
        let raw = Array2::from_shape_fn((n, d), |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        });
        FeatureMatrix::normalize_rows(&raw).unwrap()
    }

    #[test]
    fn natural_coupling_is_diagonal() {
        let c = Coupling::natural(2);
        assert_eq!(c.plan(), &array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(Coupling::natural(1).plan(), &array![[1.0]]);
        let c3 = Coupling::natural(3);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert_eq!(c3.plan()[[i, j]], expect);
            }
        }
    }

    #[test]
    fn coupling_cost_identical_spaces_is_zero() {
        let x = space_from_offdiag(3, 0.8);
        let cost = coupling_cost(&x, &x, &Coupling::natural(3), GwOrder::P1).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn coupling_cost_two_point_hand_value() {
        let x = space_from_offdiag(2, 1.0);
        let y = space_from_offdiag(2, 0.7);
        let pi = Coupling::natural(2);
        let c1 = coupling_cost(&x, &y, &pi, GwOrder::P1).unwrap();
        assert!((c1 - 0.15).abs() < 1e-15);
        let c2 = coupling_cost(&x, &y, &pi, GwOrder::P2).unwrap();
        assert!((c2 - 0.045).abs() < 1e-15);
    }

    #[test]
    fn coupling_cost_rejects_shape_mismatch() {
        let x = space_from_offdiag(2, 1.0);
        let y = space_from_offdiag(3, 1.0);
        let err = coupling_cost(&x, &y, &Coupling::natural(2), GwOrder::P1).unwrap_err();
        assert!(matches!(err, GwError::ShapeMismatch { .. }));
    }

    #[test]
    fn gram_bound_hand_values() {
        let f = seeded_features(2, 3, 1);
        let s = linalg::gram(&f);
        assert_eq!(gram_bound(&s, &s, GwOrder::P1).unwrap(), 0.0);

        // N=2, off-diagonal entries differing by 0.3.
        let a = GramTest::wrap(array![[1.0, 0.2], [0.2, 1.0]]);
        let b = GramTest::wrap(array![[1.0, 0.5], [0.5, 1.0]]);
        let v = gram_bound(&a, &b, GwOrder::P1).unwrap();
        assert!((v - 0.15).abs() < 1e-15);

        // N=3, one symmetric off-diagonal pair differing by 0.2.
        let a = GramTest::wrap(array![[1.0, 0.1, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let b = GramTest::wrap(array![[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let v = gram_bound(&a, &b, GwOrder::P1).unwrap();
        assert!((v - 0.4 / 9.0).abs() < 1e-15);
        assert!((v - 0.04444).abs() < 1e-4);
    }

    // Gram matrices with prescribed entries for bound tests.
    struct GramTest;
    impl GramTest {
        fn wrap(data: Array2<f64>) -> GramMatrix {
            let f = FeatureMatrix::from_unit_rows(factorize(&data)).unwrap();
            let g = linalg::gram(&f);
            let max_err = g
                .data()
                .iter()
                .zip(data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_err < 1e-12, "factorization drifted: {max_err}");
            g
        }
    }

    /// Cholesky-style factorization of a small PSD matrix with unit diagonal,
    /// padding to full rank; rows come out unit-norm.
    fn factorize(s: &Array2<f64>) -> Array2<f64> {
        let n = s.nrows();
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = s[[i, j]];
                for k in 0..j {
                    sum -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    l[[i, i]] = sum.max(0.0).sqrt();
                } else {
                    l[[i, j]] = sum / l[[j, j]];
                }
            }
        }
        l
    }

    #[test]
    fn validate_coupling_basics() {
        let mu = Array1::from_elem(3, 1.0 / 3.0);
        let nu = mu.clone();
        assert!(validate_coupling(&Coupling::natural(3), &mu, &nu));
        assert!(!validate_coupling(
            &Coupling::new(Array2::zeros((3, 3))),
            &mu,
            &nu
        ));
        assert!(validate_coupling(&Coupling::product(&mu, &nu), &mu, &nu));
    }

    #[test]
    fn gw_estimate_identical_spaces_is_zero_via_identity() {
        let f = seeded_features(4, 3, 9);
        let x = MetricSpace::from_features(&f);
        let est = gw_estimate(&x, &x, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.achieved_by, CouplingKind::Permutation(vec![0, 1, 2, 3]));
    }

    #[test]
    fn gw_estimate_recovers_row_permutation() {
        let f = seeded_features(4, 5, 21);
        let sigma = [2usize, 0, 3, 1];
        let mut permuted = Array2::zeros((4, 5));
        for (i, &s) in sigma.iter().enumerate() {
            permuted.row_mut(i).assign(&f.data().row(s));
        }
        let fp = FeatureMatrix::normalize_rows(&permuted).unwrap();
        let x = MetricSpace::from_features(&f);
        let y = MetricSpace::from_features(&fp);
        let est = gw_estimate(&x, &y, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
        assert!(est.value.abs() < 1e-12);
        match est.achieved_by {
            CouplingKind::Permutation(ref got) => {
                // got maps x-index i to y-index sigma^-1(i): y[k] = x[sigma[k]].
                for (i, &k) in got.iter().enumerate() {
                    assert_eq!(sigma[k], i);
                }
            }
            ref other => panic!("expected permutation, got {other:?}"),
        }
    }

    #[test]
    fn gw_estimate_two_point_hand_value() {
        let x = space_from_offdiag(2, 1.0);
        let y = space_from_offdiag(2, 0.7);
        let est = gw_estimate(&x, &y, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
        assert!((est.value - 0.15).abs() < 1e-15);
        // By symmetry both permutations tie; the product coupling cannot be better.
        let product = Coupling::product(x.weights(), y.weights());
        let pc = coupling_cost(&x, &y, &product, GwOrder::P1).unwrap();
        assert!(pc >= est.value - 1e-15);
    }

    #[test]
    fn gw_estimate_rejects_large_n() {
        let f = seeded_features(7, 3, 2);
        let x = MetricSpace::from_features(&f);
        let err = gw_estimate(&x, &x, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap_err();
        assert_eq!(err, GwError::TooLarge { n: 7, max: 6 });
    }

    #[test]
    fn gw_estimate_rejects_non_uniform_weights() {
        let f = seeded_features(3, 3, 2);
        let d = linalg::cosine_distance_matrix(&f);
        let x = MetricSpace::with_weights(d.clone(), array![0.5, 0.25, 0.25]).unwrap();
        let y = MetricSpace::uniform(d);
        let err = gw_estimate(&x, &y, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap_err();
        assert_eq!(err, GwError::WeightMismatch);
    }

    proptest! {
        /// Natural-coupling cost equals the Gram bound: the quadruple sum
        /// collapses onto the double sum.
        #[test]
        fn coupling_cost_identity(seed in 0u64..150, n in 2usize..8, d in 2usize..8, p2 in proptest::bool::ANY) {
            let p = if p2 { GwOrder::P2 } else { GwOrder::P1 };
            let f = seeded_features(n, d, seed);
            let g = seeded_features(n, d, seed.wrapping_add(1000));
            let x = MetricSpace::from_features(&f);
            let y = MetricSpace::from_features(&g);
            let lhs = coupling_cost(&x, &y, &Coupling::natural(n), p).unwrap();
            let rhs = gram_bound(&linalg::gram(&f), &linalg::gram(&g), p).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12, "lhs={lhs} rhs={rhs}");
        }

        /// The natural coupling is in the search set, so the estimate can
        /// never exceed the Gram bound.
        #[test]
        fn upper_bound_never_violated(seed in 0u64..100, n in 2usize..7, p2 in proptest::bool::ANY) {
            let p = if p2 { GwOrder::P2 } else { GwOrder::P1 };
            let f = seeded_features(n, 4, seed);
            let g = seeded_features(n, 4, seed.wrapping_add(2000));
            let x = MetricSpace::from_features(&f);
            let y = MetricSpace::from_features(&g);
            let est = gw_estimate(&x, &y, p, DEFAULT_MAX_EXACT_N).unwrap();
            let bound = gram_bound(&linalg::gram(&f), &linalg::gram(&g), p).unwrap();
            prop_assert!(est.value.powf(p.exponent()) <= bound + 1e-12);
        }

        /// Swapping the two spaces leaves the estimate unchanged.
        #[test]
        fn estimate_symmetric(seed in 0u64..100, n in 2usize..6) {
            let f = seeded_features(n, 4, seed);
            let g = seeded_features(n, 4, seed.wrapping_add(3000));
            let x = MetricSpace::from_features(&f);
            let y = MetricSpace::from_features(&g);
            let xy = gw_estimate(&x, &y, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
            let yx = gw_estimate(&y, &x, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
            prop_assert!((xy.value - yx.value).abs() < 1e-12);
        }

        /// The searched coupling set includes every estimate candidate, so
        /// restricting the search (larger min set) never helps: natural-only
        /// cost >= full search.
        #[test]
        fn monotone_search(seed in 0u64..100, n in 2usize..6) {
            let f = seeded_features(n, 4, seed);
            let g = seeded_features(n, 4, seed.wrapping_add(4000));
            let x = MetricSpace::from_features(&f);
            let y = MetricSpace::from_features(&g);
            let full = gw_estimate(&x, &y, GwOrder::P1, DEFAULT_MAX_EXACT_N).unwrap();
            let natural_only = coupling_cost(&x, &y, &Coupling::natural(n), GwOrder::P1).unwrap();
            prop_assert!(full.value <= natural_only + 1e-15);
        }
    }
}
