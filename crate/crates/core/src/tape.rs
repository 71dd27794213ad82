//! Minimal reverse-mode autodiff over dense f64 matrices.
//!
//! A `Tape` is a Wengert list built per training step: leaves hold parameter
//! tensors, constants hold frozen-side values, and `backward` walks the list
//! in reverse accumulating gradients. Scalars are 1x1 matrices. The op set is
//! exactly what the encoder, the classification head, and the loss terms
//! need — this is not a general tensor library.

use crate::hms::{self, QuerySupport};
use crate::linalg::FeatureMatrix;
use ndarray::{Array1, Array2};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    /// C = A * B^T.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    /// Every row of `x` plus a 1 x d bias row.
    AddRowBroadcast { x: NodeId, bias: NodeId },
    Gelu(NodeId),
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId },
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    Row { x: NodeId, idx: usize },
    /// Mean cross-entropy of row-wise softmax against integer labels.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// y = x / tau with tau a 1x1 node (learnable temperature).
    ScaleRecip { x: NodeId, tau: NodeId },
    /// Query-support sculpting loss; prototypes are frozen constants.
    Sculpt {
        queries: NodeId,
        prototypes: Array2<f64>,
        query_labels: Vec<usize>,
        prototype_labels: Vec<usize>,
        tau_prime: f64,
    },
    /// (1/N) sum_i (1 - <x_i, t_i>).
    CosGapVsConst { x: NodeId, target: Array2<f64> },
    /// (1/N) sum_i ||x_i - t_i||_1.
    L1GapVsConst { x: NodeId, target: Array2<f64> },
    /// (1/N) sum_i ||x_i - t_i||_2.
    L2GapVsConst { x: NodeId, target: Array2<f64> },
    /// (1/N) sum_i KL(p_i || softmax(x_i)) with constant target probs p.
    KlVsConstProbs { logits: NodeId, target_probs: Array2<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `backward`; unreached nodes hold `None`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id].as_ref()
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.dim(), (1, 1), "expected scalar node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Trainable input; `backward` reports its gradient.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Non-trainable input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = &self.nodes[a].value + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = self.nodes[bias].value.row(0).to_owned();
        let mut v = self.nodes[x].value.clone();
        for mut row in v.rows_mut() {
            row += &b;
        }
        self.push(v, Op::AddRowBroadcast { x, bias })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = self.nodes[gain].value.row(0).to_owned();
        let b = self.nodes[bias].value.row(0).to_owned();
        let d = xv.ncols() as f64;
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, t) in row.iter_mut().enumerate() {
                *t = g[j] * (*t - mean) * inv + b[j];
            }
        }
        self.push(v, Op::LayerNormRows { x, gain, bias })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[x].value);
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|t| t / norm);
        }
        self.push(v, Op::NormalizeRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].value.ncols();
        let rows: usize = parts.iter().map(|&p| self.nodes[p].value.nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            for r in 0..pv.nrows() {
                v.row_mut(at).assign(&pv.row(r));
                at += 1;
            }
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.nodes[parts[0]].value.nrows();
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            for c in 0..pv.ncols() {
                v.column_mut(at).assign(&pv.column(c));
                at += 1;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn row(&mut self, x: NodeId, idx: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .row(idx)
            .to_owned()
            .insert_axis(ndarray::Axis(0));
        self.push(v, Op::Row { x, idx })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.nrows(), labels.len());
        let mut total = 0.0;
        for (row, &label) in lv.rows().into_iter().zip(labels.iter()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn scale_recip(&mut self, x: NodeId, tau: NodeId) -> NodeId {
        let t = self.nodes[tau].value[[0, 0]];
        let v = self.nodes[x].value.mapv(|v| v / t);
        self.push(v, Op::ScaleRecip { x, tau })
    }

    /// Sculpting loss over unit-norm queries (rows of `queries`) against the
    /// support set queries + prototypes. Prototypes receive no gradient.
    pub fn sculpt(
        &mut self,
        queries: NodeId,
        prototypes: &FeatureMatrix,
        query_labels: &[usize],
        prototype_labels: &[usize],
        tau_prime: f64,
    ) -> NodeId {
        let qs = self.build_query_support(queries, prototypes, query_labels, prototype_labels);
        let v = Array2::from_elem((1, 1), hms::sculpt_loss(&qs, tau_prime));
        self.push(
            v,
            Op::Sculpt {
                queries,
                prototypes: prototypes.data().clone(),
                query_labels: query_labels.to_vec(),
                prototype_labels: prototype_labels.to_vec(),
                tau_prime,
            },
        )
    }

    fn build_query_support(
        &self,
        queries: NodeId,
        prototypes: &FeatureMatrix,
        query_labels: &[usize],
        prototype_labels: &[usize],
    ) -> QuerySupport {
        let q = FeatureMatrix::from_unit_rows(self.nodes[queries].value.clone())
            .expect("sculpt input must be normalized (insert normalize_rows first)");
        hms::build_query_support(&q, query_labels, prototypes, prototype_labels)
            .expect("query/support construction failed")
    }

    pub fn cos_gap_vs_const(&mut self, x: NodeId, target: &Array2<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        let n = xv.nrows() as f64;
        let mut total = 0.0;
        for (row, trow) in xv.rows().into_iter().zip(target.rows()) {
            total += 1.0 - row.dot(&trow);
        }
        let v = Array2::from_elem((1, 1), total / n);
        self.push(
            v,
            Op::CosGapVsConst {
                x,
                target: target.clone(),
            },
        )
    }

    pub fn l1_gap_vs_const(&mut self, x: NodeId, target: &Array2<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        let n = xv.nrows() as f64;
        let total: f64 = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let v = Array2::from_elem((1, 1), total / n);
        self.push(
            v,
            Op::L1GapVsConst {
                x,
                target: target.clone(),
            },
        )
    }

    pub fn l2_gap_vs_const(&mut self, x: NodeId, target: &Array2<f64>) -> NodeId {
        let xv = &self.nodes[x].value;
        let n = xv.nrows() as f64;
        let mut total = 0.0;
        for (row, trow) in xv.rows().into_iter().zip(target.rows()) {
            let sq: f64 = row
                .iter()
                .zip(trow.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += sq.sqrt();
        }
        let v = Array2::from_elem((1, 1), total / n);
        self.push(
            v,
            Op::L2GapVsConst {
                x,
                target: target.clone(),
            },
        )
    }

    pub fn kl_vs_const_probs(&mut self, logits: NodeId, target_probs: &Array2<f64>) -> NodeId {
        let lv = &self.nodes[logits].value;
        let n = lv.nrows() as f64;
        let q = softmax_rows(lv);
        let mut total = 0.0;
        for (prow, qrow) in target_probs.rows().into_iter().zip(q.rows()) {
            for (&p, &qv) in prow.iter().zip(qrow.iter()) {
                if p > 0.0 {
                    total += p * (p.ln() - qv.ln());
                }
            }
        }
        let v = Array2::from_elem((1, 1), total / n);
        self.push(
            v,
            Op::KlVsConstProbs {
                logits,
                target_probs: target_probs.clone(),
            },
        )
    }

    /// Reverse pass from the given seed gradients (usually a single scalar
    /// loss seeded with 1.0; extra seeds let externally computed gradients
    /// join the same graph).
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            assert_eq!(
                self.nodes[*id].value.dim(),
                seed.dim(),
                "seed shape must match node shape"
            );
            accumulate(&mut grads[*id], seed);
        }

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[*b].value.t());
                let db = self.nodes[*a].value.t().dot(g);
                accumulate(&mut grads[*a], &da);
                accumulate(&mut grads[*b], &db);
            }
            Op::MatMulNT(a, b) => {
                let da = g.dot(&self.nodes[*b].value);
                let db = g.t().dot(&self.nodes[*a].value);
                accumulate(&mut grads[*a], &da);
                accumulate(&mut grads[*b], &db);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], g);
                accumulate(&mut grads[*b], g);
            }
            Op::AddConst(a) => accumulate(&mut grads[*a], g),
            Op::Scale(a, c) => {
                let da = g.mapv(|v| v * c);
                accumulate(&mut grads[*a], &da);
            }
            Op::AddRowBroadcast { x, bias } => {
                accumulate(&mut grads[*x], g);
                let mut db = Array1::<f64>::zeros(g.ncols());
                for row in g.rows() {
                    db += &row;
                }
                accumulate(
                    &mut grads[*bias],
                    &db.insert_axis(ndarray::Axis(0)),
                );
            }
            Op::Gelu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[*a].value)
                    .map_collect(|&go, &x| go * gelu_grad_scalar(x));
                accumulate(&mut grads[*a], &da);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gain].value.row(0).to_owned();
                let d = xv.ncols();
                let df = d as f64;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                let mut dg = Array1::<f64>::zeros(d);
                let mut db = Array1::<f64>::zeros(d);
                for (r, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / df;
                    let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / df;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&t| (t - mean) * inv).collect();
                    let gout = g.row(r);
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        dg[j] += gout[j] * xhat[j];
                        db[j] += gout[j];
                        dxhat[j] = gout[j] * gv[j];
                    }
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / df;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / df;
                    for j in 0..d {
                        dx[[r, j]] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                accumulate(&mut grads[*x], &dx);
                accumulate(&mut grads[*gain], &dg.insert_axis(ndarray::Axis(0)));
                accumulate(&mut grads[*bias], &db.insert_axis(ndarray::Axis(0)));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut da = Array2::<f64>::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot: f64 = g.row(r).dot(&y.row(r));
                    for c in 0..y.ncols() {
                        da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                accumulate(&mut grads[*a], &da);
            }
            Op::NormalizeRows(a) => {
                let u = &self.nodes[*a].value;
                let z = &self.nodes[id].value;
                let mut da = Array2::<f64>::zeros(u.dim());
                for r in 0..u.nrows() {
                    let norm = u.row(r).dot(&u.row(r)).sqrt();
                    let dot: f64 = g.row(r).dot(&z.row(r));
                    for c in 0..u.ncols() {
                        da[[r, c]] = (g[[r, c]] - dot * z[[r, c]]) / norm;
                    }
                }
                accumulate(&mut grads[*a], &da);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.nrows();
                    let dpart = g.slice(ndarray::s![at..at + rows, ..]).to_owned();
                    accumulate(&mut grads[p], &dpart);
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = self.nodes[p].value.ncols();
                    let dpart = g.slice(ndarray::s![.., at..at + cols]).to_owned();
                    accumulate(&mut grads[p], &dpart);
                    at += cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                accumulate(&mut grads[*x], &dx);
            }
            Op::Row { x, idx } => {
                let xv = &self.nodes[*x].value;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                dx.row_mut(*idx).assign(&g.row(0));
                accumulate(&mut grads[*x], &dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let lv = &self.nodes[*logits].value;
                let mut dl = softmax_rows(lv);
                for (r, &label) in labels.iter().enumerate() {
                    dl[[r, label]] -= 1.0;
                }
                dl.mapv_inplace(|v| v * scale);
                accumulate(&mut grads[*logits], &dl);
            }
            Op::ScaleRecip { x, tau } => {
                let t = self.nodes[*tau].value[[0, 0]];
                let dx = g.mapv(|v| v / t);
                accumulate(&mut grads[*x], &dx);
                let xv = &self.nodes[*x].value;
                let dtau: f64 = g
                    .iter()
                    .zip(xv.iter())
                    .map(|(go, v)| -go * v / (t * t))
                    .sum();
                accumulate(&mut grads[*tau], &Array2::from_elem((1, 1), dtau));
            }
            Op::Sculpt {
                queries,
                prototypes,
                query_labels,
                prototype_labels,
                tau_prime,
            } => {
                let protos = FeatureMatrix::from_unit_rows(prototypes.clone())
                    .expect("prototypes stay unit-norm");
                let qs = self.build_query_support(*queries, &protos, query_labels, prototype_labels);
                let mut dq = hms::sculpt_loss_grad(&qs, *tau_prime);
                let scale = g[[0, 0]];
                dq.mapv_inplace(|v| v * scale);
                accumulate(&mut grads[*queries], &dq);
            }
            Op::CosGapVsConst { x, target } => {
                let n = self.nodes[*x].value.nrows() as f64;
                let dx = target.mapv(|v| -v * g[[0, 0]] / n);
                accumulate(&mut grads[*x], &dx);
            }
            Op::L1GapVsConst { x, target } => {
                let xv = &self.nodes[*x].value;
                let n = xv.nrows() as f64;
                let dx = ndarray::Zip::from(xv)
                    .and(target)
                    .map_collect(|&a, &b| sign0(a - b) * g[[0, 0]] / n);
                accumulate(&mut grads[*x], &dx);
            }
            Op::L2GapVsConst { x, target } => {
                let xv = &self.nodes[*x].value;
                let n = xv.nrows() as f64;
                let mut dx = Array2::<f64>::zeros(xv.dim());
                for (r, (row, trow)) in xv.rows().into_iter().zip(target.rows()).enumerate() {
                    let sq: f64 = row
                        .iter()
                        .zip(trow.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let norm = sq.sqrt();
                    if norm > 0.0 {
                        for c in 0..xv.ncols() {
                            dx[[r, c]] = (row[c] - trow[c]) / norm * g[[0, 0]] / n;
                        }
                    }
                }
                accumulate(&mut grads[*x], &dx);
            }
            Op::KlVsConstProbs { logits, target_probs } => {
                let lv = &self.nodes[*logits].value;
                let n = lv.nrows() as f64;
                let q = softmax_rows(lv);
                let dl = ndarray::Zip::from(&q)
                    .and(target_probs)
                    .map_collect(|&qv, &p| (qv - p) * g[[0, 0]] / n);
                accumulate(&mut grads[*logits], &dl);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: &Array2<f64>) {
    match slot {
        Some(existing) => *existing += g,
        None => *slot = Some(g.clone()),
    }
}
