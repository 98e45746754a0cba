//! Scene graphs: predicted edges `P·T·Pᵀ` and oracle edges from IoU matching.

use crate::error::{Error, Result};
use crate::prior::{BBox, PriorMatrix};
use crate::tensor::Matrix;

const STOCHASTIC_TOL: f64 = 1e-9;
const EDGE_TOL: f64 = 1e-9;

/// Row-stochastic `N x C` class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs(Matrix);

impl ClassProbs {
    pub fn new(values: Matrix) -> Result<Self> {
        for r in 0..values.rows() {
            let row = values.row(r);
            if let Some(c) = row.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::NotStochastic { row: r, sum: row[c] });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NotStochastic { row: r, sum });
            }
        }
        Ok(Self(values))
    }

    /// For matrices that are row-stochastic by construction, e.g. softmax output.
    pub(crate) fn new_unchecked(values: Matrix) -> Self {
        Self(values)
    }

    pub fn one_hot(labels: &[usize], num_classes: usize) -> Self {
        let mut m = Matrix::zeros(labels.len(), num_classes);
        for (i, &l) in labels.iter().enumerate() {
            m[(i, l)] = 1.0;
        }
        Self(m)
    }

    pub fn uniform(n: usize, num_classes: usize) -> Self {
        Self(Matrix::filled(n, num_classes, 1.0 / num_classes as f64))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    /// Index of the largest probability per row (lowest index on ties).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.0.rows())
            .map(|r| {
                let row = self.0.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Symmetric `N x N` matrix with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMatrix(Matrix);

impl EdgeMatrix {
    /// Validates shape, bounds and symmetry up to `1e-9`, then snaps the
    /// values exactly onto the invariant set (clamp and mirror the upper
    /// triangle).
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::Shape {
                op: "EdgeMatrix::new",
                left: values.shape(),
                right: (values.rows(), values.rows()),
            });
        }
        let n = values.rows();
        for i in 0..n {
            for j in 0..n {
                let v = values[(i, j)];
                if !(-EDGE_TOL..=1.0 + EDGE_TOL).contains(&v) {
                    return Err(Error::InvalidEdges {
                        row: i,
                        col: j,
                        reason: "entry outside [0, 1]",
                    });
                }
                if (v - values[(j, i)]).abs() > EDGE_TOL {
                    return Err(Error::InvalidEdges {
                        row: i,
                        col: j,
                        reason: "not symmetric",
                    });
                }
            }
        }
        Ok(Self::project(&values))
    }

    /// Nearest valid edge matrix: `clamp((M + Mᵀ)/2, 0, 1)`.
    pub fn project(values: &Matrix) -> Self {
        Self(values.symmetrize().map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Matrix::zeros(n, n))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }
}

/// `G = (nodes, edges)` with node features `N x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    pub nodes: Matrix,
    pub edges: EdgeMatrix,
}

impl SceneGraph {
    pub fn new(nodes: Matrix, edges: EdgeMatrix) -> Result<Self> {
        if nodes.rows() != edges.num_nodes() {
            return Err(Error::Shape {
                op: "SceneGraph::new",
                left: nodes.shape(),
                right: edges.values().shape(),
            });
        }
        Ok(Self { nodes, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.rows()
    }
}

/// `ℰ = P·T·Pᵀ`.
pub fn build_edges(p: &ClassProbs, t: &PriorMatrix) -> Result<EdgeMatrix> {
    if p.num_classes() != t.num_classes() {
        return Err(Error::Shape {
            op: "build_edges",
            left: p.values().shape(),
            right: t.values().shape(),
        });
    }
    Ok(EdgeMatrix::project(&edges_raw(p.values(), t.values())))
}

/// Unprojected `sym(P·T·Pᵀ)` on raw matrices, used by gradient paths.
pub fn edges_raw(p: &Matrix, t: &Matrix) -> Matrix {
    p.matmul(t).matmul_t(p).symmetrize()
}

/// Gradient of `⟨upstream, sym(P·T·Pᵀ)⟩` with respect to `P`, for symmetric `T`:
/// `(G + Gᵀ)·P·T`.
pub fn edges_raw_backward(p: &Matrix, t: &Matrix, upstream: &Matrix) -> Matrix {
    upstream.add(&upstream.transpose()).matmul(p).matmul(t)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// For each proposal, the ground-truth index of highest IoU if that IoU
/// reaches `iou_thresh` (ties go to the lowest index).
pub fn match_proposals(proposals: &[BBox], gt: &[(usize, BBox)], iou_thresh: f64) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, (_, gb)) in gt.iter().enumerate() {
                let v = iou(p, gb);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.filter(|&(_, v)| v >= iou_thresh).map(|(g, _)| g)
        })
        .collect()
}

/// Class label per proposal under [`match_proposals`].
pub fn matched_labels(proposals: &[BBox], gt: &[(usize, BBox)], iou_thresh: f64) -> Vec<Option<usize>> {
    match_proposals(proposals, gt, iou_thresh)
        .into_iter()
        .map(|m| m.map(|g| gt[g].0))
        .collect()
}

/// Ground-truth edges: `e_ij = T[class_i][class_j]` for matched proposals,
/// zero for any pair touching an unmatched one.
pub fn build_oracle_edges(
    proposals: &[BBox],
    gt: &[(usize, BBox)],
    t: &PriorMatrix,
    iou_thresh: f64,
) -> Result<EdgeMatrix> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Config(format!(
            "iou threshold {iou_thresh} outside (0, 1)"
        )));
    }
    if let Some(&(c, _)) = gt.iter().find(|(c, _)| *c >= t.num_classes()) {
        return Err(Error::ClassOutOfRange {
            index: c as i64,
            num_classes: t.num_classes(),
        });
    }
    let labels = matched_labels(proposals, gt, iou_thresh);
    let n = proposals.len();
    let mut e = Matrix::zeros(n, n);
    for i in 0..n {
        let Some(ci) = labels[i] else { continue };
        for j in 0..n {
            if let Some(cj) = labels[j] {
                e[(i, j)] = t.get(ci, cj);
            }
        }
    }
    Ok(EdgeMatrix(e))
}
