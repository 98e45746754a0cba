//! Graph-attention message passing over co-occurrence edges.
//!
//! One layer, with node features `F` (`N x D_in`) and edges `ℰ` (`N x N`):
//!
//! ```text
//! Z      = F·W
//! α̂_ij  = exp(min(LeakyReLU(a₁·Z_i + a₂·Z_j), 30)) · ℰ_ij
//! α      = Sinkhorn(α̂)
//! F_out  = σ(α·Z [+ F])      residual only between layers with D_in == D_out
//! ℰ_out  = α
//! ```
//!
//! Nodes whose edge row is entirely zero (an unmatched proposal under the
//! oracle graph, or an edge row clamped to zero by refinement) attend only to
//! themselves: `α̂_ii = 1`.

mod sinkhorn;

pub use sinkhorn::{sinkhorn_ds, Sinkhorn};

use sinkhorn::{sinkhorn_taped, SinkhornTape};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::params::ParamBlocks;
use crate::tensor::{glorot, leaky_relu_deriv, leaky_relu_scalar, sigmoid_scalar, Matrix, Rng};

/// Upper bound on the attention exponent before `exp`.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MPLayerParams {
    /// `D_in x D_out`
    pub w: Matrix,
    /// `2·D_out x 1`, `[a₁; a₂]`
    pub attn: Matrix,
    pub leaky_slope: f64,
}

impl MPLayerParams {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, leaky_slope: f64) -> Self {
        Self {
            w: glorot(rng, d_in, d_out, d_in, d_out),
            attn: glorot(rng, 2 * d_out, 1, 2 * d_out, 1),
            leaky_slope,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, leaky_slope: f64) -> Self {
        Self {
            w: Matrix::zeros(d_in, d_out),
            attn: Matrix::zeros(2 * d_out, 1),
            leaky_slope,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.attn.shape() != (2 * self.d_out(), 1) {
            return Err(Error::Shape {
                op: "MPLayerParams attn",
                left: self.attn.shape(),
                right: (2 * self.d_out(), 1),
            });
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MPParams {
    pub layers: Vec<MPLayerParams>,
    pub ds_iters: usize,
    pub ds_tol: f64,
}

pub const DEFAULT_DS_ITERS: usize = 50;
pub const DEFAULT_DS_TOL: f64 = 1e-6;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl MPParams {
    /// Glorot-initialized stack; `dims = [D_in, D_1, ..., D_L]`.
    pub fn init(rng: &mut Rng, dims: &[usize], leaky_slope: f64) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        Self {
            layers: dims
                .windows(2)
                .map(|w| MPLayerParams::init(rng, w[0], w[1], leaky_slope))
                .collect(),
            ds_iters: DEFAULT_DS_ITERS,
            ds_tol: DEFAULT_DS_TOL,
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_last(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out())
    }

    /// Width of [`propagate`]'s output.
    pub fn output_dim(&self) -> usize {
        self.d_in() + self.d_last()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("message passing needs at least one layer".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape {
                    op: "MPParams layer chain",
                    left: pair[0].w.shape(),
                    right: pair[1].w.shape(),
                });
            }
        }
        self.layers.iter().try_for_each(MPLayerParams::validate)
    }

    fn has_residual(&self, layer: usize) -> bool {
        layer > 0 && self.layers[layer].d_in() == self.layers[layer].d_out()
    }
}

impl ParamBlocks for MPParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| {
                [
                    (format!("mp.layer{l}.w"), &p.w),
                    (format!("mp.layer{l}.attn"), &p.attn),
                ]
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|p| [&mut p.w, &mut p.attn])
            .collect()
    }
}

struct AttentionTape {
    z: Matrix,
    /// LeakyReLU input `a₁·Z_i + a₂·Z_j`
    logits: Matrix,
    /// `exp(min(LeakyReLU(logits), 30))`
    gate: Matrix,
    a_hat: Matrix,
}

fn attention_forward(f: &Matrix, e: &Matrix, layer: &MPLayerParams) -> Result<AttentionTape> {
    if f.cols() != layer.d_in() {
        return Err(Error::Shape {
            op: "attention_scores",
            left: f.shape(),
            right: layer.w.shape(),
        });
    }
    if e.shape() != (f.rows(), f.rows()) {
        return Err(Error::Shape {
            op: "attention_scores",
            left: f.shape(),
            right: e.shape(),
        });
    }
    layer.validate()?;
    let d = layer.d_out();
    let n = f.rows();
    let z = f.matmul(&layer.w);
    let (a1, a2) = layer.attn.as_slice().split_at(d);
    let src: Vec<f64> = (0..n).map(|i| crate::tensor::dot(z.row(i), a1)).collect();
    let dst: Vec<f64> = (0..n).map(|j| crate::tensor::dot(z.row(j), a2)).collect();
    let logits = Matrix::from_fn(n, n, |i, j| src[i] + dst[j]);
    let gate = logits.map(|u| leaky_relu_scalar(u, layer.leaky_slope).min(EXP_CLAMP).exp());
    let a_hat = gate.hadamard(e);
    Ok(AttentionTape {
        z,
        logits,
        gate,
        a_hat,
    })
}

/// `α̂_ij = exp(min(LeakyReLU(aᵀ[WF_i ‖ WF_j]), 30)) · e_ij`.
pub fn attention_scores(f: &Matrix, e: &Matrix, layer: &MPLayerParams) -> Result<Matrix> {
    attention_forward(f, e, layer).map(|t| t.a_hat)
}

/// Indices of all-zero rows, which get a unit self-loop.
fn isolated_nodes(a_hat: &Matrix) -> Vec<usize> {
    (0..a_hat.rows())
        .filter(|&i| a_hat.row(i).iter().all(|&v| v == 0.0))
        .collect()
}

struct LayerTape {
    input: Matrix,
    attention: AttentionTape,
    isolated: Vec<usize>,
    sinkhorn: SinkhornTape,
    alpha: Matrix,
    output: Matrix,
    residual: bool,
}

fn layer_forward(
    f: &Matrix,
    e: &Matrix,
    layer: &MPLayerParams,
    ds_iters: usize,
    ds_tol: f64,
    residual: bool,
) -> Result<LayerTape> {
    let attention = attention_forward(f, e, layer)?;
    let mut a_hat = attention.a_hat.clone();
    let isolated = isolated_nodes(&a_hat);
    for &i in &isolated {
        a_hat[(i, i)] = 1.0;
    }
    let (balanced, sinkhorn) = sinkhorn_taped(&a_hat, ds_iters, ds_tol)?;
    let alpha = balanced.matrix;
    let mut pre = alpha.matmul(&attention.z);
    if residual {
        pre.add_assign(f);
    }
    Ok(LayerTape {
        input: f.clone(),
        attention,
        isolated,
        sinkhorn,
        alpha,
        output: pre.map(sigmoid_scalar),
        residual,
    })
}

/// One message-passing layer; returns `(F_out, ℰ_out = α)`.
pub fn mp_layer(
    f: &Matrix,
    e: &Matrix,
    layer: &MPLayerParams,
    ds_iters: usize,
    ds_tol: f64,
) -> Result<(Matrix, Matrix)> {
    let tape = layer_forward(f, e, layer, ds_iters, ds_tol, false)?;
    Ok((tape.output, tape.alpha))
}

struct LayerGrads {
    input: Matrix,
    edges: Matrix,
    w: Matrix,
    attn: Matrix,
}

impl LayerTape {
    /// `d_out` is the gradient on `F_out`, `d_alpha` the gradient arriving on
    /// `ℰ_out` from the next layer.
    fn backward(&self, layer: &MPLayerParams, d_out: &Matrix, d_alpha: Option<&Matrix>) -> LayerGrads {
        let z = &self.attention.z;
        let d_pre = Matrix::from_fn(d_out.rows(), d_out.cols(), |i, j| {
            let s = self.output[(i, j)];
            d_out[(i, j)] * s * (1.0 - s)
        });
        let mut d_input = if self.residual {
            d_pre.clone()
        } else {
            Matrix::zeros(self.input.rows(), self.input.cols())
        };

        let mut d_alpha_total = d_pre.matmul_t(z);
        if let Some(extra) = d_alpha {
            d_alpha_total.add_assign(extra);
        }
        let mut d_z = self.alpha.t_matmul(&d_pre);

        let mut d_a_hat = self.sinkhorn.backward(&d_alpha_total);
        for &i in &self.isolated {
            // constant self-loop; the rest of the row is identically zero
            d_a_hat.row_mut(i).fill(0.0);
        }
        let n = d_a_hat.rows();
        let mut d_edges = d_a_hat.hadamard(&self.attention.gate);
        for &i in &self.isolated {
            d_edges.row_mut(i).fill(0.0);
        }

        // gate = exp(min(leaky(u), 30)), a_hat = gate ⊙ e
        let slope = layer.leaky_slope;
        let d_logits = Matrix::from_fn(n, n, |i, j| {
            let u = self.attention.logits[(i, j)];
            if leaky_relu_scalar(u, slope) > EXP_CLAMP {
                0.0
            } else {
                d_a_hat[(i, j)] * self.attention.a_hat[(i, j)] * leaky_relu_deriv(u, slope)
            }
        });
        let d_src = d_logits.row_sums();
        let d_dst = d_logits.col_sums();

        let d = layer.d_out();
        let (a1, a2) = layer.attn.as_slice().split_at(d);
        let mut d_attn = Matrix::zeros(2 * d, 1);
        for i in 0..n {
            let zi = z.row(i);
            for k in 0..d {
                d_attn.as_mut_slice()[k] += d_src[i] * zi[k];
                d_attn.as_mut_slice()[d + k] += d_dst[i] * zi[k];
            }
            let dz = d_z.row_mut(i);
            for k in 0..d {
                dz[k] += d_src[i] * a1[k] + d_dst[i] * a2[k];
            }
        }

        let d_w = self.input.t_matmul(&d_z);
        d_input.add_assign(&d_z.matmul_t(&layer.w));
        LayerGrads {
            input: d_input,
            edges: d_edges,
            w: d_w,
            attn: d_attn,
        }
    }
}

/// Recorded forward pass of [`propagate`], reusable for the reverse pass.
pub struct PropagateTape {
    d_in: usize,
    layers: Vec<LayerTape>,
    output: Matrix,
}

#[derive(Clone, Debug)]
pub struct PropagateGrads {
    pub nodes: Matrix,
    pub edges: Matrix,
    pub params: MPParams,
}

impl PropagateTape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Final edge state `ℰ^L`.
    pub fn final_edges(&self) -> &Matrix {
        &self.layers.last().expect("at least one layer").alpha
    }

    pub fn backward(&self, params: &MPParams, upstream: &Matrix) -> Result<PropagateGrads> {
        if upstream.shape() != self.output.shape() {
            return Err(Error::Shape {
                op: "propagate_grad",
                left: upstream.shape(),
                right: self.output.shape(),
            });
        }
        let (d_nodes_direct, mut d_f) = upstream.hsplit(self.d_in);
        let mut d_alpha: Option<Matrix> = None;
        let mut grads = params.zeros_like();
        for (l, tape) in self.layers.iter().enumerate().rev() {
            let g = tape.backward(&params.layers[l], &d_f, d_alpha.as_ref());
            grads.layers[l].w = g.w;
            grads.layers[l].attn = g.attn;
            d_f = g.input;
            d_alpha = Some(g.edges);
        }
        let mut nodes = d_nodes_direct;
        nodes.add_assign(&d_f);
        Ok(PropagateGrads {
            nodes,
            edges: d_alpha.expect("at least one layer"),
            params: grads,
        })
    }
}

/// Forward pass on raw matrices; edges need not be symmetric here.
pub fn propagate_taped(nodes: &Matrix, edges: &Matrix, params: &MPParams) -> Result<PropagateTape> {
    params.validate()?;
    if nodes.cols() != params.d_in() {
        return Err(Error::Shape {
            op: "propagate",
            left: nodes.shape(),
            right: params.layers[0].w.shape(),
        });
    }
    let mut layers: Vec<LayerTape> = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let (f, e) = match layers.last() {
            Some(prev) => (&prev.output, &prev.alpha),
            None => (nodes, edges),
        };
        let tape = layer_forward(
            f,
            e,
            layer,
            params.ds_iters,
            params.ds_tol,
            params.has_residual(l),
        )?;
        layers.push(tape);
    }
    let output = nodes.hconcat(&layers.last().expect("validated").output);
    Ok(PropagateTape {
        d_in: nodes.cols(),
        layers,
        output,
    })
}

/// `[F ‖ F^L]`, the original features concatenated with the enhanced ones.
pub fn propagate(g: &SceneGraph, params: &MPParams) -> Result<Matrix> {
    propagate_taped(&g.nodes, g.edges.values(), params).map(|t| t.output)
}

/// Gradients of `⟨upstream, propagate(g)⟩` with respect to nodes, edges and
/// every layer parameter.
pub fn propagate_grad(g: &SceneGraph, params: &MPParams, upstream: &Matrix) -> Result<PropagateGrads> {
    propagate_taped(&g.nodes, g.edges.values(), params)?.backward(params, upstream)
}
