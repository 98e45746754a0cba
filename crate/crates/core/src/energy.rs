//! Scalar energy `E_θ(𝒩, ℰ)` over scene graphs and Langevin refinement.
//!
//! The network has three stages:
//!
//! 1. edge-aware node features `H = [F ‖ ℰ·F·W_edge]`
//! 2. attention pooling `s = tanh(H·W_pool)·v`, `β = softmax(s)`, `h = Hᵀβ`
//! 3. two linear layers `E = w₂ᵀ·LeakyReLU(W₁ᵀh + b₁) + b₂`

use crate::error::{Error, Result};
use crate::graph::{EdgeMatrix, SceneGraph};
use crate::params::ParamBlocks;
use crate::tensor::{
    dot, glorot, leaky_relu_deriv, leaky_relu_scalar, softmax_backward, softmax_in_place, Matrix, Rng,
};

pub const ENERGY_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyParams {
    /// `D x D_e`
    pub w_edge: Matrix,
    /// `(D + D_e) x D_p`
    pub w_pool: Matrix,
    /// `D_p x 1`
    pub v_pool: Matrix,
    /// `(D + D_e) x H`
    pub w1: Matrix,
    /// `H x 1`
    pub b1: Matrix,
    /// `H x 1`
    pub w2: Matrix,
    /// `1 x 1`
    pub b2: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnergyDims {
    pub node: usize,
    pub edge: usize,
    pub pool: usize,
    pub hidden: usize,
}

impl EnergyParams {
    pub fn init(rng: &mut Rng, dims: EnergyDims) -> Self {
        let cat = dims.node + dims.edge;
        Self {
            w_edge: glorot(rng, dims.node, dims.edge, dims.node, dims.edge),
            w_pool: glorot(rng, cat, dims.pool, cat, dims.pool),
            v_pool: glorot(rng, dims.pool, 1, dims.pool, 1),
            w1: glorot(rng, cat, dims.hidden, cat, dims.hidden),
            b1: Matrix::zeros(dims.hidden, 1),
            w2: glorot(rng, dims.hidden, 1, dims.hidden, 1),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn zeros(dims: EnergyDims) -> Self {
        let cat = dims.node + dims.edge;
        Self {
            w_edge: Matrix::zeros(dims.node, dims.edge),
            w_pool: Matrix::zeros(cat, dims.pool),
            v_pool: Matrix::zeros(dims.pool, 1),
            w1: Matrix::zeros(cat, dims.hidden),
            b1: Matrix::zeros(dims.hidden, 1),
            w2: Matrix::zeros(dims.hidden, 1),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn dims(&self) -> EnergyDims {
        EnergyDims {
            node: self.w_edge.rows(),
            edge: self.w_edge.cols(),
            pool: self.w_pool.cols(),
            hidden: self.w1.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        let cat = d.node + d.edge;
        let expected = [
            ("w_pool", &self.w_pool, (cat, d.pool)),
            ("v_pool", &self.v_pool, (d.pool, 1)),
            ("w1", &self.w1, (cat, d.hidden)),
            ("b1", &self.b1, (d.hidden, 1)),
            ("w2", &self.w2, (d.hidden, 1)),
            ("b2", &self.b2, (1, 1)),
        ];
        for (_, m, shape) in expected {
            if m.shape() != shape {
                return Err(Error::Shape {
                    op: "EnergyParams",
                    left: m.shape(),
                    right: shape,
                });
            }
        }
        Ok(())
    }
}

impl ParamBlocks for EnergyParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("energy.w_edge".into(), &self.w_edge),
            ("energy.w_pool".into(), &self.w_pool),
            ("energy.v_pool".into(), &self.v_pool),
            ("energy.w1".into(), &self.w1),
            ("energy.b1".into(), &self.b1),
            ("energy.w2".into(), &self.w2),
            ("energy.b2".into(), &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_edge,
            &mut self.w_pool,
            &mut self.v_pool,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Anything SGLD can descend: a scalar over `(nodes, edges)` with gradients.
pub trait GraphEnergy {
    fn energy(&self, nodes: &Matrix, edges: &Matrix) -> Result<f64>;

    /// `(∂E/∂nodes, ∂E/∂edges)`
    fn input_grad(&self, nodes: &Matrix, edges: &Matrix) -> Result<(Matrix, Matrix)>;
}

struct EnergyTape {
    agg: Matrix,
    h: Matrix,
    tanh_k: Matrix,
    beta: Vec<f64>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    energy: f64,
}

fn check_inputs(nodes: &Matrix, edges: &Matrix, theta: &EnergyParams) -> Result<()> {
    theta.validate()?;
    if nodes.cols() != theta.dims().node {
        return Err(Error::Shape {
            op: "energy",
            left: nodes.shape(),
            right: theta.w_edge.shape(),
        });
    }
    if edges.shape() != (nodes.rows(), nodes.rows()) || nodes.rows() == 0 {
        return Err(Error::Shape {
            op: "energy",
            left: nodes.shape(),
            right: edges.shape(),
        });
    }
    Ok(())
}

fn forward(nodes: &Matrix, edges: &Matrix, theta: &EnergyParams) -> Result<EnergyTape> {
    check_inputs(nodes, edges, theta)?;
    let agg = edges.matmul(nodes);
    let h = nodes.hconcat(&agg.matmul(&theta.w_edge));
    let tanh_k = h.matmul(&theta.w_pool).map(f64::tanh);
    let mut beta: Vec<f64> = (0..h.rows())
        .map(|i| dot(tanh_k.row(i), theta.v_pool.as_slice()))
        .collect();
    softmax_in_place(&mut beta);
    let pooled = h.t_matmul(&Matrix::column(&beta)).into_vec();
    let hidden_pre: Vec<f64> = theta
        .w1
        .t_matmul(&Matrix::column(&pooled))
        .as_slice()
        .iter()
        .zip(theta.b1.as_slice())
        .map(|(a, b)| a + b)
        .collect();
    let energy = hidden_pre
        .iter()
        .zip(theta.w2.as_slice())
        .map(|(&z, w)| w * leaky_relu_scalar(z, ENERGY_LEAKY_SLOPE))
        .sum::<f64>()
        + theta.b2[(0, 0)];
    Ok(EnergyTape {
        agg,
        h,
        tanh_k,
        beta,
        pooled,
        hidden_pre,
        energy,
    })
}

/// Gradients of the energy with respect to nodes, edges and every θ block.
#[derive(Clone, Debug)]
pub struct EnergyGrads {
    pub nodes: Matrix,
    pub edges: Matrix,
    pub theta: EnergyParams,
}

impl EnergyTape {
    fn backward(&self, nodes: &Matrix, edges: &Matrix, theta: &EnergyParams, scale: f64) -> EnergyGrads {
        let d = theta.dims();
        let mut g = theta.zeros_like();
        g.b2[(0, 0)] = scale;

        let mut d_hidden_pre = vec![0.0; d.hidden];
        for k in 0..d.hidden {
            let z = self.hidden_pre[k];
            g.w2.as_mut_slice()[k] = scale * leaky_relu_scalar(z, ENERGY_LEAKY_SLOPE);
            d_hidden_pre[k] = scale * theta.w2.as_slice()[k] * leaky_relu_deriv(z, ENERGY_LEAKY_SLOPE);
        }
        g.b1 = Matrix::column(&d_hidden_pre);
        let d_hidden_col = Matrix::column(&d_hidden_pre);
        g.w1 = Matrix::column(&self.pooled).matmul_t(&d_hidden_col);
        let d_pooled = theta.w1.matmul(&d_hidden_col).into_vec();

        // pooled = Σ β_i H_i
        let n = self.h.rows();
        let mut d_h = Matrix::from_fn(n, self.h.cols(), |i, j| self.beta[i] * d_pooled[j]);
        let d_beta: Vec<f64> = (0..n).map(|i| dot(self.h.row(i), &d_pooled)).collect();
        let d_scores = softmax_backward(&self.beta, &d_beta);

        // s = tanh(H·W_pool)·v
        let d_scores_col = Matrix::column(&d_scores);
        g.v_pool = self.tanh_k.t_matmul(&d_scores_col);
        let d_k = d_scores_col
            .matmul_t(&theta.v_pool)
            .zip_map(&self.tanh_k, |dt, t| dt * (1.0 - t * t));
        g.w_pool = self.h.t_matmul(&d_k);
        d_h.add_assign(&d_k.matmul_t(&theta.w_pool));

        // H = [F ‖ ℰ·F·W_edge]
        let (mut d_nodes, d_q) = d_h.hsplit(d.node);
        g.w_edge = self.agg.t_matmul(&d_q);
        let d_agg = d_q.matmul_t(&theta.w_edge);
        let d_edges = d_agg.matmul_t(nodes);
        d_nodes.add_assign(&edges.t_matmul(&d_agg));

        EnergyGrads {
            nodes: d_nodes,
            edges: d_edges,
            theta: g,
        }
    }
}

pub fn energy_raw(nodes: &Matrix, edges: &Matrix, theta: &EnergyParams) -> Result<f64> {
    forward(nodes, edges, theta).map(|t| t.energy)
}

pub fn energy_grad_raw(nodes: &Matrix, edges: &Matrix, theta: &EnergyParams) -> Result<EnergyGrads> {
    let tape = forward(nodes, edges, theta)?;
    Ok(tape.backward(nodes, edges, theta, 1.0))
}

/// Energy value together with its gradients.
pub fn energy_and_grad_raw(
    nodes: &Matrix,
    edges: &Matrix,
    theta: &EnergyParams,
) -> Result<(f64, EnergyGrads)> {
    let tape = forward(nodes, edges, theta)?;
    Ok((tape.energy, tape.backward(nodes, edges, theta, 1.0)))
}

pub fn energy(g: &SceneGraph, theta: &EnergyParams) -> Result<f64> {
    energy_raw(&g.nodes, g.edges.values(), theta)
}

pub fn energy_grad(g: &SceneGraph, theta: &EnergyParams) -> Result<EnergyGrads> {
    energy_grad_raw(&g.nodes, g.edges.values(), theta)
}

impl GraphEnergy for EnergyParams {
    fn energy(&self, nodes: &Matrix, edges: &Matrix) -> Result<f64> {
        energy_raw(nodes, edges, self)
    }

    fn input_grad(&self, nodes: &Matrix, edges: &Matrix) -> Result<(Matrix, Matrix)> {
        let g = energy_grad_raw(nodes, edges, self)?;
        Ok((g.nodes, g.edges))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub steps: usize,
    /// λ in `x ← x − (λ/2)·∂E/∂x + ε`
    pub step_size: f64,
    /// variance of ε
    pub noise_var: f64,
    pub update_nodes: bool,
    pub update_edges: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 10.0,
            noise_var: 1e-4,
            update_nodes: true,
            update_edges: true,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "sgld step size {} must be > 0",
                self.step_size
            )));
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::Config(format!(
                "sgld noise variance {} must be >= 0",
                self.noise_var
            )));
        }
        Ok(())
    }
}

/// Langevin refinement, calling `observe(step, graph)` on the initial state
/// (step 0) and after every update.
pub fn sgld_refine_observed<E: GraphEnergy + ?Sized>(
    g0: &SceneGraph,
    model: &E,
    cfg: &SgldConfig,
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &SceneGraph) -> Result<()>,
) -> Result<SceneGraph> {
    cfg.validate()?;
    observe(0, g0)?;
    let mut nodes = g0.nodes.clone();
    let mut edges = g0.edges.clone();
    let half_step = 0.5 * cfg.step_size;
    let noise_std = cfg.noise_var.sqrt();
    for step in 1..=cfg.steps {
        let (d_nodes, d_edges) = model.input_grad(&nodes, edges.values())?;
        if !d_nodes.is_finite() || !d_edges.is_finite() {
            return Err(Error::NonFinite(format!("energy gradient at sgld step {step}")));
        }
        // Noise is drawn for both blocks every step so that toggling one
        // block does not shift the other's random stream.
        let node_noise = rng.normal_matrix(nodes.rows(), nodes.cols(), noise_std);
        let n = edges.num_nodes();
        let edge_noise = rng.normal_matrix(n, n, noise_std);
        if cfg.update_nodes {
            nodes.axpy(-half_step, &d_nodes);
            nodes.add_assign(&node_noise);
        }
        if cfg.update_edges {
            let mut e = edges.values().clone();
            e.axpy(-half_step, &d_edges);
            e.add_assign(&edge_noise);
            edges = EdgeMatrix::project(&e);
        }
        observe(step, &SceneGraph::new(nodes.clone(), edges.clone())?)?;
    }
    SceneGraph::new(nodes, edges)
}

/// `x ← x − (λ/2)·∂E/∂x + ε`, `ε ~ N(0, noise_var)`, for `cfg.steps` steps;
/// edges are symmetrized and clamped to `[0, 1]` after each step.
pub fn sgld_refine<E: GraphEnergy + ?Sized>(
    g0: &SceneGraph,
    model: &E,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<SceneGraph> {
    sgld_refine_observed(g0, model, cfg, rng, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error, Rng, DEFAULT_STEP};
    use proptest::prelude::*;

    const DIMS: EnergyDims = EnergyDims {
        node: 3,
        edge: 2,
        pool: 3,
        hidden: 4,
    };

    fn random_theta(rng: &mut Rng) -> EnergyParams {
        let mut t = EnergyParams::init(rng, DIMS);
        t.b1 = rng.normal_matrix(DIMS.hidden, 1, 0.3);
        t.b2 = rng.normal_matrix(1, 1, 0.3);
        t
    }

    fn random_graph(rng: &mut Rng, n: usize) -> SceneGraph {
        SceneGraph::new(
            rng.normal_matrix(n, DIMS.node, 1.0),
            EdgeMatrix::new(rng.uniform_matrix(n, n, 0.0, 1.0).symmetrize()).unwrap(),
        )
        .unwrap()
    }

    struct Quadratic;

    impl GraphEnergy for Quadratic {
        fn energy(&self, nodes: &Matrix, edges: &Matrix) -> Result<f64> {
            Ok(0.5 * (nodes.dot(nodes) + edges.dot(edges)))
        }

        fn input_grad(&self, nodes: &Matrix, edges: &Matrix) -> Result<(Matrix, Matrix)> {
            Ok((nodes.clone(), edges.clone()))
        }
    }

    #[test]
    fn zero_theta_zero_energy() {
        let mut rng = Rng::new(1);
        let theta = EnergyParams::zeros(DIMS);
        for n in 1..5 {
            let g = random_graph(&mut rng, n);
            assert_eq!(energy(&g, &theta).unwrap(), 0.0);
            let grads = energy_grad(&g, &theta).unwrap();
            assert_eq!(grads.nodes, Matrix::zeros(n, DIMS.node));
            assert_eq!(grads.edges, Matrix::zeros(n, n));
        }
    }

    #[test]
    fn singleton_graph_ignores_pooling_vector() {
        let mut rng = Rng::new(2);
        let mut theta = random_theta(&mut rng);
        let g = random_graph(&mut rng, 1);
        let e1 = energy(&g, &theta).unwrap();
        theta.v_pool = rng.normal_matrix(DIMS.pool, 1, 10.0);
        assert_eq!(energy(&g, &theta).unwrap(), e1);
    }

    /// Straight-line evaluation of the three-stage contract.
    fn reference_energy(g: &SceneGraph, t: &EnergyParams) -> f64 {
        let n = g.num_nodes();
        let f = &g.nodes;
        let e = g.edges.values();
        let d = DIMS;
        let mut h = vec![vec![0.0; d.node + d.edge]; n];
        for i in 0..n {
            for a in 0..d.node {
                h[i][a] = f[(i, a)];
            }
            for b in 0..d.edge {
                let mut acc = 0.0;
                for j in 0..n {
                    for a in 0..d.node {
                        acc += e[(i, j)] * f[(j, a)] * t.w_edge[(a, b)];
                    }
                }
                h[i][d.node + b] = acc;
            }
        }
        let scores: Vec<f64> = h
            .iter()
            .map(|hi| {
                (0..d.pool)
                    .map(|p| {
                        let k: f64 = hi.iter().enumerate().map(|(a, v)| v * t.w_pool[(a, p)]).sum();
                        k.tanh() * t.v_pool[(p, 0)]
                    })
                    .sum()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let mut pooled = vec![0.0; d.node + d.edge];
        for i in 0..n {
            let w = (scores[i] - m).exp() / z;
            for a in 0..pooled.len() {
                pooled[a] += w * h[i][a];
            }
        }
        let mut out = t.b2[(0, 0)];
        for k in 0..d.hidden {
            let pre: f64 = pooled
                .iter()
                .enumerate()
                .map(|(a, v)| v * t.w1[(a, k)])
                .sum::<f64>()
                + t.b1[(k, 0)];
            let act = if pre > 0.0 { pre } else { 0.2 * pre };
            out += t.w2[(k, 0)] * act;
        }
        out
    }

    #[test]
    fn matches_reference_recomputation() {
        let mut rng = Rng::new(3);
        let theta = random_theta(&mut rng);
        let g = random_graph(&mut rng, 4);
        let e = energy(&g, &theta).unwrap();
        assert!((e - reference_energy(&g, &theta)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let theta = random_theta(&mut rng);
            let g = random_graph(&mut rng, 4);
            let nodes = g.nodes.clone();
            let edges = g.edges.values().clone();
            let grads = energy_grad(&g, &theta).unwrap();

            let num =
                finite_diff_grad(|x| energy_raw(x, &edges, &theta).unwrap(), &nodes, DEFAULT_STEP).unwrap();
            assert!(relative_error(&grads.nodes, &num) < 1e-6, "nodes seed {seed}");
            let num =
                finite_diff_grad(|x| energy_raw(&nodes, x, &theta).unwrap(), &edges, DEFAULT_STEP).unwrap();
            assert!(relative_error(&grads.edges, &num) < 1e-6, "edges seed {seed}");

            let analytic: Vec<Matrix> = grads.theta.blocks().into_iter().map(|(_, m)| m.clone()).collect();
            for (b, (name, block)) in theta.blocks().into_iter().enumerate() {
                let num = finite_diff_grad(
                    |x| {
                        let mut t = theta.clone();
                        *t.blocks_mut()[b] = x.clone();
                        energy_raw(&nodes, &edges, &t).unwrap()
                    },
                    block,
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(relative_error(&analytic[b], &num) < 1e-6, "{name} seed {seed}");
            }
        }
    }

    #[test]
    fn no_edge_gradient_without_edge_projection() {
        let mut rng = Rng::new(4);
        let mut theta = random_theta(&mut rng);
        theta.w_edge.fill(0.0);
        let grads = energy_grad(&random_graph(&mut rng, 5), &theta).unwrap();
        assert_eq!(grads.edges, Matrix::zeros(5, 5));
    }

    #[test]
    fn zero_steps_is_identity() {
        let mut rng = Rng::new(5);
        let theta = random_theta(&mut rng);
        let g = random_graph(&mut rng, 4);
        let cfg = SgldConfig {
            steps: 0,
            ..SgldConfig::default()
        };
        assert_eq!(sgld_refine(&g, &theta, &cfg, &mut rng).unwrap(), g);
    }

    #[test]
    fn quadratic_energy_decays_geometrically() {
        let mut rng = Rng::new(6);
        let g = random_graph(&mut rng, 3);
        let lambda = 0.5;
        let steps = 4;
        let cfg = SgldConfig {
            steps,
            step_size: lambda,
            noise_var: 0.0,
            update_nodes: true,
            update_edges: true,
        };
        let out = sgld_refine(&g, &Quadratic, &cfg, &mut rng).unwrap();
        let factor = (1.0 - lambda / 2.0f64).powi(steps as i32);
        assert!(out.nodes.max_abs_diff(&g.nodes.scale(factor)) < 1e-14);
        assert!(out.edges.values().max_abs_diff(&g.edges.values().scale(factor)) < 1e-14);
    }

    #[test]
    fn update_flags_freeze_blocks() {
        let mut rng = Rng::new(7);
        let theta = random_theta(&mut rng);
        let g = random_graph(&mut rng, 4);
        let cfg = SgldConfig {
            steps: 3,
            step_size: 0.1,
            noise_var: 1e-2,
            update_nodes: false,
            update_edges: true,
        };
        let out = sgld_refine(&g, &theta, &cfg, &mut rng).unwrap();
        assert_eq!(out.nodes, g.nodes);
        assert_ne!(out.edges, g.edges);
        let cfg = SgldConfig {
            update_nodes: true,
            update_edges: false,
            ..cfg
        };
        let out = sgld_refine(&g, &theta, &cfg, &mut rng).unwrap();
        assert_eq!(out.edges, g.edges);
        assert_ne!(out.nodes, g.nodes);
    }

    #[test]
    fn refinement_is_reproducible() {
        let mut rng = Rng::new(8);
        let theta = random_theta(&mut rng);
        let g = random_graph(&mut rng, 5);
        let cfg = SgldConfig::default();
        let a = sgld_refine(&g, &theta, &cfg, &mut Rng::new(77)).unwrap();
        let b = sgld_refine(&g, &theta, &cfg, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn energy_is_permutation_invariant(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = Rng::new(seed);
            let theta = random_theta(&mut rng);
            let g = random_graph(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let e = g.edges.values();
            let pg = SceneGraph::new(
                g.nodes.select_rows(&perm),
                EdgeMatrix::new(Matrix::from_fn(n, n, |i, j| e[(perm[i], perm[j])])).unwrap(),
            ).unwrap();
            let a = energy(&g, &theta).unwrap();
            let b = energy(&pg, &theta).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }

        #[test]
        fn sgld_keeps_edge_invariants(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = Rng::new(seed);
            let theta = random_theta(&mut rng);
            let g = random_graph(&mut rng, n);
            let cfg = SgldConfig { steps: 5, step_size: 10.0, noise_var: 1e-2, ..SgldConfig::default() };
            sgld_refine_observed(&g, &theta, &cfg, &mut rng, |_, state| {
                let e = state.edges.values();
                for i in 0..n {
                    for j in 0..n {
                        assert!((0.0..=1.0).contains(&e[(i, j)]));
                        assert_eq!(e[(i, j)], e[(j, i)]);
                    }
                }
                Ok(())
            }).unwrap();
        }
    }
}
