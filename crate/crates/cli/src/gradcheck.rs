//! Every hand-written gradient against central finite differences.
//!
//! Each block is checked on `seeds` independent random fixtures; the report
//! keeps the worst relative error per block.

use graphprior::energy::{energy_and_grad_raw, energy_raw, EnergyParams};
use graphprior::graph::{edges_raw, EdgeMatrix, SceneGraph};
use graphprior::mp::{propagate_taped, MPParams};
use graphprior::params::ParamBlocks;
use graphprior::tensor::{finite_diff_grad, relative_error, softmax_rows, Matrix, Rng, DEFAULT_STEP};
use graphprior::training::{
    cd_objective, classify, classify_backward, masked_cross_entropy, masked_cross_entropy_logit_grad,
    CdInputs, CdOutput, ClassifierParams, Locked, LossWeights, Model, ModelConfig,
};

use crate::error::CliError;

pub const GRADCHECK_TOL: f64 = 1e-4;

pub const BLOCKS: [&str; 12] = [
    "mp.nodes",
    "mp.edges",
    "mp.params",
    "energy.nodes",
    "energy.edges",
    "energy.theta",
    "classifier.input",
    "classifier.phi",
    "cd.theta",
    "cd.phi",
    "cd.mp",
    "cd.base_probs",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub seeds: usize,
    /// Test hook: corrupt the analytic gradient of this block.
    pub perturb: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            perturb: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub num_params: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub blocks: Vec<BlockResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= GRADCHECK_TOL)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<18} {:>8} {:>12}  status\n", "block", "entries", "max_rel_err");
        for b in &self.blocks {
            let status = if b.max_rel_err <= GRADCHECK_TOL {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:<18} {:>8} {:>12.3e}  {status}\n",
                b.name, b.num_params, b.max_rel_err
            ));
        }
        out.push_str(&format!("seeds {} tolerance {:e}\n", self.seeds, GRADCHECK_TOL));
        out
    }
}

struct Fixture {
    model: Model,
    nodes: Matrix,
    edges: Matrix,
    upstream: Matrix,
    enhanced: Matrix,
    labels: Vec<Option<usize>>,
    gt: SceneGraph,
    p: Matrix,
    t: Matrix,
    sample: SceneGraph,
}

const N: usize = 5;
const D: usize = 4;
const C: usize = 3;

fn fixture(seed: u64) -> Result<Fixture, CliError> {
    let mut rng = Rng::new(seed);
    let cfg = ModelConfig {
        mp_dims: vec![4, 4],
        ds_iters: 20,
        ds_tol: 0.0,
        energy_edge_dim: 3,
        energy_pool_dim: 3,
        energy_hidden_dim: 4,
        ..ModelConfig::default()
    };
    let mut model = Model::init(&cfg, D, C, seed)?;
    model.energy.b1 = rng.normal_matrix(4, 1, 0.3);
    model.energy.b2 = rng.normal_matrix(1, 1, 0.3);
    model.classifier.b = rng.normal_matrix(C, 1, 0.3);

    let nodes = rng.normal_matrix(N, D, 1.0);
    let edges = rng.uniform_matrix(N, N, 0.05, 1.0).symmetrize();
    let upstream = rng.normal_matrix(N, model.mp.output_dim(), 1.0);
    let enhanced = rng.normal_matrix(N, model.classifier.input_dim(), 1.0);
    let labels = vec![Some(0), Some(2), None, Some(1), Some(2)];

    let gt = SceneGraph::new(nodes.clone(), EdgeMatrix::new(edges.clone())?)?;
    let p = softmax_rows(&rng.normal_matrix(N, C, 1.0));
    let t = rng.uniform_matrix(C, C, 0.1, 0.9).symmetrize();
    let e0 = edges_raw(&p, &t);
    let sample_edges = EdgeMatrix::project(&e0.add(&rng.uniform_matrix(N, N, -0.02, 0.02)).symmetrize());
    let sample = SceneGraph::new(nodes.add(&rng.normal_matrix(N, D, 0.1)), sample_edges)?;
    Ok(Fixture {
        model,
        nodes,
        edges,
        upstream,
        enhanced,
        labels,
        gt,
        p,
        t,
        sample,
    })
}

fn flatten(blocks: &[&Matrix]) -> Matrix {
    let data: Vec<f64> = blocks.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    let n = data.len();
    Matrix::from_vec(n, 1, data).expect("length matches")
}

/// Finite differences of `f` over every block of `params`, flattened in block order.
fn numeric_blocks<P: ParamBlocks + Clone>(params: &P, f: impl Fn(&P) -> f64) -> Result<Matrix, CliError> {
    let mut parts = Vec::new();
    for (b, (_, block)) in params.blocks().into_iter().enumerate() {
        let g = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                *p.blocks_mut()[b] = x.clone();
                f(&p)
            },
            block,
            DEFAULT_STEP,
        )?;
        parts.push(g);
    }
    Ok(flatten(&parts.iter().collect::<Vec<_>>()))
}

fn analytic_blocks<P: ParamBlocks>(grads: &P) -> Matrix {
    flatten(&grads.blocks().into_iter().map(|(_, m)| m).collect::<Vec<_>>())
}

fn cd_total(fx: &Fixture, model: &Model, p: &Matrix, weights: LossWeights) -> f64 {
    cd_run(fx, model, p, weights).map(|o| o.total).unwrap_or(f64::NAN)
}

/// The straight-through offsets are fixed at the reference `P`, as in training.
fn cd_run(fx: &Fixture, model: &Model, p: &Matrix, weights: LossWeights) -> Result<CdOutput, CliError> {
    let e0 = edges_raw(&fx.p, &fx.t);
    let delta_nodes = fx.sample.nodes.sub(&fx.nodes);
    let delta_edges = fx.sample.edges.values().sub(&e0);
    Ok(cd_objective(
        CdInputs {
            gt: &fx.gt,
            labels: &fx.labels,
            base_probs: p,
            prior: &fx.t,
            nodes0: &fx.nodes,
            sample: &fx.sample,
            delta_nodes: &delta_nodes,
            delta_edges: &delta_edges,
        },
        model,
        Locked {
            energy: &fx.model.energy,
            classifier: &fx.model.classifier,
        },
        weights,
    )?)
}

/// `(block, analytic, numeric)` for one fixture.
fn check_fixture(fx: &Fixture) -> Result<Vec<(&'static str, Matrix, Matrix)>, CliError> {
    let mut out = Vec::with_capacity(BLOCKS.len());
    let mp = &fx.model.mp;
    let mp_loss = |nodes: &Matrix, edges: &Matrix, params: &MPParams| -> f64 {
        propagate_taped(nodes, edges, params)
            .map(|t| t.output().dot(&fx.upstream))
            .unwrap_or(f64::NAN)
    };
    let g = propagate_taped(&fx.nodes, &fx.edges, mp)?.backward(mp, &fx.upstream)?;
    out.push((
        "mp.nodes",
        g.nodes.clone(),
        finite_diff_grad(|x| mp_loss(x, &fx.edges, mp), &fx.nodes, DEFAULT_STEP)?,
    ));
    out.push((
        "mp.edges",
        g.edges.clone(),
        finite_diff_grad(|x| mp_loss(&fx.nodes, x, mp), &fx.edges, DEFAULT_STEP)?,
    ));
    out.push((
        "mp.params",
        analytic_blocks(&g.params),
        numeric_blocks(mp, |p| mp_loss(&fx.nodes, &fx.edges, p))?,
    ));

    let theta = &fx.model.energy;
    let e_loss =
        |nodes: &Matrix, edges: &Matrix, th: &EnergyParams| energy_raw(nodes, edges, th).unwrap_or(f64::NAN);
    let (_, eg) = energy_and_grad_raw(&fx.nodes, &fx.edges, theta)?;
    out.push((
        "energy.nodes",
        eg.nodes.clone(),
        finite_diff_grad(|x| e_loss(x, &fx.edges, theta), &fx.nodes, DEFAULT_STEP)?,
    ));
    out.push((
        "energy.edges",
        eg.edges.clone(),
        finite_diff_grad(|x| e_loss(&fx.nodes, x, theta), &fx.edges, DEFAULT_STEP)?,
    ));
    out.push((
        "energy.theta",
        analytic_blocks(&eg.theta),
        numeric_blocks(theta, |th| e_loss(&fx.nodes, &fx.edges, th))?,
    ));

    let phi = &fx.model.classifier;
    let ce = |enh: &Matrix, phi: &ClassifierParams| -> f64 {
        classify(enh, phi)
            .and_then(|p| masked_cross_entropy(&p, &fx.labels))
            .unwrap_or(f64::NAN)
    };
    let probs = classify(&fx.enhanced, phi)?;
    let (d_enh, d_phi) = classify_backward(
        &fx.enhanced,
        phi,
        &masked_cross_entropy_logit_grad(&probs, &fx.labels),
    );
    out.push((
        "classifier.input",
        d_enh,
        finite_diff_grad(|x| ce(x, phi), &fx.enhanced, DEFAULT_STEP)?,
    ));
    out.push((
        "classifier.phi",
        analytic_blocks(&d_phi),
        numeric_blocks(phi, |p| ce(&fx.enhanced, p))?,
    ));

    let weights = LossWeights {
        terms: [1.0, 0.7, 1.3, 0.9, 1.1],
        energy_reg: 0.3,
    };
    let cd = cd_run(fx, &fx.model, &fx.p, weights)?;
    let total = |m: &Model| cd_total(fx, m, &fx.p, weights);
    out.push((
        "cd.theta",
        analytic_blocks(&cd.grads.energy),
        numeric_blocks(&fx.model.energy, |th| {
            let mut m = fx.model.clone();
            m.energy = th.clone();
            total(&m)
        })?,
    ));
    out.push((
        "cd.phi",
        analytic_blocks(&cd.grads.classifier),
        numeric_blocks(&fx.model.classifier, |phi| {
            let mut m = fx.model.clone();
            m.classifier = phi.clone();
            total(&m)
        })?,
    ));
    out.push((
        "cd.mp",
        analytic_blocks(&cd.grads.mp),
        numeric_blocks(&fx.model.mp, |mp| {
            let mut m = fx.model.clone();
            m.mp = mp.clone();
            total(&m)
        })?,
    ));
    out.push((
        "cd.base_probs",
        cd.d_base_probs.clone(),
        finite_diff_grad(|x| cd_total(fx, &fx.model, x, weights), &fx.p, DEFAULT_STEP)?,
    ));
    debug_assert_eq!(out.len(), BLOCKS.len());
    Ok(out)
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, CliError> {
    if opts.seeds == 0 {
        return Err(CliError::new("usage", "gradcheck needs at least one seed"));
    }
    if let Some(name) = &opts.perturb {
        if !BLOCKS.contains(&name.as_str()) {
            return Err(CliError::new(
                "usage",
                format!("unknown block {name:?}; expected one of {}", BLOCKS.join(", ")),
            ));
        }
    }
    let mut blocks: Vec<BlockResult> = BLOCKS
        .iter()
        .map(|&name| BlockResult {
            name,
            max_rel_err: 0.0,
            num_params: 0,
        })
        .collect();
    for i in 0..opts.seeds {
        let fx = fixture(graphprior::tensor::derive_seed(opts.seed, "gradcheck", i as u64))?;
        for (slot, (name, mut analytic, numeric)) in blocks.iter_mut().zip(check_fixture(&fx)?) {
            if opts.perturb.as_deref() == Some(name) {
                analytic.as_mut_slice()[0] += 1e-3 + 1e-2 * analytic.norm();
            }
            let err = relative_error(&analytic, &numeric);
            slot.max_rel_err = slot
                .max_rel_err
                .max(if err.is_nan() { f64::INFINITY } else { err });
            slot.num_params = analytic.len();
        }
    }
    Ok(GradcheckReport {
        seeds: opts.seeds,
        blocks,
    })
}
