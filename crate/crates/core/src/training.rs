//! Classification losses, the contrastive-divergence objective with locked
//! blocks, momentum SGD and the joint training loop.

use std::fmt;
use std::str::FromStr;

use crate::energy::{energy_and_grad_raw, sgld_refine, EnergyDims, EnergyParams, SgldConfig};
use crate::error::{Error, Result};
use crate::graph::{build_edges, edges_raw, edges_raw_backward, ClassProbs, SceneGraph};
use crate::mp::{propagate_taped, MPParams, DEFAULT_DS_ITERS, DEFAULT_DS_TOL, DEFAULT_LEAKY_SLOPE};
use crate::params::ParamBlocks;
use crate::prior::PriorMatrix;
use crate::scenes::Scene;
use crate::tensor::{glorot, softmax_rows, Matrix, Rng};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Gp,
    Gpr,
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Gp, Mode::Gpr, Mode::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Gp => "gp",
            Mode::Gpr => "gpr",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}, expected baseline|gp|gpr|oracle")))
    }
}

/// Linear softmax classifier over `[F ‖ F^L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// `(D + D_last) x C`
    pub w: Matrix,
    /// `C x 1`
    pub b: Matrix,
}

impl ClassifierParams {
    pub fn init(rng: &mut Rng, d: usize, num_classes: usize) -> Self {
        Self {
            w: glorot(rng, d, num_classes, d, num_classes),
            b: Matrix::zeros(num_classes, 1),
        }
    }

    pub fn zeros(d: usize, num_classes: usize) -> Self {
        Self {
            w: Matrix::zeros(d, num_classes),
            b: Matrix::zeros(num_classes, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }
}

impl ParamBlocks for ClassifierParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("classifier.w".into(), &self.w), ("classifier.b".into(), &self.b)]
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn logits(enhanced: &Matrix, phi: &ClassifierParams) -> Result<Matrix> {
    if phi.b.shape() != (phi.num_classes(), 1) {
        return Err(Error::Shape {
            op: "classify",
            left: phi.w.shape(),
            right: phi.b.shape(),
        });
    }
    let mut z = enhanced.try_matmul(&phi.w)?;
    let b = phi.b.as_slice();
    for i in 0..z.rows() {
        z.row_mut(i).iter_mut().zip(b).for_each(|(v, bk)| *v += bk);
    }
    Ok(z)
}

/// `softmax_rows(enhanced·w + b)`.
pub fn classify(enhanced: &Matrix, phi: &ClassifierParams) -> Result<ClassProbs> {
    logits(enhanced, phi).map(|z| ClassProbs::new_unchecked(softmax_rows(&z)))
}

/// `(∂/∂enhanced, ∂/∂φ)` given the gradient on the logits.
pub fn classify_backward(
    enhanced: &Matrix,
    phi: &ClassifierParams,
    d_logits: &Matrix,
) -> (Matrix, ClassifierParams) {
    let d_enhanced = d_logits.matmul_t(&phi.w);
    let grads = ClassifierParams {
        w: enhanced.t_matmul(d_logits),
        b: Matrix::column(&d_logits.col_sums()),
    };
    (d_enhanced, grads)
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::ClassOutOfRange {
            index: label as i64,
            num_classes,
        });
    }
    Ok(())
}

/// `−(1/N)·Σ log max(p[i][labelᵢ], 1e-12)`.
pub fn cross_entropy(p: &ClassProbs, labels: &[usize]) -> Result<f64> {
    let wrapped: Vec<Option<usize>> = labels.iter().copied().map(Some).collect();
    if labels.len() != p.num_nodes() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: p.values().shape(),
            right: (labels.len(), 1),
        });
    }
    masked_cross_entropy(p, &wrapped)
}

/// Cross-entropy averaged over labelled rows only; zero when none are labelled.
pub fn masked_cross_entropy(p: &ClassProbs, labels: &[Option<usize>]) -> Result<f64> {
    if labels.len() != p.num_nodes() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: p.values().shape(),
            right: (labels.len(), 1),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, label) in labels.iter().enumerate() {
        if let Some(c) = *label {
            check_label(c, p.num_classes())?;
            total -= p.values()[(i, c)].max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Gradient of [`masked_cross_entropy`] with respect to the logits behind `p`.
pub fn masked_cross_entropy_logit_grad(p: &ClassProbs, labels: &[Option<usize>]) -> Matrix {
    let values = p.values();
    let mut d = Matrix::zeros(values.rows(), values.cols());
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return d;
    }
    let inv = 1.0 / count as f64;
    for (i, label) in labels.iter().enumerate() {
        let Some(c) = *label else { continue };
        // the floor is flat, so clipped rows pass no gradient
        if values[(i, c)] < PROB_FLOOR {
            continue;
        }
        for (k, (dv, pv)) in d.row_mut(i).iter_mut().zip(values.row(i)).enumerate() {
            *dv = inv * (pv - if k == c { 1.0 } else { 0.0 });
        }
    }
    d
}

/// `CE(P_GP) + CE(P)`.
pub fn task_loss(p_gp: &ClassProbs, p_base: &ClassProbs, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy(p_gp, labels)? + cross_entropy(p_base, labels)?)
}

pub fn masked_task_loss(p_gp: &ClassProbs, p_base: &ClassProbs, labels: &[Option<usize>]) -> Result<f64> {
    Ok(masked_cross_entropy(p_gp, labels)? + masked_cross_entropy(p_base, labels)?)
}

/// Shapes of every trainable block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output widths of the message-passing layers.
    pub mp_dims: Vec<usize>,
    pub leaky_slope: f64,
    pub ds_iters: usize,
    pub ds_tol: f64,
    pub energy_edge_dim: usize,
    pub energy_pool_dim: usize,
    pub energy_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mp_dims: vec![32, 32],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            ds_iters: DEFAULT_DS_ITERS,
            ds_tol: DEFAULT_DS_TOL,
            energy_edge_dim: 16,
            energy_pool_dim: 16,
            energy_hidden_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mp_dims.is_empty() || self.mp_dims.contains(&0) {
            return Err(Error::Config(
                "mp_dims must list at least one positive width".into(),
            ));
        }
        if self.energy_edge_dim == 0 || self.energy_pool_dim == 0 || self.energy_hidden_dim == 0 {
            return Err(Error::Config("energy dimensions must be positive".into()));
        }
        if self.ds_tol.is_nan() || self.ds_tol < 0.0 {
            return Err(Error::Config(format!("ds_tol {} must be >= 0", self.ds_tol)));
        }
        Ok(())
    }
}

/// Message passing `mp`, energy `θ` and classifier `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mp: MPParams,
    pub energy: EnergyParams,
    pub classifier: ClassifierParams,
}

impl Model {
    pub fn init(cfg: &ModelConfig, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dims: Vec<usize> = std::iter::once(feature_dim)
            .chain(cfg.mp_dims.iter().copied())
            .collect();
        let mut mp = MPParams::init(&mut Rng::derive(seed, "init.mp", 0), &dims, cfg.leaky_slope);
        mp.ds_iters = cfg.ds_iters;
        mp.ds_tol = cfg.ds_tol;
        let energy = EnergyParams::init(
            &mut Rng::derive(seed, "init.energy", 0),
            EnergyDims {
                node: feature_dim,
                edge: cfg.energy_edge_dim,
                pool: cfg.energy_pool_dim,
                hidden: cfg.energy_hidden_dim,
            },
        );
        let classifier = ClassifierParams::init(
            &mut Rng::derive(seed, "init.classifier", 0),
            mp.output_dim(),
            num_classes,
        );
        Ok(Self {
            mp,
            energy,
            classifier,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mp.validate()?;
        self.energy.validate()?;
        if self.energy.dims().node != self.mp.d_in() || self.classifier.input_dim() != self.mp.output_dim() {
            return Err(Error::Shape {
                op: "Model",
                left: self.mp.layers[0].w.shape(),
                right: self.classifier.w.shape(),
            });
        }
        if self.classifier.b.shape() != (self.classifier.num_classes(), 1) {
            return Err(Error::Shape {
                op: "Model",
                left: self.classifier.w.shape(),
                right: self.classifier.b.shape(),
            });
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Class probabilities after message passing on `(nodes, edges)`.
    pub fn predict(&self, nodes: &Matrix, edges: &Matrix) -> Result<ClassProbs> {
        let tape = propagate_taped(nodes, edges, &self.mp)?;
        classify(tape.output(), &self.classifier)
    }
}

impl ParamBlocks for Model {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.mp.blocks();
        out.extend(self.energy.blocks());
        out.extend(self.classifier.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.mp.blocks_mut();
        out.extend(self.energy.blocks_mut());
        out.extend(self.classifier.blocks_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weights of the five objective terms.
    pub terms: [f64; 5],
    /// Weight `α` of the energy magnitude penalty `α·(E_θ(gt)² + E_θ(sample)²)`.
    pub energy_reg: f64,
}

impl LossWeights {
    /// Term weights without the energy penalty.
    pub fn terms(terms: [f64; 5]) -> Self {
        Self {
            terms,
            energy_reg: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            terms: [1.0; 5],
            energy_reg: 1.0,
        }
    }
}

/// Everything the contrastive-divergence objective reads besides parameters.
#[derive(Clone, Copy, Debug)]
pub struct CdInputs<'a> {
    /// Positive-phase graph.
    pub gt: &'a SceneGraph,
    pub labels: &'a [Option<usize>],
    /// Base detector probabilities `P`.
    pub base_probs: &'a Matrix,
    pub prior: &'a Matrix,
    /// Node features of the sampler's initial state `G₀`.
    pub nodes0: &'a Matrix,
    /// The SGLD sample, held constant.
    pub sample: &'a SceneGraph,
    /// `sample − G₀` at the reference `P`; the straight-through path
    /// re-adds this offset to `G₀(P)`.
    pub delta_nodes: &'a Matrix,
    pub delta_edges: &'a Matrix,
}

/// Frozen copies used by the locked terms.
#[derive(Clone, Copy, Debug)]
pub struct Locked<'a> {
    pub energy: &'a EnergyParams,
    pub classifier: &'a ClassifierParams,
}

#[derive(Clone, Debug)]
pub struct CdOutput {
    /// Unweighted term values.
    pub terms: [f64; 5],
    /// `Σ wₖ·termₖ` plus the energy penalty.
    pub total: f64,
    pub grads: Model,
    /// Gradient reaching the base probabilities through `G₀`.
    pub d_base_probs: Matrix,
    /// Predictions of the locked classifier on the sample.
    pub sample_probs: ClassProbs,
}

/// The five-term objective:
///
/// 1. `−log p_φ(z | gt)`
/// 2. `+E_θ(gt)`
/// 3. `−E_θ(sample)`, sample constant
/// 4. `+E_lock(θ)(sample)`, gradient to `G₀` only
/// 5. `−log p_lock(φ)(z | sample)`, gradient to `mp` and `G₀`
///
/// The sample depends on `G₀ = (F, P·T·Pᵀ)` through a straight-through
/// offset, so `∂sample/∂G₀ = I`. The energy penalty acts on `θ` only.
pub fn cd_objective(
    inputs: CdInputs<'_>,
    model: &Model,
    locked: Locked<'_>,
    weights: LossWeights,
) -> Result<CdOutput> {
    let w = weights.terms;
    let alpha = weights.energy_reg;
    let mut grads = model.zeros_like();
    let mut terms = [0.0; 5];

    let tape1 = propagate_taped(&inputs.gt.nodes, inputs.gt.edges.values(), &model.mp)?;
    let probs1 = classify(tape1.output(), &model.classifier)?;
    terms[0] = masked_cross_entropy(&probs1, inputs.labels)?;
    if w[0] != 0.0 {
        let d_logits = masked_cross_entropy_logit_grad(&probs1, inputs.labels).scale(w[0]);
        let (d_enh, d_phi) = classify_backward(tape1.output(), &model.classifier, &d_logits);
        grads.classifier.accumulate(&d_phi, 1.0);
        grads
            .mp
            .accumulate(&tape1.backward(&model.mp, &d_enh)?.params, 1.0);
    }

    let (e_pos, g_pos) = energy_and_grad_raw(&inputs.gt.nodes, inputs.gt.edges.values(), &model.energy)?;
    terms[1] = e_pos;
    grads.energy.accumulate(&g_pos.theta, w[1] + 2.0 * alpha * e_pos);

    let (e_neg, g_neg) =
        energy_and_grad_raw(&inputs.sample.nodes, inputs.sample.edges.values(), &model.energy)?;
    terms[2] = -e_neg;
    grads.energy.accumulate(&g_neg.theta, -w[2] + 2.0 * alpha * e_neg);

    let edges0 = edges_raw(inputs.base_probs, inputs.prior);
    let st_nodes = inputs.nodes0.add(inputs.delta_nodes);
    let st_edges = edges0.add(inputs.delta_edges);
    let mut d_edges0 = Matrix::zeros(edges0.rows(), edges0.cols());

    let (e_lock, g_lock) = energy_and_grad_raw(&st_nodes, &st_edges, locked.energy)?;
    terms[3] = e_lock;
    d_edges0.axpy(w[3], &g_lock.edges);

    let tape5 = propagate_taped(&st_nodes, &st_edges, &model.mp)?;
    let probs5 = classify(tape5.output(), locked.classifier)?;
    terms[4] = masked_cross_entropy(&probs5, inputs.labels)?;
    if w[4] != 0.0 {
        let d_logits = masked_cross_entropy_logit_grad(&probs5, inputs.labels).scale(w[4]);
        let (d_enh, _) = classify_backward(tape5.output(), locked.classifier, &d_logits);
        let g5 = tape5.backward(&model.mp, &d_enh)?;
        grads.mp.accumulate(&g5.params, 1.0);
        d_edges0.add_assign(&g5.edges);
    }

    let penalty = alpha * (e_pos * e_pos + e_neg * e_neg);
    let total = terms.iter().zip(&w).map(|(t, wk)| t * wk).sum::<f64>() + penalty;
    Ok(CdOutput {
        terms,
        total,
        grads,
        d_base_probs: edges_raw_backward(inputs.base_probs, inputs.prior, &d_edges0),
        sample_probs: probs5,
    })
}

/// Runs the sampler from `G₀ = (nodes0, P·T·Pᵀ)` and evaluates
/// [`cd_objective`] with the current `θ` and `φ` as the locked copies.
#[allow(clippy::too_many_arguments)]
pub fn cd_loss(
    gt: &SceneGraph,
    labels: &[Option<usize>],
    nodes0: &Matrix,
    base_probs: &ClassProbs,
    model: &Model,
    prior: &PriorMatrix,
    sgld: &SgldConfig,
    weights: LossWeights,
    rng: &mut Rng,
) -> Result<CdOutput> {
    let g0 = SceneGraph::new(nodes0.clone(), build_edges(base_probs, prior)?)?;
    let sample = sgld_refine(&g0, &model.energy, sgld, rng)?;
    let edges0 = edges_raw(base_probs.values(), prior.values());
    let delta_nodes = sample.nodes.sub(nodes0);
    let delta_edges = sample.edges.values().sub(&edges0);
    let locked_energy = model.energy.clone();
    let locked_classifier = model.classifier.clone();
    cd_objective(
        CdInputs {
            gt,
            labels,
            base_probs: base_probs.values(),
            prior: prior.values(),
            nodes0,
            sample: &sample,
            delta_nodes: &delta_nodes,
            delta_edges: &delta_edges,
        },
        model,
        Locked {
            energy: &locked_energy,
            classifier: &locked_classifier,
        },
        weights,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Rescales `grads` so its Frobenius norm is at most `max_norm`.
pub fn clip_grad_norm<P: ParamBlocks>(grads: &mut P, max_norm: f64) {
    let norm = grads.blocks().iter().map(|(_, m)| m.dot(m)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for b in grads.blocks_mut() {
            b.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Momentum buffers, one per parameter block.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Matrix>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_step<P: ParamBlocks>(
    params: &mut P,
    grads: &P,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    let grads: Vec<&Matrix> = grads.blocks().into_iter().map(|(_, m)| m).collect();
    let mut blocks = params.blocks_mut();
    if grads.len() != blocks.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: (blocks.len(), 1),
            right: (grads.len(), 1),
        });
    }
    if state.velocity.is_empty() {
        state.velocity = blocks.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
    }
    for ((p, g), v) in blocks.iter_mut().zip(&grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        for ((pv, gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub optimizer: SgdConfig,
    pub sgld: SgldConfig,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    pub iou_thresh: f64,
    /// Per-group (mp, energy, classifier) gradient norm ceiling.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gpr,
            epochs: 30,
            optimizer: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            sgld: SgldConfig::default(),
            seed: 0,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
            iou_thresh: 0.5,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.sgld.validate()?;
        self.model.validate()?;
        if self.loss_weights.terms.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !(self.loss_weights.energy_reg >= 0.0 && self.loss_weights.energy_reg.is_finite()) {
            return Err(Error::Config("energy_reg must be finite and >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip {c} must be > 0")));
            }
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh < 1.0) {
            return Err(Error::Config(format!(
                "iou threshold {} outside (0, 1)",
                self.iou_thresh
            )));
        }
        Ok(())
    }
}

/// Per-epoch means over scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub terms: [f64; 5],
    pub total_loss: f64,
    pub train_accuracy: f64,
}

pub const METRICS_HEADER: &str = "epoch,term1,term2,term3,term4,term5,total_loss,train_accuracy";

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.epoch.to_string());
        for t in m.terms {
            out.push_str(&format!(",{t}"));
        }
        out.push_str(&format!(",{},{}\n", m.total_loss, m.train_accuracy));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

fn accuracy_counts(p: &ClassProbs, labels: &[Option<usize>]) -> (usize, usize) {
    let pred = p.argmax();
    labels.iter().zip(pred).fold((0, 0), |(hit, n), (l, c)| match l {
        Some(l) => (hit + usize::from(*l == c), n + 1),
        None => (hit, n),
    })
}

struct SceneStep {
    terms: [f64; 5],
    total: f64,
    probs: ClassProbs,
    grads: Option<Model>,
}

/// Task loss `CE(P_GP) + CE(P)` on a fixed graph; only the first term has
/// trainable dependence.
fn task_step(model: &Model, nodes: &Matrix, edges: &Matrix, scene: &Scene) -> Result<SceneStep> {
    let tape = propagate_taped(nodes, edges, &model.mp)?;
    let probs = classify(tape.output(), &model.classifier)?;
    let loss = masked_task_loss(&probs, &scene.base_probs, &scene.labels)?;
    let d_logits = masked_cross_entropy_logit_grad(&probs, &scene.labels);
    let (d_enh, d_phi) = classify_backward(tape.output(), &model.classifier, &d_logits);
    let mut grads = model.zeros_like();
    grads.classifier = d_phi;
    grads.mp = tape.backward(&model.mp, &d_enh)?.params;
    Ok(SceneStep {
        terms: [loss, 0.0, 0.0, 0.0, 0.0],
        total: loss,
        probs,
        grads: Some(grads),
    })
}

fn scene_step(
    model: &Model,
    scene: &Scene,
    prior: &PriorMatrix,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<SceneStep> {
    match cfg.mode {
        Mode::Baseline => {
            let loss = masked_cross_entropy(&scene.base_probs, &scene.labels)?;
            Ok(SceneStep {
                terms: [loss, 0.0, 0.0, 0.0, 0.0],
                total: loss,
                probs: scene.base_probs.clone(),
                grads: None,
            })
        }
        Mode::Gp => {
            let edges = build_edges(&scene.base_probs, prior)?;
            task_step(model, &scene.features, edges.values(), scene)
        }
        Mode::Oracle => {
            let edges = scene.oracle_edges(prior, cfg.iou_thresh)?;
            task_step(model, &scene.features, edges.values(), scene)
        }
        Mode::Gpr => {
            let gt = SceneGraph::new(scene.features.clone(), scene.oracle_edges(prior, cfg.iou_thresh)?)?;
            let out = cd_loss(
                &gt,
                &scene.labels,
                &scene.features,
                &scene.base_probs,
                model,
                prior,
                &cfg.sgld,
                cfg.loss_weights,
                rng,
            )?;
            Ok(SceneStep {
                terms: out.terms,
                total: out.total,
                probs: out.sample_probs,
                grads: Some(out.grads),
            })
        }
    }
}

/// Sequential epochs of per-scene loss and SGD updates, with scenes visited
/// in a seeded shuffled order each epoch.
pub fn train(dataset: &[Scene], cfg: &TrainConfig, prior: &PriorMatrix) -> Result<TrainOutput> {
    train_observed(dataset, cfg, prior, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    dataset: &[Scene],
    cfg: &TrainConfig,
    prior: &PriorMatrix,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let mut model = Model::init(&cfg.model, first.features.cols(), prior.num_classes(), cfg.seed)?;
    let mut state = SgdState::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 1..=cfg.epochs {
        Rng::derive(cfg.seed, "train.order", epoch as u64).shuffle(&mut order);
        let mut sums = [0.0; 5];
        let mut total = 0.0;
        let (mut hits, mut labelled) = (0usize, 0usize);
        for &idx in &order {
            let scene = &dataset[idx];
            let mut rng = Rng::derive(cfg.seed, "train.sgld", (epoch * dataset.len() + idx) as u64);
            let step = scene_step(&model, scene, prior, cfg, &mut rng).map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} (epoch {epoch}, scene {})", scene.id))
                }
                other => other,
            })?;
            if !step.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, scene {}",
                    scene.id
                )));
            }
            if let Some(mut grads) = step.grads {
                if let Some(c) = cfg.grad_clip {
                    clip_grad_norm(&mut grads.mp, c);
                    clip_grad_norm(&mut grads.energy, c);
                    clip_grad_norm(&mut grads.classifier, c);
                }
                if !grads.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient at epoch {epoch}, scene {}",
                        scene.id
                    )));
                }
                sgd_step(&mut model, &grads, &cfg.optimizer, &mut state)?;
            }
            for (s, t) in sums.iter_mut().zip(step.terms) {
                *s += t;
            }
            total += step.total;
            let (h, n) = accuracy_counts(&step.probs, &scene.labels);
            hits += h;
            labelled += n;
        }
        let n = dataset.len() as f64;
        let m = EpochMetrics {
            epoch,
            terms: sums.map(|s| s / n),
            total_loss: total / n,
            train_accuracy: if labelled == 0 {
                0.0
            } else {
                hits as f64 / labelled as f64
            },
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutput { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyDims;
    use crate::graph::EdgeMatrix;
    use crate::tensor::{finite_diff_grad, relative_error, DEFAULT_STEP};

    fn probs(rows: &[&[f64]]) -> ClassProbs {
        ClassProbs::new(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = ClassProbs::one_hot(&[0, 2, 1], 3);
        assert!(cross_entropy(&perfect, &[0, 2, 1]).unwrap() <= 1e-11);
        let uniform = ClassProbs::uniform(5, 4);
        assert!((cross_entropy(&uniform, &[0, 1, 2, 3, 0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = probs(&[&[0.25, 0.75, 0.0], &[0.5, 0.25, 0.25]]);
        assert!((cross_entropy(&p, &[0, 1]).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let p = ClassProbs::one_hot(&[0], 2);
        assert!((cross_entropy(&p, &[1]).unwrap() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let p = ClassProbs::uniform(2, 3);
        assert!(matches!(
            cross_entropy(&p, &[0, 3]),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(matches!(cross_entropy(&p, &[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn masked_cross_entropy_skips_unlabelled() {
        let p = probs(&[&[0.25, 0.75], &[0.9, 0.1]]);
        assert!((masked_cross_entropy(&p, &[Some(0), None]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(masked_cross_entropy(&p, &[None, None]).unwrap(), 0.0);
    }

    #[test]
    fn task_loss_examples() {
        let labels = [0, 1, 2, 3];
        let perfect = ClassProbs::one_hot(&labels, 4);
        let uniform = ClassProbs::uniform(4, 4);
        assert!(task_loss(&perfect, &perfect, &labels).unwrap() <= 1e-10);
        let a = task_loss(&perfect, &uniform, &labels).unwrap();
        let b = task_loss(&uniform, &perfect, &labels).unwrap();
        assert!((a - 4f64.ln()).abs() < 1e-10);
        assert_eq!(a, b);
    }

    #[test]
    fn classify_examples() {
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(3, 4, 1.0);
        let zero = ClassifierParams::zeros(4, 5);
        assert_eq!(classify(&x, &zero).unwrap(), ClassProbs::uniform(3, 5));

        let phi = ClassifierParams {
            w: rng.normal_matrix(4, 5, 1.0),
            b: rng.normal_matrix(5, 1, 1.0),
        };
        let p = classify(&x, &phi).unwrap();
        let mut shifted = phi.clone();
        shifted.b = shifted.b.map(|v| v + 3.5);
        assert!(classify(&x, &shifted).unwrap().values().max_abs_diff(p.values()) < 1e-15);

        for i in 0..3 {
            let z: Vec<f64> = (0..5)
                .map(|k| (0..4).map(|a| x[(i, a)] * phi.w[(a, k)]).sum::<f64>() + phi.b[(k, 0)])
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for k in 0..5 {
                assert!((p.values()[(i, k)] - (z[k] - m).exp() / s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = ClassifierParams {
            w: Matrix::from_rows(&[[1.0, 2.0]]),
            b: Matrix::column(&[0.5, -0.5]),
        };
        let start = p.clone();
        let mut state = SgdState::new();
        sgd_step(&mut p, &start.zeros_like(), &cfg, &mut state).unwrap();
        assert_eq!(p, start);

        let g = ClassifierParams {
            w: Matrix::from_rows(&[[1.0, -1.0]]),
            b: Matrix::column(&[2.0, 0.0]),
        };
        sgd_step(&mut p, &g, &cfg, &mut state).unwrap();
        assert!(p.w.max_abs_diff(&Matrix::from_rows(&[[0.9, 2.1]])) < 1e-15);
        assert!(p.b.max_abs_diff(&Matrix::column(&[0.3, -0.5])) < 1e-15);

        let cfg = SgdConfig { momentum: 0.9, ..cfg };
        let mut p = start.clone();
        let mut state = SgdState::new();
        sgd_step(&mut p, &g, &cfg, &mut state).unwrap();
        sgd_step(&mut p, &g, &cfg, &mut state).unwrap();
        let mut expected = start.clone();
        expected.accumulate(&g, -0.1 * 2.9);
        assert!(p.w.max_abs_diff(&expected.w) < 1e-14);
        assert!(p.b.max_abs_diff(&expected.b) < 1e-14);
    }

    #[test]
    fn mode_round_trips() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("GPR".parse::<Mode>().is_ok());
        assert!("rcnn".parse::<Mode>().is_err());
    }

    struct Fixture {
        model: Model,
        gt: SceneGraph,
        labels: Vec<Option<usize>>,
        p: Matrix,
        t: Matrix,
        sample: SceneGraph,
    }

    fn fixture(seed: u64) -> Fixture {
        let (n, d, c) = (5, 3, 4);
        let mut rng = Rng::new(seed);
        let cfg = ModelConfig {
            mp_dims: vec![3, 3],
            ds_iters: 15,
            ds_tol: 0.0,
            energy_edge_dim: 2,
            energy_pool_dim: 3,
            energy_hidden_dim: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::init(&cfg, d, c, seed).unwrap();
        model.energy.b1 = rng.normal_matrix(4, 1, 0.3);
        model.classifier.b = rng.normal_matrix(c, 1, 0.3);
        let nodes = rng.normal_matrix(n, d, 1.0);
        let gt_edges = EdgeMatrix::new(rng.uniform_matrix(n, n, 0.05, 1.0).symmetrize()).unwrap();
        let gt = SceneGraph::new(nodes, gt_edges).unwrap();
        let p = softmax_rows(&rng.normal_matrix(n, c, 1.0));
        let t = rng.uniform_matrix(c, c, 0.1, 0.9).symmetrize();
        let e0 = edges_raw(&p, &t);
        let sample_edges = EdgeMatrix::project(&e0.add(&rng.uniform_matrix(n, n, -0.02, 0.02)).symmetrize());
        let sample = SceneGraph::new(gt.nodes.add(&rng.normal_matrix(n, d, 0.1)), sample_edges).unwrap();
        let labels = vec![Some(0), Some(3), None, Some(1), Some(3)];
        Fixture {
            model,
            gt,
            labels,
            p,
            t,
            sample,
        }
    }

    fn objective(fx: &Fixture, model: &Model, locked: &Model, p: &Matrix, weights: LossWeights) -> CdOutput {
        let e0 = edges_raw(&fx.p, &fx.t);
        let delta_nodes = fx.sample.nodes.sub(&fx.gt.nodes);
        let delta_edges = fx.sample.edges.values().sub(&e0);
        cd_objective(
            CdInputs {
                gt: &fx.gt,
                labels: &fx.labels,
                base_probs: p,
                prior: &fx.t,
                nodes0: &fx.gt.nodes,
                sample: &fx.sample,
                delta_nodes: &delta_nodes,
                delta_edges: &delta_edges,
            },
            model,
            Locked {
                energy: &locked.energy,
                classifier: &locked.classifier,
            },
            weights,
        )
        .unwrap()
    }

    #[test]
    fn cd_gradients_match_finite_differences_with_locks() {
        for seed in 0..4 {
            let fx = fixture(seed);
            let weights = LossWeights {
                terms: [1.0, 0.7, 1.3, 0.9, 1.1],
                energy_reg: 0.3,
            };
            let out = objective(&fx, &fx.model, &fx.model, &fx.p, weights);
            let analytic: Vec<Matrix> = out.grads.blocks().into_iter().map(|(_, m)| m.clone()).collect();
            for (b, (name, block)) in fx.model.blocks().into_iter().enumerate() {
                let num = finite_diff_grad(
                    |x| {
                        let mut m = fx.model.clone();
                        *m.blocks_mut()[b] = x.clone();
                        objective(&fx, &m, &fx.model, &fx.p, weights).total
                    },
                    block,
                    DEFAULT_STEP,
                )
                .unwrap();
                let err = relative_error(&analytic[b], &num);
                assert!(err < 1e-6, "{name} seed {seed}: {err}");
            }
            let num = finite_diff_grad(
                |x| objective(&fx, &fx.model, &fx.model, x, weights).total,
                &fx.p,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(relative_error(&out.d_base_probs, &num) < 1e-6, "P seed {seed}");
        }
    }

    #[test]
    fn locked_energy_term_gives_no_theta_gradient() {
        let fx = fixture(9);
        let out = objective(
            &fx,
            &fx.model,
            &fx.model,
            &fx.p,
            LossWeights::terms([0.0, 0.0, 0.0, 1.0, 0.0]),
        );
        for (_, m) in out.grads.blocks() {
            assert!(m.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(out.d_base_probs.norm() > 0.0);
        let mut shifted = fx.model.clone();
        shifted.energy.b2[(0, 0)] += 1.0;
        let moved = objective(
            &fx,
            &shifted,
            &shifted,
            &fx.p,
            LossWeights::terms([0.0, 0.0, 0.0, 1.0, 0.0]),
        );
        assert!((moved.total - out.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locked_classifier_term_gives_no_phi_gradient() {
        let fx = fixture(10);
        let out = objective(
            &fx,
            &fx.model,
            &fx.model,
            &fx.p,
            LossWeights::terms([0.0, 0.0, 0.0, 0.0, 1.0]),
        );
        assert_eq!(out.grads.classifier, fx.model.classifier.zeros_like());
        assert!(out.grads.mp.blocks().iter().any(|(_, m)| m.norm() > 0.0));
    }

    #[test]
    fn classifier_only_weights_match_plain_classification_backward() {
        let fx = fixture(11);
        let out = objective(
            &fx,
            &fx.model,
            &fx.model,
            &fx.p,
            LossWeights::terms([1.0, 0.0, 0.0, 0.0, 0.0]),
        );
        let tape = propagate_taped(&fx.gt.nodes, fx.gt.edges.values(), &fx.model.mp).unwrap();
        let probs = classify(tape.output(), &fx.model.classifier).unwrap();
        let d_logits = masked_cross_entropy_logit_grad(&probs, &fx.labels);
        let (d_enh, d_phi) = classify_backward(tape.output(), &fx.model.classifier, &d_logits);
        let g_mp = tape.backward(&fx.model.mp, &d_enh).unwrap().params;
        assert_eq!(out.grads.classifier, d_phi);
        assert_eq!(out.grads.mp, g_mp);
        assert_eq!(out.grads.energy, fx.model.energy.zeros_like());
        assert_eq!(out.total, out.terms[0]);
    }

    #[test]
    fn collapsed_chain_cancels_energy_terms() {
        let fx = fixture(12);
        let g0 = SceneGraph::new(fx.gt.nodes.clone(), EdgeMatrix::project(&edges_raw(&fx.p, &fx.t))).unwrap();
        let sgld = SgldConfig {
            steps: 0,
            noise_var: 0.0,
            ..SgldConfig::default()
        };
        let p = ClassProbs::new(fx.p.clone()).unwrap();
        let prior = PriorMatrix::new(fx.t.clone()).unwrap();
        let out = cd_loss(
            &g0,
            &fx.labels,
            &g0.nodes,
            &p,
            &fx.model,
            &prior,
            &sgld,
            LossWeights::terms([1.0; 5]),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(out.terms[1] + out.terms[2], 0.0);
        let expected = out.terms[0] + out.terms[3] + out.terms[4];
        assert!((out.total - expected).abs() < 1e-12);
        assert!((out.terms[3] - out.terms[1]).abs() < 1e-12);
    }

    #[test]
    fn model_blocks_are_named_and_unique() {
        let model = Model::init(&ModelConfig::default(), 8, 5, 1).unwrap();
        let names: Vec<String> = model.blocks().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert_eq!(model.blocks().len(), model.clone().blocks_mut().len());
        assert_eq!(
            model.energy.dims(),
            EnergyDims {
                node: 8,
                edge: 16,
                pool: 16,
                hidden: 32
            }
        );
    }
}
