//! Synthetic detection benchmark with planted co-occurrence structure.
//!
//! Each scene draws its classes from one or more templates (groups of classes
//! that co-occur). The last class of every template is rare, and its embedding sits
//! close to a frequent class of the next template, so features alone confuse
//! the two while scene context separates them.

use rayon::prelude::*;

use crate::energy::{sgld_refine, SgldConfig};
use crate::error::{Error, Result};
use crate::graph::{build_edges, build_oracle_edges, matched_labels, ClassProbs, EdgeMatrix, SceneGraph};
use crate::prior::{build_prior, Annotations, BBox, Category, ImageRecord, ObjectRecord, PriorMatrix};
use crate::tensor::{softmax_in_place, Matrix, Rng};
use crate::training::{Mode, Model};

pub const DEFAULT_IOU_THRESH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub num_templates: usize,
    pub classes_per_template: usize,
    /// Distinct templates mixed into each scene.
    pub templates_per_scene: usize,
    /// Inclusive range of ground-truth objects per scene.
    pub objects_per_scene: (usize, usize),
    pub feature_dim: usize,
    /// Per-entry std of feature noise around the class embedding.
    pub class_embedding_noise: f64,
    /// Fraction of base-probability rows pulled towards uniform.
    pub label_noise: f64,
    /// Expected distractor proposals per ground-truth object.
    pub distractor_rate: f64,
    /// Relative std of proposal box perturbation.
    pub box_jitter: f64,
    /// Probability that a scene contains the rare class of each of its templates.
    pub rare_class_fraction: f64,
    /// Distance between a rare class embedding and its partner's.
    pub rare_offset: f64,
    /// Std of the random weights added to the base probe.
    pub probe_noise: f64,
    /// Weight of the log class frequency in the base probe.
    pub frequency_bias: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_templates: 4,
            classes_per_template: 5,
            templates_per_scene: 2,
            objects_per_scene: (12, 16),
            feature_dim: 32,
            class_embedding_noise: 0.3,
            label_noise: 0.2,
            distractor_rate: 0.1,
            box_jitter: 0.05,
            rare_class_fraction: 0.2,
            rare_offset: 0.3,
            probe_noise: 0.5,
            frequency_bias: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 || self.num_templates == 0 || self.feature_dim == 0 {
            return bad("num_classes, num_templates and feature_dim must be positive".into());
        }
        if self.classes_per_template < 2 || self.classes_per_template > self.num_classes {
            return bad(format!(
                "classes_per_template {} must lie in [2, num_classes]",
                self.classes_per_template
            ));
        }
        if self.templates_per_scene == 0 || self.templates_per_scene > self.num_templates {
            return bad(format!(
                "templates_per_scene {} must lie in [1, num_templates]",
                self.templates_per_scene
            ));
        }
        let (lo, hi) = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad(format!(
                "objects_per_scene ({lo}, {hi}) must satisfy 1 <= lo <= hi"
            ));
        }
        for (name, v) in [
            ("label_noise", self.label_noise),
            ("distractor_rate", self.distractor_rate),
            ("box_jitter", self.box_jitter),
            ("rare_class_fraction", self.rare_class_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1)"));
            }
        }
        for (name, v) in [
            ("class_embedding_noise", self.class_embedding_noise),
            ("rare_offset", self.rare_offset),
            ("probe_noise", self.probe_noise),
            ("frequency_bias", self.frequency_bias),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// One synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub templates: Vec<usize>,
    pub gt: Vec<(usize, BBox)>,
    pub proposals: Vec<BBox>,
    pub features: Matrix,
    pub base_probs: ClassProbs,
    /// Ground-truth class of each proposal at IoU 0.5, if matched.
    pub labels: Vec<Option<usize>>,
}

impl Scene {
    pub fn num_proposals(&self) -> usize {
        self.proposals.len()
    }

    /// `G₀ = (F, P·T·Pᵀ)`.
    pub fn initial_graph(&self, prior: &PriorMatrix) -> Result<SceneGraph> {
        SceneGraph::new(self.features.clone(), build_edges(&self.base_probs, prior)?)
    }

    pub fn oracle_edges(&self, prior: &PriorMatrix, iou_thresh: f64) -> Result<EdgeMatrix> {
        build_oracle_edges(&self.proposals, &self.gt, prior, iou_thresh)
    }

    pub fn oracle_graph(&self, prior: &PriorMatrix, iou_thresh: f64) -> Result<SceneGraph> {
        SceneGraph::new(self.features.clone(), self.oracle_edges(prior, iou_thresh)?)
    }
}

/// Fixed quantities shared by every scene of a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneWorld {
    pub cfg: SceneConfig,
    /// Classes of each template; the last one is rare.
    pub templates: Vec<Vec<usize>>,
    /// `C x D`
    pub embeddings: Matrix,
    /// `D x C` perturbation of the base probe.
    pub probe_weights: Matrix,
    /// Expected share of objects per class.
    pub class_frequency: Vec<f64>,
    seed: u64,
}

fn common_weights(k: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=k).map(|j| 1.0 / j as f64).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

impl SceneWorld {
    pub fn new(cfg: &SceneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, d, k) = (cfg.num_classes, cfg.feature_dim, cfg.classes_per_template);
        let templates: Vec<Vec<usize>> = (0..cfg.num_templates)
            .map(|t| (0..k).map(|j| (t * k + j) % c).collect())
            .collect();

        let mut rng = Rng::derive(seed, "world.embeddings", 0);
        let mut embeddings = rng.normal_matrix(c, d, 1.0 / (d as f64).sqrt());
        // each rare class shadows the most frequent class of the next template
        for (t, classes) in templates.iter().enumerate() {
            let rare = classes[k - 1];
            let partner = templates[(t + 1) % templates.len()][0];
            if partner == rare {
                continue;
            }
            let offset = rng.normal_matrix(1, d, cfg.rare_offset / (d as f64).sqrt());
            for a in 0..d {
                embeddings[(rare, a)] = embeddings[(partner, a)] + offset[(0, a)];
            }
        }

        let probe_weights =
            Rng::derive(seed, "world.probe", 0).normal_matrix(d, c, cfg.probe_noise / (d as f64).sqrt());

        let weights = common_weights(k - 1);
        let (lo, hi) = cfg.objects_per_scene;
        let mean_objects = (lo + hi) as f64 / 2.0;
        let mut class_frequency = vec![0.0; c];
        for classes in &templates {
            // expected counts per scene that includes this template
            let rare = cfg.rare_class_fraction;
            let common = mean_objects / cfg.templates_per_scene as f64 - rare;
            class_frequency[classes[k - 1]] += rare;
            for (j, &cls) in classes[..k - 1].iter().enumerate() {
                class_frequency[cls] += common * weights[j];
            }
        }
        let total: f64 = class_frequency.iter().sum();
        class_frequency.iter_mut().for_each(|f| *f /= total);

        Ok(Self {
            cfg: cfg.clone(),
            templates,
            embeddings,
            probe_weights,
            class_frequency,
            seed,
        })
    }

    pub fn rare_classes(&self) -> Vec<usize> {
        let k = self.cfg.classes_per_template;
        self.templates.iter().map(|t| t[k - 1]).collect()
    }

    fn random_box(rng: &mut Rng) -> BBox {
        let w = rng.uniform_range(0.05, 0.2);
        let h = rng.uniform_range(0.05, 0.2);
        let x = rng.uniform_range(0.0, 1.0 - w);
        let y = rng.uniform_range(0.0, 1.0 - h);
        BBox::from_xywh(x, y, w, h).expect("positive size")
    }

    fn jitter(&self, b: &BBox, rng: &mut Rng) -> BBox {
        let j = self.cfg.box_jitter;
        if j == 0.0 {
            return *b;
        }
        let (w, h) = (b.width(), b.height());
        let cx = b.x_min + w / 2.0 + j * w * rng.normal();
        let cy = b.y_min + h / 2.0 + j * h * rng.normal();
        let w2 = w * (j * rng.normal()).exp();
        let h2 = h * (j * rng.normal()).exp();
        BBox::from_xywh(cx - w2 / 2.0, cy - h2 / 2.0, w2, h2).expect("positive size")
    }

    fn feature(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        let sigma = self.cfg.class_embedding_noise;
        self.embeddings
            .row(class)
            .iter()
            .map(|e| e + sigma * rng.normal())
            .collect()
    }

    /// Nearest-embedding scores with a frequency bias and a fixed random
    /// perturbation; exact in the noiseless limit.
    fn base_probe(&self, f: &[f64], rng: &mut Rng) -> Vec<f64> {
        let cfg = &self.cfg;
        let sigma = cfg.class_embedding_noise;
        let temp = 2.0 * (sigma * sigma * cfg.feature_dim as f64 + 0.001);
        let mut z: Vec<f64> = (0..cfg.num_classes)
            .map(|k| {
                let d2: f64 = f
                    .iter()
                    .zip(self.embeddings.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let freq = self.class_frequency[k].max(1e-6);
                let noise: f64 = f
                    .iter()
                    .enumerate()
                    .map(|(a, v)| v * self.probe_weights[(a, k)])
                    .sum();
                -d2 / temp + cfg.frequency_bias * freq.ln() + sigma * noise
            })
            .collect();
        softmax_in_place(&mut z);
        if rng.bernoulli(cfg.label_noise) {
            let m = rng.uniform_range(0.5, 1.0);
            let u = 1.0 / cfg.num_classes as f64;
            z.iter_mut().for_each(|p| *p = (1.0 - m) * *p + m * u);
        }
        z
    }

    pub fn generate_scene(&self, id: usize) -> Scene {
        let cfg = &self.cfg;
        let k = cfg.classes_per_template;
        let mut rng = Rng::derive(self.seed, "scene", id as u64);
        let mut templates = vec![rng.int_range(0, self.templates.len() - 1)];
        while templates.len() < cfg.templates_per_scene {
            let t = rng.int_range(0, self.templates.len() - 1);
            if !templates.contains(&t) {
                templates.push(t);
            }
        }
        let classes: Vec<usize> = templates
            .iter()
            .flat_map(|&t| self.templates[t].iter().copied())
            .collect();
        let n_obj = rng.int_range(cfg.objects_per_scene.0, cfg.objects_per_scene.1);

        let weights = common_weights(k - 1);
        let mut gt_classes = Vec::with_capacity(n_obj);
        for &t in &templates {
            if rng.bernoulli(cfg.rare_class_fraction) {
                gt_classes.push(self.templates[t][k - 1]);
            }
        }
        while gt_classes.len() < n_obj {
            let t = match templates.len() {
                1 => templates[0],
                m => templates[rng.int_range(0, m - 1)],
            };
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = k - 2;
            for (j, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            gt_classes.push(self.templates[t][pick]);
        }
        let gt: Vec<(usize, BBox)> = gt_classes
            .iter()
            .map(|&c| (c, Self::random_box(&mut rng)))
            .collect();

        // (box, feature class)
        let mut proposals: Vec<(BBox, usize)> =
            gt.iter().map(|(c, b)| (self.jitter(b, &mut rng), *c)).collect();
        let outside: Vec<usize> = (0..cfg.num_classes).filter(|c| !classes.contains(c)).collect();
        for _ in 0..n_obj {
            if !rng.bernoulli(cfg.distractor_rate) {
                continue;
            }
            let mut b = Self::random_box(&mut rng);
            for _ in 0..20 {
                if gt.iter().all(|(_, g)| crate::graph::iou(&b, g) < 0.3) {
                    break;
                }
                b = Self::random_box(&mut rng);
            }
            let pool = if outside.is_empty() { &classes } else { &outside };
            let c = pool[rng.int_range(0, pool.len() - 1)];
            proposals.push((b, c));
        }
        rng.shuffle(&mut proposals);

        let n = proposals.len();
        let mut features = Matrix::zeros(n, cfg.feature_dim);
        let mut probs = Matrix::zeros(n, cfg.num_classes);
        for (i, (_, c)) in proposals.iter().enumerate() {
            let f = self.feature(*c, &mut rng);
            let p = self.base_probe(&f, &mut rng);
            features.row_mut(i).copy_from_slice(&f);
            probs.row_mut(i).copy_from_slice(&p);
        }
        let boxes: Vec<BBox> = proposals.into_iter().map(|(b, _)| b).collect();
        let labels = matched_labels(&boxes, &gt, DEFAULT_IOU_THRESH);
        Scene {
            id,
            templates,
            gt,
            proposals: boxes,
            features,
            base_probs: ClassProbs::new_unchecked(probs),
            labels,
        }
    }

    /// Scenes `first..first + count`, generated in parallel from per-scene seeds.
    pub fn generate(&self, first: usize, count: usize) -> Vec<Scene> {
        (first..first + count)
            .into_par_iter()
            .map(|id| self.generate_scene(id))
            .collect()
    }
}

/// Ground-truth annotations of `scenes` in the COCO-subset model.
pub fn scenes_to_annotations(scenes: &[Scene], num_classes: usize) -> Annotations {
    Annotations {
        images: scenes
            .iter()
            .map(|s| ImageRecord {
                id: s.id as i64,
                objects: s
                    .gt
                    .iter()
                    .map(|(c, b)| ObjectRecord {
                        category_id: *c as i64,
                        bbox: *b,
                    })
                    .collect(),
            })
            .collect(),
        categories: (0..num_classes)
            .map(|c| Category {
                id: c as i64,
                name: format!("class_{c}"),
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: SceneWorld,
    pub scenes: Vec<Scene>,
    pub prior: PriorMatrix,
}

/// Draws a world from `rng`, then `num_scenes` scenes and their co-occurrence prior.
pub fn generate_dataset(cfg: &SceneConfig, num_scenes: usize, rng: &mut Rng) -> Result<Dataset> {
    let world = SceneWorld::new(cfg, rng.next_u64())?;
    let scenes = world.generate(0, num_scenes);
    let prior = build_prior(&scenes_to_annotations(&scenes, cfg.num_classes), cfg.num_classes)?;
    Ok(Dataset { world, scenes, prior })
}

/// Train and test splits from one world; the prior comes from the train split.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub world: SceneWorld,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub prior: PriorMatrix,
}

pub fn generate_benchmark(
    cfg: &SceneConfig,
    num_train: usize,
    num_test: usize,
    seed: u64,
) -> Result<Benchmark> {
    let world = SceneWorld::new(cfg, derive_world_seed(seed))?;
    let train = world.generate(0, num_train);
    let test = world.generate(num_train, num_test);
    let prior = build_prior(&scenes_to_annotations(&train, cfg.num_classes), cfg.num_classes)?;
    Ok(Benchmark {
        world,
        train,
        test,
        prior,
    })
}

fn derive_world_seed(seed: u64) -> u64 {
    crate::tensor::derive_seed(seed, "world", 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: ClassProbs,
    pub boxes: Vec<BBox>,
}

/// Class probabilities for one scene; boxes are the proposals unchanged.
pub fn run_inference(
    scene: &Scene,
    mode: Mode,
    model: &Model,
    prior: &PriorMatrix,
    sgld: &SgldConfig,
    rng: &mut Rng,
) -> Result<Prediction> {
    let probs = match mode {
        Mode::Baseline => scene.base_probs.clone(),
        Mode::Gp => {
            let g = scene.initial_graph(prior)?;
            model.predict(&g.nodes, g.edges.values())?
        }
        Mode::Gpr => {
            let g = sgld_refine(&scene.initial_graph(prior)?, &model.energy, sgld, rng)?;
            model.predict(&g.nodes, g.edges.values())?
        }
        Mode::Oracle => {
            let g = scene.oracle_graph(prior, DEFAULT_IOU_THRESH)?;
            model.predict(&g.nodes, g.edges.values())?
        }
    };
    Ok(Prediction {
        probs,
        boxes: scene.proposals.clone(),
    })
}

/// [`run_inference`] over all scenes in parallel, each with the sampler seed
/// derived from `seed` and the scene id.
pub fn predict_scenes(
    scenes: &[Scene],
    mode: Mode,
    model: &Model,
    prior: &PriorMatrix,
    sgld: &SgldConfig,
    seed: u64,
) -> Result<Vec<Prediction>> {
    scenes
        .par_iter()
        .map(|s| {
            run_inference(
                s,
                mode,
                model,
                prior,
                sgld,
                &mut Rng::derive(seed, "infer.sgld", s.id as u64),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Zero for classes without ground truth.
    pub per_class_ap: Vec<f64>,
    pub num_gt: Vec<usize>,
    /// Share of ground-truth instances per class.
    pub per_class_frequency: Vec<f64>,
    /// Mean AP over classes with at least one instance.
    pub map: f64,
    pub accuracy: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,num_gt,frequency,ap\n");
        for c in 0..self.per_class_ap.len() {
            out.push_str(&format!(
                "{c},{},{},{}\n",
                self.num_gt[c], self.per_class_frequency[c], self.per_class_ap[c]
            ));
        }
        let total: usize = self.num_gt.iter().sum();
        out.push_str(&format!("map,{total},1,{}\n", self.map));
        out.push_str(&format!("accuracy,{total},1,{}\n", self.accuracy));
        out
    }
}

/// All-point interpolated area under the precision-recall curve. `hits` are
/// the TP counts of consecutive tie groups in rank order, with group sizes.
fn average_precision(groups: &[(usize, usize)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(groups.len());
    let (mut tp, mut seen) = (0usize, 0usize);
    for &(hits, size) in groups {
        tp += hits;
        seen += size;
        points.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// AP@0.5 per class, where every proposal with a positive score for the
/// class is a detection; greedy matching by confidence, plus accuracy over
/// matched proposals.
pub fn evaluate(
    predictions: &[Prediction],
    gts: &[Vec<(usize, BBox)>],
    num_classes: usize,
) -> Result<EvalReport> {
    if predictions.len() != gts.len() {
        return Err(Error::Shape {
            op: "evaluate",
            left: (predictions.len(), 1),
            right: (gts.len(), 1),
        });
    }
    for p in predictions {
        if p.probs.num_classes() != num_classes || p.probs.num_nodes() != p.boxes.len() {
            return Err(Error::Shape {
                op: "evaluate",
                left: p.probs.values().shape(),
                right: (p.boxes.len(), num_classes),
            });
        }
    }
    let mut num_gt = vec![0usize; num_classes];
    for gt in gts {
        for &(c, _) in gt {
            if c >= num_classes {
                return Err(Error::ClassOutOfRange {
                    index: c as i64,
                    num_classes,
                });
            }
            num_gt[c] += 1;
        }
    }

    let per_class_ap: Vec<f64> = (0..num_classes)
        .into_par_iter()
        .map(|c| {
            if num_gt[c] == 0 {
                return 0.0;
            }
            let mut ranked: Vec<(f64, usize, usize)> = predictions
                .iter()
                .enumerate()
                .flat_map(|(s, p)| (0..p.boxes.len()).map(move |i| (p.probs.values()[(i, c)], s, i)))
                .filter(|&(score, _, _)| score > 0.0)
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut groups: Vec<(usize, usize)> = Vec::new();
            let mut start = 0;
            while start < ranked.len() {
                let score = ranked[start].0;
                let mut end = start;
                let mut hits = 0;
                while end < ranked.len() && ranked[end].0 == score {
                    let (_, s, i) = ranked[end];
                    let b = &predictions[s].boxes[i];
                    let mut best: Option<(usize, f64)> = None;
                    for (g, (gc, gb)) in gts[s].iter().enumerate() {
                        if *gc != c || used[s][g] {
                            continue;
                        }
                        let v = crate::graph::iou(b, gb);
                        if v >= DEFAULT_IOU_THRESH && best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        used[s][g] = true;
                        hits += 1;
                    }
                    end += 1;
                }
                groups.push((hits, end - start));
                start = end;
            }
            average_precision(&groups, num_gt[c])
        })
        .collect();

    let with_gt: Vec<f64> = (0..num_classes)
        .filter(|&c| num_gt[c] > 0)
        .map(|c| per_class_ap[c])
        .collect();
    let map = if with_gt.is_empty() {
        0.0
    } else {
        with_gt.iter().sum::<f64>() / with_gt.len() as f64
    };

    let (mut hits, mut matched) = (0usize, 0usize);
    for (p, gt) in predictions.iter().zip(gts) {
        let labels = matched_labels(&p.boxes, gt, DEFAULT_IOU_THRESH);
        for (l, c) in labels.iter().zip(p.probs.argmax()) {
            if let Some(l) = l {
                matched += 1;
                hits += usize::from(*l == c);
            }
        }
    }
    let total: usize = num_gt.iter().sum();
    Ok(EvalReport {
        per_class_ap,
        per_class_frequency: num_gt
            .iter()
            .map(|&n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
            .collect(),
        num_gt,
        map,
        accuracy: if matched == 0 {
            0.0
        } else {
            hits as f64 / matched as f64
        },
    })
}

/// Inference plus evaluation of one mode on `scenes`.
pub fn evaluate_mode(
    scenes: &[Scene],
    mode: Mode,
    model: &Model,
    prior: &PriorMatrix,
    sgld: &SgldConfig,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict_scenes(scenes, mode, model, prior, sgld, seed)?;
    let gts: Vec<Vec<(usize, BBox)>> = scenes.iter().map(|s| s.gt.clone()).collect();
    evaluate(&preds, &gts, prior.num_classes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RareClassRow {
    pub class: usize,
    pub frequency: f64,
    pub delta_ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RareClassReport {
    /// All classes, by descending frequency.
    pub rows: Vec<RareClassRow>,
    /// Spearman correlation of frequency and ΔAP over classes with instances;
    /// zero when undefined.
    pub spearman: f64,
    pub spearman_defined: bool,
}

impl RareClassReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,frequency,delta_ap\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.class, r.frequency, r.delta_ap));
        }
        out
    }
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn rare_class_report(baseline: &EvalReport, improved: &EvalReport) -> RareClassReport {
    let c = baseline.per_class_ap.len();
    let mut rows: Vec<RareClassRow> = (0..c)
        .map(|k| RareClassRow {
            class: k,
            frequency: baseline.per_class_frequency[k],
            delta_ap: improved.per_class_ap[k] - baseline.per_class_ap[k],
        })
        .collect();
    rows.sort_by(|a, b| b.frequency.total_cmp(&a.frequency).then(a.class.cmp(&b.class)));
    let present: Vec<&RareClassRow> = rows.iter().filter(|r| baseline.num_gt[r.class] > 0).collect();
    let freq: Vec<f64> = present.iter().map(|r| r.frequency).collect();
    let delta: Vec<f64> = present.iter().map(|r| r.delta_ap).collect();
    let rho = spearman(&freq, &delta);
    RareClassReport {
        rows,
        spearman: rho.unwrap_or(0.0),
        spearman_defined: rho.is_some(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use crate::training::ModelConfig;
    use proptest::prelude::*;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            feature_dim: 8,
            objects_per_scene: (4, 6),
            ..SceneConfig::default()
        }
    }

    fn bx(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 1.0, y + 1.0).unwrap()
    }

    fn pred(rows: &[&[f64]], boxes: Vec<BBox>) -> Prediction {
        Prediction {
            probs: ClassProbs::new(Matrix::from_rows(rows)).unwrap(),
            boxes,
        }
    }

    #[test]
    fn ap_micro_case() {
        // ranks: TP (0.9), FP (0.8), TP (0.7) against two ground-truth boxes
        let p = pred(
            &[&[0.9, 0.1], &[0.8, 0.2], &[0.7, 0.3]],
            vec![bx(0.0, 0.0), bx(10.0, 10.0), bx(5.0, 5.0)],
        );
        let gt = vec![(0, bx(0.0, 0.0)), (0, bx(5.0, 5.0))];
        let r = evaluate(&[p], &[gt], 2).unwrap();
        assert!((r.per_class_ap[0] - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((r.per_class_ap[0] - 0.8333333333333334).abs() < 1e-9);
        assert_eq!(r.num_gt, vec![2, 0]);
        assert_eq!(r.map, r.per_class_ap[0]);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let boxes = vec![bx(0.0, 0.0), bx(3.0, 0.0), bx(6.0, 0.0)];
        let gt: Vec<(usize, BBox)> = vec![(1, boxes[0]), (0, boxes[1]), (2, boxes[2])];
        let p = Prediction {
            probs: ClassProbs::one_hot(&[1, 0, 2], 3),
            boxes,
        };
        let r = evaluate(&[p], &[gt], 3).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn wrong_class_contributes_zero() {
        let boxes = vec![bx(0.0, 0.0), bx(3.0, 0.0)];
        let gt: Vec<(usize, BBox)> = vec![(0, boxes[0]), (1, boxes[1])];
        let p = Prediction {
            probs: ClassProbs::one_hot(&[1, 1], 2),
            boxes,
        };
        let r = evaluate(&[p], &[gt], 2).unwrap();
        assert!(r.per_class_ap[0] <= 0.5);
        assert_eq!(r.per_class_ap[1], 0.5);
        assert_eq!(r.accuracy, 0.5);

        let only_wrong = Prediction {
            probs: ClassProbs::one_hot(&[1], 2),
            boxes: vec![bx(0.0, 0.0)],
        };
        let r = evaluate(&[only_wrong], &[vec![(0, bx(0.0, 0.0))]], 2).unwrap();
        assert_eq!(r.per_class_ap[0], 0.0);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn tie_groups_do_not_depend_on_order() {
        let boxes = vec![bx(0.0, 0.0), bx(10.0, 10.0)];
        let gt = vec![(0, bx(0.0, 0.0))];
        let a = Prediction {
            probs: ClassProbs::uniform(2, 2),
            boxes: boxes.clone(),
        };
        let b = Prediction {
            probs: ClassProbs::uniform(2, 2),
            boxes: vec![boxes[1], boxes[0]],
        };
        let ra = evaluate(&[a], std::slice::from_ref(&gt), 2).unwrap();
        let rb = evaluate(&[b], &[gt], 2).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.per_class_ap[0], 0.5);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn identical_reports_flag_undefined_correlation() {
        let world = SceneWorld::new(&small_cfg(), 1).unwrap();
        let scenes = world.generate(0, 10);
        let model = Model::init(&ModelConfig::default(), 8, 20, 0).unwrap();
        let prior = build_prior(&scenes_to_annotations(&scenes, 20), 20).unwrap();
        let r = evaluate_mode(&scenes, Mode::Baseline, &model, &prior, &SgldConfig::default(), 0).unwrap();
        let report = rare_class_report(&r, &r);
        assert_eq!(report.rows.len(), 20);
        assert!(report.rows.iter().all(|row| row.delta_ap == 0.0));
        assert!(!report.spearman_defined);
        assert_eq!(report.spearman, 0.0);
        assert!(report.rows.windows(2).all(|w| w[0].frequency >= w[1].frequency));
    }

    #[test]
    fn noiseless_scenes_have_correct_base_argmax() {
        let cfg = SceneConfig {
            class_embedding_noise: 0.0,
            label_noise: 0.0,
            distractor_rate: 0.0,
            ..small_cfg()
        };
        let world = SceneWorld::new(&cfg, 3).unwrap();
        for scene in world.generate(0, 40) {
            let pred = scene.base_probs.argmax();
            for (i, l) in scene.labels.iter().enumerate() {
                if let Some(l) = l {
                    assert_eq!(pred[i], *l, "scene {}", scene.id);
                }
            }
        }
    }

    #[test]
    fn disjoint_templates_give_block_prior() {
        let cfg = SceneConfig {
            num_classes: 6,
            num_templates: 2,
            classes_per_template: 3,
            templates_per_scene: 1,
            rare_class_fraction: 0.5,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg, 200, &mut Rng::new(4)).unwrap();
        let t = ds.prior.values();
        for a in 0..6 {
            for b in 0..6 {
                if a / 3 != b / 3 {
                    assert_eq!(t[(a, b)], 0.0, "({a}, {b})");
                }
            }
        }
        assert!(t[(0, 1)] > 0.0 && t[(3, 4)] > 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_cfg(), 20, &mut Rng::new(5)).unwrap();
        let b = generate_dataset(&small_cfg(), 20, &mut Rng::new(5)).unwrap();
        assert_eq!(a.scenes, b.scenes);
        assert_eq!(a.prior, b.prior);
        let bench = generate_benchmark(&small_cfg(), 15, 5, 9).unwrap();
        let again = generate_benchmark(&small_cfg(), 15, 5, 9).unwrap();
        assert_eq!(bench.test, again.test);
        assert_eq!(bench.train[3].id, 3);
        assert_eq!(bench.test[0].id, 15);
    }

    #[test]
    fn scene_invariants_hold() {
        let world = SceneWorld::new(&SceneConfig::default(), 6).unwrap();
        let rare = world.rare_classes();
        let mut rare_scenes = 0;
        let scenes = world.generate(0, 400);
        for s in &scenes {
            assert_eq!(s.features.rows(), s.proposals.len());
            assert_eq!(s.base_probs.num_nodes(), s.proposals.len());
            assert_eq!(s.labels.len(), s.proposals.len());
            assert!(s
                .gt
                .iter()
                .all(|(c, _)| s.templates.iter().any(|&t| world.templates[t].contains(c))));
            rare_scenes += usize::from(s.gt.iter().any(|(c, _)| rare.contains(c)));
        }
        let cfg = &world.cfg;
        let expected = 1.0 - (1.0 - cfg.rare_class_fraction).powi(cfg.templates_per_scene as i32);
        let share = rare_scenes as f64 / scenes.len() as f64;
        assert!((share - expected).abs() < 0.1, "{share} vs {expected}");
    }

    #[test]
    fn inference_modes_agree_where_they_should() {
        let bench = generate_benchmark(&small_cfg(), 30, 5, 2).unwrap();
        let model = Model::init(&ModelConfig::default(), 8, 20, 3).unwrap();
        let collapsed = SgldConfig {
            steps: 0,
            noise_var: 0.0,
            ..SgldConfig::default()
        };
        for s in &bench.test {
            let mut rng = Rng::new(0);
            let base = run_inference(s, Mode::Baseline, &model, &bench.prior, &collapsed, &mut rng).unwrap();
            assert_eq!(base.probs, s.base_probs);
            assert_eq!(base.boxes, s.proposals);
            let gp = run_inference(s, Mode::Gp, &model, &bench.prior, &collapsed, &mut rng).unwrap();
            let gpr = run_inference(s, Mode::Gpr, &model, &bench.prior, &collapsed, &mut rng).unwrap();
            assert_eq!(gp, gpr);

            let mut oracle_scene = s.clone();
            let labels: Vec<usize> = s.labels.iter().map(|l| l.unwrap_or(0)).collect();
            oracle_scene.base_probs = ClassProbs::one_hot(&labels, 20);
            if s.labels.iter().all(|l| l.is_some()) {
                let a = run_inference(
                    &oracle_scene,
                    Mode::Gp,
                    &model,
                    &bench.prior,
                    &collapsed,
                    &mut rng,
                )
                .unwrap();
                let b = run_inference(
                    &oracle_scene,
                    Mode::Oracle,
                    &model,
                    &bench.prior,
                    &collapsed,
                    &mut rng,
                )
                .unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn annotations_rebuild_the_same_prior() {
        let ds = generate_dataset(&small_cfg(), 50, &mut Rng::new(8)).unwrap();
        let ann = scenes_to_annotations(&ds.scenes, 20);
        let text = ann.to_json_string();
        let back = Annotations::from_json_str(&text, std::path::Path::new("mem")).unwrap();
        let t = build_prior(&back, 20).unwrap();
        assert!(t.values().max_abs_diff(ds.prior.values()) <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn evaluate_ignores_input_order(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..4 {
                let n = rng.int_range(1, 5);
                let boxes: Vec<BBox> = (0..n).map(|i| bx(3.0 * i as f64 + rng.uniform_range(0.0, 0.5), 0.0)).collect();
                let mut gt: Vec<(usize, BBox)> = Vec::new();
                for i in 0..n {
                    if rng.bernoulli(0.7) {
                        gt.push((rng.int_range(0, 2), bx(3.0 * i as f64, 0.0)));
                    }
                }
                let mut m = rng.uniform_matrix(n, 3, 0.0, 1.0);
                for i in 0..n {
                    let s: f64 = m.row(i).iter().sum();
                    m.row_mut(i).iter_mut().for_each(|v| *v /= s);
                }
                preds.push(Prediction { probs: ClassProbs::new(m).unwrap(), boxes });
                gts.push(gt);
            }
            let r = evaluate(&preds, &gts, 3).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.map));
            prop_assert!((0.0..=1.0).contains(&r.accuracy));

            let mut perm: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut perm);
            let mut p2: Vec<Prediction> = perm.iter().map(|&i| preds[i].clone()).collect();
            let g2: Vec<Vec<(usize, BBox)>> = perm.iter().map(|&i| gts[i].clone()).collect();
            for p in &mut p2 {
                let n = p.boxes.len();
                let mut rows: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut rows);
                p.boxes = rows.iter().map(|&i| p.boxes[i]).collect();
                p.probs = ClassProbs::new(p.probs.values().select_rows(&rows)).unwrap();
            }
            let r2 = evaluate(&p2, &g2, 3).unwrap();
            prop_assert!((r.map - r2.map).abs() < 1e-12);
            prop_assert_eq!(r.num_gt, r2.num_gt);
            prop_assert!((r.accuracy - r2.accuracy).abs() < 1e-12);
        }
    }
}
