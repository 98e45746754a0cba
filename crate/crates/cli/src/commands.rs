//! The subcommands. Each returns the text it prints on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use graphprior::checkpoint::{load_model, save_model};
use graphprior::energy::{energy, sgld_refine_observed};
use graphprior::prior::{build_prior_smoothed, load_annotations, save_prior};
use graphprior::scenes::{evaluate_mode, generate_benchmark, rare_class_report, Benchmark, EvalReport};
use graphprior::tensor::Rng;
use graphprior::training::{metrics_to_csv, train, Mode, Model, TrainOutput};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_TOL};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.csv";
pub const BASELINE_REPORT_FILE: &str = "baseline_report.csv";
pub const RARE_CLASS_FILE: &str = "rare_class_report.csv";
pub const ORACLE_SUMMARY_FILE: &str = "oracle_summary.csv";
pub const ENERGY_TRACE_FILE: &str = "energy_trace.csv";
pub const EDGE_TRACE_FILE: &str = "edge_trace.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PRIOR_FILE: &str = "prior.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

/// Flags shared by every experiment command.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub out: PathBuf,
}

/// A loaded configuration with command-line overrides applied and an
/// output directory that exists.
pub struct RunContext {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl RunContext {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = o.mode {
            cfg.mode = mode.as_str().to_string();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&o.out).map_err(|e| CliError::io(&o.out, e))?;
        let ctx = Self {
            cfg,
            out: o.out.clone(),
        };
        ctx.write(RESOLVED_CONFIG_FILE, &ctx.cfg.to_toml_string())?;
        Ok(ctx)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    fn benchmark(&self) -> Result<Benchmark, CliError> {
        let mut bench = generate_benchmark(
            &self.cfg.scene_config(),
            self.cfg.data.num_train,
            self.cfg.data.num_test,
            self.cfg.seed,
        )?;
        bench.prior = bench.prior.smoothed(self.cfg.prior.smoothing_eps)?;
        Ok(bench)
    }

    fn evaluate(&self, bench: &Benchmark, mode: Mode, model: &Model) -> Result<EvalReport, CliError> {
        Ok(evaluate_mode(
            &bench.test,
            mode,
            model,
            &bench.prior,
            &self.cfg.sgld_config(),
            self.cfg.seed,
        )?)
    }

    fn checkpoint_path(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.cfg.paths.checkpoint.clone())
            .unwrap_or_else(|| self.path(CHECKPOINT_FILE))
    }

    /// Weights are irrelevant to baseline predictions.
    fn placeholder_model(&self) -> Result<Model, CliError> {
        let s = &self.cfg.scene;
        Ok(Model::init(
            &self.cfg.model_config(),
            s.feature_dim,
            s.num_classes,
            self.cfg.seed,
        )?)
    }
}

fn train_mode(ctx: &RunContext, bench: &Benchmark, mode: Mode) -> Result<TrainOutput, CliError> {
    let mut tc = ctx.cfg.train_config()?;
    tc.mode = mode;
    let out = train(&bench.train, &tc, &bench.prior)?;
    ctx.write(METRICS_FILE, &metrics_to_csv(&out.metrics))?;
    let ckpt = ctx.path(CHECKPOINT_FILE);
    save_model(&out.model, &ckpt)?;
    save_prior(&bench.prior, ctx.path(PRIOR_FILE))?;
    Ok(out)
}

pub fn cmd_train(o: &Overrides) -> Result<String, CliError> {
    let ctx = RunContext::resolve(o)?;
    let mode = ctx.cfg.mode()?;
    let bench = ctx.benchmark()?;
    let out = train_mode(&ctx, &bench, mode)?;
    let report = ctx.evaluate(&bench, mode, &out.model)?;
    ctx.write(EVAL_REPORT_FILE, &report.to_csv())?;

    let mut s = String::new();
    if let Some(last) = out.metrics.last() {
        let _ = writeln!(
            s,
            "trained {mode}: {} epochs, final loss {:.4}, train accuracy {:.4}",
            last.epoch, last.total_loss, last.train_accuracy
        );
    }
    let _ = writeln!(s, "test mAP {:.4} accuracy {:.4}", report.map, report.accuracy);
    let _ = writeln!(s, "outputs in {}", ctx.out.display());
    Ok(s)
}

pub fn cmd_eval(o: &Overrides, checkpoint: Option<&Path>) -> Result<String, CliError> {
    let ctx = RunContext::resolve(o)?;
    let mode = ctx.cfg.mode()?;
    let bench = ctx.benchmark()?;
    let model = match mode {
        Mode::Baseline => ctx.placeholder_model()?,
        _ => load_model(ctx.checkpoint_path(checkpoint))?,
    };
    let report = ctx.evaluate(&bench, mode, &model)?;
    ctx.write(EVAL_REPORT_FILE, &report.to_csv())?;

    let mut s = format!("{mode} mAP {:.4} accuracy {:.4}\n", report.map, report.accuracy);
    if mode != Mode::Baseline {
        let base = ctx.evaluate(&bench, Mode::Baseline, &model)?;
        ctx.write(BASELINE_REPORT_FILE, &base.to_csv())?;
        let rare = rare_class_report(&base, &report);
        ctx.write(RARE_CLASS_FILE, &rare.to_csv())?;
        let _ = writeln!(s, "baseline mAP {:.4} accuracy {:.4}", base.map, base.accuracy);
        if rare.spearman_defined {
            let _ = writeln!(s, "spearman(frequency, delta AP) {:.4}", rare.spearman);
        }
    }
    Ok(s)
}

pub fn cmd_oracle(o: &Overrides) -> Result<String, CliError> {
    let ctx = RunContext::resolve(o)?;
    let bench = ctx.benchmark()?;
    let out = train_mode(&ctx, &bench, Mode::Oracle)?;
    let oracle = ctx.evaluate(&bench, Mode::Oracle, &out.model)?;
    let base = ctx.evaluate(&bench, Mode::Baseline, &out.model)?;
    ctx.write(EVAL_REPORT_FILE, &oracle.to_csv())?;
    ctx.write(BASELINE_REPORT_FILE, &base.to_csv())?;
    let rel = relative_improvement(base.map, oracle.map);
    ctx.write(
        ORACLE_SUMMARY_FILE,
        &format!(
            "baseline_map,oracle_map,relative_improvement\n{},{},{}\n",
            base.map, oracle.map, rel
        ),
    )?;
    Ok(format!(
        "baseline mAP {:.4}\noracle mAP {:.4}\nrelative improvement {:+.2}%\n",
        base.map,
        oracle.map,
        100.0 * rel
    ))
}

pub fn relative_improvement(base: f64, improved: f64) -> f64 {
    if base > 0.0 {
        (improved - base) / base
    } else {
        f64::INFINITY
    }
}

pub fn cmd_refine(o: &Overrides, checkpoint: Option<&Path>, scene_id: usize) -> Result<String, CliError> {
    let ctx = RunContext::resolve(o)?;
    let model = load_model(ctx.checkpoint_path(checkpoint))?;
    let bench = ctx.benchmark()?;
    let scene = bench.world.generate_scene(scene_id);
    let g0 = scene.initial_graph(&bench.prior)?;
    let mut rng = Rng::derive(ctx.cfg.seed, "refine.sgld", scene_id as u64);

    let mut energies = String::from("step,energy\n");
    let mut edges = String::from("step,row,col,value\n");
    let mut trace = Vec::new();
    sgld_refine_observed(&g0, &model.energy, &ctx.cfg.sgld_config(), &mut rng, |step, g| {
        let e = energy(g, &model.energy)?;
        trace.push(e);
        let _ = writeln!(energies, "{step},{e}");
        let m = g.edges.values();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let _ = writeln!(edges, "{step},{i},{j},{}", m[(i, j)]);
            }
        }
        Ok(())
    })?;
    ctx.write(ENERGY_TRACE_FILE, &energies)?;
    ctx.write(EDGE_TRACE_FILE, &edges)?;
    let first = trace.first().copied().unwrap_or(f64::NAN);
    let last = trace.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "scene {scene_id}: {} proposals, {} steps, energy {first:.6} -> {last:.6}\n",
        scene.num_proposals(),
        trace.len() - 1
    ))
}

pub fn cmd_build_prior(o: &Overrides, annotations: Option<&Path>) -> Result<String, CliError> {
    let ctx = RunContext::resolve(o)?;
    let path = annotations
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.paths.annotations.clone())
        .ok_or_else(|| {
            CliError::new(
                "usage",
                "build-prior needs --annotations PATH or paths.annotations",
            )
        })?;
    let ann = load_annotations(&path)?;
    let num_classes = match ann.categories.iter().map(|c| c.id).max() {
        Some(max) if max >= 0 => max as usize + 1,
        _ => ctx.cfg.scene.num_classes,
    };
    if ann.num_objects() == 0 {
        eprintln!(
            "warning: {} has no annotated objects; the prior is all zero",
            path.display()
        );
    }
    let prior = build_prior_smoothed(&ann, num_classes, ctx.cfg.prior.smoothing_eps)?;
    let out = ctx.path(PRIOR_FILE);
    save_prior(&prior, &out)?;
    Ok(format!(
        "classes {num_classes} images {} objects {} sparsity {:.4}\nwrote {}\n",
        ann.images.len(),
        ann.num_objects(),
        prior.sparsity(),
        out.display()
    ))
}

pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<String, CliError> {
    let report = run_gradcheck(opts)?;
    let text = report.to_text();
    if report.passed() {
        return Ok(text);
    }
    eprint!("{text}");
    let failed: Vec<&str> = report
        .blocks
        .iter()
        .filter(|b| b.max_rel_err > GRADCHECK_TOL)
        .map(|b| b.name)
        .collect();
    Err(CliError::new(
        "gradcheck",
        format!("relative error above {GRADCHECK_TOL:e} in {}", failed.join(", ")),
    ))
}
