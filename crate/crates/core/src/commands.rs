//! Command implementations behind the `mind` binary.
//!
//! Each command takes a [`RunConfig`] and an output location and returns a
//! serializable summary. Nothing written to disk depends on wall-clock time.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::afire::Sample;
use crate::config::RunConfig;
use crate::dataset::{save_planted, write_json, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{isg_evaluate, IsgReport, MetricsReport};
use crate::mind::{load_checkpoint, save_checkpoint, Model};
use crate::objective::{batch_loss, batch_loss_and_grad};
use crate::synthgen::{generate, oracle_ceiling};
use crate::tensorcore::{grad_check, rng, GradCheckReport, Matrix, ParamStore};
use crate::train::{evaluate_report, fit, report_meta, EpochLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const ISG_FILE: &str = "isg.json";
pub const ROUTES_FILE: &str = "routes.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The configured dataset directory, or planted data generated from the `synth_*` keys.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(dir) => Dataset::load(dir),
        None => Ok(Dataset::from_planted(&generate(&cfg.synth_spec())?)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub subjects: usize,
    pub episodes: usize,
    pub sigma: f64,
    pub ceiling_mean: f64,
    pub ceiling_min: f64,
    pub ceiling_max: f64,
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let ds = generate(&cfg.synth_spec())?;
    create_dir(out)?;
    let files = save_planted(&ds, out)?;
    let ceiling = oracle_ceiling(&ds)?;
    let mean = ceiling.iter().sum::<f64>() / ceiling.len() as f64;
    Ok(SynthSummary {
        dir: out.to_path_buf(),
        files,
        subjects: ds.spec.subjects,
        episodes: ds.episodes.len(),
        sigma: ds.teacher.sigma,
        ceiling_mean: mean,
        ceiling_min: ceiling.iter().copied().fold(f64::INFINITY, f64::min),
        ceiling_max: ceiling.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
    pub best_epoch: usize,
    pub best_val_r: f64,
    pub epochs: usize,
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut text, l)?;
        text.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&text))
        .map_err(|e| Error::io(path, e))
}

/// Train on the configured data and write the best-validation checkpoint,
/// the per-epoch log and the validation report.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    data.check_model(&cfg.model_config())?;
    let split = data.split(cfg.win, cfg.stride, cfg.split_ratio, cfg.seed)?;
    let outcome = fit(cfg, &data, &split, None)?;
    create_dir(out)?;
    let summary = TrainSummary {
        checkpoint: out.join(CHECKPOINT_FILE),
        log: out.join(TRAIN_LOG_FILE),
        report: out.join(REPORT_FILE),
        best_epoch: outcome.best_epoch,
        best_val_r: outcome.best_val_r,
        epochs: outcome.logs.len(),
    };
    let run = serde_json::to_value(cfg)?;
    save_checkpoint(&outcome.model, Some(&run), &summary.checkpoint)?;
    write_log(&summary.log, &outcome.logs)?;
    let report = evaluate_report(&outcome.model, &split.val, report_meta(cfg, &split)?)?;
    write_json(&summary.report, &report)?;
    Ok(summary)
}

/// Evaluate a checkpoint on the validation windows of the configured data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    data.check_model(&model.config)?;
    let split = data.split(cfg.win, cfg.stride, cfg.split_ratio, cfg.seed)?;
    evaluate_report(&model, &split.val, report_meta(cfg, &split)?)
}

pub fn cmd_isg(cfg: &RunConfig) -> Result<IsgReport> {
    let data = load_data(cfg)?;
    isg_evaluate(&data, cfg)
}

/// Routing weights for the first `first_n_tr` TRs of every episode of the
/// requested subjects, as CSV rows `subject,episode,tr,expert_0,…`.
pub fn cmd_routes(model: &Model, data: &Dataset, subjects: Option<&[usize]>, first_n_tr: usize) -> Result<String> {
    let e = model.config.e;
    let wanted: Vec<usize> = match subjects {
        Some(s) => s.to_vec(),
        None => data.subject_ids(),
    };
    for &s in &wanted {
        if s >= model.config.s || !data.episodes.iter().any(|ep| ep.subject == s) {
            return Err(Error::UnknownSubject {
                subject: s,
                subjects: model.config.s,
            });
        }
    }
    data.check_model(&model.config)?;
    let mut csv = String::from("subject,episode,tr");
    for i in 0..e {
        csv.push_str(&format!(",expert_{i}"));
    }
    csv.push('\n');
    let chunk = if model.config.afire { model.config.w_max } else { first_n_tr.max(1) };
    for &s in &wanted {
        for ep in data.episodes.iter().filter(|ep| ep.subject == s) {
            let n = first_n_tr.min(ep.inputs.rows());
            let mut start = 0;
            while start < n {
                let len = chunk.min(n - start);
                let fwd = model.forward_window(&ep.inputs.slice_rows(start, len), s)?;
                for (t, g) in fwd.gates.iter().enumerate() {
                    csv.push_str(&format!("{s},{},{}", ep.episode_id, start + t));
                    for w in &g.w_hat {
                        csv.push_str(&format!(",{w}"));
                    }
                    csv.push('\n');
                }
                start += len;
            }
        }
    }
    Ok(csv)
}

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_MARGIN: f64 = 1e-6;
const GRADCHECK_ATTEMPTS: usize = 5;
const GRADCHECK_JITTER: f64 = 0.4;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub tokens: usize,
    pub eps: f64,
    pub tol: f64,
    /// Scale the analytic gradient of this group by 1.1 before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tokens: 8,
            eps: GRADCHECK_EPS,
            tol: GRADCHECK_TOL,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub passed: bool,
    pub tol: f64,
    pub attempts: usize,
    pub max_rel_error: f64,
    pub failing: Vec<String>,
    pub report: GradCheckReport,
}

/// Smallest configuration covering every parameter group.
pub fn gradcheck_config() -> RunConfig {
    RunConfig {
        d_in: 4,
        d: 4,
        h: 5,
        o: 3,
        e: 3,
        k: 2,
        s: 2,
        afire_hidden: 4,
        ..RunConfig::default()
    }
}

fn gradcheck_dims(cfg: &RunConfig) -> Result<()> {
    let limits = [
        ("d_in", cfg.d_in, 8),
        ("d", cfg.d, 8),
        ("afire_hidden", if cfg.afire { cfg.afire_hidden } else { 0 }, 8),
        ("e", cfg.e, 4),
        ("o", cfg.o, 6),
        ("h", cfg.h, 8),
    ];
    for (name, v, max) in limits {
        if v > max {
            return Err(Error::InvalidConfig(format!("gradcheck needs {name} <= {max}, got {v}")));
        }
    }
    Ok(())
}

fn gradcheck_batch(cfg: &RunConfig, tokens: usize, r: &mut rng::Rng) -> Result<Vec<Sample>> {
    let windows = cfg.s.min(tokens);
    (0..windows)
        .map(|w| {
            let len = tokens / windows + usize::from(w < tokens % windows);
            Ok(Sample {
                subject_id: w % cfg.s,
                episode_id: format!("gc{w}"),
                start: 0,
                inputs: Matrix::from_vec(len, cfg.d_in, rng::normal_vec(r, len * cfg.d_in, 1.0))?,
                targets: Matrix::from_vec(len, cfg.o, rng::normal_vec(r, len * cfg.o, 1.0))?,
            })
        })
        .collect()
}

/// Central-difference check of the full training objective at a random
/// parameter point, retried with fresh inputs while any Top-K margin is tiny.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckOutcome> {
    gradcheck_dims(cfg)?;
    if opts.tokens == 0 {
        return Err(Error::EmptySequence);
    }
    let mut model_cfg = cfg.model_config();
    model_cfg.w_max = opts.tokens;
    model_cfg.validate()?;
    let weights = cfg.loss_weights();
    for attempt in 0..GRADCHECK_ATTEMPTS {
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, 0x6C00 + attempt as u64));
        let mut model = Model::new(model_cfg.clone(), rng::derive_seed(cfg.seed, 0x6D00 + attempt as u64))?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let noise = rng::normal_vec(&mut r, model.store.value(id).len(), GRADCHECK_JITTER);
            for (v, n) in model.store.value_mut(id).as_mut_slice().iter_mut().zip(noise) {
                *v += n;
            }
        }
        let samples = gradcheck_batch(cfg, opts.tokens, &mut r)?;
        let batch: Vec<&Sample> = samples.iter().collect();
        model.store.zero_grads();
        let out = batch_loss_and_grad(&mut model, &batch, weights)?;
        if out.forwards.iter().flat_map(|f| &f.gates).any(|g| g.margin < GRADCHECK_MARGIN) {
            continue;
        }
        if let Some(name) = &opts.corrupt {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::InvalidConfig(format!("no parameter group {name}")))?;
            model.store.grad_mut(id).scale(1.1);
        }
        let probe = model.clone();
        let loss = |ps: &ParamStore| -> Result<f64> {
            let mut m = probe.clone();
            m.store.copy_values_from(ps)?;
            Ok(batch_loss(&m, &batch, weights)?.total)
        };
        let report = grad_check(loss, &model.store, opts.eps)?;
        let failing: Vec<String> = report.failing(opts.tol).map(|g| g.name.clone()).collect();
        return Ok(GradcheckOutcome {
            passed: failing.is_empty(),
            tol: opts.tol,
            attempts: attempt + 1,
            max_rel_error: report.max_rel_error(),
            failing,
            report,
        });
    }
    Err(Error::TieMargin(GRADCHECK_ATTEMPTS))
}
