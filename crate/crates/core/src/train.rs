//! Training loop and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::afire::Sample;
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, EpisodeScores, MetricsReport, ReportMeta};
use crate::mind::{config_hash, Model};
use crate::objective::{adamw_step, batch_loss_and_grad, onecycle_lr, LossBreakdown, OptimState};
use crate::tensorcore::{rng, Matrix};

const MODEL_STREAM: u64 = 0x30DE1;
const SHUFFLE_STREAM: u64 = 0x5AFF;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Batch means of each loss term.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub val_r: f64,
    /// Share of Top-K slots per expert.
    pub load: Vec<f64>,
    pub load_entropy: f64,
    pub tokens: usize,
    pub expert_calls: u64,
    pub calls_per_token_min: usize,
    pub calls_per_token_max: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation r.
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_r: f64,
}

impl TrainOutcome {
    /// Load entropy averaged over epochs.
    pub fn mean_load_entropy(&self) -> f64 {
        self.logs.iter().map(|l| l.load_entropy).sum::<f64>() / self.logs.len().max(1) as f64
    }

    pub fn final_val_r(&self) -> f64 {
        self.logs.last().map_or(0.0, |l| l.val_r)
    }
}

/// Shannon entropy (nats) of a distribution, ignoring zero entries.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

pub fn init_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model_config(), rng::derive_seed(cfg.seed, MODEL_STREAM))
}

/// Per-`(subject, episode)` scores on the given windows. Windows of the same
/// episode are stacked in start order.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<Vec<EpisodeScores>> {
    let mut groups: BTreeMap<(usize, &str), Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.subject_id, s.episode_id.as_str())).or_default().push(s);
    }
    let o = model.config.o;
    let mut out = Vec::with_capacity(groups.len());
    for ((subject, episode), mut windows) in groups {
        windows.sort_by_key(|s| s.start);
        let mut pred = Matrix::zeros(0, o);
        let mut target = Matrix::zeros(0, o);
        for w in windows {
            let y = model.predict(&w.inputs, w.subject_id)?;
            for t in 0..y.rows() {
                pred.push_row(y.row(t))?;
                target.push_row(w.targets.row(t))?;
            }
        }
        out.push(EpisodeScores::compute(subject, episode, &pred, &target)?);
    }
    Ok(out)
}

pub fn evaluate_report(model: &Model, samples: &[Sample], meta: ReportMeta) -> Result<MetricsReport> {
    aggregate(evaluate(model, samples)?, meta)
}

pub fn mean_r(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate_report(model, samples, ReportMeta::default())?.mean_r())
}

/// Train a fresh model on `split.train`, selecting the epoch with the best
/// mean r on `split.val`. Windows of `exclude` are dropped from both sets.
pub fn fit(cfg: &RunConfig, data: &Dataset, split: &Split, exclude: Option<usize>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    data.check_model(&model_cfg)?;
    let keep = |s: &&Sample| Some(s.subject_id) != exclude;
    let train: Vec<&Sample> = split.train.iter().filter(keep).collect();
    let val: Vec<Sample> = split.val.iter().filter(keep).cloned().collect();
    if train.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut model = init_model(cfg)?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut optim = OptimState::new(cfg.optim_config(cfg.epochs * steps_per_epoch), &model.store)?;
    let weights = cfg.loss_weights();
    let mut shuffle = rng::seeded(rng::derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 3];
        let mut grad_norm = 0.0;
        let mut counts = vec![0usize; model_cfg.e];
        let (mut tokens, mut min_calls, mut max_calls) = (0, usize::MAX, 0);
        let calls_before = model.mind.bank.calls();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            model.store.zero_grads();
            let out = batch_loss_and_grad(&mut model, &batch, weights)?;
            for f in &out.forwards {
                for c in f.expert_calls() {
                    min_calls = min_calls.min(c);
                    max_calls = max_calls.max(c);
                    tokens += 1;
                }
            }
            for (acc, c) in counts.iter_mut().zip(out.expert_load(model_cfg.e)) {
                *acc += c;
            }
            sums[0] += out.loss.l_rec;
            sums[1] += out.loss.r_lb;
            sums[2] += out.loss.l2_b;
            grad_norm += model.store.clip_grad_norm(cfg.clip);
            lr = onecycle_lr(optim.step, &optim)?;
            adamw_step(&mut model.store, &mut optim, lr)?;
        }
        let expert_calls = model.mind.bank.calls() - calls_before;
        let n = steps_per_epoch as f64;
        let slots: usize = counts.iter().sum();
        let load: Vec<f64> = counts.iter().map(|&c| c as f64 / slots as f64).collect();
        let val_r = mean_r(&model, &val)?;
        if !model.store.all_finite() {
            return Err(Error::NonFiniteInput(format!("parameters after epoch {epoch}")));
        }
        logs.push(EpochLog {
            epoch,
            steps: optim.step,
            lr,
            loss: LossBreakdown::new(sums[0] / n, sums[1] / n, sums[2] / n, weights.beta, weights.lambda),
            grad_norm: grad_norm / n,
            val_r,
            load_entropy: entropy(&load),
            load,
            tokens,
            expert_calls,
            calls_per_token_min: min_calls,
            calls_per_token_max: max_calls,
        });
        if best.as_ref().is_none_or(|(r, _, _)| val_r > *r) {
            best = Some((val_r, epoch, model.clone()));
        }
    }
    let (best_val_r, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        logs,
        best_epoch,
        best_val_r,
    })
}

/// Report metadata for a run.
pub fn report_meta(cfg: &RunConfig, split: &Split) -> Result<ReportMeta> {
    Ok(ReportMeta {
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        split_id: split.id.clone(),
    })
}
