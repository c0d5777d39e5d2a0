//! Training objective and optimizer.
//!
//! `L = MSE + β·R_lb + λ‖B‖²`, where `R_lb` is the Switch-style balance term
//! `E · Σ_e f_e P_e` with `P_e` the mean normalized pre-sparse score and `f_e`
//! the share of Top-K slots given to expert `e`. Only `P` carries gradient.

use serde::{Deserialize, Serialize};

use crate::afire::Sample;
use crate::error::{Error, Result};
use crate::mind::{Model, WindowForward};
use crate::sadgate::GateOutput;
use crate::tensorcore::{Matrix, ParamStore};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub r_lb: f64,
    #[serde(rename = "l2_B")]
    pub l2_b: f64,
    pub total: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l_rec: f64, r_lb: f64, l2_b: f64, beta: f64, lambda: f64) -> Self {
        Self {
            l_rec,
            r_lb,
            l2_b,
            total: l_rec + beta * r_lb + lambda * l2_b,
            beta,
            lambda,
        }
    }
}

/// Mean squared error over every entry, and its gradient `2(pred − target)/(N·O)`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty prediction"));
    }
    let n = pred.len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0;
    for ((g, p), t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

/// Switch-style load balance over `N` tokens. Returns `R_lb` and `dR/du`.
pub fn load_balance(u_all: &Matrix, selections: &[Vec<usize>], k: usize) -> Result<(f64, Matrix)> {
    let (n, e) = u_all.shape();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if selections.len() != n {
        return Err(Error::shape(format!("{} selections for {n} tokens", selections.len())));
    }
    if k == 0 || k > e {
        return Err(Error::InvalidConfig(format!("K = {k} must lie in 1..={e}")));
    }
    let mut load = vec![0.0; e];
    for sel in selections {
        for &i in sel {
            if i >= e {
                return Err(Error::UnknownExpert { expert: i, experts: e });
            }
            load[i] += 1.0;
        }
    }
    let slots = (n * k) as f64;
    load.iter_mut().for_each(|f| *f /= slots);

    let mut importance = vec![0.0; e];
    let mut sums = Vec::with_capacity(n);
    for row in u_all.iter_rows() {
        let z: f64 = row.iter().sum();
        if !(z > 0.0) {
            return Err(Error::DegenerateGate);
        }
        for (p, u) in importance.iter_mut().zip(row) {
            *p += u / z / n as f64;
        }
        sums.push(z);
    }
    let r = e as f64 * load.iter().zip(&importance).map(|(f, p)| f * p).sum::<f64>();

    // dR/dû_{t,e} = E f_e / N, then through û = u / Σu.
    let c: Vec<f64> = load.iter().map(|f| e as f64 * f / n as f64).collect();
    let mut grad = Matrix::zeros(n, e);
    for (t, row) in u_all.iter_rows().enumerate() {
        let z = sums[t];
        let mean: f64 = c.iter().zip(row).map(|(ci, u)| ci * u / z).sum();
        for (g, ci) in grad.row_mut(t).iter_mut().zip(&c) {
            *g = (ci - mean) / z;
        }
    }
    Ok((r, grad))
}

/// `‖B‖²`, the sum of squared entries.
pub fn bias_penalty(b: &Matrix) -> f64 {
    b.sum_sq()
}

/// Gradients of [`total_loss`] with respect to its inputs.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub pred: Matrix,
    pub u: Matrix,
    pub bias: Matrix,
}

/// Assemble the full objective for a batch of `N` tokens.
pub fn total_loss(
    pred: &Matrix,
    target: &Matrix,
    gates: &[GateOutput],
    bias: &Matrix,
    k: usize,
    beta: f64,
    lambda: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    if beta < 0.0 || lambda < 0.0 {
        return Err(Error::InvalidConfig("β and λ must be non-negative".into()));
    }
    let (l_rec, g_pred) = mse_loss(pred, target)?;
    if gates.len() != pred.rows() {
        return Err(Error::shape(format!(
            "{} gate outputs for {} tokens",
            gates.len(),
            pred.rows()
        )));
    }
    let e = gates.first().map_or(0, |g| g.u.len());
    let mut u_all = Matrix::zeros(gates.len(), e);
    for (t, g) in gates.iter().enumerate() {
        if g.u.len() != e {
            return Err(Error::shape("gate outputs disagree on E"));
        }
        u_all.row_mut(t).copy_from_slice(&g.u);
    }
    let selections: Vec<Vec<usize>> = gates.iter().map(|g| g.selected.clone()).collect();
    let (r_lb, mut g_u) = load_balance(&u_all, &selections, k)?;
    g_u.scale(beta);
    let l2 = bias_penalty(bias);
    let mut g_b = bias.clone();
    g_b.scale(2.0 * lambda);
    Ok((
        LossBreakdown::new(l_rec, r_lb, l2, beta, lambda),
        LossGrads {
            pred: g_pred,
            u: g_u,
            bias: g_b,
        },
    ))
}

/// Loss weights for a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Result of one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub forwards: Vec<WindowForward>,
}

impl BatchOutcome {
    /// Selected-expert counts over every token in the batch.
    pub fn expert_load(&self, e: usize) -> Vec<usize> {
        let mut counts = vec![0; e];
        for f in &self.forwards {
            for g in &f.gates {
                for &i in &g.selected {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

fn stack_batch(model: &Model, batch: &[&Sample]) -> Result<(Vec<WindowForward>, Matrix, Matrix, Vec<GateOutput>)> {
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n: usize = batch.iter().map(|s| s.len()).sum();
    let o = model.config.o;
    let mut pred = Matrix::zeros(0, o);
    let mut target = Matrix::zeros(0, o);
    let mut gates = Vec::with_capacity(n);
    let mut forwards = Vec::with_capacity(batch.len());
    for s in batch {
        if s.targets.cols() != o {
            return Err(Error::ConfigMismatch(format!(
                "targets have {} parcels, model predicts {o}",
                s.targets.cols()
            )));
        }
        let f = model.forward_window(&s.inputs, s.subject_id)?;
        for t in 0..f.preds.rows() {
            pred.push_row(f.preds.row(t))?;
            target.push_row(s.targets.row(t))?;
        }
        gates.extend(f.gates.iter().cloned());
        forwards.push(f);
    }
    Ok((forwards, pred, target, gates))
}

/// Loss over a batch of windows, all tokens pooled.
pub fn batch_loss(model: &Model, batch: &[&Sample], w: LossWeights) -> Result<LossBreakdown> {
    let (_, pred, target, gates) = stack_batch(model, batch)?;
    let bias = model.store.value(model.router().bias);
    Ok(total_loss(&pred, &target, &gates, bias, model.config.k, w.beta, w.lambda)?.0)
}

/// Loss over a batch plus gradients accumulated into `model.store`.
pub fn batch_loss_and_grad(model: &mut Model, batch: &[&Sample], w: LossWeights) -> Result<BatchOutcome> {
    let (forwards, pred, target, gates) = stack_batch(model, batch)?;
    let bias_id = model.router().bias;
    let (loss, grads) = total_loss(
        &pred,
        &target,
        &gates,
        model.store.value(bias_id),
        model.config.k,
        w.beta,
        w.lambda,
    )?;
    let mut offset = 0;
    for f in &forwards {
        let rows = f.preds.rows();
        let gp = grads.pred.slice_rows(offset, rows);
        let gu = grads.u.slice_rows(offset, rows);
        model.backward_window(f, &gp, Some(&gu))?;
        offset += rows;
    }
    model.store.grad_mut(bias_id).add_assign(&grads.bias)?;
    Ok(BatchOutcome { loss, forwards })
}

/// AdamW plus OneCycle hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
    pub warmup: f64,
    pub div: f64,
    pub final_div: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1,
            warmup: 0.3,
            div: 25.0,
            final_div: 1e4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.total_steps > 0
            && (0.0..=1.0).contains(&self.warmup)
            && self.div > 0.0
            && self.final_div > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings {self:?}")))
        }
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup * self.total_steps as f64).round() as usize
    }
}

/// Moment accumulators, one pair per parameter in store order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl OptimState {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Matrix> = store
            .ids()
            .map(|id| {
                let (r, c) = store.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }
}

/// Linear warmup from `peak/div` to `peak`, then cosine decay to `peak/final_div`
/// at the last step.
pub fn onecycle_lr(step: usize, o: &OptimState) -> Result<f64> {
    let c = &o.config;
    if step >= c.total_steps {
        return Err(Error::ScheduleExhausted {
            step,
            total: c.total_steps,
        });
    }
    let start = c.peak_lr / c.div;
    let end = c.peak_lr / c.final_div;
    let warm = c.warmup_steps().min(c.total_steps - 1);
    if step < warm {
        return Ok(start + (c.peak_lr - start) * step as f64 / warm as f64);
    }
    let span = c.total_steps - 1 - warm;
    if span == 0 {
        return Ok(c.peak_lr);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(end + (c.peak_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One AdamW update with decoupled weight decay at learning rate `lr`.
pub fn adamw_step(store: &mut ParamStore, o: &mut OptimState, lr: f64) -> Result<()> {
    if o.m.len() != store.len() {
        return Err(Error::ConfigMismatch("optimizer state does not match parameters".into()));
    }
    o.step += 1;
    let c = o.config;
    let bc1 = 1.0 - c.beta1.powi(o.step as i32);
    let bc2 = 1.0 - c.beta2.powi(o.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (value, grad) = store.value_and_grad_mut(id);
        if value.shape() != o.m[i].shape() {
            return Err(Error::ConfigMismatch(format!("moment shape for {}", i)));
        }
        let m = o.m[i].as_mut_slice();
        let v = o.v[i].as_mut_slice();
        for (((p, g), mi), vi) in value.as_mut_slice().iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
            *p -= lr * c.weight_decay * *p;
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let denom = v_hat.sqrt() + c.eps;
            if denom > 0.0 {
                *p -= lr * m_hat / denom;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mind::ModelConfig;
    use crate::sadgate::{combine_topk, RouterMode};
    use crate::tensorcore::{grad_check, rng};
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.as_mut_slice().iter_mut().for_each(|x| *x += 1.0);
        assert_eq!(mse_loss(&b, &a).unwrap().0, 1.0);
        let (l, g) = mse_loss(
            &Matrix::from_rows(&[&[0.0, 0.0]]).unwrap(),
            &Matrix::from_rows(&[&[1.0, 3.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g.as_slice(), &[-1.0, -3.0]);
        assert!(mse_loss(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn load_balance_examples() {
        let e = 4;
        let u = Matrix::filled(8, e, 0.25);
        let sel: Vec<Vec<usize>> = (0..8).map(|t| vec![t % e]).collect();
        assert!((load_balance(&u, &sel, 1).unwrap().0 - 1.0).abs() < 1e-15);

        let mut u = Matrix::zeros(5, e);
        (0..5).for_each(|t| u.set(t, 2, 0.7));
        let sel = vec![vec![2]; 5];
        assert!((load_balance(&u, &sel, 1).unwrap().0 - e as f64).abs() < 1e-15);

        let u = Matrix::from_rows(&[&[0.9, 0.1], &[0.8, 0.2]]).unwrap();
        let (r, _) = load_balance(&u, &[vec![0], vec![0]], 1).unwrap();
        assert!((r - 1.7).abs() < 1e-15);
    }

    #[test]
    fn load_balance_gradient_matches_differences() {
        let mut r = rng::seeded(3);
        let u = Matrix::from_vec(6, 4, rng::normal_vec(&mut r, 24, 1.0).iter().map(|x| x.exp()).collect()).unwrap();
        let sel: Vec<Vec<usize>> = (0..6).map(|t| vec![t % 4, (t + 1) % 4]).collect();
        let (_, g) = load_balance(&u, &sel, 2).unwrap();
        let h = 1e-6;
        for t in 0..6 {
            for e in 0..4 {
                let mut up = u.clone();
                up.set(t, e, u.get(t, e) + h);
                let mut dn = u.clone();
                dn.set(t, e, u.get(t, e) - h);
                let fd = (load_balance(&up, &sel, 2).unwrap().0 - load_balance(&dn, &sel, 2).unwrap().0) / (2.0 * h);
                assert!((fd - g.get(t, e)).abs() < 1e-8, "{t},{e}: {fd} vs {}", g.get(t, e));
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        let pred = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]).unwrap();
        let target = Matrix::from_rows(&[&[1.0, 3.0], &[1.0, 3.0]]).unwrap();
        let gates = vec![
            combine_topk(&[0.9, 0.1], &[0.5, 0.5], 1).unwrap(),
            combine_topk(&[0.8, 0.2], &[0.5, 0.5], 1).unwrap(),
        ];
        let zero_b = Matrix::zeros(2, 2);
        let (plain, _) = total_loss(&pred, &target, &gates, &zero_b, 1, 0.0, 0.0).unwrap();
        assert_eq!(plain.total, 5.0);
        assert_eq!(plain.l2_b, 0.0);

        let b = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 0.0]]).unwrap();
        let (l, g) = total_loss(&pred, &target, &gates, &b, 1, 0.01, 0.001).unwrap();
        assert!((l.r_lb - 1.7).abs() < 1e-15);
        assert_eq!(l.l2_b, 5.25);
        assert!((l.total - (5.0 + 0.017 + 0.00525)).abs() < 1e-12);
        for (gb, bv) in g.bias.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*gb, 2.0 * 0.001 * bv);
        }
    }

    fn optim(total: usize) -> OptimState {
        let mut store = ParamStore::new();
        store.register("x", Matrix::zeros(1, 1)).unwrap();
        OptimState::new(
            OptimConfig {
                peak_lr: 0.1,
                total_steps: total,
                ..OptimConfig::default()
            },
            &store,
        )
        .unwrap()
    }

    #[test]
    fn onecycle_endpoints() {
        let o = optim(100);
        assert!((onecycle_lr(0, &o).unwrap() - 0.1 / 25.0).abs() < 1e-15);
        assert!((onecycle_lr(30, &o).unwrap() - 0.1).abs() < 1e-15);
        assert!((onecycle_lr(99, &o).unwrap() - 0.1 / 1e4).abs() < 1e-9);
        assert!(matches!(
            onecycle_lr(100, &o),
            Err(Error::ScheduleExhausted { step: 100, total: 100 })
        ));
        let lrs: Vec<f64> = (0..100).map(|s| onecycle_lr(s, &o).unwrap()).collect();
        assert!(lrs[..31].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[30..].windows(2).all(|w| w[1] < w[0]));
        let one = optim(1);
        assert!(onecycle_lr(0, &one).unwrap().is_finite());
    }

    fn scalar_store(v: f64) -> (ParamStore, crate::tensorcore::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("x", Matrix::filled(1, 1, v)).unwrap();
        (store, id)
    }

    #[test]
    fn adamw_zero_gradient_is_identity() {
        let (mut store, id) = scalar_store(1.5);
        let mut o = OptimState::new(
            OptimConfig {
                weight_decay: 0.0,
                total_steps: 10,
                ..OptimConfig::default()
            },
            &store,
        )
        .unwrap();
        for _ in 0..5 {
            adamw_step(&mut store, &mut o, 0.1).unwrap();
        }
        assert_eq!(store.value(id).get(0, 0), 1.5);
    }

    #[test]
    fn adamw_unit_gradient_steps_by_lr() {
        let (mut store, id) = scalar_store(2.0);
        let mut o = OptimState::new(
            OptimConfig {
                weight_decay: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
                total_steps: 10,
                ..OptimConfig::default()
            },
            &store,
        )
        .unwrap();
        store.grad_mut(id).set(0, 0, 1.0);
        adamw_step(&mut store, &mut o, 0.125).unwrap();
        assert_eq!(store.value(id).get(0, 0), 2.0 - 0.125);
        adamw_step(&mut store, &mut o, 0.125).unwrap();
        assert_eq!(store.value(id).get(0, 0), 2.0 - 0.25);
    }

    #[test]
    fn adamw_decay_is_exponential() {
        let (mut store, id) = scalar_store(3.0);
        let mut o = OptimState::new(
            OptimConfig {
                weight_decay: 0.5,
                total_steps: 10,
                ..OptimConfig::default()
            },
            &store,
        )
        .unwrap();
        let lr = 0.1;
        for step in 1..=7 {
            adamw_step(&mut store, &mut o, lr).unwrap();
            let expect = 3.0 * (1.0 - lr * 0.5f64).powi(step);
            assert!((store.value(id).get(0, 0) - expect).abs() < 1e-14);
        }
    }

    fn small_model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                d_in: 5,
                d: 4,
                h: 5,
                o: 3,
                e: 3,
                k: 2,
                s: 2,
                router: RouterMode::Both,
                afire: true,
                afire_hidden: 4,
                w_max: 8,
            },
            seed,
        )
        .unwrap()
    }

    fn jitter(model: &mut Model, r: &mut crate::tensorcore::Rng, std: f64) {
        for id in model.store.ids().collect::<Vec<_>>() {
            let n = model.store.value(id).len();
            let noise = rng::normal_vec(r, n, std);
            for (v, e) in model.store.value_mut(id).as_mut_slice().iter_mut().zip(noise) {
                *v += e;
            }
        }
    }

    #[test]
    fn batch_objective_passes_grad_check() {
        let mut model = small_model(21);
        let mut r = rng::seeded(22);
        jitter(&mut model, &mut r, 0.4);
        let samples: Vec<Sample> = (0..2)
            .map(|s| Sample {
                subject_id: s,
                episode_id: format!("ep{s}"),
                start: 0,
                inputs: Matrix::from_vec(4, 5, rng::normal_vec(&mut r, 20, 1.0)).unwrap(),
                targets: Matrix::from_vec(4, 3, rng::normal_vec(&mut r, 12, 1.0)).unwrap(),
            })
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let w = LossWeights { beta: 0.5, lambda: 0.1 };
        let out = batch_loss_and_grad(&mut model, &batch, w).unwrap();
        assert!(out.forwards.iter().flat_map(|f| &f.gates).all(|g| g.margin > 1e-6));
        let probe = model.clone();
        let loss = |ps: &ParamStore| -> Result<f64> {
            let mut m = probe.clone();
            m.store.copy_values_from(ps)?;
            Ok(batch_loss(&m, &batch, w)?.total)
        };
        let report = grad_check(loss, &model.store, 1e-5).unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:#?}");
    }

    proptest! {
        #[test]
        fn breakdown_total_is_consistent(
            l in 0.0f64..10.0, r in 0.0f64..5.0, b in 0.0f64..100.0,
            beta in 0.0f64..1.0, lambda in 0.0f64..1.0,
        ) {
            let x = LossBreakdown::new(l, r, b, beta, lambda);
            prop_assert!((x.total - (l + beta * r + lambda * b)).abs() < 1e-12);
            prop_assert!(x.total >= 0.0);
        }

        #[test]
        fn load_balance_bounds(seed in any::<u64>(), e in 2usize..8, n in 1usize..20) {
            let mut r = rng::seeded(seed);
            let k = 1 + (seed as usize) % e;
            let u = Matrix::from_vec(n, e, rng::normal_vec(&mut r, n * e, 1.0).iter().map(|x| x.exp()).collect()).unwrap();
            let sel: Vec<Vec<usize>> = u.iter_rows().map(|row| {
                let mut s = crate::sadgate::top_k_indices(row, k);
                s.sort_unstable();
                s
            }).collect();
            let (rlb, _) = load_balance(&u, &sel, k).unwrap();
            prop_assert!(rlb >= 0.0 && rlb <= e as f64 + 1e-12);
        }
    }
}
