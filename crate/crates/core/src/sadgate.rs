//! Subject-aware dynamic gating.
//!
//! Two routers feed the gate: a token router
//! `p_t = softmax(W_r (z_t + e_subj[s]) + b_r)` and a token-independent subject
//! prior `π(s) = softmax(α + B[s])`. Their product `u_t = p_t ⊙ π(s)` is
//! truncated to its K largest entries (ties to the lowest index) and those are
//! divided by their sum.
//!
//! Backward treats the selected set as a constant; renormalization and both
//! softmaxes are differentiated exactly. Given `g = dL/dŵ` on the selected set
//! `S` with `Z = Σ_{e∈S} u_e`:
//!
//! ```text
//! dL/du_e = (g_e − Σ_{e'∈S} g_e' ŵ_e') / Z     for e ∈ S, 0 otherwise
//! dL/dp   = dL/du ⊙ π        dL/dπ = dL/du ⊙ p
//! ```
//!
//! followed by the usual softmax Jacobian into the logits of each router.

use serde::{Deserialize, Serialize};

use crate::afire::accumulate;
use crate::error::{Error, Result};
use crate::tensorcore::{
    affine_into, rng, softmax_backward, softmax_in_place, Matrix, ParamId, ParamStore, Rng,
};

pub const ROUTER_INIT_STD: f64 = 0.02;

/// Which routers contribute to `u_t`. A disabled router is replaced by the
/// uniform distribution, which leaves `ŵ_t` unchanged up to scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    #[default]
    Both,
    Token,
    Prior,
}

impl std::str::FromStr for RouterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "token" => Ok(Self::Token),
            "prior" => Ok(Self::Prior),
            other => Err(Error::InvalidConfig(format!("unknown router mode {other}"))),
        }
    }
}

/// Handles to `W_r [E×D]`, `b_r [E]`, `e_subj [S×D]`, `α [E]` and `B [S×E]`.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub d: usize,
    pub e: usize,
    pub s: usize,
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub e_subj: ParamId,
    pub alpha: ParamId,
    pub bias: ParamId,
}

impl RouterParams {
    /// `W_r`, `e_subj` ~ N(0, 0.02²); `b_r`, `α`, `B` zero, so routing starts uniform.
    pub fn new(store: &mut ParamStore, d: usize, e: usize, s: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || e == 0 || s == 0 {
            return Err(Error::InvalidConfig("router dimensions must be positive".into()));
        }
        let w_r = store.register(
            "router.w_r",
            Matrix::from_vec(e, d, rng::normal_vec(rng, e * d, ROUTER_INIT_STD))?,
        )?;
        let b_r = store.register("router.b_r", Matrix::zeros(1, e))?;
        let e_subj = store.register(
            "router.e_subj",
            Matrix::from_vec(s, d, rng::normal_vec(rng, s * d, ROUTER_INIT_STD))?,
        )?;
        let alpha = store.register("router.alpha", Matrix::zeros(1, e))?;
        let bias = store.register("router.bias", Matrix::zeros(s, e))?;
        Ok(Self {
            d,
            e,
            s,
            w_r,
            b_r,
            e_subj,
            alpha,
            bias,
        })
    }

    fn check_subject(&self, s: usize) -> Result<()> {
        if s >= self.s {
            return Err(Error::UnknownSubject {
                subject: s,
                subjects: self.s,
            });
        }
        Ok(())
    }
}

/// Routing decision for one token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateOutput {
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
    pub u: Vec<f64>,
    pub w_hat: Vec<f64>,
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// `u_(K) − u_(K+1)` in descending order; infinite when K = E.
    pub margin: f64,
}

impl GateOutput {
    pub fn support(&self) -> usize {
        self.w_hat.iter().filter(|&&w| w > 0.0).count()
    }
}

pub fn token_route(z: &[f64], s: usize, rp: &RouterParams, store: &ParamStore) -> Result<Vec<f64>> {
    rp.check_subject(s)?;
    if z.len() != rp.d {
        return Err(Error::shape(format!("token of length {} for D = {}", z.len(), rp.d)));
    }
    let z_tilde = shifted_token(z, s, rp, store);
    Ok(token_probs(&z_tilde, rp, store))
}

pub fn prior_route(s: usize, rp: &RouterParams, store: &ParamStore) -> Result<Vec<f64>> {
    rp.check_subject(s)?;
    let mut pi = prior_logits(s, rp, store);
    softmax_in_place(&mut pi);
    Ok(pi)
}

fn shifted_token(z: &[f64], s: usize, rp: &RouterParams, store: &ParamStore) -> Vec<f64> {
    z.iter()
        .zip(store.value(rp.e_subj).row(s))
        .map(|(a, b)| a + b)
        .collect()
}

fn token_logits(z_tilde: &[f64], rp: &RouterParams, store: &ParamStore) -> Vec<f64> {
    let mut logits = vec![0.0; rp.e];
    affine_into(
        z_tilde,
        store.value(rp.w_r),
        store.value(rp.b_r).as_slice(),
        &mut logits,
    );
    logits
}

fn token_probs(z_tilde: &[f64], rp: &RouterParams, store: &ParamStore) -> Vec<f64> {
    let mut p = token_logits(z_tilde, rp, store);
    softmax_in_place(&mut p);
    p
}

fn prior_logits(s: usize, rp: &RouterParams, store: &ParamStore) -> Vec<f64> {
    let mut logits = store.value(rp.alpha).as_slice().to_vec();
    for (l, b) in logits.iter_mut().zip(store.value(rp.bias).row(s)) {
        *l += b;
    }
    logits
}

/// Recompute the kept weights as a softmax over the selected summed logits.
/// Equal to `u_e / Σ u` up to rounding, but bitwise independent of the
/// logits of experts that were not selected.
fn renormalize_selected(out: &mut GateOutput, logits: &[f64]) {
    let max = out
        .selected
        .iter()
        .map(|&i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = out.selected.iter().map(|&i| (logits[i] - max).exp()).sum();
    for &i in &out.selected {
        out.w_hat[i] = (logits[i] - max).exp() / total;
    }
}

/// Indices of the `k` largest entries in descending order, ties to the lower index.
pub fn top_k_indices(u: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `u = p ⊙ π`, keep the K largest entries and renormalize them to sum to one.
pub fn combine_topk(p: &[f64], pi: &[f64], k: usize) -> Result<GateOutput> {
    let e = p.len();
    if pi.len() != e {
        return Err(Error::shape(format!("p has {e} entries, π has {}", pi.len())));
    }
    if k == 0 || k > e {
        return Err(Error::InvalidConfig(format!("K = {k} must lie in 1..={e}")));
    }
    let u: Vec<f64> = p.iter().zip(pi).map(|(a, b)| a * b).collect();
    let ranked = {
        let mut idx: Vec<usize> = (0..e).collect();
        idx.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
        idx
    };
    let margin = if k < e {
        u[ranked[k - 1]] - u[ranked[k]]
    } else {
        f64::INFINITY
    };
    let mut selected = ranked[..k].to_vec();
    selected.sort_unstable();
    let total: f64 = selected.iter().map(|&i| u[i]).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateGate);
    }
    let mut w_hat = vec![0.0; e];
    for &i in &selected {
        w_hat[i] = u[i] / total;
    }
    Ok(GateOutput {
        p: p.to_vec(),
        pi: pi.to_vec(),
        u,
        w_hat,
        selected,
        margin,
    })
}

/// Inputs retained for [`Gate::backward`].
#[derive(Debug, Clone)]
pub struct GateCache {
    version: u64,
    subject: usize,
    z_tilde: Vec<f64>,
}

/// Router parameters plus the routing hyperparameters.
#[derive(Debug, Clone)]
pub struct Gate {
    pub params: RouterParams,
    pub k: usize,
    pub mode: RouterMode,
}

impl Gate {
    pub fn new(params: RouterParams, k: usize, mode: RouterMode) -> Result<Self> {
        if k == 0 || k > params.e {
            return Err(Error::InvalidConfig(format!(
                "K = {k} must lie in 1..={}",
                params.e
            )));
        }
        Ok(Self { params, k, mode })
    }

    pub fn experts(&self) -> usize {
        self.params.e
    }

    pub fn forward(&self, store: &ParamStore, z: &[f64], s: usize) -> Result<(GateOutput, GateCache)> {
        let rp = &self.params;
        rp.check_subject(s)?;
        if z.len() != rp.d {
            return Err(Error::shape(format!("token of length {} for D = {}", z.len(), rp.d)));
        }
        let z_tilde = shifted_token(z, s, rp, store);
        let g = match self.mode {
            RouterMode::Prior => vec![0.0; rp.e],
            _ => token_logits(&z_tilde, rp, store),
        };
        let a = match self.mode {
            RouterMode::Token => vec![0.0; rp.e],
            _ => prior_logits(s, rp, store),
        };
        let mut p = g.clone();
        softmax_in_place(&mut p);
        let mut pi = a.clone();
        softmax_in_place(&mut pi);
        let mut out = combine_topk(&p, &pi, self.k)?;
        let summed: Vec<f64> = g.iter().zip(&a).map(|(x, y)| x + y).collect();
        renormalize_selected(&mut out, &summed);
        let cache = GateCache {
            version: store.version(),
            subject: s,
            z_tilde,
        };
        Ok((out, cache))
    }

    /// Accumulate router gradients from `dL/dŵ` plus an optional direct
    /// `dL/du` (used by the load-balance term). Adds `dL/dz` into `grad_z`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        out: &GateOutput,
        cache: &GateCache,
        grad_w_hat: &[f64],
        grad_u: Option<&[f64]>,
        grad_z: &mut [f64],
    ) -> Result<()> {
        if cache.version != store.version() {
            return Err(Error::StaleCache);
        }
        let rp = &self.params;
        let e = rp.e;
        let total: f64 = out.selected.iter().map(|&i| out.u[i]).sum();
        let inner: f64 = out
            .selected
            .iter()
            .map(|&i| grad_w_hat[i] * out.w_hat[i])
            .sum();
        let mut g_u = vec![0.0; e];
        for &i in &out.selected {
            g_u[i] = (grad_w_hat[i] - inner) / total;
        }
        if let Some(extra) = grad_u {
            for (a, b) in g_u.iter_mut().zip(extra) {
                *a += b;
            }
        }

        if self.mode != RouterMode::Prior {
            let g_p: Vec<f64> = g_u.iter().zip(&out.pi).map(|(g, pi)| g * pi).collect();
            let g_logits = softmax_backward(&out.p, &g_p);
            store.grad_mut(rp.w_r).add_outer(&g_logits, &cache.z_tilde);
            accumulate(store, rp.b_r, &g_logits);
            let mut g_zt = vec![0.0; rp.d];
            store.value(rp.w_r).matvec_t_acc(&g_logits, &mut g_zt);
            for (dst, g) in store
                .grad_mut(rp.e_subj)
                .row_mut(cache.subject)
                .iter_mut()
                .zip(&g_zt)
            {
                *dst += g;
            }
            for (dst, g) in grad_z.iter_mut().zip(&g_zt) {
                *dst += g;
            }
        }
        if self.mode != RouterMode::Token {
            let g_pi: Vec<f64> = g_u.iter().zip(&out.p).map(|(g, p)| g * p).collect();
            let g_logits = softmax_backward(&out.pi, &g_pi);
            accumulate(store, rp.alpha, &g_logits);
            for (dst, g) in store
                .grad_mut(rp.bias)
                .row_mut(cache.subject)
                .iter_mut()
                .zip(&g_logits)
            {
                *dst += g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{grad_check, rng::seeded};
    use proptest::prelude::*;

    fn router(d: usize, e: usize, s: usize, seed: u64) -> (ParamStore, RouterParams) {
        let mut store = ParamStore::new();
        let rp = RouterParams::new(&mut store, d, e, s, &mut seeded(seed)).unwrap();
        (store, rp)
    }

    #[test]
    fn zero_router_is_uniform() {
        let (mut store, rp) = router(3, 4, 2, 0);
        store.value_mut(rp.w_r).fill(0.0);
        let p = token_route(&[1.0, -2.0, 0.5], 1, &rp, &store).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(matches!(
            token_route(&[0.0; 3], 2, &rp, &store),
            Err(Error::UnknownSubject { subject: 2, .. })
        ));
    }

    #[test]
    fn token_route_closed_form() {
        let (mut store, rp) = router(2, 2, 1, 0);
        *store.value_mut(rp.w_r) = Matrix::identity(2);
        store.value_mut(rp.e_subj).fill(0.0);
        let p = token_route(&[3f64.ln(), 0.0], 0, &rp, &store).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_embeddings_make_subjects_equal() {
        let (mut store, rp) = router(3, 3, 3, 4);
        store.value_mut(rp.e_subj).fill(0.0);
        let z = [0.3, -0.1, 2.0];
        let p0 = token_route(&z, 0, &rp, &store).unwrap();
        for s in 1..3 {
            assert_eq!(p0, token_route(&z, s, &rp, &store).unwrap());
        }
    }

    #[test]
    fn prior_route_examples() {
        let (mut store, rp) = router(2, 4, 3, 0);
        let pi = prior_route(0, &rp, &store).unwrap();
        assert!(pi.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        store.value_mut(rp.bias).row_mut(1).copy_from_slice(&[10.0, 0.0, 0.0, 0.0]);
        let pi = prior_route(1, &rp, &store).unwrap();
        let denom = 10f64.exp() + 3.0;
        assert!((pi[0] - 10f64.exp() / denom).abs() < 1e-15);
        assert!(pi[0] > 0.9998);

        store.value_mut(rp.bias).row_mut(2).copy_from_slice(&[12.5, 2.5, 2.5, 2.5]);
        let a = prior_route(1, &rp, &store).unwrap();
        let b = prior_route(2, &rp, &store).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(prior_route(3, &rp, &store).is_err());
    }

    fn combine_u(u: &[f64], k: usize) -> GateOutput {
        combine_topk(u, &vec![1.0; u.len()], k).unwrap()
    }

    #[test]
    fn combine_examples() {
        let g = combine_u(&[0.4, 0.3, 0.2, 0.1], 2);
        assert_eq!(g.selected, vec![0, 1]);
        assert!((g.w_hat[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((g.w_hat[1] - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(&g.w_hat[2..], &[0.0, 0.0]);

        let g = combine_u(&[0.25; 4], 2);
        assert_eq!(g.selected, vec![0, 1]);
        assert_eq!(g.w_hat, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(g.margin, 0.0);

        let u = [0.1, 0.5, 0.15, 0.25];
        let g = combine_u(&u, 4);
        let s: f64 = u.iter().sum();
        for (w, x) in g.w_hat.iter().zip(&u) {
            assert!((w - x / s).abs() < 1e-15);
        }

        assert!(combine_topk(&[0.5, 0.5], &[0.5, 0.5], 0).is_err());
        assert!(combine_topk(&[0.5, 0.5], &[0.5, 0.5], 3).is_err());
        assert!(matches!(
            combine_topk(&[0.0, 0.0], &[0.5, 0.5], 1),
            Err(Error::DegenerateGate)
        ));
    }

    proptest! {
        #[test]
        fn gate_invariants(
            seed in any::<u64>(),
            e_pow in 1u32..=4,
            k_frac in 0.0f64..1.0,
            scale in 1e-3f64..1e3,
        ) {
            let e = 1usize << e_pow;
            let k = 1 + ((k_frac * e as f64) as usize).min(e - 1);
            let mut r = seeded(seed);
            let mut p = rng::normal_vec(&mut r, e, 2.0);
            let mut pi = rng::normal_vec(&mut r, e, 2.0);
            softmax_in_place(&mut p);
            softmax_in_place(&mut pi);
            let g = combine_topk(&p, &pi, k).unwrap();
            prop_assert!(g.w_hat.iter().all(|&w| w >= 0.0));
            prop_assert!((g.w_hat.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(g.support() <= k);
            prop_assert!(g.w_hat.iter().enumerate().all(|(i, &w)| w == 0.0 || g.selected.contains(&i)));
            for (u, (a, b)) in g.u.iter().zip(p.iter().zip(&pi)) {
                prop_assert_eq!(*u, a * b);
            }
            let scaled: Vec<f64> = pi.iter().map(|x| x * scale).collect();
            let h = combine_topk(&p, &scaled, k).unwrap();
            prop_assert_eq!(&h.selected, &g.selected);
            for (a, b) in g.w_hat.iter().zip(&h.w_hat) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if k == 1 {
                prop_assert_eq!(g.w_hat.iter().filter(|&&w| w == 1.0).count(), 1);
            }
        }
    }

    /// Scalar objective through the full gate, for finite-difference checks.
    fn gate_loss(gate: &Gate, store: &ParamStore, z: &[f64], s: usize, c: &[f64], c_u: &[f64]) -> Result<f64> {
        let (out, _) = gate.forward(store, z, s)?;
        let a: f64 = out.w_hat.iter().zip(c).map(|(w, c)| w * c).sum();
        let b: f64 = out.u.iter().zip(c_u).map(|(u, c)| u * c).sum();
        Ok(a + b)
    }

    fn checked_gate(mode: RouterMode, d: usize, e: usize, k: usize, seed: u64) -> f64 {
        let mut store = ParamStore::new();
        let mut r = seeded(seed);
        let rp = RouterParams::new(&mut store, d, e, 2, &mut r).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).len();
            store
                .value_mut(id)
                .as_mut_slice()
                .copy_from_slice(&rng::normal_vec(&mut r, n, 0.7));
        }
        let gate = Gate::new(rp, k, mode).unwrap();
        let z = rng::normal_vec(&mut r, d, 1.0);
        let c = rng::normal_vec(&mut r, e, 1.0);
        let c_u = rng::normal_vec(&mut r, e, 1.0);
        let (out, cache) = gate.forward(&store, &z, 1).unwrap();
        assert!(out.margin > 1e-4, "too close to a tie");
        let mut gz = vec![0.0; d];
        gate.backward(&mut store, &out, &cache, &c, Some(&c_u), &mut gz).unwrap();
        let report = grad_check(|ps| gate_loss(&gate, ps, &z, 1, &c, &c_u), &store, 1e-5).unwrap();

        // dL/dz via central differences on the token itself
        let mut worst = report.max_rel_error();
        for i in 0..d {
            let mut zp = z.clone();
            zp[i] += 1e-5;
            let mut zm = z.clone();
            zm[i] -= 1e-5;
            let num = (gate_loss(&gate, &store, &zp, 1, &c, &c_u).unwrap()
                - gate_loss(&gate, &store, &zm, 1, &c, &c_u).unwrap())
                / 2e-5;
            worst = worst.max(crate::tensorcore::relative_error(gz[i], num));
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (mode, seed) in [
            (RouterMode::Both, 1),
            (RouterMode::Both, 2),
            (RouterMode::Token, 3),
            (RouterMode::Prior, 4),
        ] {
            let err = checked_gate(mode, 4, 5, 2, seed);
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
        assert!(checked_gate(RouterMode::Both, 3, 4, 4, 9) < 1e-4);
        assert!(checked_gate(RouterMode::Both, 3, 4, 1, 10) < 1e-4);
    }

    /// E = 2, K = 2: ŵ_0 = σ(Δ) with Δ = (g_0 − g_1) + (a_0 − a_1), so
    /// dŵ_0/dα_0 = σ(Δ)(1 − σ(Δ)).
    #[test]
    fn dense_two_expert_closed_form() {
        let mut store = ParamStore::new();
        let rp = RouterParams::new(&mut store, 2, 2, 1, &mut seeded(3)).unwrap();
        store.value_mut(rp.alpha).as_mut_slice().copy_from_slice(&[0.4, -0.3]);
        let gate = Gate::new(rp.clone(), 2, RouterMode::Both).unwrap();
        let z = [0.8, -0.5];
        let (out, cache) = gate.forward(&store, &z, 0).unwrap();
        gate.backward(&mut store, &out, &cache, &[1.0, 0.0], None, &mut [0.0; 2]).unwrap();
        let w0 = out.w_hat[0];
        let expected = w0 * (1.0 - w0);
        let got = store.grad(rp.alpha).as_slice();
        assert!((got[0] - expected).abs() < 1e-14);
        assert!((got[1] + expected).abs() < 1e-14);
        // the token router's bias sees the same derivative
        let gb = store.grad(rp.b_r).as_slice();
        assert!((gb[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn non_selected_rows_receive_gradient_through_softmax() {
        let mut store = ParamStore::new();
        let mut r = seeded(21);
        let rp = RouterParams::new(&mut store, 3, 4, 1, &mut r).unwrap();
        *store.value_mut(rp.w_r) =
            Matrix::from_vec(4, 3, rng::normal_vec(&mut r, 12, 1.0)).unwrap();
        let gate = Gate::new(rp.clone(), 1, RouterMode::Both).unwrap();
        let z = [1.0, 0.5, -0.3];
        let (out, cache) = gate.forward(&store, &z, 0).unwrap();
        // a single selected expert with K = 1 has ŵ = 1 regardless of logits
        gate.backward(&mut store, &out, &cache, &[1.0; 4], None, &mut [0.0; 3]).unwrap();
        assert!(store.grad(rp.w_r).as_slice().iter().all(|&g| g == 0.0));
        // but importance-style gradients on u reach every row
        gate.backward(&mut store, &out, &cache, &[0.0; 4], Some(&[1.0, 0.0, 0.0, 0.0]), &mut [0.0; 3])
            .unwrap();
        let other = out.selected[0] ^ 1;
        assert!(store.grad(rp.w_r).row(other).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn stale_cache_detected() {
        let mut store = ParamStore::new();
        let rp = RouterParams::new(&mut store, 2, 2, 1, &mut seeded(0)).unwrap();
        let gate = Gate::new(rp.clone(), 1, RouterMode::Both).unwrap();
        let (out, cache) = gate.forward(&store, &[0.0, 1.0], 0).unwrap();
        store.value_mut(rp.alpha).set(0, 0, 1.0);
        assert!(matches!(
            gate.backward(&mut store, &out, &cache, &[1.0, 0.0], None, &mut [0.0; 2]),
            Err(Error::StaleCache)
        ));
    }
}
