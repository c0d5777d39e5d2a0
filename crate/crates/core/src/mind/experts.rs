use std::sync::atomic::{AtomicU64, Ordering};

use crate::afire::accumulate;
use crate::error::{Error, Result};
use crate::tensorcore::{affine_into, gelu, gelu_grad, rng, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// `E` two-layer heads `f_e(z) = W2·GELU(W1·z + b1) + b2`, all sharing `(D, H, O)`.
#[derive(Debug)]
pub struct ExpertBank {
    pub d: usize,
    pub h: usize,
    pub o: usize,
    pub experts: Vec<ExpertParams>,
    calls: AtomicU64,
}

impl Clone for ExpertBank {
    fn clone(&self) -> Self {
        Self {
            d: self.d,
            h: self.h,
            o: self.o,
            experts: self.experts.clone(),
            calls: AtomicU64::new(self.calls()),
        }
    }
}

/// Activations of one expert evaluation.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    pub pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

impl ExpertBank {
    /// He-scaled normal weights and zero biases. Expert `i` draws from its own
    /// stream derived from `seed`, so experts never start identical.
    pub fn new(store: &mut ParamStore, d: usize, h: usize, o: usize, e: usize, seed: u64) -> Result<Self> {
        if d == 0 || h == 0 || o == 0 || e == 0 {
            return Err(Error::InvalidConfig("expert dimensions must be positive".into()));
        }
        let mut experts = Vec::with_capacity(e);
        for i in 0..e {
            let mut r = rng::seeded(rng::derive_seed(seed, 0x5EED_0000 + i as u64));
            let w1 = Matrix::from_vec(h, d, rng::normal_vec(&mut r, h * d, (2.0 / d as f64).sqrt()))?;
            let w2 = Matrix::from_vec(o, h, rng::normal_vec(&mut r, o * h, (2.0 / h as f64).sqrt()))?;
            experts.push(ExpertParams {
                w1: store.register(format!("expert{i}.w1"), w1)?,
                b1: store.register(format!("expert{i}.b1"), Matrix::zeros(1, h))?,
                w2: store.register(format!("expert{i}.w2"), w2)?,
                b2: store.register(format!("expert{i}.b2"), Matrix::zeros(1, o))?,
            });
        }
        Ok(Self {
            d,
            h,
            o,
            experts,
            calls: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Number of expert evaluations since construction (or the last reset).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    fn params(&self, e: usize) -> Result<&ExpertParams> {
        self.experts.get(e).ok_or(Error::UnknownExpert {
            expert: e,
            experts: self.experts.len(),
        })
    }

    pub fn expert_forward(&self, store: &ParamStore, z: &[f64], e: usize) -> Result<Vec<f64>> {
        if z.len() != self.d {
            return Err(Error::shape(format!("token of length {} for D = {}", z.len(), self.d)));
        }
        Ok(self.forward_cached(store, z, e)?.out)
    }

    pub(crate) fn forward_cached(&self, store: &ParamStore, z: &[f64], e: usize) -> Result<ExpertCache> {
        let p = *self.params(e)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut pre = vec![0.0; self.h];
        affine_into(z, store.value(p.w1), store.value(p.b1).as_slice(), &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
        let mut out = vec![0.0; self.o];
        affine_into(&hidden, store.value(p.w2), store.value(p.b2).as_slice(), &mut out);
        Ok(ExpertCache { pre, hidden, out })
    }

    /// Accumulate parameter gradients for `dL/df_e` and add `dL/dz` into `grad_z`.
    pub(crate) fn backward(
        &self,
        store: &mut ParamStore,
        e: usize,
        z: &[f64],
        cache: &ExpertCache,
        grad_out: &[f64],
        grad_z: &mut [f64],
    ) -> Result<()> {
        let p = *self.params(e)?;
        store.grad_mut(p.w2).add_outer(grad_out, &cache.hidden);
        accumulate(store, p.b2, grad_out);
        let mut g_hidden = vec![0.0; self.h];
        store.value(p.w2).matvec_t_acc(grad_out, &mut g_hidden);
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&cache.pre)
            .map(|(g, x)| g * gelu_grad(*x))
            .collect();
        store.grad_mut(p.w1).add_outer(&g_pre, z);
        accumulate(store, p.b1, &g_pre);
        store.value(p.w1).matvec_t_acc(&g_pre, grad_z);
        Ok(())
    }
}
