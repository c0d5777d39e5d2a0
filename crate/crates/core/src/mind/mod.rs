//! Sparse mixture-of-experts decoder.
//!
//! `y_t = Σ_{e∈S_t} ŵ_{t,e} f_e(z_t)` where `S_t` and `ŵ_t` come from the gate.
//! Only the selected experts are evaluated. In the backward pass each selected
//! expert receives `ŵ_{t,e}·dL/dy_t`, and the gate receives
//! `dL/dŵ_{t,e} = ⟨dL/dy_t, f_e(z_t)⟩`.

mod checkpoint;
mod experts;
mod model;

pub use checkpoint::{
    config_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CheckpointManifest, ParamShape,
};
pub use experts::{ExpertBank, ExpertCache, ExpertParams};
pub use model::{Model, ModelConfig, WindowForward};

use crate::error::{Error, Result};
use crate::sadgate::{Gate, GateCache, GateOutput};
use crate::tensorcore::ParamStore;

/// Gate plus expert bank.
#[derive(Debug, Clone)]
pub struct Mind {
    pub gate: Gate,
    pub bank: ExpertBank,
}

/// Everything `decode_backward` needs for one token.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    pub gate: GateCache,
    pub z: Vec<f64>,
    pub experts: Vec<(usize, ExpertCache)>,
}

impl DecodeCache {
    /// Expert evaluations made for this token.
    pub fn expert_calls(&self) -> usize {
        self.experts.len()
    }
}

impl Mind {
    pub fn new(gate: Gate, bank: ExpertBank) -> Result<Self> {
        if gate.experts() != bank.len() || gate.params.d != bank.d {
            return Err(Error::ConfigMismatch(format!(
                "gate routes over {} experts of width {}, bank has {} of width {}",
                gate.experts(),
                gate.params.d,
                bank.len(),
                bank.d
            )));
        }
        Ok(Self { gate, bank })
    }

    pub fn decode(&self, store: &ParamStore, z: &[f64], s: usize) -> Result<(Vec<f64>, GateOutput, DecodeCache)> {
        let (gate_out, gate_cache) = self.gate.forward(store, z, s)?;
        let mut y = vec![0.0; self.bank.o];
        let mut experts = Vec::with_capacity(gate_out.selected.len());
        for &e in &gate_out.selected {
            let c = self.bank.forward_cached(store, z, e)?;
            let w = gate_out.w_hat[e];
            for (yi, fi) in y.iter_mut().zip(&c.out) {
                *yi += w * fi;
            }
            experts.push((e, c));
        }
        let cache = DecodeCache {
            gate: gate_cache,
            z: z.to_vec(),
            experts,
        };
        Ok((y, gate_out, cache))
    }

    /// Backward for one token. `grad_u` is an optional direct gradient on the
    /// pre-sparse scores; `dL/dz` is added into `grad_z`.
    pub fn decode_backward(
        &self,
        store: &mut ParamStore,
        grad_y: &[f64],
        gate_out: &GateOutput,
        cache: &DecodeCache,
        grad_u: Option<&[f64]>,
        grad_z: &mut [f64],
    ) -> Result<()> {
        if grad_y.len() != self.bank.o {
            return Err(Error::shape("output gradient width does not match O"));
        }
        if cache.experts.len() != gate_out.selected.len() {
            return Err(Error::StaleCache);
        }
        let mut grad_w = vec![0.0; self.bank.len()];
        let mut scaled = vec![0.0; self.bank.o];
        for (e, c) in &cache.experts {
            grad_w[*e] = grad_y.iter().zip(&c.out).map(|(a, b)| a * b).sum();
            let w = gate_out.w_hat[*e];
            for (s, g) in scaled.iter_mut().zip(grad_y) {
                *s = w * g;
            }
            self.bank.backward(store, *e, &cache.z, c, &scaled, grad_z)?;
        }
        self.gate
            .backward(store, gate_out, &cache.gate, &grad_w, grad_u, grad_z)
    }
}
