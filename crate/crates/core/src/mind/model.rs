use serde::{Deserialize, Serialize};

use crate::afire::{Afire, AfireCache};
use crate::error::{Error, Result};
use crate::mind::{DecodeCache, ExpertBank, Mind};
use crate::sadgate::{Gate, GateOutput, RouterMode, RouterParams};
use crate::tensorcore::{rng, Matrix, ParamStore};

/// Architecture of a full model. With `afire = false` the inputs are taken to
/// be tokens already (`d_in` must equal `d`) and go straight to the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d: usize,
    pub h: usize,
    pub o: usize,
    pub e: usize,
    pub k: usize,
    pub s: usize,
    pub router: RouterMode,
    pub afire: bool,
    pub afire_hidden: usize,
    pub w_max: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d", self.d),
            ("h", self.h),
            ("o", self.o),
            ("e", self.e),
            ("s", self.s),
            ("afire_hidden", self.afire_hidden),
            ("w_max", self.w_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.k == 0 || self.k > self.e {
            return Err(Error::InvalidConfig(format!(
                "k = {} must lie in 1..={}",
                self.k, self.e
            )));
        }
        if !self.afire && self.d_in != self.d {
            return Err(Error::InvalidConfig(format!(
                "without the AFIRE projector d_in ({}) must equal d ({})",
                self.d_in, self.d
            )));
        }
        Ok(())
    }
}

/// Parameters and structure of a trainable model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub afire: Option<Afire>,
    pub mind: Mind,
}

/// Forward pass over one window, with everything needed for backward.
#[derive(Debug, Clone)]
pub struct WindowForward {
    pub subject: usize,
    pub tokens: Matrix,
    pub preds: Matrix,
    pub gates: Vec<GateOutput>,
    afire: Option<AfireCache>,
    caches: Vec<DecodeCache>,
}

impl WindowForward {
    /// Expert evaluations per token, in window order.
    pub fn expert_calls(&self) -> impl Iterator<Item = usize> + '_ {
        self.caches.iter().map(DecodeCache::expert_calls)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let afire = if config.afire {
            let mut r = rng::seeded(rng::derive_seed(seed, 0));
            Some(Afire::new(
                &mut store,
                config.d_in,
                config.d,
                config.afire_hidden,
                config.w_max,
                &mut r,
            )?)
        } else {
            None
        };
        let mut r = rng::seeded(rng::derive_seed(seed, 1));
        let router = RouterParams::new(&mut store, config.d, config.e, config.s, &mut r)?;
        let gate = Gate::new(router, config.k, config.router)?;
        let bank = ExpertBank::new(
            &mut store,
            config.d,
            config.h,
            config.o,
            config.e,
            rng::derive_seed(seed, 2),
        )?;
        Ok(Self {
            config,
            seed,
            store,
            afire,
            mind: Mind::new(gate, bank)?,
        })
    }

    pub fn router(&self) -> &RouterParams {
        &self.mind.gate.params
    }

    fn check_inputs(&self, inputs: &Matrix, subject: usize) -> Result<()> {
        if inputs.cols() != self.config.d_in {
            return Err(Error::ConfigMismatch(format!(
                "inputs have {} features, model expects {}",
                inputs.cols(),
                self.config.d_in
            )));
        }
        if subject >= self.config.s {
            return Err(Error::UnknownSubject {
                subject,
                subjects: self.config.s,
            });
        }
        Ok(())
    }

    pub fn forward_window(&self, inputs: &Matrix, subject: usize) -> Result<WindowForward> {
        self.check_inputs(inputs, subject)?;
        let (tokens, afire) = match &self.afire {
            Some(a) => {
                let (z, c) = a.forward(&self.store, inputs)?;
                (z, Some(c))
            }
            None => (inputs.clone(), None),
        };
        let n = tokens.rows();
        let mut preds = Matrix::zeros(n, self.config.o);
        let mut gates = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        for t in 0..n {
            let (y, g, c) = self.mind.decode(&self.store, tokens.row(t), subject)?;
            preds.row_mut(t).copy_from_slice(&y);
            gates.push(g);
            caches.push(c);
        }
        Ok(WindowForward {
            subject,
            tokens,
            preds,
            gates,
            afire,
            caches,
        })
    }

    /// Accumulate gradients for `dL/dŷ` (rows = TRs) and an optional `dL/du`.
    pub fn backward_window(
        &mut self,
        fwd: &WindowForward,
        grad_pred: &Matrix,
        grad_u: Option<&Matrix>,
    ) -> Result<()> {
        if grad_pred.shape() != fwd.preds.shape() {
            return Err(Error::shape("prediction gradient does not match the window"));
        }
        let Model {
            store, afire, mind, ..
        } = self;
        let mut grad_tokens = Matrix::zeros(fwd.tokens.rows(), fwd.tokens.cols());
        for t in 0..fwd.tokens.rows() {
            let gu = grad_u.map(|m| m.row(t));
            mind.decode_backward(
                store,
                grad_pred.row(t),
                &fwd.gates[t],
                &fwd.caches[t],
                gu,
                grad_tokens.row_mut(t),
            )?;
        }
        if let (Some(a), Some(c)) = (afire.as_ref(), fwd.afire.as_ref()) {
            a.backward(store, c, &grad_tokens)?;
        }
        Ok(())
    }

    pub fn predict(&self, inputs: &Matrix, subject: usize) -> Result<Matrix> {
        Ok(self.forward_window(inputs, subject)?.preds)
    }

    /// Decode a single, already-encoded token.
    pub fn decode_token(&self, z: &[f64], subject: usize) -> Result<(Vec<f64>, GateOutput)> {
        let (y, g, _) = self.mind.decode(&self.store, z, subject)?;
        Ok((y, g))
    }

    /// Route an unseen subject: its embedding becomes the mean of the
    /// `known` subjects' embeddings and its prior bias row is zeroed, so its
    /// prior is `softmax(α)`.
    pub fn apply_subject_fallback(&mut self, held_out: usize, known: &[usize]) -> Result<()> {
        let rp = self.mind.gate.params.clone();
        for &s in known.iter().chain(std::iter::once(&held_out)) {
            if s >= rp.s {
                return Err(Error::UnknownSubject {
                    subject: s,
                    subjects: rp.s,
                });
            }
        }
        if known.is_empty() {
            return Err(Error::NeedMultipleSubjects(1));
        }
        let emb = self.store.value(rp.e_subj);
        let mut mean = vec![0.0; rp.d];
        for &s in known {
            for (m, v) in mean.iter_mut().zip(emb.row(s)) {
                *m += v / known.len() as f64;
            }
        }
        self.store
            .value_mut(rp.e_subj)
            .row_mut(held_out)
            .copy_from_slice(&mean);
        self.store.value_mut(rp.bias).row_mut(held_out).fill(0.0);
        Ok(())
    }
}
