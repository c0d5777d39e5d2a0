//! Post-fusion interface: TR alignment, token projection with a residual
//! temporal MLP, windowing, and the stratified train/validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{
    affine_into, gelu, gelu_grad, layer_norm, layer_norm_backward, rng, LayerNormCache, Matrix,
    ParamId, ParamStore, Rng,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Raw upstream features for one episode, sampled at `rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub episode_id: String,
    pub subject_id: usize,
    pub rate_hz: f64,
    pub frames: Matrix,
}

/// TR-aligned rows (`T × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub episode_id: String,
    pub subject_id: usize,
    pub tokens: Matrix,
    pub tr_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSequence {
    pub episode_id: String,
    pub subject_id: usize,
    pub responses: Matrix,
}

/// One training window. `inputs` and `targets` share the same TR span.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: usize,
    pub episode_id: String,
    pub start: usize,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Average the frames falling in each half-open TR bin `[k·tr, (k+1)·tr)`.
///
/// Frame `i` is stamped at `i / rate_hz`. A relative tolerance of 1e-9 on the
/// bin index absorbs rounding when the frame period divides the TR exactly.
pub fn bin_to_tr(f: &FeatureSequence, tr_seconds: f64, n_tr: usize) -> Result<Matrix> {
    if !(tr_seconds > 0.0) || !(f.rate_hz > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "tr_seconds {tr_seconds} and rate_hz {} must be positive",
            f.rate_hz
        )));
    }
    if !f.frames.is_finite() {
        return Err(Error::NonFiniteInput(format!("frames of {}", f.episode_id)));
    }
    let n_frames = f.frames.rows();
    let span = n_frames as f64 / f.rate_hz;
    if n_tr as f64 * tr_seconds > span * (1.0 + 1e-9) {
        return Err(Error::InsufficientFrames {
            requested: n_tr,
            available: span,
        });
    }
    let d = f.frames.cols();
    let mut out = Matrix::zeros(n_tr, d);
    let mut counts = vec![0usize; n_tr];
    for i in 0..n_frames {
        let pos = i as f64 / (f.rate_hz * tr_seconds);
        let k = (pos + 1e-9).floor() as usize;
        if k >= n_tr {
            break;
        }
        counts[k] += 1;
        for (o, v) in out.row_mut(k).iter_mut().zip(f.frames.row(i)) {
            *o += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyBin(k));
        }
        let inv = 1.0 / c as f64;
        out.row_mut(k).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Fixed sinusoidal table, `w_max × d`.
pub fn positional_table(w_max: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(w_max, d);
    for t in 0..w_max {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
            let angle = t as f64 * freq;
            m.set(t, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Handles to the projector and temporal-MLP parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Afire {
    pub d_in: usize,
    pub d: usize,
    pub hidden: usize,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pos: Matrix,
}

/// Per-window activations kept for [`Afire::backward`].
#[derive(Debug, Clone)]
pub struct AfireCache {
    version: u64,
    inputs: Matrix,
    summed: Matrix,
    pre: Matrix,
    hidden: Matrix,
    norms: Vec<LayerNormCache>,
}

impl Afire {
    pub fn new(
        store: &mut ParamStore,
        d_in: usize,
        d: usize,
        hidden: usize,
        w_max: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_in == 0 || d == 0 || hidden == 0 || w_max == 0 {
            return Err(Error::InvalidConfig("AFIRE dimensions must be positive".into()));
        }
        let gauss = |rng: &mut Rng, rows: usize, cols: usize, std: f64| {
            Matrix::from_vec(rows, cols, rng::normal_vec(rng, rows * cols, std))
        };
        let w_p = store.register("afire.w_p", gauss(rng, d, d_in, (1.0 / d_in as f64).sqrt())?)?;
        let b_p = store.register("afire.b_p", Matrix::zeros(1, d))?;
        let mlp_w1 = store.register(
            "afire.mlp_w1",
            gauss(rng, hidden, d, (1.0 / d as f64).sqrt())?,
        )?;
        let mlp_b1 = store.register("afire.mlp_b1", Matrix::zeros(1, hidden))?;
        let mlp_w2 = store.register(
            "afire.mlp_w2",
            gauss(rng, d, hidden, 0.1 / (hidden as f64).sqrt())?,
        )?;
        let mlp_b2 = store.register("afire.mlp_b2", Matrix::zeros(1, d))?;
        let ln_gain = store.register("afire.ln_gain", Matrix::filled(1, d, 1.0))?;
        let ln_bias = store.register("afire.ln_bias", Matrix::zeros(1, d))?;
        Ok(Self {
            d_in,
            d,
            hidden,
            w_p,
            b_p,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            ln_gain,
            ln_bias,
            pos: positional_table(w_max, d),
        })
    }

    pub fn max_window(&self) -> usize {
        self.pos.rows()
    }

    pub fn positional(&self) -> &Matrix {
        &self.pos
    }

    /// Replace the positional table (it is not a trained parameter).
    pub fn set_positional(&mut self, pos: Matrix) -> Result<()> {
        if pos.cols() != self.d {
            return Err(Error::shape("positional table width must equal D"));
        }
        self.pos = pos;
        Ok(())
    }

    /// Tokens `z_t = LN(h_t + pos_t + MLP(h_t + pos_t))` with `h_t = W_p x_t + b_p`.
    pub fn project_and_encode(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(store, x)?.0)
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, AfireCache)> {
        let t_len = x.rows();
        if t_len > self.max_window() {
            return Err(Error::WindowTooLong {
                len: t_len,
                max: self.max_window(),
            });
        }
        if x.cols() != self.d_in {
            return Err(Error::shape(format!(
                "AFIRE expects {} input features, got {}",
                self.d_in,
                x.cols()
            )));
        }
        let w_p = store.value(self.w_p);
        let b_p = store.value(self.b_p).as_slice();
        let w1 = store.value(self.mlp_w1);
        let b1 = store.value(self.mlp_b1).as_slice();
        let w2 = store.value(self.mlp_w2);
        let b2 = store.value(self.mlp_b2).as_slice();
        let gain = store.value(self.ln_gain).as_slice();
        let bias = store.value(self.ln_bias).as_slice();

        let mut out = Matrix::zeros(t_len, self.d);
        let mut summed = Matrix::zeros(t_len, self.d);
        let mut pre = Matrix::zeros(t_len, self.hidden);
        let mut hidden = Matrix::zeros(t_len, self.hidden);
        let mut norms = Vec::with_capacity(t_len);
        let mut mlp_out = vec![0.0; self.d];
        for t in 0..t_len {
            let a = summed.row_mut(t);
            affine_into(x.row(t), w_p, b_p, a);
            for (ai, p) in a.iter_mut().zip(self.pos.row(t)) {
                *ai += p;
            }
            affine_into(summed.row(t), w1, b1, pre.row_mut(t));
            for (h, p) in hidden.row_mut(t).iter_mut().zip(pre.row(t)) {
                *h = gelu(*p);
            }
            affine_into(hidden.row(t), w2, b2, &mut mlp_out);
            let residual: Vec<f64> = summed
                .row(t)
                .iter()
                .zip(&mlp_out)
                .map(|(a, m)| a + m)
                .collect();
            let (z, cache) = layer_norm(&residual, gain, bias, LAYER_NORM_EPS);
            out.row_mut(t).copy_from_slice(&z);
            norms.push(cache);
        }
        let cache = AfireCache {
            version: store.version(),
            inputs: x.clone(),
            summed,
            pre,
            hidden,
            norms,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients for `dL/dz` (one row per TR).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AfireCache,
        grad_tokens: &Matrix,
    ) -> Result<()> {
        if cache.version != store.version() {
            return Err(Error::StaleCache);
        }
        if grad_tokens.shape() != (cache.inputs.rows(), self.d) {
            return Err(Error::shape("token gradient does not match the cached window"));
        }
        let gain = store.value(self.ln_gain).as_slice().to_vec();
        let w1 = store.value(self.mlp_w1).clone();
        let w2 = store.value(self.mlp_w2).clone();
        let mut g_gain = vec![0.0; self.d];
        let mut g_bias = vec![0.0; self.d];
        let mut g_w1 = Matrix::zeros(self.hidden, self.d);
        let mut g_b1 = vec![0.0; self.hidden];
        let mut g_w2 = Matrix::zeros(self.d, self.hidden);
        let mut g_b2 = vec![0.0; self.d];
        let mut g_wp = Matrix::zeros(self.d, self.d_in);
        let mut g_bp = vec![0.0; self.d];

        for t in 0..cache.inputs.rows() {
            let g_res = layer_norm_backward(
                &cache.norms[t],
                &gain,
                grad_tokens.row(t),
                &mut g_gain,
                &mut g_bias,
            );
            // residual branch: r = a + W2·gelu(W1·a + b1) + b2
            g_w2.add_outer(&g_res, cache.hidden.row(t));
            for (b, g) in g_b2.iter_mut().zip(&g_res) {
                *b += g;
            }
            let mut g_hidden = vec![0.0; self.hidden];
            w2.matvec_t_acc(&g_res, &mut g_hidden);
            let g_pre: Vec<f64> = g_hidden
                .iter()
                .zip(cache.pre.row(t))
                .map(|(g, p)| g * gelu_grad(*p))
                .collect();
            g_w1.add_outer(&g_pre, cache.summed.row(t));
            for (b, g) in g_b1.iter_mut().zip(&g_pre) {
                *b += g;
            }
            let mut g_a = g_res;
            w1.matvec_t_acc(&g_pre, &mut g_a);
            g_wp.add_outer(&g_a, cache.inputs.row(t));
            for (b, g) in g_bp.iter_mut().zip(&g_a) {
                *b += g;
            }
        }

        accumulate(store, self.ln_gain, &g_gain);
        accumulate(store, self.ln_bias, &g_bias);
        accumulate(store, self.mlp_w1, g_w1.as_slice());
        accumulate(store, self.mlp_b1, &g_b1);
        accumulate(store, self.mlp_w2, g_w2.as_slice());
        accumulate(store, self.mlp_b2, &g_b2);
        accumulate(store, self.w_p, g_wp.as_slice());
        accumulate(store, self.b_p, &g_bp);
        Ok(())
    }
}

pub(crate) fn accumulate(store: &mut ParamStore, id: ParamId, g: &[f64]) {
    for (dst, src) in store.grad_mut(id).as_mut_slice().iter_mut().zip(g) {
        *dst += src;
    }
}

/// Window start offsets for a sequence of `t_len` TRs.
pub fn window_starts(t_len: usize, win: usize, stride: usize) -> Vec<usize> {
    if t_len <= win {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|s| s + win <= t_len)
        .collect();
    let tail = t_len - win;
    if starts.last() != Some(&tail) {
        starts.push(tail);
    }
    starts
}

/// Cut paired token/response sequences into fixed-length windows.
///
/// Starts are `0, stride, 2·stride, …` while the window fits, plus a tail
/// window ending at the last TR. Sequences shorter than `win` yield a single
/// window covering the whole sequence.
pub fn make_windows(
    tokens: &TokenSequence,
    resp: &ResponseSequence,
    win: usize,
    stride: usize,
) -> Result<Vec<Sample>> {
    if win == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window and stride must be at least 1".into()));
    }
    let t_len = tokens.tokens.rows();
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if resp.responses.rows() != t_len {
        return Err(Error::shape(format!(
            "{} token rows but {} response rows in {}",
            t_len,
            resp.responses.rows(),
            tokens.episode_id
        )));
    }
    let len = win.min(t_len);
    Ok(window_starts(t_len, win, stride)
        .into_iter()
        .map(|start| Sample {
            subject_id: tokens.subject_id,
            episode_id: tokens.episode_id.clone(),
            start,
            inputs: tokens.tokens.slice_rows(start, len),
            targets: resp.responses.slice_rows(start, len),
        })
        .collect())
}

/// Stratified split: within each `(subject, episode)` group a `ratio` share
/// (rounded down) goes to training, with at least one training sample per
/// group and at least one validation sample when the group has two or more.
pub fn split_train_val(
    samples: Vec<Sample>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut groups: BTreeMap<(usize, String), Vec<Sample>> = BTreeMap::new();
    for s in samples {
        groups
            .entry((s.subject_id, s.episode_id.clone()))
            .or_default()
            .push(s);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut group) in groups {
        group.sort_by_key(|s| s.start);
        let n = group.len();
        let mut n_train = ((ratio * n as f64) + 1e-12).floor() as usize;
        n_train = n_train.max(1);
        if n >= 2 {
            n_train = n_train.min(n - 1);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut is_train = vec![false; n];
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
        for (s, t) in group.into_iter().zip(is_train) {
            if t {
                train.push(s);
            } else {
                val.push(s);
            }
        }
    }
    Ok((train, val))
}

/// Split metadata persisted in reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitSummary {
    pub seed: u64,
    pub ratio: f64,
    pub n_train: usize,
    pub n_val: usize,
}
