//! Planted-teacher synthetic data.
//!
//! The teacher is itself a token-mode [`Model`]: expert heads of the student's
//! family, a token gate `softmax(G z)` and per-subject mixtures `m_s` stored as
//! prior biases `B[s] = ln m_s`. Responses are the teacher's predictions plus
//! Gaussian noise, so a student of the same shape can represent the data
//! exactly and the teacher's own score is the attainable ceiling.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as Weights;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{pearson, pearson_checked};
use crate::mind::{Model, ModelConfig};
use crate::sadgate::{prior_route, RouterMode};
use crate::tensorcore::{rng, softmax, Matrix};

/// Floor for `ln m_s` so that zero mixture weights stay finite.
pub const LOG_FLOOR: f64 = -50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heterogeneity {
    /// One mixture for every subject, with a token gate.
    Shared,
    /// Subject `s` uses only expert `s mod E*`.
    Disjoint,
    /// Per-subject mixtures plus a token gate.
    Mixed,
    /// Uniform mixtures; only the token gate routes.
    TokenModulated,
}

impl std::str::FromStr for Heterogeneity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "disjoint" => Ok(Self::Disjoint),
            "mixed" => Ok(Self::Mixed),
            "token-modulated" | "token_modulated" => Ok(Self::TokenModulated),
            other => Err(Error::InvalidSpec(format!("unknown heterogeneity mode {other}"))),
        }
    }
}

impl Heterogeneity {
    pub fn has_token_gate(self) -> bool {
        !matches!(self, Self::Disjoint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub d: usize,
    pub o: usize,
    pub experts: usize,
    pub hidden: usize,
    pub subjects: usize,
    pub episodes: usize,
    /// TRs per subject, split evenly over its episodes.
    pub trs: usize,
    pub mode: Heterogeneity,
    /// Noise standard deviation. Ignored when `ceiling` is set.
    pub sigma: f64,
    /// Target mean oracle ceiling; σ is derived from the noiseless signal.
    pub ceiling: Option<f64>,
    pub teacher_k: usize,
    /// AR(1) coefficient for tokens; 0 gives i.i.d. tokens.
    pub ar: f64,
    /// Standard deviation of the token-gate logits.
    pub gate_scale: f64,
    /// Spread of the subject mixture logits.
    pub kappa: f64,
    pub tr_seconds: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 16,
            o: 32,
            experts: 4,
            hidden: 32,
            subjects: 4,
            episodes: 4,
            trs: 2000,
            mode: Heterogeneity::Shared,
            sigma: 0.0,
            ceiling: Some(0.6),
            teacher_k: 2,
            ar: 0.0,
            gate_scale: 3.0,
            kappa: 1.2,
            tr_seconds: 1.49,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("o", self.o),
            ("experts", self.experts),
            ("hidden", self.hidden),
            ("subjects", self.subjects),
            ("episodes", self.episodes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidSpec(format!("{name} must be positive")));
        }
        if self.trs < self.episodes * 2 {
            return Err(Error::InvalidSpec(format!(
                "{} TRs cannot fill {} episodes",
                self.trs, self.episodes
            )));
        }
        if self.teacher_k == 0 || self.teacher_k > self.experts {
            return Err(Error::InvalidSpec(format!(
                "teacher_k = {} must lie in 1..={}",
                self.teacher_k, self.experts
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec("sigma must be finite and non-negative".into()));
        }
        if let Some(c) = self.ceiling {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::InvalidSpec(format!("ceiling {c} not in (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.ar) {
            return Err(Error::InvalidSpec(format!("AR coefficient {} not in [0, 1)", self.ar)));
        }
        if !(self.gate_scale >= 0.0 && self.kappa >= 0.0 && self.tr_seconds > 0.0) {
            return Err(Error::InvalidSpec("gate_scale, kappa and tr_seconds must be positive".into()));
        }
        Ok(())
    }

    /// TR counts of the episodes of one subject.
    pub fn episode_lengths(&self) -> Vec<usize> {
        let base = self.trs / self.episodes;
        let extra = self.trs % self.episodes;
        (0..self.episodes).map(|i| base + usize::from(i < extra)).collect()
    }
}

/// `softmax(κ·l)` for evenly spaced logits `l` from 1 down to −1, assigned to
/// experts in random order, so every draw has the same spread.
pub fn ranked_mixture(r: &mut rng::Rng, e: usize, kappa: f64) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..e).collect();
    order.shuffle(r);
    let step = if e > 1 { 2.0 / (e - 1) as f64 } else { 0.0 };
    let logits: Vec<f64> = order.iter().map(|&rank| kappa * (1.0 - step * rank as f64)).collect();
    softmax(&logits)
}

/// Ground truth behind a planted dataset.
#[derive(Debug, Clone)]
pub struct PlantedTeacher {
    pub model: Model,
    pub mixtures: Vec<Vec<f64>>,
    pub mode: Heterogeneity,
    pub sigma: f64,
}

/// Serializable description of a teacher, without its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherManifest {
    pub mode: Heterogeneity,
    pub sigma: f64,
    pub mixtures: Vec<Vec<f64>>,
    pub token_gate: bool,
    pub model: ModelConfig,
    pub seed: u64,
}

impl PlantedTeacher {
    pub fn build(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let gated = spec.mode.has_token_gate();
        let config = ModelConfig {
            d_in: spec.d,
            d: spec.d,
            h: spec.hidden,
            o: spec.o,
            e: spec.experts,
            k: spec.teacher_k,
            s: spec.subjects,
            router: if gated { RouterMode::Both } else { RouterMode::Prior },
            afire: false,
            afire_hidden: 1,
            w_max: 1,
        };
        let mut model = Model::new(config, rng::derive_seed(spec.seed, 1))?;
        let mut r = rng::seeded(rng::derive_seed(spec.seed, 2));
        let e = spec.experts;
        let mixtures: Vec<Vec<f64>> = match spec.mode {
            Heterogeneity::Shared => {
                let m = ranked_mixture(&mut r, e, spec.kappa)?;
                vec![m; spec.subjects]
            }
            Heterogeneity::Mixed => (0..spec.subjects)
                .map(|_| ranked_mixture(&mut r, e, spec.kappa))
                .collect::<Result<_>>()?,
            Heterogeneity::Disjoint => (0..spec.subjects)
                .map(|s| {
                    let mut m = vec![0.0; e];
                    m[s % e] = 1.0;
                    m
                })
                .collect(),
            Heterogeneity::TokenModulated => vec![vec![1.0 / e as f64; e]; spec.subjects],
        };
        let rp = model.router().clone();
        let g = if gated {
            rng::normal_vec(&mut r, e * spec.d, spec.gate_scale / (spec.d as f64).sqrt())
        } else {
            vec![0.0; e * spec.d]
        };
        model.store.value_mut(rp.w_r).as_mut_slice().copy_from_slice(&g);
        model.store.value_mut(rp.e_subj).fill(0.0);
        for (s, m) in mixtures.iter().enumerate() {
            for (b, &w) in model.store.value_mut(rp.bias).row_mut(s).iter_mut().zip(m) {
                *b = if w > 0.0 { w.ln().max(LOG_FLOOR) } else { LOG_FLOOR };
            }
        }
        Ok(Self {
            model,
            mixtures,
            mode: spec.mode,
            sigma: spec.sigma,
        })
    }

    pub fn manifest(&self) -> TeacherManifest {
        TeacherManifest {
            mode: self.mode,
            sigma: self.sigma,
            mixtures: self.mixtures.clone(),
            token_gate: self.mode.has_token_gate(),
            model: self.model.config.clone(),
            seed: self.model.seed,
        }
    }

    /// Copy the teacher into a token-mode student with at least as many
    /// experts and the same `(D, H, O, S)`. Extra experts get the log floor as
    /// prior bias so they are never selected over a teacher expert.
    pub fn embed_into(&self, student: &mut Model) -> Result<()> {
        let (t, s) = (&self.model.config, &student.config);
        if student.afire.is_some() || s.d != t.d || s.h != t.h || s.o != t.o || s.s != t.s || s.e < t.e {
            return Err(Error::ConfigMismatch(format!(
                "teacher {t:?} does not fit into student {s:?}"
            )));
        }
        let (tr, sr) = (self.model.router().clone(), student.router().clone());
        let ts = &self.model.store;
        let ss = &mut student.store;
        for i in 0..t.e {
            let (a, b) = (self.model.mind.bank.experts[i], student.mind.bank.experts[i]);
            for (src, dst) in [(a.w1, b.w1), (a.b1, b.b1), (a.w2, b.w2), (a.b2, b.b2)] {
                *ss.value_mut(dst) = ts.value(src).clone();
            }
        }
        let mut w_r = Matrix::zeros(s.e, s.d);
        let mut b_r = Matrix::zeros(1, s.e);
        let mut alpha = Matrix::zeros(1, s.e);
        let mut bias = Matrix::filled(s.s, s.e, LOG_FLOOR);
        for i in 0..t.e {
            w_r.row_mut(i).copy_from_slice(ts.value(tr.w_r).row(i));
            b_r.set(0, i, ts.value(tr.b_r).get(0, i));
            alpha.set(0, i, ts.value(tr.alpha).get(0, i));
            for subj in 0..s.s {
                bias.set(subj, i, ts.value(tr.bias).get(subj, i));
            }
        }
        *ss.value_mut(sr.w_r) = w_r;
        *ss.value_mut(sr.b_r) = b_r;
        *ss.value_mut(sr.alpha) = alpha;
        *ss.value_mut(sr.bias) = bias;
        *ss.value_mut(sr.e_subj) = ts.value(tr.e_subj).clone();
        Ok(())
    }
}

/// One `(subject, episode)` of planted data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedEpisode {
    pub subject: usize,
    pub episode_id: String,
    pub tokens: Matrix,
    pub signal: Matrix,
    pub responses: Matrix,
}

#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub spec: SynthSpec,
    pub teacher: PlantedTeacher,
    pub episodes: Vec<PlantedEpisode>,
}

impl PlantedDataset {
    pub fn subject_ids(&self) -> Vec<usize> {
        (0..self.spec.subjects).collect()
    }
}

fn draw_tokens(r: &mut rng::Rng, n: usize, d: usize, ar: f64) -> Result<Matrix> {
    let mut out = Matrix::from_vec(n, d, rng::normal_vec(r, n * d, 1.0))?;
    if ar > 0.0 {
        let c = (1.0 - ar * ar).sqrt();
        for t in 1..n {
            for j in 0..d {
                let v = ar * out.get(t - 1, j) + c * out.get(t, j);
                out.set(t, j, v);
            }
        }
    }
    Ok(out)
}

/// Noise σ giving a mean ceiling of `c`: `σ² = mean parcel variance · (1/c² − 1)`.
pub fn sigma_for_ceiling(signals: &[&Matrix], c: f64) -> f64 {
    let o = signals.first().map_or(0, |m| m.cols());
    let mut total = 0.0;
    for j in 0..o {
        let col: Vec<f64> = signals.iter().flat_map(|m| (0..m.rows()).map(move |t| m.get(t, j))).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        total += col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / col.len() as f64;
    }
    let var = total / o.max(1) as f64;
    (var * (1.0 / (c * c) - 1.0)).max(0.0).sqrt()
}

/// Draw a planted dataset. Every episode has its own token and noise streams.
pub fn generate(spec: &SynthSpec) -> Result<PlantedDataset> {
    let mut teacher = PlantedTeacher::build(spec)?;
    let mut episodes = Vec::with_capacity(spec.subjects * spec.episodes);
    for s in 0..spec.subjects {
        for (i, &len) in spec.episode_lengths().iter().enumerate() {
            let stream = (s * spec.episodes + i) as u64;
            let mut r = rng::seeded(rng::derive_seed(spec.seed, 0x7000 + stream));
            let tokens = draw_tokens(&mut r, len, spec.d, spec.ar)?;
            let signal = teacher.model.predict(&tokens, s)?;
            episodes.push(PlantedEpisode {
                subject: s,
                episode_id: format!("ep{i:02}"),
                tokens,
                responses: signal.clone(),
                signal,
            });
        }
    }
    let sigma = match spec.ceiling {
        Some(c) => sigma_for_ceiling(&episodes.iter().map(|e| &e.signal).collect::<Vec<_>>(), c),
        None => spec.sigma,
    };
    teacher.sigma = sigma;
    for (idx, ep) in episodes.iter_mut().enumerate() {
        let mut r = rng::seeded(rng::derive_seed(spec.seed, 0x9000 + idx as u64));
        let noise = rng::normal_vec(&mut r, ep.responses.len(), sigma);
        for (y, n) in ep.responses.as_mut_slice().iter_mut().zip(noise) {
            *y += n;
        }
    }
    Ok(PlantedDataset {
        spec: spec.clone(),
        teacher,
        episodes,
    })
}

/// Per-parcel Pearson r between the noiseless signal and the noisy targets,
/// pooled over every episode.
pub fn oracle_ceiling(ds: &PlantedDataset) -> Result<Vec<f64>> {
    let o = ds.spec.o;
    (0..o)
        .map(|j| {
            let sig: Vec<f64> = ds.episodes.iter().flat_map(|e| (0..e.signal.rows()).map(move |t| e.signal.get(t, j))).collect();
            let y: Vec<f64> = ds.episodes.iter().flat_map(|e| (0..e.responses.rows()).map(move |t| e.responses.get(t, j))).collect();
            pearson(&sig, &y)
        })
        .collect()
}

pub const PROBE_TOKENS: usize = 256;
const PROBE_SEED: u64 = 0x9B0B_E5;

/// Pearson similarity between every student expert (rows) and teacher expert
/// (columns), over the flattened outputs on a fixed probe set.
pub fn expert_similarity(student: &Model, teacher: &Model) -> Result<Matrix> {
    if student.config.d != teacher.config.d || student.config.o != teacher.config.o {
        return Err(Error::ConfigMismatch("student and teacher disagree on D or O".into()));
    }
    let mut r = rng::seeded(PROBE_SEED);
    let probes = draw_tokens(&mut r, PROBE_TOKENS, teacher.config.d, 0.0)?;
    let outputs = |m: &Model| -> Result<Vec<Vec<f64>>> {
        (0..m.config.e)
            .map(|e| {
                let mut flat = Vec::with_capacity(PROBE_TOKENS * m.config.o);
                for z in probes.iter_rows() {
                    flat.extend(m.mind.bank.expert_forward(&m.store, z, e)?);
                }
                Ok(flat)
            })
            .collect()
    };
    let (so, to) = (outputs(student)?, outputs(teacher)?);
    let mut sim = Matrix::zeros(so.len(), to.len());
    for (i, a) in so.iter().enumerate() {
        for (j, b) in to.iter().enumerate() {
            sim.set(i, j, pearson_checked(a, b)?.value);
        }
    }
    Ok(sim)
}

/// Maximum-similarity one-to-one matching. Returns `(student, teacher)` pairs,
/// one per expert of the smaller bank, ordered by teacher index.
pub fn match_experts(similarity: &Matrix) -> Vec<(usize, usize)> {
    const SCALE: f64 = 1e9;
    let (n_s, n_t) = similarity.shape();
    let w = |i: usize, j: usize| (similarity.get(i, j) * SCALE).round() as i64;
    let mut pairs: Vec<(usize, usize)> = if n_t <= n_s {
        let weights = Weights::from_fn(n_t, n_s, |(t, s)| w(s, t));
        let (_, assign) = kuhn_munkres(&weights);
        assign.into_iter().enumerate().map(|(t, s)| (s, t)).collect()
    } else {
        let weights = Weights::from_fn(n_s, n_t, |(s, t)| w(s, t));
        let (_, assign) = kuhn_munkres(&weights);
        assign.into_iter().enumerate().collect()
    };
    pairs.sort_by_key(|&(_, t)| t);
    pairs
}

/// Mean over subjects of the Pearson correlation between the learned prior
/// `π(s)` and the teacher mixture `m_s`, after matching experts.
pub fn recovery_score(student: &Model, teacher: &PlantedTeacher) -> Result<f64> {
    if student.config.s != teacher.model.config.s {
        return Err(Error::ConfigMismatch(format!(
            "student has {} subjects, teacher {}",
            student.config.s, teacher.model.config.s
        )));
    }
    let pairs = match_experts(&expert_similarity(student, &teacher.model)?);
    let mut total = 0.0;
    for (s, m) in teacher.mixtures.iter().enumerate() {
        let pi = prior_route(s, student.router(), &student.store)?;
        let learned: Vec<f64> = pairs.iter().map(|&(i, _)| pi[i]).collect();
        let truth: Vec<f64> = pairs.iter().map(|&(_, j)| m[j]).collect();
        total += if learned.len() >= 2 {
            pearson_checked(&learned, &truth)?.value
        } else {
            0.0
        };
    }
    Ok(total / teacher.mixtures.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Heterogeneity) -> SynthSpec {
        SynthSpec {
            d: 6,
            o: 5,
            experts: 3,
            hidden: 8,
            subjects: 3,
            episodes: 2,
            trs: 300,
            mode,
            sigma: 0.0,
            ceiling: None,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_teacher_scores_one() {
        let ds = generate(&small(Heterogeneity::Shared)).unwrap();
        for ep in &ds.episodes {
            for j in 0..5 {
                let p: Vec<f64> = (0..ep.signal.rows()).map(|t| ep.signal.get(t, j)).collect();
                let y: Vec<f64> = (0..ep.responses.rows()).map(|t| ep.responses.get(t, j)).collect();
                assert!((pearson(&p, &y).unwrap() - 1.0).abs() < 1e-12);
            }
        }
        assert!(oracle_ceiling(&ds).unwrap().iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ceiling_matches_signal_to_noise() {
        let mut spec = small(Heterogeneity::Mixed);
        spec.trs = 4000;
        spec.sigma = 0.8;
        let ds = generate(&spec).unwrap();
        let ceiling = oracle_ceiling(&ds).unwrap();
        for (j, c) in ceiling.iter().enumerate() {
            let sig: Vec<f64> = ds.episodes.iter().flat_map(|e| (0..e.signal.rows()).map(move |t| e.signal.get(t, j))).collect();
            let n = sig.len() as f64;
            let m = sig.iter().sum::<f64>() / n;
            let var = sig.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let expect = (var / (var + 0.64)).sqrt();
            assert!((c - expect).abs() < 0.03, "parcel {j}: {c} vs {expect}");
        }
    }

    #[test]
    fn ceiling_target_is_met_on_average() {
        let mut spec = small(Heterogeneity::Shared);
        spec.trs = 4000;
        spec.ceiling = Some(0.6);
        let ds = generate(&spec).unwrap();
        let c = oracle_ceiling(&ds).unwrap();
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        assert!((mean - 0.6).abs() < 0.05, "{mean}");
        spec.ceiling = None;
        spec.sigma = 1e6;
        let c = oracle_ceiling(&generate(&spec).unwrap()).unwrap();
        assert!(c.iter().all(|x| x.abs() < 0.1));
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = small(Heterogeneity::TokenModulated);
        let (a, b) = (generate(&spec).unwrap(), generate(&spec).unwrap());
        assert_eq!(a.episodes, b.episodes);
        let mut other = spec.clone();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().episodes, a.episodes);
    }

    #[test]
    fn modes_shape_the_mixtures() {
        let ds = generate(&small(Heterogeneity::Disjoint)).unwrap();
        for (s, m) in ds.teacher.mixtures.iter().enumerate() {
            assert_eq!(m[s % 3], 1.0);
            assert_eq!(m.iter().sum::<f64>(), 1.0);
        }
        let ds = generate(&small(Heterogeneity::Shared)).unwrap();
        assert!(ds.teacher.mixtures.windows(2).all(|w| w[0] == w[1]));
        let ds = generate(&small(Heterogeneity::Mixed)).unwrap();
        assert_ne!(ds.teacher.mixtures[0], ds.teacher.mixtures[1]);
        for m in &ds.teacher.mixtures {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!("bogus".parse::<Heterogeneity>().is_err());
    }

    #[test]
    fn ar_tokens_are_correlated() {
        let mut r = rng::seeded(4);
        let z = draw_tokens(&mut r, 5000, 1, 0.9).unwrap();
        let a: Vec<f64> = (0..4999).map(|t| z.get(t, 0)).collect();
        let b: Vec<f64> = (1..5000).map(|t| z.get(t, 0)).collect();
        assert!((pearson(&a, &b).unwrap() - 0.9).abs() < 0.03);
    }

    #[test]
    fn disjoint_teacher_is_realizable() {
        let spec = small(Heterogeneity::Disjoint);
        let ds = generate(&spec).unwrap();
        for (e, k) in [(3, 1), (3, 2), (5, 1), (5, 3)] {
            let mut student = Model::new(
                ModelConfig {
                    e,
                    k,
                    router: RouterMode::Both,
                    ..ds.teacher.model.config.clone()
                },
                99,
            )
            .unwrap();
            ds.teacher.embed_into(&mut student).unwrap();
            let mut sq = 0.0;
            for ep in &ds.episodes {
                let y = student.predict(&ep.tokens, ep.subject).unwrap();
                sq += y.as_slice().iter().zip(ep.responses.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            assert!(sq < 1e-20, "E={e} K={k}: {sq}");
        }
    }

    #[test]
    fn teacher_recovers_itself() {
        let ds = generate(&small(Heterogeneity::Mixed)).unwrap();
        let score = recovery_score(&ds.teacher.model, &ds.teacher).unwrap();
        assert!(score > 0.99, "{score}");
    }

    #[test]
    fn uniform_prior_scores_zero_against_one_hot() {
        let ds = generate(&small(Heterogeneity::Disjoint)).unwrap();
        let student = Model::new(ds.teacher.model.config.clone(), 5).unwrap();
        assert_eq!(recovery_score(&student, &ds.teacher).unwrap(), 0.0);
    }

    #[test]
    fn matching_agrees_with_brute_force() {
        let mut r = rng::seeded(8);
        for trial in 0..50 {
            let (n_s, n_t) = [(3, 3), (4, 3), (3, 4), (5, 5)][trial % 4];
            let sim = Matrix::from_vec(n_s, n_t, rng::normal_vec(&mut r, n_s * n_t, 1.0)).unwrap();
            let got: f64 = match_experts(&sim).iter().map(|&(s, t)| sim.get(s, t)).sum();
            let best = brute_force(&sim);
            assert!((got - best).abs() < 1e-6, "{got} vs {best}");
        }
    }

    fn brute_force(sim: &Matrix) -> f64 {
        fn go(sim: &Matrix, t: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
            let (rows, cols) = if transpose { (sim.cols(), sim.rows()) } else { (sim.rows(), sim.cols()) };
            if t == rows {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    let v = if transpose { sim.get(c, t) } else { sim.get(t, c) };
                    best = best.max(v + go(sim, t + 1, used, transpose));
                    used[c] = false;
                }
            }
            best
        }
        let transpose = sim.rows() > sim.cols();
        let cols = if transpose { sim.rows() } else { sim.cols() };
        go(sim, 0, &mut vec![false; cols], transpose)
    }
}
