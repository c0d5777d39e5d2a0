//! Parcel-wise evaluation metrics and their nested aggregation.
//!
//! Means are taken over parcels within an episode, then over episodes within a
//! subject, then over subjects. Parcels whose prediction or target is constant
//! are flagged degenerate and left out of every mean.

use serde::{Deserialize, Serialize};

use crate::afire::Sample;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensorcore::Matrix;
use crate::train::{fit, mean_r};

/// Variance below which a vector counts as constant.
pub const CONSTANT_VARIANCE: f64 = 1e-12;

/// A correlation together with the constant-input flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::shape("need at least two observations"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample correlation; a constant argument yields 0 with `degenerate` set.
pub fn pearson_checked(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_pair(a, b)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let n = a.len() as f64;
    if saa / n < CONSTANT_VARIANCE || sbb / n < CONSTANT_VARIANCE {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(pearson_checked(a, b)?.value)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn spearman_checked(a: &[f64], b: &[f64]) -> Result<Correlation> {
    check_pair(a, b)?;
    pearson_checked(&average_ranks(a), &average_ranks(b))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(spearman_checked(a, b)?.value)
}

/// `1 − SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let mt = mean(target);
    let ss_tot: f64 = target.iter().map(|t| (t - mt) * (t - mt)).sum();
    if ss_tot / (target.len() as f64) < CONSTANT_VARIANCE {
        return Err(Error::DegenerateTarget);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Per-parcel scores for one `(subject, episode)`; `None` marks a degenerate parcel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScores {
    pub subject: usize,
    pub episode: String,
    pub n_tr: usize,
    pub r: Vec<Option<f64>>,
    pub rho: Vec<Option<f64>>,
    pub r2: Vec<Option<f64>>,
}

impl EpisodeScores {
    /// Score every column of `pred` against the matching column of `target`.
    pub fn compute(subject: usize, episode: impl Into<String>, pred: &Matrix, target: &Matrix) -> Result<Self> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let (pt, tt) = (pred.transpose(), target.transpose());
        let mut out = Self {
            subject,
            episode: episode.into(),
            n_tr: pred.rows(),
            r: Vec::with_capacity(pt.rows()),
            rho: Vec::with_capacity(pt.rows()),
            r2: Vec::with_capacity(pt.rows()),
        };
        for (p, t) in pt.iter_rows().zip(tt.iter_rows()) {
            let r = pearson_checked(p, t)?;
            let rho = spearman_checked(p, t)?;
            out.r.push((!r.degenerate).then_some(r.value));
            out.rho.push((!rho.degenerate).then_some(rho.value));
            out.r2.push(match r_squared(p, t) {
                Ok(v) => Some(v),
                Err(Error::DegenerateTarget) => None,
                Err(e) => return Err(e),
            });
        }
        Ok(out)
    }

    pub fn parcels(&self) -> usize {
        self.r.len()
    }
}

/// Mean of the present entries, `None` if there are none.
pub fn finite_mean(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    (!present.is_empty()).then(|| mean(&present))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Means {
    pub r: Option<f64>,
    pub rho: Option<f64>,
    pub r2: Option<f64>,
}

impl Means {
    fn of_lists(r: &[Option<f64>], rho: &[Option<f64>], r2: &[Option<f64>]) -> Self {
        Self {
            r: finite_mean(r),
            rho: finite_mean(rho),
            r2: finite_mean(r2),
        }
    }

    fn of_means(items: &[Means]) -> Self {
        let r: Vec<_> = items.iter().map(|m| m.r).collect();
        let rho: Vec<_> = items.iter().map(|m| m.rho).collect();
        let r2: Vec<_> = items.iter().map(|m| m.r2).collect();
        Self::of_lists(&r, &rho, &r2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: String,
    pub means: Means,
    pub degenerate_parcels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: usize,
    pub episodes: Vec<EpisodeSummary>,
    pub means: Means,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub split_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsgEntry {
    pub subject: usize,
    pub isg_r: f64,
    pub within_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsgReport {
    pub subjects: Vec<IsgEntry>,
    pub mean_isg_r: f64,
    pub mean_within_r: f64,
}

impl IsgReport {
    pub fn from_entries(subjects: Vec<IsgEntry>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::EmptyReport);
        }
        let n = subjects.len() as f64;
        let mean_isg_r = subjects.iter().map(|e| e.isg_r).sum::<f64>() / n;
        let mean_within_r = subjects.iter().map(|e| e.within_r).sum::<f64>() / n;
        Ok(Self {
            subjects,
            mean_isg_r,
            mean_within_r,
        })
    }

    pub fn gap(&self) -> f64 {
        self.mean_within_r - self.mean_isg_r
    }
}

/// Per-parcel vectors `[O]`, each entry averaged over the episodes where that
/// parcel is not degenerate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParcelVectors {
    pub r: Vec<Option<f64>>,
    pub rho: Vec<Option<f64>>,
    pub r2: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub global: Means,
    pub subjects: Vec<SubjectSummary>,
    pub parcels: ParcelVectors,
    pub degenerate_parcels: usize,
    pub episodes: Vec<EpisodeScores>,
    pub isg: Option<IsgReport>,
}

fn parcel_column(episodes: &[EpisodeScores], pick: impl Fn(&EpisodeScores) -> &[Option<f64>]) -> Vec<Option<f64>> {
    let o = episodes.first().map_or(0, EpisodeScores::parcels);
    (0..o)
        .map(|j| {
            let col: Vec<Option<f64>> = episodes.iter().map(|e| pick(e)[j]).collect();
            finite_mean(&col)
        })
        .collect()
}

/// Nested means: parcels → episodes → subjects → global.
pub fn aggregate(episodes: Vec<EpisodeScores>, meta: ReportMeta) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::EmptyReport);
    }
    let o = episodes[0].parcels();
    if episodes.iter().any(|e| e.parcels() != o || e.rho.len() != o || e.r2.len() != o) {
        return Err(Error::shape("episodes disagree on the parcel count"));
    }
    let mut subject_ids: Vec<usize> = episodes.iter().map(|e| e.subject).collect();
    subject_ids.sort_unstable();
    subject_ids.dedup();

    let mut degenerate = 0;
    let mut subjects = Vec::with_capacity(subject_ids.len());
    for s in subject_ids {
        let mut eps: Vec<&EpisodeScores> = episodes.iter().filter(|e| e.subject == s).collect();
        eps.sort_by(|a, b| a.episode.cmp(&b.episode));
        let summaries: Vec<EpisodeSummary> = eps
            .iter()
            .map(|e| {
                let d = e.r.iter().filter(|x| x.is_none()).count();
                degenerate += d;
                EpisodeSummary {
                    episode: e.episode.clone(),
                    means: Means::of_lists(&e.r, &e.rho, &e.r2),
                    degenerate_parcels: d,
                }
            })
            .collect();
        let means = Means::of_means(&summaries.iter().map(|e| e.means).collect::<Vec<_>>());
        subjects.push(SubjectSummary {
            subject: s,
            episodes: summaries,
            means,
        });
    }
    let global = Means::of_means(&subjects.iter().map(|s| s.means).collect::<Vec<_>>());
    if global.r.is_none() {
        return Err(Error::EmptyReport);
    }
    let parcels = ParcelVectors {
        r: parcel_column(&episodes, |e| &e.r),
        rho: parcel_column(&episodes, |e| &e.rho),
        r2: parcel_column(&episodes, |e| &e.r2),
    };
    Ok(MetricsReport {
        meta,
        global,
        subjects,
        parcels,
        degenerate_parcels: degenerate,
        episodes,
        isg: None,
    })
}

impl MetricsReport {
    pub fn mean_r(&self) -> f64 {
        self.global.r.unwrap_or(0.0)
    }

    pub fn subject_r(&self, subject: usize) -> Option<f64> {
        self.subjects
            .iter()
            .find(|s| s.subject == subject)
            .and_then(|s| s.means.r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Leave-one-subject-out evaluation. Each subject is held out of a fresh
/// training run and then scored on its validation windows, routed with the
/// mean training embedding and a zero prior bias. `within_r` comes from a
/// single run trained on every subject.
pub fn isg_evaluate(data: &Dataset, cfg: &RunConfig) -> Result<IsgReport> {
    let subjects = data.subject_ids();
    if subjects.len() < 2 {
        return Err(Error::NeedMultipleSubjects(subjects.len()));
    }
    let split = data.split(cfg.win, cfg.stride, cfg.split_ratio, cfg.seed)?;
    let full = fit(cfg, data, &split, None)?;
    let mut entries = Vec::with_capacity(subjects.len());
    for &held in &subjects {
        let val: Vec<Sample> = split.val.iter().filter(|s| s.subject_id == held).cloned().collect();
        let within_r = mean_r(&full.model, &val)?;
        let known: Vec<usize> = subjects.iter().copied().filter(|&s| s != held).collect();
        let mut model = fit(cfg, data, &split, Some(held))?.model;
        model.apply_subject_fallback(held, &known)?;
        entries.push(IsgEntry {
            subject: held,
            isg_r: mean_r(&model, &val)?,
            within_r,
        });
    }
    IsgReport::from_entries(entries)
}
