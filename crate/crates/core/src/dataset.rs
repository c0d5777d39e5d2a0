//! In-memory datasets and their on-disk layout.
//!
//! A dataset directory holds `dataset.json` (the index), one AFT feature file
//! and one AFT response file per `(subject, episode)`, and, for planted data,
//! `teacher.json` plus `teacher.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::afire::{bin_to_tr, make_windows, split_train_val, FeatureSequence, ResponseSequence, Sample, TokenSequence};
use crate::aft::{AftFile, Dtype};
use crate::error::{Error, Result};
use crate::mind::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::synthgen::{PlantedDataset, TeacherManifest};
use crate::tensorcore::{rng, Matrix};

pub const INDEX_FILE: &str = "dataset.json";
pub const TEACHER_MANIFEST: &str = "teacher.json";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
const FORMAT: &str = "mind-dataset";
const SPLIT_STREAM: u64 = 0x5B17;

/// TR-aligned inputs and responses for one `(subject, episode)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub subject: usize,
    pub episode_id: String,
    pub inputs: Matrix,
    pub responses: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: usize,
    pub tr_seconds: f64,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub subject: usize,
    pub episode: String,
    pub features: String,
    pub responses: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub subjects: usize,
    pub tr_seconds: f64,
    pub episodes: Vec<IndexEntry>,
}

/// Train/validation windows plus a stable identifier for the split.
#[derive(Debug, Clone)]
pub struct Split {
    pub id: String,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn from_planted(ds: &PlantedDataset) -> Self {
        Self {
            subjects: ds.spec.subjects,
            tr_seconds: ds.spec.tr_seconds,
            episodes: ds
                .episodes
                .iter()
                .map(|e| Episode {
                    subject: e.subject,
                    episode_id: e.episode_id.clone(),
                    inputs: e.tokens.clone(),
                    responses: e.responses.clone(),
                })
                .collect(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.inputs.cols())
    }

    pub fn o(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.responses.cols())
    }

    pub fn subject_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.episodes.iter().map(|e| e.subject).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Fail with `ConfigMismatch` unless the model can consume this data.
    pub fn check_model(&self, m: &ModelConfig) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::EmptySequence);
        }
        for e in &self.episodes {
            if e.inputs.cols() != m.d_in || e.responses.cols() != m.o {
                return Err(Error::ConfigMismatch(format!(
                    "episode {}/{} has {} inputs and {} parcels, model expects {} and {}",
                    e.subject,
                    e.episode_id,
                    e.inputs.cols(),
                    e.responses.cols(),
                    m.d_in,
                    m.o
                )));
            }
            if e.subject >= m.s {
                return Err(Error::ConfigMismatch(format!(
                    "subject {} but the model has {} subjects",
                    e.subject, m.s
                )));
            }
        }
        Ok(())
    }

    pub fn windows(&self, win: usize, stride: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for e in &self.episodes {
            let tokens = TokenSequence {
                episode_id: e.episode_id.clone(),
                subject_id: e.subject,
                tokens: e.inputs.clone(),
                tr_seconds: self.tr_seconds,
            };
            let resp = ResponseSequence {
                episode_id: e.episode_id.clone(),
                subject_id: e.subject,
                responses: e.responses.clone(),
            };
            out.extend(make_windows(&tokens, &resp, win, stride)?);
        }
        Ok(out)
    }

    /// Stratified window split, reproducible from `seed`.
    pub fn split(&self, win: usize, stride: usize, ratio: f64, seed: u64) -> Result<Split> {
        let mut r = rng::seeded(rng::derive_seed(seed, SPLIT_STREAM));
        let (train, val) = split_train_val(self.windows(win, stride)?, ratio, &mut r)?;
        Ok(Split {
            id: format!("seed{seed}-ratio{ratio}-win{win}-stride{stride}"),
            train,
            val,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<DatasetIndex> {
        fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("responses")).map_err(|e| Error::io(dir, e))?;
        let rate = 1.0 / self.tr_seconds;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for e in &self.episodes {
            let name = format!("s{}_{}.aft", e.subject, e.episode_id);
            let entry = IndexEntry {
                subject: e.subject,
                episode: e.episode_id.clone(),
                features: format!("features/{name}"),
                responses: format!("responses/{name}"),
            };
            for (rel, data) in [(&entry.features, &e.inputs), (&entry.responses, &e.responses)] {
                AftFile {
                    dtype: Dtype::F64,
                    rate_hz: rate,
                    subject_id: subject_u32(e.subject)?,
                    episode_id: e.episode_id.clone(),
                    data: data.clone(),
                }
                .save(&dir.join(rel))?;
            }
            entries.push(entry);
        }
        let index = DatasetIndex {
            format: FORMAT.into(),
            version: 1,
            subjects: self.subjects,
            tr_seconds: self.tr_seconds,
            episodes: entries,
        };
        write_json(&dir.join(INDEX_FILE), &index)?;
        Ok(index)
    }

    /// Read a dataset directory. Features recorded at a rate other than one
    /// frame per TR are binned onto the TR grid of the responses.
    pub fn load(dir: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
        if index.format != FORMAT {
            return Err(Error::Format {
                what: "dataset index",
                detail: format!("unexpected format tag {}", index.format),
            });
        }
        let mut episodes = Vec::with_capacity(index.episodes.len());
        for entry in &index.episodes {
            let feats = AftFile::load(&dir.join(&entry.features))?;
            let resp = AftFile::load(&dir.join(&entry.responses))?;
            let n_tr = resp.data.rows();
            let inputs = if (feats.rate_hz * index.tr_seconds - 1.0).abs() < 1e-9 && feats.data.rows() == n_tr {
                feats.data
            } else {
                bin_to_tr(
                    &FeatureSequence {
                        episode_id: entry.episode.clone(),
                        subject_id: entry.subject,
                        rate_hz: feats.rate_hz,
                        frames: feats.data,
                    },
                    index.tr_seconds,
                    n_tr,
                )?
            };
            episodes.push(Episode {
                subject: entry.subject,
                episode_id: entry.episode.clone(),
                inputs,
                responses: resp.data,
            });
        }
        Ok(Self {
            subjects: index.subjects,
            tr_seconds: index.tr_seconds,
            episodes,
        })
    }
}

fn subject_u32(s: usize) -> Result<u32> {
    u32::try_from(s).map_err(|_| Error::InvalidConfig(format!("subject id {s} too large")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write a planted dataset with its teacher.
pub fn save_planted(ds: &PlantedDataset, dir: &Path) -> Result<Vec<PathBuf>> {
    Dataset::from_planted(ds).save(dir)?;
    write_json(&dir.join(TEACHER_MANIFEST), &ds.teacher.manifest())?;
    let spec = serde_json::to_value(&ds.spec)?;
    save_checkpoint(&ds.teacher.model, Some(&spec), &dir.join(TEACHER_CHECKPOINT))?;
    Ok(vec![
        dir.join(INDEX_FILE),
        dir.join(TEACHER_MANIFEST),
        dir.join(TEACHER_CHECKPOINT),
    ])
}

/// Teacher manifest and model of a planted dataset directory, if present.
pub fn load_teacher(dir: &Path) -> Result<Option<(TeacherManifest, Model)>> {
    let manifest_path = dir.join(TEACHER_MANIFEST);
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: TeacherManifest = read_json(&manifest_path)?;
    let (model, _) = load_checkpoint(&dir.join(TEACHER_CHECKPOINT))?;
    Ok(Some((manifest, model)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, Heterogeneity, SynthSpec};

    fn planted() -> PlantedDataset {
        generate(&SynthSpec {
            d: 4,
            o: 3,
            experts: 2,
            hidden: 4,
            subjects: 2,
            episodes: 2,
            trs: 260,
            mode: Heterogeneity::Disjoint,
            ceiling: Some(0.7),
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn save_and_load_round_trip() {
        let ds = planted();
        let dir = tempfile::tempdir().unwrap();
        save_planted(&ds, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, Dataset::from_planted(&ds));
        let (manifest, teacher) = load_teacher(dir.path()).unwrap().unwrap();
        assert_eq!(manifest.mixtures, ds.teacher.mixtures);
        for id in teacher.store.ids() {
            assert_eq!(teacher.store.value(id), ds.teacher.model.store.value(id));
        }
    }

    #[test]
    fn faster_features_are_binned() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset {
            subjects: 1,
            tr_seconds: 1.0,
            episodes: vec![Episode {
                subject: 0,
                episode_id: "a".into(),
                inputs: Matrix::zeros(3, 1),
                responses: Matrix::zeros(3, 2),
            }],
        };
        data.save(dir.path()).unwrap();
        AftFile {
            dtype: Dtype::F32,
            rate_hz: 2.0,
            subject_id: 0,
            episode_id: "a".into(),
            data: Matrix::from_vec(6, 1, vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0]).unwrap(),
        }
        .save(&dir.path().join("features/s0_a.aft"))
        .unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.episodes[0].inputs.as_slice(), &[2.0, 6.0, 10.0]);
    }

    #[test]
    fn split_is_stratified_and_reproducible() {
        let data = Dataset::from_planted(&planted());
        let a = data.split(100, 50, 0.9, 3).unwrap();
        let b = data.split(100, 50, 0.9, 3).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val.len(), 4);
        assert_eq!(a.train.len(), 4);
        let mut bad = ModelConfig {
            d_in: 4,
            d: 4,
            h: 4,
            o: 3,
            e: 2,
            k: 1,
            s: 2,
            router: crate::sadgate::RouterMode::Both,
            afire: false,
            afire_hidden: 1,
            w_max: 100,
        };
        data.check_model(&bad).unwrap();
        bad.o = 4;
        assert!(matches!(data.check_model(&bad), Err(Error::ConfigMismatch(_))));
    }
}
