use std::collections::HashSet;
use std::io::Cursor;

use mind_core::aft::{AftFile, Dtype};
use mind_core::dataset::{load_teacher, save_planted, Dataset};
use mind_core::mind::{read_checkpoint, write_checkpoint, Model, ModelConfig};
use mind_core::sadgate::RouterMode;
use mind_core::synthgen::{generate, Heterogeneity, SynthSpec};
use mind_core::tensorcore::{rng, Matrix};
use mind_core::tensorcore::ParamStore;
use proptest::prelude::*;

fn values(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
    store.ids().map(|id| (store.name(id).to_string(), store.value(id).as_slice().to_vec())).collect()
}

fn small_spec(mode: Heterogeneity, seed: u64) -> SynthSpec {
    SynthSpec {
        d: 4,
        o: 3,
        experts: 3,
        hidden: 5,
        subjects: 2,
        episodes: 2,
        trs: 240,
        mode,
        seed,
        ..SynthSpec::default()
    }
}

fn model_config(afire: bool, e: usize, k: usize, router: RouterMode) -> ModelConfig {
    ModelConfig {
        d_in: if afire { 3 } else { 4 },
        d: 4,
        h: 5,
        o: 2,
        e,
        k,
        s: 3,
        router,
        afire,
        afire_hidden: 4,
        w_max: 16,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aft_f64_round_trip_is_bit_exact(rows in 0usize..12, cols in 1usize..6, seed in any::<u64>(), id in "[a-z0-9_]{0,12}") {
        let mut r = rng::seeded(seed);
        let data = Matrix::from_vec(rows, cols, rng::normal_vec(&mut r, rows * cols, 3.0)).unwrap();
        let file = AftFile { dtype: Dtype::F64, rate_hz: 2.0, subject_id: 3, episode_id: id, data };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        prop_assert_eq!(AftFile::read_from(Cursor::new(&buf)).unwrap(), file);
    }

    #[test]
    fn aft_truncation_is_an_error(cut in 1usize..40, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let data = Matrix::from_vec(3, 2, rng::normal_vec(&mut r, 6, 1.0)).unwrap();
        let file = AftFile { dtype: Dtype::F32, rate_hz: 1.0, subject_id: 0, episode_id: "ep".into(), data };
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assert!(AftFile::read_from(Cursor::new(&buf[..keep])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions(
        seed in any::<u64>(),
        afire in any::<bool>(),
        e in 2usize..5,
        k_frac in 0.0f64..1.0,
        mode in prop_oneof![Just(RouterMode::Both), Just(RouterMode::Token), Just(RouterMode::Prior)],
    ) {
        let k = 1 + ((e - 1) as f64 * k_frac) as usize;
        let model = Model::new(model_config(afire, e, k, mode), seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, None, &mut buf).unwrap();
        let (back, _) = read_checkpoint(Cursor::new(&buf)).unwrap();
        let mut r = rng::seeded(seed ^ 1);
        let d_in = model.config.d_in;
        let x = Matrix::from_vec(6, d_in, rng::normal_vec(&mut r, 6 * d_in, 1.0)).unwrap();
        for s in 0..3 {
            let a = model.predict(&x, s).unwrap();
            let b = back.predict(&x, s).unwrap();
            prop_assert_eq!(a.as_slice(), b.as_slice());
        }
        let mut again = Vec::new();
        write_checkpoint(&back, None, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn truncated_checkpoint_is_rejected(seed in any::<u64>(), keep_frac in 0.0f64..1.0) {
        let model = Model::new(model_config(true, 3, 2, RouterMode::Both), seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, None, &mut buf).unwrap();
        let keep = ((buf.len() - 1) as f64 * keep_frac) as usize;
        prop_assert!(read_checkpoint(Cursor::new(&buf[..keep])).is_err());
        buf.push(0);
        prop_assert!(read_checkpoint(Cursor::new(&buf)).is_err());
    }
}

#[test]
fn planted_dataset_survives_disk() {
    for mode in [Heterogeneity::Shared, Heterogeneity::Disjoint, Heterogeneity::Mixed, Heterogeneity::TokenModulated] {
        let ds = generate(&small_spec(mode, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_planted(&ds, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, Dataset::from_planted(&ds));
        let (manifest, teacher) = load_teacher(dir.path()).unwrap().unwrap();
        assert_eq!(manifest, ds.teacher.manifest());
        assert_eq!(values(&teacher.store), values(&ds.teacher.model.store));
    }
}

#[test]
fn split_is_seeded_disjoint_and_covers_every_window() {
    let data = Dataset::from_planted(&generate(&small_spec(Heterogeneity::Mixed, 2)).unwrap());
    let all = data.windows(40, 20).unwrap();
    let a = data.split(40, 20, 0.9, 7).unwrap();
    let b = data.split(40, 20, 0.9, 7).unwrap();
    let c = data.split(40, 20, 0.9, 8).unwrap();
    assert_eq!(a.id, b.id);
    assert_eq!(a.train, b.train);
    assert_ne!(a.id, c.id);
    let key = |s: &mind_core::afire::Sample| (s.subject_id, s.episode_id.clone(), s.start);
    let train: HashSet<_> = a.train.iter().map(key).collect();
    let val: HashSet<_> = a.val.iter().map(key).collect();
    assert!(train.is_disjoint(&val));
    assert_eq!(train.len() + val.len(), all.len());
    for s in data.subject_ids() {
        assert!(a.val.iter().any(|w| w.subject_id == s), "subject {s} has no validation windows");
    }
}
