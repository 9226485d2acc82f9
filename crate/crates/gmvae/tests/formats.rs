mod common;

use std::fs;
use std::path::Path;

use gmvae::checkpoint::{self, Checkpoint};
use gmvae::experiment;
use gmvae::store::{self, CorpusManifest};
use gmvae::{specfile, AppError};
use gmvae_core::corpus::build_corpus;
use gmvae_core::dsp::Spectrogram;
use gmvae_core::gmvae::{Gmvae, ModelMode};
use gmvae_core::nn::seeded;
use proptest::prelude::*;

fn trained(mode: ModelMode) -> (tempfile::TempDir, Checkpoint) {
    let dir = tempfile::tempdir().unwrap();
    let run = common::small_run(dir.path());
    let corpus = build_corpus(&run.corpus).unwrap();
    let t = experiment::train(&run, &corpus, 50.0, mode, None, |_| {}).unwrap();
    (dir, t.checkpoint)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for mode in [ModelMode::Gmvae, ModelMode::VaeBaseline] {
        let (dir, ck) = trained(mode);
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&path, &ck).unwrap();
        let back = checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(checkpoint::encode(&back), fs::read(&path).unwrap());
        assert!(!back.model.optimizer.first.is_empty());
    }
}

#[test]
fn fresh_model_without_moments_round_trips() {
    let run = common::small_run(Path::new("unused"));
    let model = Gmvae::<f32>::new(run.model.clone(), 1e-3, &mut seeded(4)).unwrap();
    let ck = Checkpoint { model, n_percent: 25.0, epochs_completed: 0 };
    assert_eq!(checkpoint::decode(&checkpoint::encode(&ck)).unwrap(), ck);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (dir, ck) = trained(ModelMode::Gmvae);
    let bytes = checkpoint::encode(&ck);
    for cut in [0, 5, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "accepted a file cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::decode(&extra).is_err());
    let mut wrong_version = bytes.clone();
    wrong_version[7] = 9;
    assert!(checkpoint::decode(&wrong_version).is_err());

    let path = dir.path().join("cut.ckpt");
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(AppError::Format { .. })));
    assert!(matches!(checkpoint::load(&dir.path().join("absent.ckpt")), Err(AppError::Missing(_))));
}

#[test]
fn mode_mismatch_is_a_request_error() {
    let (dir, ck) = trained(ModelMode::VaeBaseline);
    let path = dir.path().join("vae.ckpt");
    checkpoint::save(&path, &ck).unwrap();
    let err = checkpoint::load_expecting(&path, ModelMode::Gmvae).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(checkpoint::load_expecting(&path, ModelMode::VaeBaseline).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spec1_round_trip(
        (frames, bands, values) in (1usize..20, 1usize..20)
            .prop_flat_map(|(f, b)| (Just(f), Just(b), prop::collection::vec(-1.0f32..=1.0, f * b))),
    ) {
        let s = Spectrogram::new(frames, bands, values, true).unwrap();
        let bytes = specfile::encode(&s);
        let back = specfile::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(specfile::encode(&back), bytes);
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn corpus_store_round_trips_and_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::small_run(dir.path());
    let corpus = build_corpus(&run.corpus).unwrap();
    let manifest = store::save_corpus(&dir.path().join("a"), &corpus).unwrap();

    let text = fs::read_to_string(dir.path().join("a").join(store::MANIFEST)).unwrap();
    let parsed = CorpusManifest::from_json(&text, Path::new("manifest.json")).unwrap();
    assert_eq!(parsed, manifest);
    assert_eq!(parsed.to_json(), text);

    let loaded = store::load_corpus(&dir.path().join("a")).unwrap();
    assert_eq!(loaded, corpus);

    let again = build_corpus(&run.corpus).unwrap();
    store::save_corpus(&dir.path().join("b"), &again).unwrap();
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn unknown_manifest_format_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::small_run(dir.path());
    let corpus = build_corpus(&run.corpus).unwrap();
    let m = CorpusManifest { format: "other/9".into(), ..CorpusManifest::describe(&corpus) };
    assert!(matches!(
        CorpusManifest::from_json(&m.to_json(), Path::new("m.json")),
        Err(AppError::Format { .. })
    ));
}

#[test]
fn epoch_checkpoints_rotate() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = common::small_run(dir.path());
    run.train.epochs = 3;
    run.paths.keep_checkpoints = 1;
    let corpus = build_corpus(&run.corpus).unwrap();
    let out = dir.path().join("m");
    let t = experiment::train(&run, &corpus, 100.0, ModelMode::Gmvae, Some(&out), |_| {}).unwrap();
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["epoch_003.ckpt", "final.ckpt", "losses.csv"]);
    assert_eq!(checkpoint::load(&out.join("epoch_003.ckpt")).unwrap(), t.checkpoint);

    run.train.epochs = 0;
    let init = dir.path().join("init");
    let t = experiment::train(&run, &corpus, 25.0, ModelMode::Gmvae, Some(&init), |_| {}).unwrap();
    let back = checkpoint::load(&init.join("final.ckpt")).unwrap();
    assert_eq!((back.n_percent, back.epochs_completed), (25.0, 0));
    assert_eq!(back, t.checkpoint);
}
