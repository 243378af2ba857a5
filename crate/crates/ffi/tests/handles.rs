use std::ffi::{CStr, CString};
use std::path::Path;

use idea::checkpoint::Checkpoint;
use idea::config::TrainConfig;
use idea::data::synth::{generate, SynthSpec};
use idea::data::DatasetBundle;
use idea_ffi::*;

fn fixture(dir: &Path) -> (DatasetBundle, Checkpoint) {
    let g = generate(&SynthSpec::toy(60, 3), 4).unwrap();
    let data = DatasetBundle::from_graph(g, "toy", 4).unwrap();
    data.save(&dir.join("data")).unwrap();
    let config = TrainConfig {
        epochs: 5,
        hidden: 8,
        latent: 4,
        domain_hidden: 4,
        num_domains: 3,
        ..TrainConfig::default()
    };
    let state = idea::train::fit(&data, &config).unwrap();
    let ck = Checkpoint::from_state(&state, &config);
    ck.save(&dir.join("ck")).unwrap();
    (data, ck)
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = fixture(dir.path());
    let mut d: *mut IdeaDataset = std::ptr::null_mut();
    let mut m: *mut IdeaModel = std::ptr::null_mut();
    unsafe {
        assert_eq!(idea_dataset_load(cpath(&dir.path().join("data")).as_ptr(), 0, &mut d), IdeaStatus::Ok);
        assert_eq!(idea_model_load(cpath(&dir.path().join("ck")).as_ptr(), &mut m), IdeaStatus::Ok);
        let n = idea_dataset_num_nodes(d);
        let k = idea_dataset_num_classes(d);
        assert_eq!((n, k), (60, 3));
        let mut probs = vec![0.0; n * k];
        assert_eq!(idea_model_predict(m, d, probs.as_mut_ptr(), probs.len()), IdeaStatus::Ok);
        let expect = ck.model.predict_proba(&data.graph);
        assert!(probs.iter().zip(expect.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(idea_model_predict(m, d, probs.as_mut_ptr(), 3), IdeaStatus::BufferSize);

        let l = idea_model_latent_dim(m);
        let mut z = vec![0.0; n * l];
        assert_eq!(idea_model_embed(m, d, z.as_mut_ptr(), z.len()), IdeaStatus::Ok);
        assert_eq!(z, ck.model.embed(&data.graph).iter().copied().collect::<Vec<_>>());

        let mut acc = -1.0;
        assert_eq!(idea_model_accuracy(m, d, IdeaSplit::Test, &mut acc), IdeaStatus::Ok);
        let want = idea::train::model_accuracy(&ck.model, &data.graph, &data.splits.labeled_test(&data.graph)).unwrap();
        assert_eq!(acc, want);

        let clean = CString::new("clean").unwrap();
        assert_eq!(idea_evaluate(m, d, clean.as_ptr(), 1, &mut acc), IdeaStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let bad = CString::new("nettack").unwrap();
        assert_eq!(idea_evaluate(m, d, bad.as_ptr(), 1, &mut acc), IdeaStatus::UnknownScenario);
        let msg = CStr::from_ptr(idea_last_error()).to_str().unwrap();
        assert!(msg.contains("nettack"));

        idea_model_free(m);
        idea_dataset_free(d);
    }
}

#[test]
fn load_errors_map_to_status() {
    let dir = tempfile::tempdir().unwrap();
    let mut m: *mut IdeaModel = std::ptr::null_mut();
    let mut d: *mut IdeaDataset = std::ptr::null_mut();
    unsafe {
        assert_eq!(idea_model_load(cpath(dir.path()).as_ptr(), &mut m), IdeaStatus::MissingFile);
        assert!(m.is_null());
        assert_eq!(idea_dataset_load(cpath(dir.path()).as_ptr(), 0, &mut d), IdeaStatus::MissingFile);
        assert_eq!(idea_model_load(std::ptr::null(), &mut m), IdeaStatus::NullPointer);
        std::fs::write(dir.path().join("model.bin"), b"garbage").unwrap();
        assert_eq!(idea_model_load(cpath(dir.path()).as_ptr(), &mut m), IdeaStatus::Checkpoint);
        idea_model_free(std::ptr::null_mut());
        idea_dataset_free(std::ptr::null_mut());
        assert_eq!(idea_dataset_num_nodes(std::ptr::null()), 0);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(idea_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
