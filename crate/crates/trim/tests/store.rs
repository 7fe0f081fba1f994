use trim::format::{Container, FormatError};
use trim::store;
use trim_core::dataset::{build_pairs, synthesize};
use trim_core::denoiser::{DenoiserConfig, ToyDenoiser};
use trim_core::latent::{sample_noise, GridShape};
use trim_core::render::standard_cameras;
use trim_core::selector::{SelectorModel, Variant};
use trim_core::synth::generate_prompts;

fn small_dataset() -> trim_core::dataset::TripletDataset {
    let grid = GridShape::new(11, 6, 6);
    let field = ToyDenoiser::new(DenoiserConfig {
        steps: 6,
        grid,
        ..DenoiserConfig::default()
    })
    .unwrap();
    let prompts = generate_prompts(3, 21, grid).unwrap();
    synthesize(&prompts, 4, &field, 3, &standard_cameras(16)).unwrap()
}

#[test]
fn prompts_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridShape::new(11, 8, 8);
    let prompts = generate_prompts(5, 4, grid).unwrap();
    let path = dir.path().join("prompts.trim");
    store::save_prompts(&path, &prompts, grid).unwrap();
    let (back, g) = store::load_prompts(&path).unwrap();
    assert_eq!(g, grid);
    assert_eq!(back, prompts);
}

#[test]
fn dataset_and_pairs_roundtrip_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let path = dir.path().join("dataset.trim");
    store::save_dataset(&path, &ds).unwrap();
    assert_eq!(store::load_dataset(&path).unwrap(), ds);

    let set = build_pairs(&ds, 0.7, 5, 1).unwrap();
    let path = dir.path().join("pairs.trim");
    store::save_pairs(&path, &set).unwrap();
    assert_eq!(store::load_pairs(&path).unwrap(), set);
}

#[test]
fn selector_checkpoint_predicts_within_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridShape::new(11, 6, 6);
    let model = SelectorModel::from_variant(Variant::Conv1Fc2Prompt, grid, 16, 3).unwrap();
    let path = dir.path().join("selector.trim");
    store::save_selector(&path, &model).unwrap();
    let back = store::load_selector(&path).unwrap();
    assert_eq!(back.arch(), model.arch());
    let e: Vec<f64> = (0..16).map(|i| 0.1 * i as f64).collect();
    for s in 0..5 {
        let (a, b) = (sample_noise(s, grid), sample_noise(s + 10, grid));
        let p = model.predict_pair(&a, &b, &e).unwrap().probability;
        let q = back.predict_pair(&a, &b, &e).unwrap().probability;
        assert!((p - q).abs() < 1e-5, "{p} vs {q}");
    }
}

#[test]
fn wrong_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridShape::new(11, 4, 4);
    let path = dir.path().join("prompts.trim");
    store::save_prompts(&path, &generate_prompts(2, 1, grid).unwrap(), grid).unwrap();
    assert!(store::load_dataset(&path).is_err());
    assert!(store::load_selector(&path).is_err());
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset();
    let path = dir.path().join("dataset.trim");
    store::save_dataset(&path, &ds).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.trim");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(Container::load(&cut), Err(FormatError::Truncated { .. })));
    assert!(store::load_dataset(&cut).is_err());

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let magic = dir.path().join("magic.trim");
    std::fs::write(&magic, &bad).unwrap();
    assert!(matches!(Container::load(&magic), Err(FormatError::BadMagic(_))));

    assert!(store::load_dataset(dir.path().join("missing.trim")).is_err());
}
