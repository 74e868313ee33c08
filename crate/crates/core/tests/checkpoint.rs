use embdiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
use embdiff::denoiser::{DenoiserParameters, Model, TrainConfig};
use embdiff::Error;
use ndarray::Array2;

fn sample() -> Checkpoint {
    let config = TrainConfig {
        vocab: 16,
        dim: 4,
        d_model: 8,
        n_max: 6,
        min_len: 2,
        max_len: 5,
        factor: 2.5,
        ..TrainConfig::default()
    };
    let params = DenoiserParameters::init(config.shape(), config.sigma_e, 9).unwrap();
    let schedule = config.build_schedule(&params).unwrap();
    Checkpoint { config, model: Model::new(params, schedule), step: 42, lineage: vec![9, 3] }
}

#[test]
fn round_trip_is_bit_exact() {
    let ck = sample();
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in ck.model.params.tensors().into_iter().zip(back.model.params.tensors()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn denoise_after_reload_is_identical() {
    let ck = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let z = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
    let a = ck.model.denoise(z.view(), 17, &[5, 6, 7], None).unwrap();
    let b = back.model.denoise(z.view(), 17, &[5, 6, 7], None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncation_names_a_section() {
    let bytes = sample().to_bytes();
    for cut in [4, 14, 40, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint { section, reason }) => {
                assert!(!section.is_empty());
                assert!(reason.contains("truncated"), "{reason}");
            }
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
}

#[test]
fn newer_version_is_rejected() {
    let mut bytes = sample().to_bytes();
    bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(
        matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version { found, expected }) if found == VERSION + 1 && expected == VERSION)
    );
}

#[test]
fn bad_magic_and_trailing_bytes_are_rejected() {
    let mut bytes = sample().to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { section, .. }) if section == "header"));
    let mut bytes = sample().to_bytes();
    bytes.push(0);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint { section, .. }) if section == "trailer"));
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let mut ck = sample();
    let bytes = ck.to_bytes();
    // claim a wider model in the config section
    ck.config.d_model = 10;
    let text = ck.config.to_key_values().to_string();
    let old = sample().config.to_key_values().to_string();
    let mut patched = Vec::new();
    let pos = bytes.windows(old.len()).position(|w| w == old.as_bytes()).unwrap();
    patched.extend_from_slice(&bytes[..pos - 8]);
    patched.extend_from_slice(&(text.len() as u64).to_le_bytes());
    patched.extend_from_slice(text.as_bytes());
    patched.extend_from_slice(&bytes[pos + old.len()..]);
    match Checkpoint::from_bytes(&patched) {
        Err(Error::Checkpoint { section, .. }) => assert!(section.starts_with("param/"), "{section}"),
        other => panic!("{other:?}"),
    }
}
