use lrdnet::checkpoint::{load_checkpoint, parse, save_checkpoint, to_bytes, FORMAT_VERSION, MAGIC};
use lrdnet::synth::{generate, SyntheticDatasetSpec};
use lrdnet::train::{train, TrainState};
use lrdnet::{Error, Family, LrdNet, ModelConfig, Tensor};

fn trained() -> (TrainState, Vec<Tensor<f32>>) {
    let mut cfg = ModelConfig::micro();
    cfg.batch_size = 8;
    let data = generate(&SyntheticDatasetSpec {
        seed: 8,
        n_real: 8,
        n_fake_per_family: 4,
        families: vec![Family::FeProxy, Family::T2iProxy],
        image_size: 32,
    })
    .unwrap();
    let mut state = TrainState::new(LrdNet::new(&cfg).unwrap());
    train(&mut state, &data, &[], 2, |_| {}).unwrap();
    (state, data.into_iter().map(|d| d.pixels).collect())
}

fn bits(state: &TrainState, images: &[Tensor<f32>]) -> Vec<u64> {
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    state
        .model
        .predict(&refs)
        .unwrap()
        .into_iter()
        .flat_map(|p| std::iter::once(p.p_fake).chain(p.z))
        .map(f64::to_bits)
        .collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let (state, images) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &state).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&state, &images), bits(&back, &images));
    assert_eq!(back.model.center, state.model.center);
    assert_eq!(back.optimizer, state.optimizer);
    assert_eq!(back.step, state.step);
    assert_eq!(back.rng, state.rng);
    for (a, b) in state.model.store.buffers().iter().zip(back.model.store.buffers()) {
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    // Saving the restored state reproduces the file byte for byte.
    assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_payload_fails_its_checksum() {
    let (state, _) = trained();
    let bytes = to_bytes(&state).unwrap();
    let mut bad = bytes.clone();
    // Payload of the classifier weight: name, dtype, rank, two dims, length.
    let name = b"param/classifier.weight";
    let start = bytes.windows(name.len()).position(|w| w == name).unwrap();
    let at = start + name.len() + 1 + 1 + 2 * 8 + 8 + 5;
    bad[at] ^= 0x10;
    match parse(&bad) {
        Err(Error::Checksum { name }) => assert_eq!(name, "param/classifier.weight"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(parse(&bytes[..bytes.len() - 7]).is_err());
    let mut wrong = bytes.clone();
    wrong[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match parse(&wrong) {
        Err(Error::VersionMismatch { found, expected }) => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("{:?}", other.map(|_| ())),
    }
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(parse(&magic).is_err());
}

#[test]
fn mismatched_guidance_width_names_the_tensor() {
    let (state, _) = trained();
    let raw = parse(&to_bytes(&state).unwrap()).unwrap();
    let mut cfg = raw.config().clone();
    cfg.d_g += 4;
    match raw.restore_with(&cfg) {
        Err(Error::TensorShape { name, expected, found }) => {
            assert!(name.starts_with("param/mswgm.channel"), "{name}");
            assert_ne!(expected, found);
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
}
