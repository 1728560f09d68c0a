use std::collections::BTreeMap;
use std::path::Path;

use cisunet_core::checkpoint::{Checkpoint, OptimizerState, RngState, FORMAT_VERSION, MAGIC};
use cisunet_core::tensor::Tensor;
use cisunet_core::{preset, NetworkParameters, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample() -> Checkpoint {
    let mut config = RunConfig::default();
    config.model = preset("tiny").unwrap();
    config.model.stage_channels = [4, 4, 8, 8];
    config.model.stage_depths = [1, 1, 1, 1];
    config.train.learning_rate = 2e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = NetworkParameters::<f32>::init(&config.model, 3);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5f32..0.5);
        }
    }
    let moments = |rng: &mut ChaCha8Rng| -> BTreeMap<String, Tensor<f32>> {
        ["head.weight", "stem.conv.weight"]
            .iter()
            .map(|&n| {
                let shape = params.get(n).unwrap().shape().to_vec();
                (n.to_string(), Tensor::from_fn(shape, |_| rng.random()))
            })
            .collect()
    };
    let optimizer = OptimizerState {
        step: 17,
        m: moments(&mut rng),
        v: moments(&mut rng),
    };
    Checkpoint {
        config,
        iteration: 17,
        params,
        optimizer: Some(optimizer),
        rng: Some(RngState {
            seed: [9; 32],
            stream: 4,
            word_pos: "123456789".into(),
        }),
    }
}

fn assert_same(a: &Checkpoint, b: &Checkpoint) {
    assert_eq!(a.config, b.config);
    assert_eq!(a.iteration, b.iteration);
    assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x == y));
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.rng, b.rng);
}

#[test]
fn file_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = sample();
    ckpt.save(&path).unwrap();
    assert!(!dir.path().join("model.ckpt.tmp").exists());
    assert_same(&ckpt, &Checkpoint::load(&path).unwrap());
}

#[test]
fn weights_only_checkpoint_round_trips() {
    let mut ckpt = sample();
    ckpt.optimizer = None;
    ckpt.rng = None;
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), Path::new("w.ckpt")).unwrap();
    assert_same(&ckpt, &back);
}

#[test]
fn layout_starts_with_magic_version_and_header() {
    let bytes = sample().to_bytes().unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(
        u32::from_le_bytes(bytes[8..12].try_into().unwrap()),
        FORMAT_VERSION
    );
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + len]).unwrap();
    assert_eq!(header["iteration"], 17);
    let ckpt = sample();
    let floats = ckpt.params.total_count()
        + 2 * (ckpt.params.get("head.weight").unwrap().numel()
            + ckpt.params.get("stem.conv.weight").unwrap().numel());
    assert_eq!(bytes.len(), 20 + len + 4 * floats);
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = sample().to_bytes().unwrap();
    let path = Path::new("bad.ckpt");
    let message = |b: &[u8]| {
        Checkpoint::from_bytes(b, path)
            .expect_err("should fail")
            .to_string()
    };

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    assert!(message(&wrong_magic).contains("magic"));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(message(&future).contains("version"));

    for cut in [4, 15, 40, bytes.len() - 1] {
        assert!(message(&bytes[..cut]).contains("truncated"), "cut at {cut}");
    }

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0; 4]);
    assert!(message(&trailing).contains("trailing"));

    assert!(Checkpoint::load("/nonexistent/dir/x.ckpt").is_err());
}
