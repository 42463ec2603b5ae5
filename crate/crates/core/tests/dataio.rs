mod common;

use common::*;
use proptest::prelude::*;
use swv::dataio::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainingMeta};
use swv::dataio::config::{RunConfig, CONFIG_KEYS};
use swv::dataio::idx::{decode_mnist, encode_mnist, parse_images, parse_labels, IdxError};
use swv::dataio::reports::{csv_bytes, ReportSet};
use swv::dataio::synth::two_moons;
use swv::dataio::{Dataset, Split};
use swv::nngraph::{LossKind, Network, Tensor};
use swv::Error;

fn meta() -> TrainingMeta {
    TrainingMeta {
        dataset: "two-moons".into(),
        seed: 3,
        epochs: 7,
        lr: 0.1,
        quant_aware: true,
        accuracy: Some(0.97),
        batch_norm_folded: false,
    }
}

fn tiny_images() -> Dataset {
    let inputs = (0..5)
        .map(|i| Tensor::new(vec![1, 2, 3], (0..6).map(|k| ((i * 6 + k) * 9 % 256) as f64 / 255.0).collect()).unwrap())
        .collect();
    Dataset::new(inputs, vec![0, 1, 2, 3, 9], 10, Split::Train).unwrap()
}

#[test]
fn checkpoint_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.uswm");
    let net = conv_avg_affine(4);
    save_checkpoint(&net, &meta(), &path).unwrap();
    let (back, m) = load_checkpoint(&path).unwrap();
    assert_eq!(m, meta());
    assert_eq!(back.params(), net.params());
    assert_eq!(encode_checkpoint(&back, &m).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn every_magic_mutation_is_rejected() {
    let (images, labels) = encode_mnist(&tiny_images()).unwrap();
    for pos in 0..4 {
        for v in 0..=255u8 {
            if v == images[pos] {
                continue;
            }
            let mut m = images.clone();
            m[pos] = v;
            assert!(matches!(parse_images(&m), Err(IdxError::BadMagic { .. })), "images byte {pos} = {v}");
            let mut m = labels.clone();
            m[pos] = if v == labels[pos] { v ^ 1 } else { v };
            assert!(matches!(parse_labels(&m), Err(IdxError::BadMagic { .. })), "labels byte {pos} = {v}");
        }
    }
    // Image and label magics are not interchangeable.
    assert!(parse_images(&labels).is_err());
    assert!(parse_labels(&images).is_err());
}

#[test]
fn idx_round_trip_and_truncation() {
    let data = tiny_images();
    let (images, labels) = encode_mnist(&data).unwrap();
    let back = decode_mnist(&images, &labels, Split::Train).unwrap();
    assert_eq!(back.labels, data.labels);
    for (a, b) in back.inputs.iter().zip(&data.inputs) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    for cut in [0, 3, 15, images.len() - 1] {
        assert!(decode_mnist(&images[..cut], &labels, Split::Train).is_err());
    }
}

#[test]
fn documented_defaults_parse_to_the_built_in_defaults() {
    let def = RunConfig::default();
    assert_eq!(RunConfig::from_toml("", &[]).unwrap(), def);
    for (key, value, _) in CONFIG_KEYS {
        if *value == "unset" {
            continue;
        }
        let cfg = RunConfig::from_toml(&format!("{key} = {value}"), &[]).unwrap();
        assert_eq!(cfg, def, "key {key}");
    }
}

#[test]
fn reference_defaults() {
    let d = RunConfig::default();
    assert_eq!((d.quant_bits, d.device_bits), (4, 2));
    assert_eq!(d.tolerance, 0.06);
    assert_eq!(d.granularity, 0.05);
    assert_eq!(d.runs, 200);
    assert_eq!((d.insitu_lr, d.insitu_batch), (0.01, 64));
    assert_eq!(d.samples_per_weight, 100);
}

#[test]
fn overrides_win_and_unknown_keys_fail() {
    let cfg = RunConfig::from_toml("sigma = 0.2\nruns = 5", &["sigma=0.3".into(), "devices=[\"R4\", \"F2\"]".into()]).unwrap();
    assert_eq!((cfg.sigma, cfg.runs), (0.3, 5));
    assert_eq!(cfg.devices, vec!["R4", "F2"]);
    assert!(RunConfig::from_toml("sigmaa = 0.2", &[]).is_err());
    assert!(RunConfig::from_toml("", &["granularity=0".into()]).is_err());
    assert!(RunConfig::from_toml("", &["no-equals".into()]).is_err());
}

#[test]
fn two_moons_is_deterministic() {
    let a = two_moons(100, 0.1, 5, Split::Train).unwrap();
    let b = two_moons(100, 0.1, 5, Split::Train).unwrap();
    let c = two_moons(100, 0.1, 6, Split::Train).unwrap();
    assert_eq!(a.labels, b.labels);
    assert!(a.inputs.iter().zip(&b.inputs).all(|(x, y)| x.data() == y.data()));
    assert!(a.inputs.iter().zip(&c.inputs).any(|(x, y)| x.data() != y.data()));
}

#[test]
fn report_set_writes_manifest_with_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ReportSet::new(dir.path(), "test", "abc", vec![1]);
    r.add("a.csv", csv_bytes(&["x", "y"], &[vec!["1".into(), "2".into()]]).unwrap());
    let m = r.finish().unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x,y\n1,2\n");
    assert!(dir.path().join("manifest.json").exists());
    assert_eq!(m.files.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..10_000, kind in 0usize..4, widths in prop::collection::vec(1usize..7, 2..5), bits in 2u32..9) {
        let net = match kind {
            0 => Network::mlp(&widths, LossKind::SoftmaxCrossEntropy, bits, seed).unwrap(),
            1 => conv_pool_dense(seed),
            2 => conv_avg_affine(seed),
            _ => residual_mlp(seed, LossKind::L2),
        };
        let bytes = encode_checkpoint(&net, &meta()).unwrap();
        let (back, m) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&m, &meta());
        prop_assert_eq!(back.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>(), net.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.scales(), net.scales());
        prop_assert_eq!(back.quant_bits(), net.quant_bits());
        prop_assert_eq!(encode_checkpoint(&back, &m).unwrap(), bytes);
    }

    #[test]
    fn corrupted_checkpoints_never_load_silently(seed in 0u64..1000, pos in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let net = mlp_352(seed);
        let mut bytes = encode_checkpoint(&net, &meta()).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= flip;
        prop_assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }
}
