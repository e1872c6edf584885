use nalgebra::DMatrix;

use rsds::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, TrainingState};
use rsds::datagen::{decode_dataset, encode_dataset, Dataset};
use rsds::flow::{FlowArch, Mixing};
use rsds::model::{Model, ModelArch};
use rsds::nnet::Activation;
use rsds::rmsm::RmsmArch;
use rsds::Error;

// One sequence, T = 2, n = m = 1, K = 2, labels (0, 1), metadata "seed=7".
const FIXTURE: &str = "525344530100030100000002000000010000000100000002000000000000000000f03f00000000000000c0000000000000e03f000000000000d03f010000000200000007000000736565643d370a";

fn hex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn fixture_dataset() -> Dataset {
    Dataset {
        x: vec![DMatrix::from_row_slice(2, 1, &[1.0, -2.0])],
        z: Some(vec![DMatrix::from_row_slice(2, 1, &[0.5, 0.25])]),
        s: Some(vec![vec![0, 1]]),
        regimes: 2,
        metadata: vec![("seed".into(), "7".into())],
    }
}

#[test]
fn dataset_matches_byte_fixture() {
    assert_eq!(encode_dataset(&fixture_dataset()).unwrap(), hex(FIXTURE));
    assert_eq!(decode_dataset(&hex(FIXTURE)).unwrap(), fixture_dataset());
}

#[test]
fn dataset_corruptions_are_rejected() {
    let good = hex(FIXTURE);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_dataset(&bad_magic), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(decode_dataset(&good[..good.len() - 3]), Err(Error::Format { .. })));
    let mut label = good.clone();
    // First regime label sits after the 27-byte header and 32 payload bytes.
    label[59] = 9;
    assert!(matches!(decode_dataset(&label), Err(Error::Format { offset: 59, .. })));
    let mut trailing = good;
    trailing.push(0);
    assert!(matches!(decode_dataset(&trailing), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_reencodes_identically() {
    let arch = ModelArch {
        flow: FlowArch { dim: 4, latent_dim: 2, depth: 4, hidden: vec![5], activation: Activation::Gelu, mixing: Mixing::Lu },
        rmsm: RmsmArch { regimes: 3, latent_dim: 2, recurrent: true, switching_hidden: vec![3], ..RmsmArch::default() },
    };
    let ck = Checkpoint {
        model: Model::random(&arch, 11).unwrap(),
        state: TrainingState { step: 42, epoch: 3, seed: 11, adam: None },
    };
    let bytes = encode_checkpoint(&ck).unwrap();
    assert_eq!(&bytes[..4], b"RSDC");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back.model, ck.model);
    assert_eq!(back.state.step, 42);
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}
