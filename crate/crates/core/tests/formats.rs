mod common;

use mgt_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, BLOB_FILE, MANIFEST_FILE};
use mgt_core::data::{generate_dataset, Dataset, SceneSpec};
use mgt_core::graph::Graph;
use mgt_core::mask::GraphMask;
use mgt_core::model::{ModelConfig, MultimodalEncoder};
use mgt_core::optim::AdamState;
use mgt_core::tensor::{decode_mgtn, encode_mgtn, encode_mgtn_as, read_mgtn, write_mgtn, DType};
use mgt_core::text::{text_graph, Lexicon};
use mgt_core::Error;

use common::*;

#[test]
fn mgtn_file_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let t = random_tensor(&[3, 4, 2], 1.0, &mut rng(1));
    let p = dir.path().join("t.mgtn");
    write_mgtn(&p, &t).unwrap();
    let first = std::fs::read(&p).unwrap();
    let back = read_mgtn(&p).unwrap();
    assert_eq!(back, t.detached());
    write_mgtn(&p, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
}

#[test]
fn mgtn_f32_payload_widens_on_read() {
    let t = random_tensor(&[5], 1.0, &mut rng(2));
    let bytes = encode_mgtn_as(&t, DType::F32);
    let (back, used) = decode_mgtn(&bytes).unwrap();
    assert_eq!(used, bytes.len());
    for (a, b) in back.data().iter().zip(t.data()) {
        assert_eq!(*a, (*b as f32) as f64);
    }
}

#[test]
fn mgtn_rejects_bad_magic_and_truncation() {
    let t = random_tensor(&[2, 2], 1.0, &mut rng(3));
    let mut bytes = encode_mgtn(&t);
    assert!(matches!(decode_mgtn(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    bytes[0] = b'X';
    assert!(matches!(decode_mgtn(&bytes), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn graph_json_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (_, g) = text_graph("what color is the cube left-of the sphere ?", &Lexicon::default()).unwrap();
    let p = dir.path().join("g.json");
    g.write_json(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let back = Graph::read_json(&p).unwrap();
    assert_eq!(back, g);
    back.write_json(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
}

#[test]
fn qamk_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let m = GraphMask::random(7, &mut rng(4));
    let p = dir.path().join("m.qamk");
    m.write(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    GraphMask::read(&p).unwrap().write(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let mut bad = first.clone();
    bad[12] = 7;
    assert!(matches!(GraphMask::from_bytes(&bad), Err(Error::Format { offset: 12, .. })));
    assert!(matches!(GraphMask::from_bytes(&first[..20]), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = MultimodalEncoder::new(ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 8,
        l_max: 16,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut adam = AdamState::new(&model.store);
    adam.step = 3;
    adam.v[2][0] = 0.125;
    let ck = Checkpoint {
        model,
        adam: Some(adam),
        text_vocab: vec!["<unk>".into(), "cube".into()],
        answers: vec!["red".into(), "green".into()],
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_checkpoint(&a, &ck).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, ck);
    save_checkpoint(&b, &back).unwrap();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn dataset_json_round_trip_is_byte_stable() {
    let ds = generate_dataset(40, 9, SceneSpec::default()).unwrap();
    let text = ds.to_json();
    let back = Dataset::from_json(&text).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_json(), text);
}
