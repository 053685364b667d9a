mod common;

use common::*;
use mvsv::data::{load_dataset, save_dataset};
use mvsv::model::TopologyKind;
use mvsv::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use mvsv::{Error, ErrorKind};

#[test]
fn dataset_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_dataset(3);
    let (a, b) = (dir.path().join("a.mvsv"), dir.path().join("b.mvsv"));
    save_dataset(&a, &d).unwrap();
    let back = load_dataset(&a).unwrap();
    assert_eq!(back, d);
    for (x, y) in back.samples.iter().zip(&d.samples) {
        let bits = |v: &[f32]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x.audio.values()), bits(y.audio.values()));
        assert_eq!(bits(x.video.values()), bits(y.video.values()));
    }
    save_dataset(&b, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

fn trained(kind: TopologyKind, epochs: usize, config: TrainConfig) -> Trainer<f32> {
    let d = small_dataset(5);
    with_data(&d, |data| {
        let mut t = Trainer::new(small_model(kind, data.num_classes(), 9), TrainConfig { max_epochs: epochs, ..config })
            .unwrap();
        t.run(data, |_, _| Ok(())).unwrap();
        t
    })
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for kind in TopologyKind::ALL {
        let t = trained(kind, 2, TrainConfig { momentum: 0.5, ..small_train(2) });
        let ck = t.checkpoint();
        let path = dir.path().join(format!("{kind}.ckpt"));
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for (name, p) in ck.model.params() {
            let q = back.model.param(name).unwrap();
            assert!(p.values().iter().zip(q.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(!back.state.optimizer.velocity.is_empty());
    }
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = small_dataset(5);
    for kind in [TopologyKind::MidFusion, TopologyKind::MultiView] {
        let config = TrainConfig { momentum: 0.3, shards: 2, ..small_train(5) };
        let full = with_data(&d, |data| {
            let mut t = Trainer::new(small_model(kind, data.num_classes(), 4), config.clone()).unwrap();
            t.run(data, |_, _| Ok(())).unwrap();
            t
        });

        let path = dir.path().join("half.ckpt");
        with_data(&d, |data| {
            let mut t = Trainer::new(small_model(kind, data.num_classes(), 4), TrainConfig { max_epochs: 2, ..config.clone() })
                .unwrap();
            t.run(data, |_, _| Ok(())).unwrap();
            save_checkpoint(&path, &t.checkpoint()).unwrap();
        });
        let resumed = with_data(&d, |data| {
            let mut t = Trainer::<f32>::resume(&load_checkpoint(&path).unwrap(), Some(5)).unwrap();
            assert_eq!(t.state.epoch, 2);
            t.run(data, |_, _| Ok(())).unwrap();
            t
        });
        assert_eq!(resumed.state.log, full.state.log, "{kind}");
        assert_eq!(resumed.model.params(), full.model.params());
    }
}

#[test]
fn topology_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&path, &trained(TopologyKind::MidFusion, 1, small_train(1)).checkpoint()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert!(ck.expect_topology(TopologyKind::MidFusion).is_ok());
    let err = ck.expect_topology(TopologyKind::MultiView).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    assert!(err.to_string().contains("midfusion"), "{err}");
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &trained(TopologyKind::UnimodalA, 1, small_train(1)).checkpoint()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));

    let mut bad = bytes;
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Version { .. })));

    let data = dir.path().join("d.mvsv");
    save_dataset(&data, &small_dataset(1)).unwrap();
    assert!(matches!(load_checkpoint(&data), Err(Error::BadMagic { .. })));
}
