use provnet_core::artifacts::{load_model, CheckpointMeta, LoadedModel, ModelSpec};
use provnet_core::models::{FreezeScope, MultiFrameNet, StreamConfig, StreamNet};
use provnet_core::preprocess::PatchOrigin;
use provnet_core::train::{
    evaluate, fit, transfer_retrain, train_multiframe, HeadNet, SplitData, StreamData, TrainConfig, TrainSet,
};
use provnet_core::Error;
use provnet_engine::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

/// Class 1 inputs carry extra high-frequency energy.
fn stream_data(n: usize, channels: usize, size: usize, seed: u64, videos: &str) -> StreamData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = StreamData::default();
    for k in 0..n {
        let label = k % 2;
        let amp = if label == 1 { 2.0 } else { 0.5 };
        let t = Tensor::from_fn([1, channels, size, size], |_, _, _, _| amp * rng.gen_range(-1.0f32..1.0));
        d.examples.push((t, label));
        d.origins.push(PatchOrigin {
            video_id: format!("{videos}{}", k % 4),
            frame_index: (k / 4) as u64 * 4,
            row: 0,
            col: 0,
        });
    }
    d
}

fn split(channels: usize, seed: u64) -> SplitData {
    SplitData {
        train: stream_data(24, channels, 64, seed, "tr"),
        val: stream_data(8, channels, 64, seed + 1, "va"),
        test: stream_data(8, channels, 64, seed + 2, "te"),
    }
}

fn one_epoch() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_epochs: 1,
        patience: 1,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn transfer_epoch_keeps_backbone_and_moves_head() {
    let mut net = StreamNet::new(StreamConfig::indnet_reduced(&names()), 1).unwrap();
    let head_before = net.head_hash();
    let out = transfer_retrain(&mut net, FreezeScope::ConvBlocks, &names(), &split(1, 3), &one_epoch()).unwrap();
    assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
    assert_ne!(head_before, net.head_hash());
    assert_eq!(out.fit.history.len(), 1);
}

#[test]
fn rerun_reproduces_checkpoint_bytes() {
    let run = || {
        let mut net = StreamNet::new(StreamConfig::indnet_reduced(&names()), 1).unwrap();
        let out = transfer_retrain(&mut net, FreezeScope::ConvBlocks, &names(), &split(1, 3), &one_epoch()).unwrap();
        let meta = CheckpointMeta::new(
            ModelSpec::Stream {
                config: net.config.clone(),
            },
            one_epoch(),
            out.fit.best_epoch,
            out.fit.best_val_acc,
        );
        let mut ck = out.fit.checkpoint(meta.to_json(), 9);
        ck.tensors = net.export_state();
        ck.to_bytes()
    };
    let a = run();
    assert_eq!(a, run());
}

#[test]
fn head_on_features_equals_frozen_full_pass() {
    let data = split(1, 5);
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 2,
        ..one_epoch()
    };
    let mut full = StreamNet::new(StreamConfig::indnet_reduced(&names()), 2).unwrap();
    full.freeze(FreezeScope::ConvBlocks);
    let mut fast = full.clone();
    fit(&mut full, TrainSet::Fixed(&data.train.examples), &data.val.examples, &cfg).unwrap();

    let feats = |net: &mut StreamNet, d: &StreamData| -> Vec<(Tensor<f32>, usize)> {
        d.examples
            .iter()
            .map(|(x, y)| (net.features(x, Mode::Eval).unwrap(), *y))
            .collect()
    };
    let train = feats(&mut fast, &data.train);
    let val = feats(&mut fast, &data.val);
    let mut head = HeadNet::new(fast.head.clone(), 2);
    fit(&mut head, TrainSet::Fixed(&train), &val, &cfg).unwrap();
    assert_eq!(head.head.export_state(), full.head.export_state());
}

#[test]
fn non_finite_input_aborts_with_last_good_state() {
    let good = stream_data(16, 4, 1, 1, "v");
    let good: Vec<(Tensor<f32>, usize)> = good
        .examples
        .into_iter()
        .map(|(t, y)| (t.reshape([1, 4, 1, 1]).unwrap(), y))
        .collect();
    let mut poisoned = good.clone();
    poisoned[3].0.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        max_epochs: 4,
        patience: 4,
        ..one_epoch()
    };

    let mut net = HeadNet::fresh(4, &[8], 2, 0);
    match fit(&mut net, TrainSet::Fixed(&poisoned), &good, &cfg) {
        Err(Error::Aborted { epoch, last_good, .. }) => {
            assert_eq!(epoch, 1);
            assert!(last_good.is_none());
        }
        other => panic!("expected abort, got {other:?}"),
    }

    let mut net = HeadNet::fresh(4, &[8], 2, 0);
    let per_epoch = TrainSet::PerEpoch(Box::new(|e| Ok(if e < 3 { good.clone() } else { poisoned.clone() })));
    match fit(&mut net, per_epoch, &good, &cfg) {
        Err(Error::Aborted { epoch, last_good, .. }) => {
            assert_eq!(epoch, 3);
            let ck = last_good.expect("two epochs completed");
            assert!(ck.epoch == 1 || ck.epoch == 2);
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn fused_training_keeps_streams_and_round_trips() {
    let ind = StreamNet::new(StreamConfig::indnet_reduced(&names()), 1).unwrap();
    let pred = StreamNet::new(StreamConfig::prednet_reduced(&names()), 2).unwrap();
    let mut multi = MultiFrameNet::new(ind, pred, &[16], 3).unwrap();
    let i = split(1, 10);
    let mut p = split(3, 20);
    // P-patches share videos and labels with the I side, two frames later
    for (pi, ii) in [(&mut p.train, &i.train), (&mut p.val, &i.val), (&mut p.test, &i.test)] {
        for (po, io) in pi.origins.iter_mut().zip(&ii.origins) {
            po.video_id = io.video_id.clone();
            po.frame_index = io.frame_index + 2;
        }
        for (pe, ie) in pi.examples.iter_mut().zip(&ii.examples) {
            pe.1 = ie.1;
        }
    }
    let out = train_multiframe(&mut multi, &i, &p, &one_epoch()).unwrap();
    assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
    assert_eq!(out.report.samples, i.test.examples.len());

    let meta = CheckpointMeta::new(
        ModelSpec::Multi {
            ind: multi.ind.config.clone(),
            pred: multi.pred.config.clone(),
            hidden: multi.hidden.clone(),
        },
        one_epoch(),
        1,
        out.fit.best_val_acc,
    );
    let ck = provnet_engine::Checkpoint {
        metadata: meta.to_json(),
        tensors: multi.export_state(),
        adam: None,
        seed: 0,
        epoch: 1,
    };
    let (_, loaded) = load_model(&provnet_engine::Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let LoadedModel::Multi(mut back) = loaded else {
        panic!("expected a fused model")
    };
    let x = &i.test.examples[0].0;
    let y = &p.test.examples[0].0;
    let a = multi.forward(x, y, Mode::Eval).unwrap();
    let b = back.forward(x, y, Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn evaluation_rejects_class_mismatch() {
    let mut net = HeadNet::fresh(4, &[], 2, 0);
    let data = vec![(Tensor::zeros([1, 4, 1, 1]), 0usize)];
    let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    assert!(matches!(
        evaluate(&mut net, &three, &data, None, 8),
        Err(Error::Config(_))
    ));
}
