use ein_seld::autodiff::DType;
use ein_seld::checkpoint::Checkpoint;
use ein_seld::data::{build_segments, Clip, Segment, Segmentation};
use ein_seld::features::FeatureExtractor;
use ein_seld::infer::predict;
use ein_seld::model::{Model, ModelConfig};
use ein_seld::scene::{generate_clip_specs, synth_scene, DatasetConfig};
use ein_seld::train::{TrainConfig, TrainError, Trainer};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_mels: 16,
        conv_channels: vec![4, 8],
        gru_hidden: 8,
        gru_layers: 1,
        precision: DType::F32,
        ..Default::default()
    }
}

fn clips(n: usize, seed: u64) -> Vec<Clip> {
    let cfg = DatasetConfig {
        n_clips: n,
        ..Default::default()
    };
    generate_clip_specs(&cfg, seed)
        .into_iter()
        .map(|s| {
            let (audio, labels) = synth_scene(&s.events, &cfg.synth, s.seed).unwrap();
            Clip { id: s.id, audio, labels }
        })
        .collect()
}

fn segments(clips: &[Clip]) -> (FeatureExtractor, Vec<Segment>) {
    let ex = FeatureExtractor::with_mels(16, 24_000).unwrap();
    let seg = Segmentation::new(5.0, 0.8).unwrap();
    let s = build_segments(clips, seg, &ex, 3).unwrap();
    (ex, s)
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn training_reduces_the_objective() {
    let (_, segs) = segments(&clips(4, 1));
    let mut t = Trainer::new(Model::<f32>::init(tiny_model(), 0).unwrap(), train_config(8)).unwrap();
    let report = t.run(&segs, None, |_| {}).unwrap();
    let first = report.epochs.first().unwrap().objective;
    let last = report.epochs.last().unwrap().objective;
    assert_eq!(report.epochs.len(), 8);
    assert!(last < first, "objective went from {first} to {last}");
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let (_, segs) = segments(&clips(3, 2));
    let run = || {
        let mut t = Trainer::new(Model::<f32>::init(tiny_model(), 5).unwrap(), train_config(2)).unwrap();
        t.run(&segs, None, |_| {}).unwrap();
        t.checkpoint().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (_, segs) = segments(&clips(3, 3));
    let mut straight = Trainer::new(Model::<f32>::init(tiny_model(), 1).unwrap(), train_config(3)).unwrap();
    straight.run(&segs, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(Model::<f32>::init(tiny_model(), 1).unwrap(), train_config(2)).unwrap();
    first.run(&segs, Some(dir.path()), |_| {}).unwrap();
    let ck = Checkpoint::load(dir.path().join("final.ckpt")).unwrap();
    let mut resumed = Trainer::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.state.epochs_done, 2);
    resumed.config.epochs = 3;
    resumed.run(&segs, None, |_| {}).unwrap();

    assert_eq!(resumed.model.params(), straight.model.params());
    let a: Vec<f64> = resumed.state.history.iter().map(|r| r.l_tpit).collect();
    let b: Vec<f64> = straight.state.history.iter().map(|r| r.l_tpit).collect();
    assert_eq!(a, b);
}

#[test]
fn epoch_checkpoints_are_written() {
    let (_, segs) = segments(&clips(2, 4));
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(Model::<f32>::init(tiny_model(), 0).unwrap(), train_config(2)).unwrap();
    let report = t.run(&segs, Some(dir.path()), |_| {}).unwrap();
    for name in ["epoch_0000.ckpt", "epoch_0001.ckpt", "final.ckpt"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    assert_eq!(report.final_checkpoint.unwrap(), dir.path().join("final.ckpt"));
}

#[test]
fn non_finite_batch_aborts_with_dump() {
    let (_, mut segs) = segments(&clips(2, 5));
    let mut data = segs[0].features.data().clone();
    data[[0, 0, 0]] = f32::NAN;
    segs[0].features = ein_seld::features::FeatureTensor::new(data, 24_000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(Model::<f32>::init(tiny_model(), 0).unwrap(), train_config(1)).unwrap();
    match t.run(&segs, Some(dir.path()), |_| {}) {
        Err(TrainError::NonFinite { dump: Some(path), .. }) => {
            let text = std::fs::read_to_string(path).unwrap();
            assert!(text.contains("non_finite_features"));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn predictions_cover_every_label_frame() {
    let cs = clips(1, 6);
    let (ex, _) = segments(&cs);
    let model = Model::<f32>::init(tiny_model(), 0).unwrap();
    // A clip whose length is not a multiple of the label hop.
    let audio = cs[0].audio.segment(0, 24_000 * 3 + 1234);
    let preds = predict(&model, &ex, &audio, 0.5).unwrap();
    assert_eq!(preds.len(), 31);
    assert!(preds.iter().all(|p| p.tracks.len() == 2));
}

#[test]
fn f64_training_runs() {
    let (_, segs) = segments(&clips(2, 7));
    let cfg = ModelConfig {
        precision: DType::F64,
        ..tiny_model()
    };
    let mut t = Trainer::new(Model::<f64>::init(cfg, 0).unwrap(), train_config(1)).unwrap();
    let report = t.run(&segs, None, |_| {}).unwrap();
    assert!(report.epochs[0].objective.is_finite());
}
