//! Frame-wise track predictions from a trained model.

use std::path::Path;

use ndarray::s;
use thiserror::Error;

use crate::autodiff::Float;
use crate::data::label_frames_for;
use crate::doa::{DoaAngle, DoaError};
use crate::features::{FeatureError, FeatureExtractor};
use crate::model::{Model, ModelError, Mode, TrackOutputs};
use crate::pit::{argmax, ead_mask, MaskMode};
use crate::scene::{write_labels, FoaClip, LabelGrid, SceneError, TrackLabel};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("non-finite DoA output: {0}")]
    Doa(#[from] DoaError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPrediction {
    pub class_id: usize,
    pub doa: DoaAngle,
    pub ead_prob: f64,
}

/// One entry per track; `None` for inactive tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub tracks: Vec<Option<TrackPrediction>>,
}

/// Applies the test-mode mask to raw outputs.
pub fn decode(outputs: &TrackOutputs, threshold: f64) -> Result<Vec<FramePrediction>> {
    let n_cla = outputs.n_cla();
    (0..outputs.n_frames())
        .map(|f| {
            let sed = outputs.sed_logits.slice(s![f, .., ..]);
            let probs: Vec<f64> = (0..outputs.n_track()).map(|t| outputs.ead_prob(f, t)).collect();
            let mask = ead_mask(MaskMode::Test { threshold }, &probs, sed);
            let tracks = (0..outputs.n_track())
                .map(|t| {
                    if mask[t] == 0.0 {
                        return Ok(None);
                    }
                    let class_id = argmax(sed.slice(s![t, ..n_cla]));
                    let doa = DoaAngle::from_unbounded(outputs.doa[[f, t, 0]], outputs.doa[[f, t, 1]])?;
                    Ok(Some(TrackPrediction {
                        class_id,
                        doa,
                        ead_prob: probs[t],
                    }))
                })
                .collect::<Result<_>>()?;
            Ok(FramePrediction { tracks })
        })
        .collect()
}

pub fn to_label_grid(preds: &[FramePrediction], n_track: usize) -> LabelGrid {
    let mut grid = LabelGrid::new(preds.len(), n_track);
    for (f, p) in preds.iter().enumerate() {
        for (t, tr) in p.tracks.iter().enumerate() {
            if let Some(tr) = tr {
                grid.set(
                    f,
                    t,
                    Some(TrackLabel {
                        class_id: tr.class_id,
                        doa: tr.doa,
                    }),
                );
            }
        }
    }
    grid
}

/// Runs the model in evaluation mode on a whole clip. The result covers
/// exactly the clip's label frames.
pub fn predict<F: Float>(
    model: &Model<F>,
    extractor: &FeatureExtractor,
    clip: &FoaClip,
    threshold: f64,
) -> Result<Vec<FramePrediction>> {
    let features = extractor.extract(clip)?;
    let pass = model.forward(&[&features], Mode::Eval)?;
    let mut preds = decode(&pass.outputs[0], threshold)?;
    let n = label_frames_for(clip.len(), clip.sample_rate_hz());
    preds.resize(
        n,
        FramePrediction {
            tracks: vec![None; model.config().n_track],
        },
    );
    Ok(preds)
}

/// Writes predictions in the label CSV schema, rows ordered by (frame, track).
pub fn write_predictions(preds: &[FramePrediction], n_track: usize, path: impl AsRef<Path>) -> Result<()> {
    write_labels(&to_label_grid(preds, n_track), path)?;
    Ok(())
}
