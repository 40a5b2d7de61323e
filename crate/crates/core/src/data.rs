//! Clips on disk, fixed-length segmentation and cached training segments.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::features::{FeatureError, FeatureExtractor, FeatureTensor};
use crate::pit::{FrameTargets, PitError};
use crate::scene::{read_labels, read_wav, FoaClip, LabelGrid, LabelSchema, SceneError, LABEL_HOP_S};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid segmentation: {0}")]
    Config(String),
    #[error("no clips found in {0}")]
    Empty(PathBuf),
    #[error("clip {id}: {source}")]
    Clip {
        id: String,
        #[source]
        source: SceneError,
    },
    #[error("clip {0} has no label frames")]
    TooShort(String),
    #[error("sample rate mismatch: clip {id} is {found} Hz, expected {expected} Hz")]
    SampleRate { id: String, found: u32, expected: u32 },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Targets(#[from] PitError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Audio plus reference labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub audio: FoaClip,
    pub labels: LabelGrid,
}

/// Samples covered by one label frame.
pub fn samples_per_label_frame(sample_rate_hz: u32) -> usize {
    (sample_rate_hz as f64 * LABEL_HOP_S).round() as usize
}

/// Label frames needed to cover `n_samples`.
pub fn label_frames_for(n_samples: usize, sample_rate_hz: u32) -> usize {
    n_samples.div_ceil(samples_per_label_frame(sample_rate_hz))
}

/// `<stem>.wav` files of a directory, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every `<id>.wav` in `audio_dir` with labels from `<label_dir>/<id>.csv`.
pub fn load_clips(audio_dir: &Path, label_dir: &Path, n_cla: usize, n_track: usize) -> Result<Vec<Clip>> {
    let wavs = list_wavs(audio_dir)?;
    if wavs.is_empty() {
        return Err(DataError::Empty(audio_dir.to_path_buf()));
    }
    wavs.par_iter()
        .map(|wav| {
            let id = stem(wav);
            let wrap = |source| DataError::Clip { id: id.clone(), source };
            let audio = read_wav(wav).map_err(wrap)?;
            let schema = LabelSchema {
                n_cla,
                n_track,
                n_frames: label_frames_for(audio.len(), audio.sample_rate_hz()),
            };
            let labels = read_labels(label_dir.join(format!("{id}.csv")), &schema).map_err(wrap)?;
            let labels = labels.resized(schema.n_frames);
            Ok(Clip { id, audio, labels })
        })
        .collect()
}

/// Number of segments for a clip of `n` label frames.
pub fn segment_count(n: usize, seg: usize, hop: usize) -> usize {
    if n <= seg {
        1
    } else {
        (n - seg).div_ceil(hop) + 1
    }
}

/// Label-frame geometry of fixed-length segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segmentation {
    pub seg_frames: usize,
    pub hop_frames: usize,
}

impl Segmentation {
    /// Segment and hop lengths rounded to whole label frames.
    pub fn new(segment_len_s: f64, overlap: f64) -> Result<Self> {
        if !(segment_len_s > 0.0) || !segment_len_s.is_finite() {
            return Err(DataError::Config(format!("segment length {segment_len_s} s")));
        }
        if !(0.0..1.0).contains(&overlap) {
            return Err(DataError::Config(format!("overlap {overlap} outside [0, 1)")));
        }
        let seg_frames = (segment_len_s / LABEL_HOP_S).round() as usize;
        if seg_frames == 0 {
            return Err(DataError::Config(format!("segment length {segment_len_s} s is under one label frame")));
        }
        let hop_frames = ((seg_frames as f64 * (1.0 - overlap)).round() as usize).max(1);
        Ok(Self { seg_frames, hop_frames })
    }
}

/// One segment of one clip, in label frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentSpec {
    pub clip: usize,
    pub start_frame: usize,
}

pub fn segment_clips(clips: &[Clip], seg: Segmentation) -> Result<Vec<SegmentSpec>> {
    let mut out = Vec::new();
    for (c, clip) in clips.iter().enumerate() {
        let n = clip.labels.n_frames();
        if n == 0 {
            return Err(DataError::TooShort(clip.id.clone()));
        }
        for k in 0..segment_count(n, seg.seg_frames, seg.hop_frames) {
            out.push(SegmentSpec {
                clip: c,
                start_frame: k * seg.hop_frames,
            });
        }
    }
    Ok(out)
}

/// Features and targets of one segment, ready for the network.
#[derive(Debug, Clone)]
pub struct Segment {
    pub clip_id: String,
    pub start_frame: usize,
    pub features: FeatureTensor,
    pub labels: LabelGrid,
    pub targets: Vec<FrameTargets>,
}

/// Extracts all segments; audio past the clip end is zero, labels silent.
pub fn build_segments(
    clips: &[Clip],
    seg: Segmentation,
    extractor: &FeatureExtractor,
    n_cla: usize,
) -> Result<Vec<Segment>> {
    let specs = segment_clips(clips, seg)?;
    specs
        .par_iter()
        .map(|s| {
            let clip = &clips[s.clip];
            let sr = clip.audio.sample_rate_hz();
            let hop = samples_per_label_frame(sr);
            let audio = clip.audio.segment(s.start_frame * hop, seg.seg_frames * hop);
            let features = extractor.extract(&audio)?;
            let labels = clip.labels.slice_frames(s.start_frame, seg.seg_frames);
            let targets = FrameTargets::from_grid(&labels, n_cla)?;
            Ok(Segment {
                clip_id: clip.id.clone(),
                start_frame: s.start_frame,
                features,
                labels,
                targets,
            })
        })
        .collect()
}
