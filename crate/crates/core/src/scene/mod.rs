//! Anechoic first-order Ambisonic scene synthesis with analytic ground truth.

mod labels;
mod preset;
mod wav;

pub use labels::{read_labels, write_labels, LabelSchema};
pub use preset::{generate_clip_specs, ClipSpec, DatasetConfig};
pub use wav::{read_wav, write_wav};

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doa::DoaAngle;

/// Label frame length in seconds (DCASE 100 ms frames).
pub const LABEL_HOP_S: f64 = 0.1;

/// Default output sample rate.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 24_000;

const FADE_S: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("FOA clip needs exactly 4 channels, got {0}")]
    ChannelCount(usize),
    #[error("event {index}: {reason}")]
    InvalidEvent { index: usize, reason: String },
    #[error("{count} events active in label frame {frame}, at most {n_track} tracks available")]
    TooManyOverlaps {
        frame: usize,
        count: usize,
        n_track: usize,
    },
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("label file row {row}: {reason}")]
    LabelRow { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SceneError> = std::result::Result<T, E>;

/// Four-channel time-domain Ambisonic signal in `w, x, y, z` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    samples: Array2<f64>,
    sample_rate_hz: u32,
}

impl FoaClip {
    pub fn new(samples: Array2<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.nrows() != 4 {
            return Err(SceneError::ChannelCount(samples.nrows()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SceneError::NonFinite(i));
        }
        if sample_rate_hz == 0 {
            return Err(SceneError::Config("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn silent(len: usize, sample_rate_hz: u32) -> Self {
        Self {
            samples: Array2::zeros((4, len)),
            sample_rate_hz,
        }
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.samples.row(c)
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// Copies `len` samples starting at `start`, zero-padding past the end.
    pub fn segment(&self, start: usize, len: usize) -> FoaClip {
        let mut out = Array2::zeros((4, len));
        let end = (start + len).min(self.len());
        if start < end {
            out.slice_mut(ndarray::s![.., 0..end - start])
                .assign(&self.samples.slice(ndarray::s![.., start..end]));
        }
        FoaClip {
            samples: out,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Ground truth for one active track in one label frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackLabel {
    pub class_id: usize,
    pub doa: DoaAngle,
}

/// Per-frame, per-track ground truth. `None` entries are silent tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    n_track: usize,
    label_hop_s: f64,
    entries: Vec<Option<TrackLabel>>,
}

impl LabelGrid {
    pub fn new(n_frames: usize, n_track: usize) -> Self {
        Self {
            n_track,
            label_hop_s: LABEL_HOP_S,
            entries: vec![None; n_frames * n_track],
        }
    }

    pub fn n_frames(&self) -> usize {
        if self.n_track == 0 {
            0
        } else {
            self.entries.len() / self.n_track
        }
    }

    pub fn n_track(&self) -> usize {
        self.n_track
    }

    pub fn label_hop_s(&self) -> f64 {
        self.label_hop_s
    }

    pub fn get(&self, frame: usize, track: usize) -> Option<&TrackLabel> {
        self.entries[frame * self.n_track + track].as_ref()
    }

    pub fn set(&mut self, frame: usize, track: usize, label: Option<TrackLabel>) {
        self.entries[frame * self.n_track + track] = label;
    }

    pub fn frame(&self, frame: usize) -> &[Option<TrackLabel>] {
        &self.entries[frame * self.n_track..(frame + 1) * self.n_track]
    }

    /// Active `(track, label)` pairs of one frame.
    pub fn active(&self, frame: usize) -> impl Iterator<Item = (usize, &TrackLabel)> {
        self.frame(frame)
            .iter()
            .enumerate()
            .filter_map(|(t, e)| e.as_ref().map(|l| (t, l)))
    }

    pub fn active_count(&self, frame: usize) -> usize {
        self.frame(frame).iter().filter(|e| e.is_some()).count()
    }

    /// Frames `start..start + len`, padding with silence past the end.
    pub fn slice_frames(&self, start: usize, len: usize) -> LabelGrid {
        let mut out = LabelGrid::new(len, self.n_track);
        out.label_hop_s = self.label_hop_s;
        for f in 0..len {
            if start + f < self.n_frames() {
                for t in 0..self.n_track {
                    out.set(f, t, self.get(start + f, t).copied());
                }
            }
        }
        out
    }

    pub fn resized(&self, n_frames: usize) -> LabelGrid {
        self.slice_frames(0, n_frames)
    }
}

/// A timed point on a DoA path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub time_s: f64,
    pub doa: DoaAngle,
}

/// Piecewise-linear DoA path. Held constant before the first and after the
/// last keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    keyframes: Vec<Keyframe>,
}

impl Trajectory {
    pub fn fixed(doa: DoaAngle) -> Self {
        Self {
            keyframes: vec![Keyframe { time_s: 0.0, doa }],
        }
    }

    pub fn linear(start: DoaAngle, end: DoaAngle, t0: f64, t1: f64) -> Self {
        Self {
            keyframes: vec![
                Keyframe {
                    time_s: t0,
                    doa: start,
                },
                Keyframe {
                    time_s: t1,
                    doa: end,
                },
            ],
        }
    }

    pub fn from_keyframes(keyframes: Vec<Keyframe>) -> Option<Self> {
        let ok = !keyframes.is_empty()
            && keyframes.iter().all(|k| k.time_s.is_finite())
            && keyframes.windows(2).all(|w| w[0].time_s <= w[1].time_s);
        ok.then_some(Self { keyframes })
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn is_static(&self) -> bool {
        self.keyframes.windows(2).all(|w| w[0].doa == w[1].doa)
    }

    pub fn at(&self, time_s: f64) -> DoaAngle {
        let k = &self.keyframes;
        if time_s <= k[0].time_s {
            return k[0].doa;
        }
        for w in k.windows(2) {
            if time_s <= w[1].time_s {
                let span = w[1].time_s - w[0].time_s;
                let frac = if span > 0.0 {
                    (time_s - w[0].time_s) / span
                } else {
                    1.0
                };
                return w[0].doa.lerp(&w[1].doa, frac);
            }
        }
        k[k.len() - 1].doa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    BandNoise,
    AmTone,
}

/// One sound event in a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvent {
    pub class_id: usize,
    pub onset_s: f64,
    pub offset_s: f64,
    pub trajectory: Trajectory,
    pub source: SourceKind,
}

impl SceneEvent {
    pub fn fixed(class_id: usize, onset_s: f64, offset_s: f64, doa: DoaAngle) -> Self {
        Self {
            class_id,
            onset_s,
            offset_s,
            trajectory: Trajectory::fixed(doa),
            source: SourceKind::for_class(class_id),
        }
    }

    /// Label frames `first..first + count` covered by the event.
    pub fn label_frames(&self, label_hop_s: f64) -> std::ops::Range<usize> {
        let first = (self.onset_s / label_hop_s + 1e-9).floor().max(0.0) as usize;
        let count = ((self.offset_s - self.onset_s) / label_hop_s - 1e-9).ceil().max(1.0) as usize;
        first..first + count
    }

    /// DoA reported for a label frame: the path evaluated at the frame
    /// centre, clamped to the event's extent.
    pub fn doa_at_frame(&self, frame: usize, label_hop_s: f64) -> DoaAngle {
        let centre = (frame as f64 + 0.5) * label_hop_s;
        self.trajectory
            .at(centre.clamp(self.onset_s, self.offset_s))
    }
}

impl SourceKind {
    /// Default source type: even classes are noise bands, odd classes tones.
    pub fn for_class(class_id: usize) -> Self {
        if class_id % 2 == 0 {
            SourceKind::BandNoise
        } else {
            SourceKind::AmTone
        }
    }
}

/// Rendering parameters for [`synth_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub clip_len_s: f64,
    pub sample_rate_hz: u32,
    /// `None` renders without noise (infinite SNR).
    pub noise_snr_db: Option<f64>,
    pub n_track: usize,
    pub n_cla: usize,
    /// RMS level of every source before encoding.
    pub source_rms: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clip_len_s: 5.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            noise_snr_db: Some(30.0),
            n_track: 2,
            n_cla: 3,
            source_rms: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn label_frames(&self) -> usize {
        (self.clip_len_s / LABEL_HOP_S - 1e-9).ceil() as usize
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_len_s * self.sample_rate_hz as f64).round() as usize
    }
}

/// Frequency band `[lo, hi]` in Hz that carries a class's energy. Bands are
/// log-spaced between 250 Hz and 8 kHz with small guard gaps.
pub fn class_band(class_id: usize, n_cla: usize) -> (f64, f64) {
    let n = n_cla.max(1) as f64;
    let edge = |i: f64| 250.0 * 32f64.powf(i / n);
    let lo = edge(class_id as f64) * 1.08;
    let hi = edge(class_id as f64 + 1.0) / 1.08;
    (lo, hi)
}

/// Encodes a mono signal as a first-order Ambisonic plane wave with unit
/// omni gain and `(cos el cos az, cos el sin az, sin el)` dipole gains.
pub fn encode_plane_wave(signal: &[f64], doa: DoaAngle, sample_rate_hz: u32) -> Result<FoaClip> {
    if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
        return Err(SceneError::NonFinite(i));
    }
    let gains = foa_gains(&doa);
    let mut samples = Array2::zeros((4, signal.len()));
    for (c, g) in gains.iter().enumerate() {
        samples
            .row_mut(c)
            .iter_mut()
            .zip(signal)
            .for_each(|(o, s)| *o = g * s);
    }
    FoaClip::new(samples, sample_rate_hz)
}

fn foa_gains(doa: &DoaAngle) -> [f64; 4] {
    let [x, y, z] = doa.to_unit_vector();
    [1.0, x, y, z]
}

/// Renders a scene: the sum of plane-wave encoded events (DoA held
/// constant per label hop) plus diffuse Gaussian noise, and its label grid.
pub fn synth_scene(
    events: &[SceneEvent],
    config: &SynthConfig,
    rng_seed: u64,
) -> Result<(FoaClip, LabelGrid)> {
    if !(config.clip_len_s > 0.0) || config.sample_rate_hz == 0 || config.n_track == 0 {
        return Err(SceneError::Config(format!(
            "clip length {} s, sample rate {}, {} tracks",
            config.clip_len_s, config.sample_rate_hz, config.n_track
        )));
    }
    let labels = label_events(events, config)?;

    let sr = config.sample_rate_hz as f64;
    let n_samples = config.clip_samples();
    let hop_samples = (LABEL_HOP_S * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Array2::<f64>::zeros((4, n_samples));

    for event in events {
        let event_seed: u64 = rng.random();
        let start = (event.onset_s * sr).round() as usize;
        let end = ((event.offset_s * sr).round() as usize).min(n_samples);
        if end <= start {
            continue;
        }
        let signal = source_signal(event, config, end - start, event_seed);
        let mut block_start = start;
        while block_start < end {
            let frame = block_start / hop_samples;
            let block_end = ((frame + 1) * hop_samples).min(end);
            let gains = foa_gains(&event.doa_at_frame(frame, LABEL_HOP_S));
            for (c, g) in gains.iter().enumerate() {
                let mut row = out.row_mut(c);
                for s in block_start..block_end {
                    row[s] += g * signal[s - start];
                }
            }
            block_start = block_end;
        }
    }

    if let Some(snr_db) = config.noise_snr_db {
        let sigma = config.source_rms * 10f64.powf(-snr_db / 20.0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
        // Diffuse field: each dipole carries a third of the omni power.
        let scales = [sigma, sigma / 3f64.sqrt(), sigma / 3f64.sqrt(), sigma / 3f64.sqrt()];
        for (c, scale) in scales.iter().enumerate() {
            for v in out.row_mut(c).iter_mut() {
                let n: f64 = StandardNormal.sample(&mut noise_rng);
                *v += scale * n;
            }
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        out.mapv_inplace(|v| v * 0.99 / peak);
    }
    Ok((FoaClip::new(out, config.sample_rate_hz)?, labels))
}

/// Validates events and builds the label grid, assigning each event to the
/// lowest free track in onset order.
pub fn label_events(events: &[SceneEvent], config: &SynthConfig) -> Result<LabelGrid> {
    let n_frames = config.label_frames();
    for (index, e) in events.iter().enumerate() {
        let bad = |reason: String| SceneError::InvalidEvent { index, reason };
        if e.class_id >= config.n_cla {
            return Err(bad(format!(
                "class {} outside 0..{}",
                e.class_id, config.n_cla
            )));
        }
        if !(e.onset_s.is_finite() && e.offset_s.is_finite()) || e.onset_s < 0.0 {
            return Err(bad("onset/offset must be finite and non-negative".into()));
        }
        if e.offset_s <= e.onset_s {
            return Err(bad(format!(
                "zero-length or reversed event ({} s to {} s)",
                e.onset_s, e.offset_s
            )));
        }
        if e.offset_s > config.clip_len_s + 1e-9 {
            return Err(bad(format!(
                "offset {} s beyond clip length {} s",
                e.offset_s, config.clip_len_s
            )));
        }
        if Trajectory::from_keyframes(e.trajectory.keyframes.clone()).is_none() {
            return Err(bad("trajectory keyframes must be non-empty and time-ordered".into()));
        }
    }

    let ranges: Vec<_> = events
        .iter()
        .map(|e| {
            let r = e.label_frames(LABEL_HOP_S);
            r.start.min(n_frames)..r.end.min(n_frames)
        })
        .collect();
    let mut counts = vec![0usize; n_frames];
    for r in &ranges {
        for f in r.clone() {
            counts[f] += 1;
        }
    }
    if let Some((frame, &count)) = counts
        .iter()
        .enumerate()
        .find(|(_, &c)| c > config.n_track)
    {
        return Err(SceneError::TooManyOverlaps {
            frame,
            count,
            n_track: config.n_track,
        });
    }

    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| {
        events[a]
            .onset_s
            .total_cmp(&events[b].onset_s)
            .then(a.cmp(&b))
    });
    let mut grid = LabelGrid::new(n_frames, config.n_track);
    for &i in &order {
        let range = ranges[i].clone();
        let track = (0..config.n_track)
            .find(|&t| range.clone().all(|f| grid.get(f, t).is_none()))
            .ok_or(SceneError::TooManyOverlaps {
                frame: range.start,
                count: config.n_track + 1,
                n_track: config.n_track,
            })?;
        for f in range {
            grid.set(
                f,
                track,
                Some(TrackLabel {
                    class_id: events[i].class_id,
                    doa: events[i].doa_at_frame(f, LABEL_HOP_S),
                }),
            );
        }
    }
    Ok(grid)
}

fn source_signal(event: &SceneEvent, config: &SynthConfig, len: usize, seed: u64) -> Vec<f64> {
    let sr = config.sample_rate_hz as f64;
    let (lo, hi) = class_band(event.class_id, config.n_cla);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut signal = match event.source {
        SourceKind::BandNoise => band_noise(len, sr, lo, hi, &mut rng),
        SourceKind::AmTone => {
            let carrier = (lo * hi).sqrt();
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let am_rate: f64 = rng.random_range(2.0..6.0);
            let am_phase: f64 = rng.random_range(0.0..2.0 * PI);
            (0..len)
                .map(|n| {
                    let t = n as f64 / sr;
                    (2.0 * PI * carrier * t + phase).sin()
                        * (1.0 + 0.5 * (2.0 * PI * am_rate * t + am_phase).sin())
                })
                .collect()
        }
    };
    let rms = (signal.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    let scale = if rms > 0.0 { config.source_rms / rms } else { 0.0 };
    let fade = ((FADE_S * sr) as usize).min(len / 2);
    for (n, v) in signal.iter_mut().enumerate() {
        let ramp = if n < fade {
            0.5 - 0.5 * (PI * n as f64 / fade as f64).cos()
        } else if n >= len - fade {
            0.5 - 0.5 * (PI * (len - 1 - n) as f64 / fade as f64).cos()
        } else {
            1.0
        };
        *v *= scale * ramp;
    }
    signal
}

fn band_noise(len: usize, sr: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len)
        .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let f = bin as f64 * sr / len as f64;
        if f < lo || f > hi {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    buf.iter().map(|c| c.re / len as f64).collect()
}
