//! Log-mel and mel-space intensity-vector features from FOA clips.
//!
//! The STFT uses a periodic Hann window of 1024 samples at a hop of 480,
//! with no centring: frame `j` covers samples `480 j .. 480 j + 1024`.
//! Two routes compute it, a real FFT and a bank of fixed windowed cosine and
//! sine kernels applied as a strided 1-D convolution. They must agree.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rustfft::{num_complex::Complex64, FftPlanner};
use thiserror::Error;

use crate::doa::DoaAngle;
use crate::scene::FoaClip;

pub const WINDOW_LEN: usize = 1024;
pub const HOP_LEN: usize = 480;
pub const N_FREQ: usize = WINDOW_LEN / 2 + 1;
pub const DEFAULT_N_MELS: usize = 64;
pub const DEFAULT_F_MIN_HZ: f64 = 50.0;
/// Floor inside the log and guard for the intensity normalization.
pub const EPS: f64 = 1e-10;
/// Number of stacked feature channels: 4 log-mel + 3 intensity.
pub const N_FEATURE_CHANNELS: usize = 7;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip has {len} samples, at least {WINDOW_LEN} are needed")]
    TooShort { len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid mel filterbank: {0}")]
    Filterbank(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn n_stft_frames(len: usize) -> usize {
    if len < WINDOW_LEN {
        0
    } else {
        (len - WINDOW_LEN) / HOP_LEN + 1
    }
}

/// Complex STFT of the four FOA channels, shape `[4, frames, N_FREQ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram4 {
    data: Array3<Complex64>,
    sample_rate_hz: u32,
}

impl Spectrogram4 {
    pub fn new(data: Array3<Complex64>, sample_rate_hz: u32) -> Result<Self> {
        if data.shape()[0] != 4 || data.shape()[2] != N_FREQ {
            return Err(FeatureError::Shape(format!(
                "spectrogram must be [4, T, {N_FREQ}], got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            data,
            sample_rate_hz,
        })
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }
}

fn check_len(clip: &FoaClip) -> Result<usize> {
    if clip.len() < WINDOW_LEN {
        return Err(FeatureError::TooShort { len: clip.len() });
    }
    Ok(n_stft_frames(clip.len()))
}

/// FFT route.
pub fn stft(clip: &FoaClip) -> Result<Spectrogram4> {
    let frames = check_len(clip)?;
    let window = hann_window(WINDOW_LEN);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW_LEN);
    let mut out = Array3::<Complex64>::zeros((4, frames, N_FREQ));
    let mut buf = vec![Complex64::new(0.0, 0.0); WINDOW_LEN];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for c in 0..4 {
        let x = clip.channel(c);
        for j in 0..frames {
            let start = j * HOP_LEN;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[start + n] * window[n], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            out.slice_mut(s![c, j, ..])
                .iter_mut()
                .zip(&buf[..N_FREQ])
                .for_each(|(o, v)| *o = *v);
        }
    }
    Spectrogram4::new(out, clip.sample_rate_hz())
}

/// Fixed kernels of the convolution route: windowed cosine and negated
/// sine, each `[WINDOW_LEN, N_FREQ]`.
pub fn stft_kernels() -> (Array2<f64>, Array2<f64>) {
    let window = hann_window(WINDOW_LEN);
    let mut re = Array2::zeros((WINDOW_LEN, N_FREQ));
    let mut im = Array2::zeros((WINDOW_LEN, N_FREQ));
    for n in 0..WINDOW_LEN {
        for k in 0..N_FREQ {
            // Reduce k*n mod N first so the phase is exact.
            let phase = 2.0 * PI * ((k * n) % WINDOW_LEN) as f64 / WINDOW_LEN as f64;
            re[[n, k]] = window[n] * phase.cos();
            im[[n, k]] = -window[n] * phase.sin();
        }
    }
    (re, im)
}

/// Convolution route: frames `[T, WINDOW_LEN]` times the kernel bank.
pub fn stft_conv(clip: &FoaClip) -> Result<Spectrogram4> {
    let frames = check_len(clip)?;
    let (k_re, k_im) = stft_kernels();
    let mut out = Array3::<Complex64>::zeros((4, frames, N_FREQ));
    for c in 0..4 {
        let x = clip.channel(c);
        let framed = Array2::from_shape_fn((frames, WINDOW_LEN), |(j, n)| x[j * HOP_LEN + n]);
        let re = framed.dot(&k_re);
        let im = framed.dot(&k_im);
        out.slice_mut(s![c, .., ..])
            .indexed_iter_mut()
            .for_each(|((j, k), o)| *o = Complex64::new(re[[j, k]], im[[j, k]]));
    }
    Spectrogram4::new(out, clip.sample_rate_hz())
}

/// Triangular mel filterbank (HTK mel scale, unit peak), `[n_mels, N_FREQ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    f_min: f64,
    f_max: f64,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, sample_rate_hz: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if n_mels == 0 || !(f_min >= 0.0) || !(f_max > f_min) || f_max > nyquist + 1e-9 {
            return Err(FeatureError::Filterbank(format!(
                "{n_mels} bins over [{f_min}, {f_max}] Hz at Nyquist {nyquist}"
            )));
        }
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / WINDOW_LEN as f64;
        let weights = Array2::from_shape_fn((n_mels, N_FREQ), |(m, k)| {
            let f = k as f64 * bin_hz;
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let up = (f - lo) / (mid - lo);
            let down = (hi - f) / (hi - mid);
            up.min(down).max(0.0)
        });
        if let Some(m) = weights.outer_iter().position(|row| row.sum() <= 0.0) {
            return Err(FeatureError::Filterbank(format!(
                "mel bin {m} covers no FFT bin; use fewer mel bins or a higher f_min"
            )));
        }
        Ok(Self {
            weights,
            f_min,
            f_max,
        })
    }

    /// 64 bins from 50 Hz to Nyquist.
    pub fn default_for(sample_rate_hz: u32) -> Result<Self> {
        Self::new(
            DEFAULT_N_MELS,
            sample_rate_hz,
            DEFAULT_F_MIN_HZ,
            sample_rate_hz as f64 / 2.0,
        )
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn f_range(&self) -> (f64, f64) {
        (self.f_min, self.f_max)
    }
}

fn check_fb(spec: &Spectrogram4, fb: &MelFilterbank) -> Result<()> {
    if fb.weights.ncols() != spec.data.shape()[2] {
        return Err(FeatureError::Shape(format!(
            "filterbank has {} frequency bins, spectrogram {}",
            fb.weights.ncols(),
            spec.data.shape()[2]
        )));
    }
    Ok(())
}

/// `log(H_mel |S|^2 + EPS)` per channel, shape `[4, T, n_mels]`.
pub fn logmel(spec: &Spectrogram4, fb: &MelFilterbank) -> Result<Array3<f64>> {
    check_fb(spec, fb)?;
    let t = spec.n_frames();
    let mut out = Array3::zeros((4, t, fb.n_mels()));
    for c in 0..4 {
        let power = spec.data.index_axis(Axis(0), c).mapv(|v| v.norm_sqr());
        let mel = power.dot(&fb.weights.t());
        out.index_axis_mut(Axis(0), c)
            .assign(&mel.mapv(|v| (v + EPS).ln()));
    }
    Ok(out)
}

/// Active intensity `Re{W* (X, Y, Z)}` per bin, shape `[3, T, F]`.
/// The `1/(rho0 c)` factor is omitted; it cancels under normalization.
pub fn raw_intensity(spec: &Spectrogram4) -> Array3<f64> {
    let d = &spec.data;
    let (t, f) = (d.shape()[1], d.shape()[2]);
    Array3::from_shape_fn((3, t, f), |(c, j, k)| {
        (d[[0, j, k]].conj() * d[[c + 1, j, k]]).re
    })
}

/// Per-bin unit intensity vectors (pointing towards the source for the
/// encoder convention in [`crate::scene`]); bins with norm below `EPS`
/// shrink proportionally instead of being amplified.
pub fn normalized_intensity_bins(spec: &Spectrogram4) -> Array3<f64> {
    let mut i = raw_intensity(spec);
    let (t, f) = (i.shape()[1], i.shape()[2]);
    for j in 0..t {
        for k in 0..f {
            let norm = (0..3).map(|c| i[[c, j, k]].powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(EPS);
            for c in 0..3 {
                i[[c, j, k]] /= denom;
            }
        }
    }
    i
}

/// Mel-space normalized intensity vector with the leading minus sign,
/// shape `[3, T, n_mels]`.
pub fn intensity_vector(spec: &Spectrogram4, fb: &MelFilterbank) -> Result<Array3<f64>> {
    check_fb(spec, fb)?;
    let unit = normalized_intensity_bins(spec);
    let t = spec.n_frames();
    let mut out = Array3::zeros((3, t, fb.n_mels()));
    for c in 0..3 {
        let mel = unit.index_axis(Axis(0), c).dot(&fb.weights.t());
        out.index_axis_mut(Axis(0), c).assign(&mel.mapv(|v| -v));
    }
    Ok(out)
}

/// Per-frame direction read straight off the intensity field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoaEstimate {
    pub doa: DoaAngle,
    /// Resultant length of the energy-weighted unit vectors, in `[0, 1]`.
    /// Near 1 for a single plane wave, near 0 for diffuse fields.
    pub confidence: f64,
}

/// Energy-weighted mean of the per-bin unit intensity vectors of each
/// frame. Frames without energy yield `None`.
pub fn doa_from_intensity(spec: &Spectrogram4) -> Vec<Option<DoaEstimate>> {
    let raw = raw_intensity(spec);
    let (t, f) = (raw.shape()[1], raw.shape()[2]);
    (0..t)
        .map(|j| {
            // Each unit vector weighted by its bin's intensity magnitude:
            // the sum is just the raw intensity summed over bins.
            let mut sum = [0.0f64; 3];
            let mut weight = 0.0;
            for k in 0..f {
                let v = [raw[[0, j, k]], raw[[1, j, k]], raw[[2, j, k]]];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > EPS {
                    weight += norm;
                    for c in 0..3 {
                        sum[c] += v[c];
                    }
                }
            }
            if weight <= EPS {
                return None;
            }
            let mean = sum.map(|v| v / weight);
            let confidence = (mean[0].powi(2) + mean[1].powi(2) + mean[2].powi(2)).sqrt();
            DoaAngle::from_vector(mean).map(|doa| DoaEstimate { doa, confidence })
        })
        .collect()
}

/// Stacked network input: channels 0..4 log-mel (w, x, y, z), 4..7
/// intensity (x, y, z); shape `[7, T, n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    data: Array3<f32>,
    sample_rate_hz: u32,
}

impl FeatureTensor {
    pub fn new(data: Array3<f32>, sample_rate_hz: u32) -> Result<Self> {
        if data.shape()[0] != N_FEATURE_CHANNELS {
            return Err(FeatureError::Shape(format!(
                "feature tensor must have {N_FEATURE_CHANNELS} channels, got {}",
                data.shape()[0]
            )));
        }
        Ok(Self {
            data,
            sample_rate_hz,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn n_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_mels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn hop_len(&self) -> usize {
        HOP_LEN
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    /// Debug dump: `u32` frames, `u32` mel bins, then `7*T*K` f32, all LE.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&(self.n_frames() as u32).to_le_bytes())?;
        w.write_all(&(self.n_mels() as u32).to_le_bytes())?;
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: impl AsRef<Path>, sample_rate_hz: u32) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(FeatureError::Shape("dump shorter than its header".into()));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = N_FEATURE_CHANNELS * t * k;
        if bytes.len() != 8 + 4 * n {
            return Err(FeatureError::Shape(format!(
                "dump header says {t}x{k} but payload has {} bytes",
                bytes.len() - 8
            )));
        }
        let values: Vec<f32> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array3::from_shape_vec((N_FEATURE_CHANNELS, t, k), values)
            .map_err(|e| FeatureError::Shape(e.to_string()))?;
        Self::new(data, sample_rate_hz)
    }
}

/// Clip-to-feature pipeline with a fixed filterbank.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    filterbank: MelFilterbank,
    sample_rate_hz: u32,
}

impl FeatureExtractor {
    pub fn new(filterbank: MelFilterbank, sample_rate_hz: u32) -> Self {
        Self {
            filterbank,
            sample_rate_hz,
        }
    }

    pub fn with_defaults(sample_rate_hz: u32) -> Result<Self> {
        Ok(Self::new(
            MelFilterbank::default_for(sample_rate_hz)?,
            sample_rate_hz,
        ))
    }

    /// `n_mels` bins from 50 Hz to Nyquist.
    pub fn with_mels(n_mels: usize, sample_rate_hz: u32) -> Result<Self> {
        let fb = MelFilterbank::new(n_mels, sample_rate_hz, DEFAULT_F_MIN_HZ, sample_rate_hz as f64 / 2.0)?;
        Ok(Self::new(fb, sample_rate_hz))
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn n_mels(&self) -> usize {
        self.filterbank.n_mels()
    }

    pub fn extract(&self, clip: &FoaClip) -> Result<FeatureTensor> {
        if clip.sample_rate_hz() != self.sample_rate_hz {
            return Err(FeatureError::Shape(format!(
                "clip sampled at {} Hz, extractor built for {} Hz",
                clip.sample_rate_hz(),
                self.sample_rate_hz
            )));
        }
        let spec = stft(clip)?;
        let lm = logmel(&spec, &self.filterbank)?;
        let iv = intensity_vector(&spec, &self.filterbank)?;
        let (t, k) = (spec.n_frames(), self.n_mels());
        let mut data = Array3::<f32>::zeros((N_FEATURE_CHANNELS, t, k));
        data.slice_mut(s![0..4, .., ..]).assign(&lm.mapv(|v| v as f32));
        data.slice_mut(s![4..7, .., ..]).assign(&iv.mapv(|v| v as f32));
        FeatureTensor::new(data, clip.sample_rate_hz())
    }
}
