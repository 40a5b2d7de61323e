use std::path::Path;

use hound::{SampleFormat, WavSpec};
use ndarray::Array2;

use super::{FoaClip, Result, SceneError};

/// Writes a clip as 4-channel 16-bit PCM.
pub fn write_wav(clip: &FoaClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = WavSpec {
        channels: 4,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    let samples = clip.samples();
    for n in 0..clip.len() {
        for c in 0..4 {
            let v = (samples[[c, n]].clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
            w.write_sample(v)?;
        }
    }
    w.finalize()?;
    Ok(())
}

/// Reads a 4-channel WAV (integer PCM or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<FoaClip> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 4 {
        return Err(SceneError::ChannelCount(spec.channels as usize));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64 - 1.0;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    let len = interleaved.len() / 4;
    let samples = Array2::from_shape_fn((4, len), |(c, n)| interleaved[n * 4 + c]);
    FoaClip::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_round_trip_within_quantum() {
        let samples = Array2::from_shape_fn((4, 1000), |(c, n)| {
            ((n as f64 * 0.01 + c as f64).sin() * 0.8).clamp(-1.0, 1.0)
        });
        let clip = FoaClip::new(samples, 24_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        write_wav(&clip, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz(), 24_000);
        assert_eq!(back.len(), 1000);
        let err = (back.samples() - clip.samples())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err <= 1.0 / 32767.0);
    }
}
