//! Built-in numerical checks run by `ein-seld selfcheck`.

use ein_seld::checkpoint::{Checkpoint, CheckpointError};
use ein_seld::doa::DoaAngle;
use ein_seld::features::{doa_from_intensity, stft, stft_conv, HOP_LEN, WINDOW_LEN};
use ein_seld::metrics::{compute_metrics, MetricsConfig};
use ein_seld::model::{Model, ModelConfig, TrackOutputs};
use ein_seld::pit::{pair_loss, tpit_loss, FrameTargets, Permutation, TrackTarget};
use ein_seld::scene::{encode_plane_wave, LabelGrid, TrackLabel};
use ein_seld::train::{grad_check, GradCheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRAD_TOL_HEADS: f64 = 1e-8;
pub const GRAD_TOL_FULL: f64 = 1e-4;
pub const PIT_TOL: f64 = 1e-9;
pub const STFT_TOL: f64 = 1e-8;
pub const INTENSITY_TOL_DEG: f64 = 1.0;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_grad("gradient-heads", GradCheckConfig { seed, ..GradCheckConfig::heads_only() }, GRAD_TOL_HEADS),
        check_grad("gradient-full", GradCheckConfig { seed, ..Default::default() }, GRAD_TOL_FULL),
        check_tpit(seed),
        check_stft(seed),
        check_intensity(seed),
        check_checkpoint(seed),
        check_eval_identity(seed),
    ]
}

fn check_grad(name: &'static str, cfg: GradCheckConfig, tol: f64) -> CheckResult {
    match grad_check(&cfg) {
        Ok(r) => {
            let worst = r
                .per_param
                .iter()
                .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                .map(|p| p.name.as_str())
                .unwrap_or("-");
            CheckResult::new(
                name,
                r.all_finite && r.max_rel_error < tol,
                format!(
                    "max relative error {:.3e} (tol {tol:.0e}) over {} entries, worst {worst}",
                    r.max_rel_error, r.n_checked
                ),
            )
        }
        Err(e) => CheckResult::failed(name, e),
    }
}

/// Per-frame minimum against an explicit loop over every track permutation.
fn check_tpit(seed: u64) -> CheckResult {
    const FRAMES: usize = 1000;
    let (n_track, n_cla) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TrackOutputs::zeros(FRAMES, n_track, n_cla);
    out.sed_logits.mapv_inplace(|_| rng.random_range(-3.0..3.0));
    out.ead_logits.mapv_inplace(|_| rng.random_range(-3.0..3.0));
    out.doa.mapv_inplace(|_| rng.random_range(-3.0..3.0));
    let targets: Vec<FrameTargets> = (0..FRAMES)
        .map(|_| FrameTargets {
            tracks: (0..n_track)
                .map(|_| {
                    if rng.random_bool(0.6) {
                        let doa = DoaAngle::new(rng.random_range(-3.1..3.1), rng.random_range(-1.5..1.5)).unwrap();
                        TrackTarget::event(rng.random_range(0..n_cla), doa)
                    } else {
                        TrackTarget::silent(n_cla)
                    }
                })
                .collect(),
        })
        .collect();
    let loss = match tpit_loss(std::slice::from_ref(&out), &[&targets]) {
        Ok(l) => l,
        Err(e) => return CheckResult::failed("tpit-brute-force", e),
    };
    let mut worst = 0.0f64;
    let mut total = 0.0;
    for (f, frame) in targets.iter().enumerate() {
        let brute = Permutation::all(n_track)
            .iter()
            .map(|p| {
                (0..n_track)
                    .map(|t| pair_loss(&out, f, t, &frame.tracks[p[t]]).total())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((brute - loss.frames[f].min_cost()).abs());
        total += brute;
    }
    let total_err = (total - loss.l_tpit).abs() / total.abs().max(1.0);
    CheckResult::new(
        "tpit-brute-force",
        worst < PIT_TOL && total_err < PIT_TOL,
        format!("{FRAMES} frames, {n_track}! permutations, max frame error {worst:.2e}, total error {total_err:.2e}"),
    )
}

fn check_stft(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let n = WINDOW_LEN + 9 * HOP_LEN;
    let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let doa = DoaAngle::from_degrees(30.0, 10.0).unwrap();
    let result = encode_plane_wave(&signal, doa, 24_000).and_then(|clip| {
        let a = stft(&clip).map_err(|e| ein_seld::scene::SceneError::Config(e.to_string()))?;
        let b = stft_conv(&clip).map_err(|e| ein_seld::scene::SceneError::Config(e.to_string()))?;
        Ok((a, b))
    });
    match result {
        Ok((a, b)) => {
            let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.norm()));
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
            let rel = diff / scale.max(1e-300);
            CheckResult::new(
                "stft-fft-vs-conv",
                rel < STFT_TOL,
                format!("{} frames, max relative difference {rel:.2e}", a.n_frames()),
            )
        }
        Err(e) => CheckResult::failed("stft-fft-vs-conv", e),
    }
}

/// A noiseless plane wave must read back its own direction.
fn check_intensity(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let n = WINDOW_LEN + 19 * HOP_LEN;
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let doa = DoaAngle::from_degrees(rng.random_range(-179.0..179.0), rng.random_range(-80.0..80.0)).unwrap();
        let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = match encode_plane_wave(&signal, doa, 24_000)
            .map_err(|e| e.to_string())
            .and_then(|c| stft(&c).map_err(|e| e.to_string()))
        {
            Ok(s) => s,
            Err(e) => return CheckResult::failed("intensity-direction", e),
        };
        for est in doa_from_intensity(&spec) {
            match est {
                Some(e) => worst = worst.max(e.doa.angular_distance_deg(&doa)),
                None => return CheckResult::new("intensity-direction", false, "frame without energy".into()),
            }
        }
    }
    CheckResult::new(
        "intensity-direction",
        worst < INTENSITY_TOL_DEG,
        format!("8 plane waves, worst angular error {worst:.2e} deg"),
    )
}

/// Round trip, then truncation, a corrupted header and a bad magic.
fn check_checkpoint(seed: u64) -> CheckResult {
    const NAME: &str = "checkpoint-integrity";
    let cfg = ModelConfig {
        n_mels: 8,
        conv_channels: vec![4, 4],
        gru_hidden: 4,
        ..Default::default()
    };
    let model = match Model::<f32>::init(cfg, seed) {
        Ok(m) => m,
        Err(e) => return CheckResult::failed(NAME, e),
    };
    let bytes = match Checkpoint::from_model(&model, None, serde_json::json!({})).to_bytes() {
        Ok(b) => b,
        Err(e) => return CheckResult::failed(NAME, e),
    };
    let round_trip = Checkpoint::from_bytes(&bytes)
        .and_then(|c| c.to_model::<f32>())
        .map(|m| m.params() == model.params())
        .unwrap_or(false);
    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err();
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let bad_magic = matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::Version(_)));
    let mut header = bytes.clone();
    header[20] = b'}';
    let bad_header = Checkpoint::from_bytes(&header).is_err();
    let passed = round_trip && truncated && bad_magic && bad_header;
    CheckResult::new(
        NAME,
        passed,
        format!("round trip {round_trip}, truncation rejected {truncated}, bad magic rejected {bad_magic}, bad header rejected {bad_header}"),
    )
}

fn check_eval_identity(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut grid = LabelGrid::new(100, 3);
    for f in 0..100 {
        for t in 0..3 {
            if rng.random_bool(0.5) {
                let doa = DoaAngle::from_degrees(rng.random_range(-180.0..180.0), rng.random_range(-90.0..90.0)).unwrap();
                grid.set(f, t, Some(TrackLabel { class_id: rng.random_range(0..4), doa }));
            }
        }
    }
    match compute_metrics(&grid, &grid, &MetricsConfig::default()) {
        Ok(r) => {
            let passed = r.er == 0.0 && r.f == 1.0 && r.le_deg.is_some_and(|v| v.abs() < 1e-9) && r.lr == Some(1.0);
            CheckResult::new(
                "eval-identity",
                passed,
                format!("ER {} F {} LE {:?} LR {:?}", r.er, r.f, r.le_deg, r.lr),
            )
        }
        Err(e) => CheckResult::failed("eval-identity", e),
    }
}
