//! Acceptance criteria 1-8. Runs as a plain binary (no libtest harness) so
//! every criterion prints exactly one PASS/FAIL line.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ein_seld::doa::DoaAngle;
use ein_seld::features::{doa_from_intensity, stft, stft_conv, HOP_LEN, N_FREQ, WINDOW_LEN};
use ein_seld::metrics::{compute_metrics, MetricsConfig};
use ein_seld::model::TrackOutputs;
use ein_seld::pit::{tpit_loss, FrameTargets, TrackTarget};
use ein_seld::scene::{read_labels, synth_scene, FoaClip, LabelGrid, LabelSchema, SceneEvent, SynthConfig, TrackLabel};
use ein_seld::train::{grad_check, GradCheckConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

// Tolerances and budgets.
const C1_MEDIAN_DEG: f64 = 1.0;
const C1_MAX_DEG: f64 = 5.0;
const C1_RUNTIME_S: f64 = 60.0;
const C2_REL_TOL: f64 = 1e-9;
const C2_RUNTIME_S: f64 = 60.0;
const C3_REL_TOL: f64 = 1e-4;
const C3_MAX_PARAMS: usize = 5_000;
const C3_RUNTIME_S: f64 = 300.0;
const C4_REL_TOL: f64 = 1e-6;
const C5_F_MIN: f64 = 0.90;
const C5_LR_MIN: f64 = 0.90;
const C5_LE_MAX_DEG: f64 = 10.0;
const C5_ER_MAX: f64 = 0.15;
const C5_MAX_EPOCHS: usize = 40;
const C5_TRAIN_BUDGET_S: f64 = 20.0 * 60.0;
const C6_MIN_FRACTION: f64 = 0.80;
const C6_THRESHOLD_DEG: f64 = 20.0;
const C7_LE_DEG: f64 = 30.0;
const C7_LE_TOL_DEG: f64 = 0.1;

const SEED: u64 = 2024;

/// Desk-scale overfit configuration for criteria 5 and 6.
fn overfit_config() -> Value {
    json!({
        "seed": SEED,
        "dataset": {
            "n_clips": 24,
            "synth": { "clip_len_s": 10.0, "n_cla": 3, "n_track": 2 },
            "same_class_overlap_prob": 0.5,
            "min_separation_deg": 60.0
        },
        "model": { "n_cla": 3, "n_track": 2, "n_mels": 32 },
        "train": {
            "epochs": C5_MAX_EPOCHS,
            "batch_size": 4,
            "lr": 1e-3,
            "lr_decayed": 2e-4
        }
    })
}

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ein-seld")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| format!("cannot start CLI: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`ein-seld {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

// Independent oracles.

fn unit_vector(az: f64, el: f64) -> [f64; 3] {
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Great-circle distance in degrees, from the dot product of unit vectors.
fn great_circle_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    let u = unit_vector(a.0, a.1);
    let v = unit_vector(b.0, b.1);
    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

fn angles(d: &DoaAngle) -> (f64, f64) {
    (d.azimuth(), d.elevation())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross entropy + logistic loss on the logit + masked L1 on wrapped angles.
fn pair_cost(out: &TrackOutputs, f: usize, t: usize, target: &TrackTarget, n_cla: usize) -> f64 {
    let logits: Vec<f64> = (0..=n_cla).map(|c| out.sed_logits[[f, t, c]]).collect();
    let sed = log_sum_exp(&logits) - logits[target.class_id];
    let x = out.ead_logits[[f, t]];
    let y = if target.active { 1.0 } else { 0.0 };
    let ead = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
    let mut daz = (out.doa[[f, t, 0]] - target.doa.azimuth()).rem_euclid(2.0 * PI);
    if daz > PI {
        daz -= 2.0 * PI;
    }
    let del = out.doa[[f, t, 1]] - target.doa.elevation();
    sed + ead + 0.5 * (daz.abs() + del.abs()) * y
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(pos, n - 1);
            out.push(v);
        }
    }
    out
}

// Criteria.

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cfg = SynthConfig {
        clip_len_s: 1.0,
        noise_snr_db: None,
        n_track: 1,
        ..Default::default()
    };
    let mut errors = Vec::new();
    for _ in 0..100 {
        let az = rng.random_range(-PI..PI);
        let el = rng.random_range(-1.3..1.3);
        let doa = DoaAngle::new(az, el).unwrap();
        let class = rng.random_range(0..cfg.n_cla);
        let ev = SceneEvent::fixed(class, 0.0, cfg.clip_len_s, doa);
        let (clip, _) = synth_scene(&[ev], &cfg, rng.random()).unwrap();
        let spec = stft(&clip).unwrap();
        for est in doa_from_intensity(&spec).into_iter().flatten() {
            errors.push(great_circle_deg(angles(&est.doa), (az, el)));
        }
    }
    errors.sort_by(f64::total_cmp);
    let median = errors[errors.len() / 2];
    let max = *errors.last().unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        !errors.is_empty() && median < C1_MEDIAN_DEG && max < C1_MAX_DEG && secs < C1_RUNTIME_S,
        format!(
            "{} frames over 100 clips: median {median:.2e} deg (< {C1_MEDIAN_DEG}), max {max:.2e} deg (< {C1_MAX_DEG}), {secs:.1}s",
            errors.len()
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let n_cla = 3;
    let mut worst = 0.0f64;
    let mut fixed_violations = 0;
    let mut frames = 0;
    for n_track in [2usize, 3] {
        let n = 500;
        let mut out = TrackOutputs::zeros(n, n_track, n_cla);
        out.sed_logits.mapv_inplace(|_| rng.random_range(-4.0..4.0));
        out.ead_logits.mapv_inplace(|_| rng.random_range(-4.0..4.0));
        out.doa.mapv_inplace(|_| rng.random_range(-4.0..4.0));
        let targets: Vec<FrameTargets> = (0..n)
            .map(|_| FrameTargets {
                tracks: (0..n_track)
                    .map(|_| {
                        if rng.random_bool(0.6) {
                            let doa = DoaAngle::new(rng.random_range(-PI..PI), rng.random_range(-1.5..1.5)).unwrap();
                            TrackTarget::event(rng.random_range(0..n_cla), doa)
                        } else {
                            TrackTarget::silent(n_cla)
                        }
                    })
                    .collect(),
            })
            .collect();
        let loss = tpit_loss(std::slice::from_ref(&out), &[&targets]).unwrap();
        let perms = permutations(n_track);
        let mut fixed_totals = vec![0.0; perms.len()];
        let mut min_total = 0.0;
        for (f, frame) in targets.iter().enumerate() {
            let costs: Vec<f64> = perms
                .iter()
                .map(|perm| (0..n_track).map(|t| pair_cost(&out, f, t, &frame.tracks[perm[t]], n_cla)).sum())
                .collect();
            let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            let got = loss.frames[f].min_cost();
            worst = worst.max((got - min).abs() / min.abs().max(1e-12));
            min_total += min;
            for (acc, c) in fixed_totals.iter_mut().zip(&costs) {
                *acc += c;
            }
        }
        worst = worst.max((loss.l_tpit - min_total).abs() / min_total.abs());
        fixed_violations += fixed_totals.iter().filter(|&&t| loss.l_tpit > t * (1.0 + C2_REL_TOL)).count();
        frames += n;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < C2_REL_TOL && fixed_violations == 0 && secs < C2_RUNTIME_S,
        format!(
            "{frames} frames, n_track 2 and 3: max relative gap to exhaustive minimum {worst:.2e} (< {C2_REL_TOL:.0e}), fixed assignments beating tPIT {fixed_violations}, {secs:.1}s"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let report = match grad_check(&GradCheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("grad check failed to run: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let kinds: Vec<String> = report.per_kind.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let all_kinds = ["batchnorm", "conv", "dense", "gru"].iter().all(|k| report.per_kind.contains_key(*k));
    Outcome::new(
        report.all_finite
            && all_kinds
            && report.n_params <= C3_MAX_PARAMS
            && report.n_checked == report.n_params
            && report.max_rel_error < C3_REL_TOL
            && secs < C3_RUNTIME_S,
        format!(
            "{} params in f64, max relative error {:.2e} (< {C3_REL_TOL:.0e}); per kind: {}; {secs:.1}s",
            report.n_params,
            report.max_rel_error,
            kinds.join(", ")
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut worst = 0.0f64;
    let mut worst_dft = 0.0f64;
    for trial in 0..5 {
        let len = WINDOW_LEN + rng.random_range(0..20) * HOP_LEN + rng.random_range(0..HOP_LEN);
        let samples = Array2::from_shape_fn((4, len), |_| rng.random_range(-1.0..1.0));
        let clip = FoaClip::new(samples.clone(), 24_000).unwrap();
        let a = stft(&clip).unwrap();
        let b = stft_conv(&clip).unwrap();
        let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.norm()));
        let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).norm()));
        worst = worst.max(diff / scale);
        if trial == 0 {
            // Direct DFT of one frame per channel.
            for c in 0..4 {
                for k in (0..N_FREQ).step_by(37) {
                    let (mut re, mut im) = (0.0, 0.0);
                    for n in 0..WINDOW_LEN {
                        let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW_LEN as f64).cos();
                        let ph = -2.0 * PI * (k * n) as f64 / WINDOW_LEN as f64;
                        re += w * samples[[c, n]] * ph.cos();
                        im += w * samples[[c, n]] * ph.sin();
                    }
                    let got = a.data()[[c, 0, k]];
                    worst_dft = worst_dft.max(((got.re - re).powi(2) + (got.im - im).powi(2)).sqrt() / scale);
                }
            }
        }
    }
    Outcome::new(
        worst < C4_REL_TOL && worst_dft < C4_REL_TOL,
        format!("5 random signals: FFT vs conv {worst:.2e}, FFT vs direct DFT {worst_dft:.2e} (< {C4_REL_TOL:.0e} relative)"),
    )
}

/// Frames where the reference has two active events of one class.
fn same_class_frames(labels: &LabelGrid) -> Vec<usize> {
    (0..labels.n_frames())
        .filter(|&f| {
            let act: Vec<&TrackLabel> = labels.active(f).map(|(_, l)| l).collect();
            act.len() == 2 && act[0].class_id == act[1].class_id
        })
        .collect()
}

/// Both references found on distinct predicted tracks with the right class
/// and within the threshold.
fn resolved(pred: &LabelGrid, refs: &LabelGrid, f: usize) -> bool {
    let r: Vec<&TrackLabel> = refs.active(f).map(|(_, l)| l).collect();
    let q: Vec<(usize, &TrackLabel)> = pred.active(f).filter(|(_, l)| l.class_id == r[0].class_id).collect();
    let ok = |a: &TrackLabel, b: &TrackLabel| great_circle_deg(angles(&a.doa), angles(&b.doa)) <= C6_THRESHOLD_DEG;
    for (i, (ti, qi)) in q.iter().enumerate() {
        for (tj, qj) in q.iter().skip(i + 1) {
            if ti != tj && ((ok(qi, r[0]) && ok(qj, r[1])) || (ok(qi, r[1]) && ok(qj, r[0]))) {
                return true;
            }
        }
    }
    false
}

struct OverfitRun {
    metrics: Value,
    train_s: f64,
    epochs: usize,
    first_tpit: f64,
    last_tpit: f64,
    same_class: (usize, usize),
}

fn overfit_run(work: &Path) -> Result<OverfitRun, String> {
    let cfg_path = work.join("overfit.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&overfit_config()).unwrap()).map_err(|e| e.to_string())?;
    let data = work.join("data");
    let run = work.join("run");
    let preds = work.join("pred");
    let scores = work.join("eval");
    run_cli(&["--config", p(&cfg_path), "synth", "--out", p(&data)])?;
    let start = Instant::now();
    run_cli(&["--config", p(&cfg_path), "train", "--data", p(&data), "--out", p(&run)])?;
    let train_s = start.elapsed().as_secs_f64();
    let ckpt = run.join("checkpoints").join("final.ckpt");
    run_cli(&["--config", p(&cfg_path), "infer", "--checkpoint", p(&ckpt), "--input", p(&data), "--out", p(&preds)])?;
    run_cli(&["--config", p(&cfg_path), "eval", "--pred", p(&preds), "--ref", p(&data), "--out", p(&scores)])?;
    let metrics: Value = serde_json::from_str(&fs::read_to_string(scores.join("metrics.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;

    let losses = fs::read_to_string(run.join("losses.csv")).map_err(|e| e.to_string())?;
    let tpit: Vec<f64> = losses
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();

    let schema = LabelSchema {
        n_cla: 3,
        n_track: 2,
        n_frames: 0,
    };
    let mut hits = 0;
    let mut total = 0;
    let mut csvs: Vec<PathBuf> = fs::read_dir(&data)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    csvs.sort();
    for r in csvs {
        let refs = read_labels(&r, &schema).map_err(|e| e.to_string())?;
        let pred = read_labels(preds.join(r.file_name().unwrap()), &schema).map_err(|e| e.to_string())?;
        for f in same_class_frames(&refs) {
            total += 1;
            if f < pred.n_frames() && resolved(&pred, &refs, f) {
                hits += 1;
            }
        }
    }
    Ok(OverfitRun {
        metrics,
        train_s,
        epochs: tpit.len(),
        first_tpit: tpit[0],
        last_tpit: *tpit.last().unwrap(),
        same_class: (hits, total),
    })
}

fn criterion_5(run: &Result<OverfitRun, String>) -> Outcome {
    let r = match run {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.clone()),
    };
    let o = &r.metrics["overall"];
    let er = o["er"].as_f64().unwrap_or(f64::INFINITY);
    let f = o["f"].as_f64().unwrap_or(0.0);
    let le = o["le_deg"].as_f64().unwrap_or(f64::INFINITY);
    let lr = o["lr"].as_f64().unwrap_or(0.0);
    let ratio = r.last_tpit / r.first_tpit;
    Outcome::new(
        f >= C5_F_MIN
            && lr >= C5_LR_MIN
            && le <= C5_LE_MAX_DEG
            && er <= C5_ER_MAX
            && r.epochs <= C5_MAX_EPOCHS
            && r.train_s <= C5_TRAIN_BUDGET_S,
        format!(
            "F {f:.3} (>= {C5_F_MIN}), LR {lr:.3} (>= {C5_LR_MIN}), LE {le:.2} deg (<= {C5_LE_MAX_DEG}), ER {er:.3} (<= {C5_ER_MAX}); {} epochs in {:.0}s; final/initial L_tPIT {ratio:.3}",
            r.epochs, r.train_s
        ),
    )
}

fn criterion_6(run: &Result<OverfitRun, String>) -> Outcome {
    let r = match run {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e.clone()),
    };
    let (hits, total) = r.same_class;
    let frac = hits as f64 / total.max(1) as f64;
    Outcome::new(
        total > 0 && frac >= C6_MIN_FRACTION,
        format!("{hits}/{total} same-class overlap frames resolved ({frac:.3}, needs >= {C6_MIN_FRACTION})"),
    )
}

fn random_grid(rng: &mut ChaCha8Rng, frames: usize) -> LabelGrid {
    let mut g = LabelGrid::new(frames, 3);
    for f in 0..frames {
        for t in 0..3 {
            if rng.random_bool(0.4) {
                let doa = DoaAngle::new(rng.random_range(-PI..PI), rng.random_range(-1.5..1.5)).unwrap();
                g.set(
                    f,
                    t,
                    Some(TrackLabel {
                        class_id: rng.random_range(0..4),
                        doa,
                    }),
                );
            }
        }
    }
    g
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let cfg = MetricsConfig::default();
    let mut perfect = 0;
    for _ in 0..50 {
        let mut g = random_grid(&mut rng, 40);
        // Every grid carries at least one event.
        g.set(
            0,
            0,
            Some(TrackLabel {
                class_id: 0,
                doa: DoaAngle::new(0.0, 0.0).unwrap(),
            }),
        );
        let r = compute_metrics(&g, &g, &cfg).unwrap();
        if r.er == 0.0 && r.f == 1.0 && r.le_deg == Some(0.0) && r.lr == Some(1.0) {
            perfect += 1;
        }
    }

    // One event, every prediction 30 degrees away along the equator.
    let mut refs = LabelGrid::new(20, 2);
    let mut preds = LabelGrid::new(20, 2);
    for f in 0..20 {
        let az = -1.0 + 0.05 * f as f64;
        refs.set(f, 0, Some(TrackLabel { class_id: 1, doa: DoaAngle::new(az, 0.0).unwrap() }));
        preds.set(
            f,
            1,
            Some(TrackLabel {
                class_id: 1,
                doa: DoaAngle::new(az + 30f64.to_radians(), 0.0).unwrap(),
            }),
        );
    }
    let off = compute_metrics(&preds, &refs, &cfg).unwrap();
    let offset_ok = off.f == 0.0
        && off.er == 1.0
        && off.lr == Some(1.0)
        && off.le_deg.is_some_and(|le| (le - C7_LE_DEG).abs() <= C7_LE_TOL_DEG);

    let mut monotone = true;
    for _ in 0..20 {
        let a = random_grid(&mut rng, 30);
        let b = random_grid(&mut rng, 30);
        let reports: Vec<_> = [5.0, 10.0, 20.0, 40.0]
            .iter()
            .map(|&t| compute_metrics(&a, &b, &MetricsConfig { threshold_deg: t, ..cfg.clone() }).unwrap())
            .collect();
        for w in reports.windows(2) {
            if w[1].f < w[0].f || w[1].er > w[0].er || w[1].le_deg != w[0].le_deg {
                monotone = false;
            }
        }
    }
    Outcome::new(
        perfect == 50 && offset_ok && monotone,
        format!(
            "{perfect}/50 self-comparisons perfect; 30 deg offset: F {} ER {} LE {:?} LR {:?}; threshold monotone {monotone}",
            off.f, off.er, off.le_deg, off.lr
        ),
    )
}

/// File contents by name; the resolved config is left out because it
/// records its own output path.
fn dir_digest(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && !p.ends_with("config.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn criterion_8(work: &Path) -> Outcome {
    let cfg = json!({
        "dataset": { "n_clips": 4 },
        "model": { "n_mels": 16, "conv_channels": [4, 8], "gru_hidden": 8 },
        "train": { "epochs": 2, "batch_size": 2 }
    });
    let cfg_path = work.join("det.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let run = || -> Result<(bool, bool), String> {
        let (d1, d2) = (work.join("det_a"), work.join("det_b"));
        for d in [&d1, &d2] {
            run_cli(&["--config", p(&cfg_path), "synth", "--seed", "7", "--out", p(d)])?;
        }
        let synth_same = dir_digest(&d1) == dir_digest(&d2);
        let (r1, r2) = (work.join("det_run_a"), work.join("det_run_b"));
        for r in [&r1, &r2] {
            run_cli(&["--config", p(&cfg_path), "--single-thread", "train", "--seed", "3", "--data", p(&d1), "--out", p(r)])?;
        }
        let ck = |r: &Path| fs::read(r.join("checkpoints").join("final.ckpt")).unwrap();
        let loss = |r: &Path| fs::read(r.join("losses.csv")).unwrap();
        let train_same = ck(&r1) == ck(&r2) && loss(&r1) == loss(&r2);
        Ok((synth_same, train_same))
    };
    match run() {
        Ok((s, t)) => Outcome::new(s && t, format!("synth byte-identical {s}; single-threaded train checkpoints and losses identical {t}")),
        Err(e) => Outcome::new(false, e),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // libtest flags such as --list are not supported; listing is empty.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} {}: {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "intensity DoA oracle", criterion_1());
    record(2, "tPIT equals exhaustive minimum", criterion_2());
    record(3, "gradient check", criterion_3());
    record(4, "STFT routes agree", criterion_4());
    let overfit = overfit_run(work.path());
    record(5, "overfit metrics", criterion_5(&overfit));
    record(6, "same-class overlap resolution", criterion_6(&overfit));
    record(7, "metrics sanity", criterion_7());
    record(8, "determinism", criterion_8(work.path()));
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
