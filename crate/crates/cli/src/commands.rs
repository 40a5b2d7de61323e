//! The pipeline stages behind each subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ein_seld::autodiff::{DType, Float};
use ein_seld::checkpoint::Checkpoint;
use ein_seld::data::{build_segments, list_wavs, load_clips, Clip, Segmentation};
use ein_seld::features::FeatureExtractor;
use ein_seld::infer::{predict, to_label_grid, write_predictions};
use ein_seld::metrics::{count_grids, Counts, MetricsConfig, MetricsReport};
use ein_seld::model::Model;
use ein_seld::pit::{write_loss_csv, LossTotals};
use ein_seld::scene::{
    generate_clip_specs, read_labels, read_wav, synth_scene, write_labels, write_wav, ClipSpec, LabelGrid,
    LabelSchema,
};
use ein_seld::train::{TrainReport, Trainer};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const LOSS_CSV_FILE: &str = "losses.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_FILE_CSV: &str = "per_file.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::Json)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub n_cla: usize,
    pub n_track: usize,
    pub clips: Vec<ClipSpec>,
    pub same_class_overlap_clips: Vec<String>,
}

/// Renders a dataset: `<id>.wav`, `<id>.csv`, the manifest and the resolved config.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.dataset.validate()?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| CliError::io(format!("reading {}", out.display()), e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::NotEmpty(out.to_path_buf()));
        }
    }
    ensure_dir(out)?;
    let specs = generate_clip_specs(&cfg.dataset, cfg.seed);
    specs.par_iter().try_for_each(|spec| -> Result<()> {
        let (audio, labels) = synth_scene(&spec.events, &cfg.dataset.synth, spec.seed)?;
        write_wav(&audio, out.join(format!("{}.wav", spec.id)))?;
        write_labels(&labels, out.join(format!("{}.csv", spec.id)))?;
        Ok(())
    })?;
    let manifest = Manifest {
        seed: cfg.seed,
        sample_rate_hz: cfg.dataset.synth.sample_rate_hz,
        n_cla: cfg.dataset.synth.n_cla,
        n_track: cfg.dataset.synth.n_track,
        same_class_overlap_clips: specs.iter().filter(|s| s.same_class_overlap).map(|s| s.id.clone()).collect(),
        clips: specs,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let mut resolved = cfg.clone();
    resolved.paths.output = Some(out.to_path_buf());
    resolved.write_resolved(out)?;
    info!(
        "wrote {} clips ({} with same-class overlap) to {}",
        manifest.clips.len(),
        manifest.same_class_overlap_clips.len(),
        out.display()
    );
    Ok(manifest)
}

fn extractor_for(clips: &[Clip], n_mels: usize) -> Result<FeatureExtractor> {
    let sr = clips[0].audio.sample_rate_hz();
    if let Some(c) = clips.iter().find(|c| c.audio.sample_rate_hz() != sr) {
        return Err(CliError::Config(format!(
            "clip {} is sampled at {} Hz, others at {sr} Hz",
            c.id,
            c.audio.sample_rate_hz()
        )));
    }
    FeatureExtractor::with_mels(n_mels, sr).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub n_clips: usize,
    pub n_segments: usize,
    /// Metrics of the final model on its own training clips.
    pub held_in_metrics: MetricsReport,
}

/// Trains on `<data>/*.wav` + `*.csv`; everything is written under `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let model_cfg = resumed.as_ref().map_or(&cfg.model, |c| &c.model);
    if model_cfg != &cfg.model {
        warn!("resuming with the checkpoint's model configuration, which differs from the run configuration");
    }
    match model_cfg.precision {
        DType::F32 => train_typed::<f32>(cfg, data, out, resumed.as_ref()),
        DType::F64 => train_typed::<f64>(cfg, data, out, resumed.as_ref()),
    }
}

fn train_typed<F: Float>(cfg: &RunConfig, data: &Path, out: &Path, resumed: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let mut trainer = match resumed {
        Some(ck) => {
            let t = Trainer::<F>::from_checkpoint(ck)?;
            info!("resuming after epoch {}", t.state.epochs_done);
            t
        }
        None => Trainer::new(Model::<F>::init(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?,
    };
    // Epoch count may be extended on resume; everything else stays as stored.
    trainer.config.epochs = cfg.train.epochs;
    let mc = trainer.model.config().clone();
    let clips = load_clips(data, data, mc.n_cla, mc.n_track)?;
    let extractor = extractor_for(&clips, mc.n_mels)?;
    let seg = Segmentation::new(trainer.config.segment_len_s, trainer.config.overlap)?;
    let segments = build_segments(&clips, seg, &extractor, mc.n_cla)?;
    info!(
        "{} clips, {} segments, {} parameters, {} epochs",
        clips.len(),
        segments.len(),
        trainer.model.param_count(),
        trainer.config.epochs
    );
    ensure_dir(out)?;
    let mut resolved = cfg.clone();
    resolved.model = mc.clone();
    resolved.train = trainer.config.clone();
    resolved.paths.data = Some(data.to_path_buf());
    resolved.paths.output = Some(out.to_path_buf());
    resolved.write_resolved(out)?;

    let report = trainer.run(&segments, Some(&out.join(CHECKPOINT_DIR)), |_| {})?;
    let rows: Vec<(usize, LossTotals)> = report
        .epochs
        .iter()
        .map(|r| {
            (
                r.epoch,
                LossTotals {
                    l_sed: r.l_sed,
                    l_ead: r.l_ead,
                    l_doa: r.l_doa,
                    l_tpit: r.l_tpit,
                    objective: r.objective,
                },
            )
        })
        .collect();
    write_loss_csv(out.join(LOSS_CSV_FILE), &rows).map_err(|e| CliError::Config(e.to_string()))?;

    let mut counts = Counts::default();
    for c in clips
        .par_iter()
        .map(|clip| -> Result<Counts> {
            let preds = predict(&trainer.model, &extractor, &clip.audio, cfg.ead_threshold)?;
            Ok(count_grids(&to_label_grid(&preds, mc.n_track), &clip.labels, &cfg.metrics)?)
        })
        .collect::<Result<Vec<_>>>()?
    {
        counts += c;
    }
    let outcome = TrainOutcome {
        report,
        n_clips: clips.len(),
        n_segments: segments.len(),
        held_in_metrics: MetricsReport::from_counts(counts, cfg.metrics.threshold_deg),
    };
    write_json(&out.join(TRAIN_REPORT_FILE), &outcome)?;
    Ok(outcome)
}

/// Writes `<out>/<id>.csv` predictions for every WAV file in `input`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<usize> {
    if !(0.0..1.0).contains(&cfg.ead_threshold) {
        return Err(CliError::Config(format!("ead_threshold {} outside [0, 1)", cfg.ead_threshold)));
    }
    let ck = Checkpoint::load(checkpoint)?;
    match ck.model.precision {
        DType::F32 => infer_typed(&ck.to_model::<f32>()?, cfg, checkpoint, input, out),
        DType::F64 => infer_typed(&ck.to_model::<f64>()?, cfg, checkpoint, input, out),
    }
}

fn infer_typed<F: Float>(model: &Model<F>, cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<usize> {
    let wavs = list_wavs(input).map_err(|e| CliError::io(format!("listing {}", input.display()), io_of(e)))?;
    if wavs.is_empty() {
        return Err(CliError::NoInput(input.to_path_buf()));
    }
    ensure_dir(out)?;
    let n_track = model.config().n_track;
    wavs.par_iter().try_for_each(|wav| -> Result<()> {
        let audio = read_wav(wav)?;
        let extractor = FeatureExtractor::with_mels(model.config().n_mels, audio.sample_rate_hz())
            .map_err(|e| CliError::Config(e.to_string()))?;
        let preds = predict(model, &extractor, &audio, cfg.ead_threshold)?;
        let stem = wav.file_stem().unwrap_or_default().to_string_lossy();
        write_predictions(&preds, n_track, out.join(format!("{stem}.csv")))?;
        Ok(())
    })?;
    let mut resolved = cfg.clone();
    resolved.model = model.config().clone();
    resolved.paths.checkpoint = Some(checkpoint.to_path_buf());
    resolved.paths.data = Some(input.to_path_buf());
    resolved.paths.output = Some(out.to_path_buf());
    resolved.write_resolved(out)?;
    info!("wrote predictions for {} clips to {}", wavs.len(), out.display());
    Ok(wavs.len())
}

fn io_of(e: ein_seld::data::DataError) -> std::io::Error {
    match e {
        ein_seld::data::DataError::Io(e) => e,
        other => std::io::Error::other(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub file: String,
    pub counts: Counts,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub overall: MetricsReport,
    pub config: MetricsConfig,
    pub files: Vec<FileMetrics>,
}

fn list_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("reading {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    out.sort();
    Ok(out)
}

/// Scores every reference CSV against the same-named prediction CSV. A
/// missing prediction file counts as an empty prediction.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, ref_dir: &Path, out: Option<&Path>) -> Result<EvalOutcome> {
    cfg.metrics.validate()?;
    let refs = list_csvs(ref_dir)?;
    if refs.is_empty() {
        return Err(CliError::NoInput(ref_dir.to_path_buf()));
    }
    let schema = LabelSchema {
        n_cla: cfg.model.n_cla,
        n_track: cfg.model.n_track,
        n_frames: 0,
    };
    let mut files = Vec::new();
    let mut total = Counts::default();
    for r in &refs {
        let name = r.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let reference = read_labels(r, &schema)?;
        let pred_path = pred_dir.join(&name);
        let pred = if pred_path.exists() {
            read_labels(&pred_path, &schema)?
        } else {
            warn!("no prediction for {name}; scoring it as empty");
            LabelGrid::new(reference.n_frames(), schema.n_track)
        };
        let counts = count_grids(&pred, &reference, &cfg.metrics)?;
        total += counts;
        files.push(FileMetrics {
            file: name,
            counts,
            report: MetricsReport::from_counts(counts, cfg.metrics.threshold_deg),
        });
    }
    let outcome = EvalOutcome {
        overall: MetricsReport::from_counts(total, cfg.metrics.threshold_deg),
        config: cfg.metrics.clone(),
        files,
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write_json(&dir.join(METRICS_FILE), &outcome)?;
        write_per_file_csv(&dir.join(PER_FILE_CSV), &outcome.files)?;
        let mut resolved = cfg.clone();
        resolved.paths.predictions = Some(pred_dir.to_path_buf());
        resolved.paths.references = Some(ref_dir.to_path_buf());
        resolved.paths.output = Some(dir.to_path_buf());
        resolved.write_resolved(dir)?;
    }
    Ok(outcome)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_per_file_csv(path: &Path, files: &[FileMetrics]) -> Result<()> {
    let io = |e| CliError::io(format!("writing {}", path.display()), e);
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    writeln!(w, "file,er,f,le_deg,lr,tp,fp,fn,s,d,i,n,matches").map_err(io)?;
    for f in files {
        let c = &f.counts;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f.file,
            f.report.er,
            f.report.f,
            fmt_opt(f.report.le_deg),
            fmt_opt(f.report.lr),
            c.tp,
            c.fp,
            c.fn_,
            c.s,
            c.d,
            c.i,
            c.n,
            c.matches
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}
