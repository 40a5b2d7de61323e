//! Mini-batch training on the tPIT objective, checkpointing and a
//! finite-difference gradient check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Float;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::Segment;
use crate::doa::DoaAngle;
use crate::features::N_FEATURE_CHANNELS;
use crate::model::{Model, ModelConfig, ModelError, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::pit::{assignment_loss_with_grad, tpit_loss_with_grad, FrameTargets, LossBreakdown, PitError, TrackTarget};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}{}", dump.as_ref().map(|p| format!(" (batch dump: {})", p.display())).unwrap_or_default())]
    NonFinite {
        epoch: usize,
        batch: usize,
        dump: Option<PathBuf>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pit(#[from] PitError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Epoch at which the full-length schedule drops the learning rate.
const REFERENCE_BREAKPOINT: usize = 60;
const REFERENCE_EPOCHS: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub segment_len_s: f64,
    pub overlap: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    /// First epoch (0-based) at `lr_decayed`; defaults to 60/80 of `epochs`.
    pub lr_breakpoint: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segment_len_s: 5.0,
            overlap: 0.8,
            epochs: 40,
            batch_size: 8,
            lr: 5e-4,
            lr_decayed: 1e-4,
            lr_breakpoint: None,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(0.0..1.0).contains(&self.overlap) {
            return fail(format!("overlap {} outside [0, 1)", self.overlap));
        }
        if !(self.segment_len_s > 0.0) {
            return fail(format!("segment length {} must be positive", self.segment_len_s));
        }
        if !(self.lr > 0.0) || !(self.lr_decayed > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("Adam needs betas in [0, 1) and a positive epsilon".into());
        }
        Ok(())
    }

    pub fn breakpoint(&self) -> usize {
        self.lr_breakpoint.unwrap_or_else(|| {
            (self.epochs as f64 * REFERENCE_BREAKPOINT as f64 / REFERENCE_EPOCHS as f64).round() as usize
        })
    }

    /// Learning rate of 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.breakpoint() {
            self.lr
        } else {
            self.lr_decayed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_sed: f64,
    pub l_ead: f64,
    pub l_doa: f64,
    pub l_tpit: f64,
    /// Mean minimized objective over the epoch's batches.
    pub objective: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub param_count: usize,
    pub wall_s: f64,
}

#[derive(Serialize, Deserialize)]
struct StoredState {
    train: TrainConfig,
    progress: TrainState,
}

pub struct Trainer<F: Float> {
    pub model: Model<F>,
    pub adam: Adam<F>,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl<F: Float> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, model.params());
        Ok(Self {
            model,
            adam,
            config,
            state: TrainState::default(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let stored: StoredState = serde_json::from_value(ck.state.clone())?;
        let model = ck.to_model::<F>()?;
        let adam = ck
            .to_adam(&model)?
            .unwrap_or_else(|| Adam::new(stored.train.adam, model.params()));
        stored.train.validate()?;
        Ok(Self {
            model,
            adam,
            config: stored.train,
            state: stored.progress,
        })
    }

    /// Wall times are zeroed so that identical runs give identical bytes.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut progress = self.state.clone();
        progress.history.iter_mut().for_each(|r| r.wall_s = 0.0);
        let state = serde_json::to_value(StoredState {
            train: self.config.clone(),
            progress,
        })
        .expect("plain data");
        Checkpoint::from_model(&self.model, Some(&self.adam), state)
    }

    /// Batch order of an epoch; depends only on the seed and epoch index.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on a batch; returns the loss before the update.
    pub fn step(&mut self, batch: &[&Segment], lr: f64) -> Result<Option<LossBreakdown>> {
        let feats: Vec<_> = batch.iter().map(|s| &s.features).collect();
        let targets: Vec<&[FrameTargets]> = batch.iter().map(|s| s.targets.as_slice()).collect();
        let pass = self.model.forward(&feats, Mode::Train)?;
        let (lb, out_grads) = tpit_loss_with_grad(&pass.outputs, &targets)?;
        if !lb.objective().is_finite() {
            return Ok(None);
        }
        let grads = self.model.backward(&pass, &out_grads)?;
        if !grads.all_finite() {
            return Ok(None);
        }
        self.adam.update(self.model.params_mut(), &grads, lr);
        self.model.commit_batch_stats(&pass);
        Ok(Some(lb))
    }

    pub fn train_epoch(&mut self, segments: &[Segment], dump_dir: Option<&Path>) -> Result<EpochRecord> {
        if segments.is_empty() {
            return Err(TrainError::Config("no training segments".into()));
        }
        let epoch = self.state.epochs_done;
        let lr = self.config.lr_at(epoch);
        let start = Instant::now();
        let order = self.epoch_order(epoch, segments.len());
        let (mut sed, mut ead, mut doa_sum, mut mask, mut tpit, mut obj) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Segment> = chunk.iter().map(|&i| &segments[i]).collect();
            let Some(lb) = self.step(&batch, lr)? else {
                let dump = dump_dir.map(|d| write_dump(d, epoch, b, &batch)).transpose()?;
                return Err(TrainError::NonFinite { epoch, batch: b, dump });
            };
            sed += lb.l_sed;
            ead += lb.l_ead;
            doa_sum += lb.l_doa * lb.mask_sum;
            mask += lb.mask_sum;
            tpit += lb.l_tpit;
            obj += lb.objective();
            n_batches += 1;
        }
        self.state.epochs_done += 1;
        let rec = EpochRecord {
            epoch,
            lr,
            l_sed: sed,
            l_ead: ead,
            l_doa: if mask > 0.0 { doa_sum / mask } else { 0.0 },
            l_tpit: tpit,
            objective: obj / n_batches as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        self.state.history.push(rec.clone());
        Ok(rec)
    }

    /// Trains until `config.epochs` epochs are done, writing
    /// `epoch_NNNN.ckpt` after every epoch and `final.ckpt` at the end.
    pub fn run(
        &mut self,
        segments: &[Segment],
        ckpt_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        let start = Instant::now();
        if let Some(d) = ckpt_dir {
            std::fs::create_dir_all(d)?;
        }
        while self.state.epochs_done < self.config.epochs {
            let rec = self.train_epoch(segments, ckpt_dir)?;
            info!(
                "epoch {} lr {:.1e} objective {:.4} L_tPIT {:.2} ({:.1}s)",
                rec.epoch, rec.lr, rec.objective, rec.l_tpit, rec.wall_s
            );
            if let Some(d) = ckpt_dir {
                self.checkpoint().save(d.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
            }
            on_epoch(&rec);
        }
        let final_checkpoint = match ckpt_dir {
            Some(d) => {
                let p = d.join("final.ckpt");
                self.checkpoint().save(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainReport {
            epochs: self.state.history.clone(),
            final_checkpoint,
            param_count: self.model.param_count(),
            wall_s: start.elapsed().as_secs_f64(),
        })
    }
}

fn write_dump(dir: &Path, epoch: usize, batch: usize, segments: &[&Segment]) -> Result<PathBuf> {
    let path = dir.join(format!("nonfinite_epoch{epoch}_batch{batch}.json"));
    let items: Vec<_> = segments
        .iter()
        .map(|s| {
            let data = s.features.data();
            serde_json::json!({
                "clip": s.clip_id,
                "start_frame": s.start_frame,
                "feature_min": data.iter().cloned().fold(f32::INFINITY, f32::min),
                "feature_max": data.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
                "non_finite_features": data.iter().filter(|v| !v.is_finite()).count(),
            })
        })
        .collect();
    std::fs::write(&path, serde_json::to_vec_pretty(&serde_json::json!({ "epoch": epoch, "batch": batch, "segments": items }))?)?;
    warn!("wrote non-finite batch dump to {}", path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub stft_frames: usize,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Only perturb the fully connected output layers.
    pub heads_only: bool,
    pub zero_input: bool,
}

impl GradCheckConfig {
    /// Output layers only. They sit past every ReLU, so a larger step
    /// stays clear of kinks. Roundoff in the difference quotient is still
    /// about 1e-12, so gradients that cancel to zero (L1 sign sums) are
    /// judged against a 1e-4 denominator floor.
    pub fn heads_only() -> Self {
        Self {
            heads_only: true,
            step: 1e-3,
            floor: 1e-4,
            ..Default::default()
        }
    }
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_cla: 3,
                n_track: 2,
                n_mels: 8,
                conv_channels: vec![4, 4],
                gru_hidden: 4,
                gru_layers: 2,
                time_pool: 5,
                freq_pool: 2,
                precision: crate::autodiff::DType::F64,
            },
            batch: 2,
            stft_frames: 10,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
            heads_only: false,
            zero_input: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub kind: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub n_checked: usize,
    pub max_rel_error: f64,
    /// Worst relative error per layer kind.
    pub per_kind: BTreeMap<String, f64>,
    pub per_param: Vec<ParamCheck>,
    pub all_finite: bool,
}

impl GradCheckReport {
    /// Parameters whose worst error exceeds `tol`.
    pub fn failing(&self, tol: f64) -> Vec<&ParamCheck> {
        self.per_param.iter().filter(|p| !(p.rel_error < tol)).collect()
    }
}

/// Layer kind of a parameter, from its name.
pub fn layer_kind(name: &str) -> &'static str {
    if name.ends_with(".gamma") || name.ends_with(".beta") {
        "batchnorm"
    } else if name.contains(".conv") && name.ends_with(".weight") && !name.contains(".fc") {
        "conv"
    } else if name.contains(".gru.") {
        "gru"
    } else {
        "dense"
    }
}

/// Compares backpropagated gradients of the training objective with central
/// finite differences, in `f64`. The permutation chosen at the unperturbed
/// point is held fixed so the checked function is smooth.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::init(cfg.model.clone(), cfg.seed)?;
    let mc = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let input = if cfg.zero_input {
        Array4::<f64>::zeros((cfg.batch, N_FEATURE_CHANNELS, cfg.stft_frames, mc.n_mels))
    } else {
        Array4::from_shape_simple_fn((cfg.batch, N_FEATURE_CHANNELS, cfg.stft_frames, mc.n_mels), || {
            rng.sample(StandardNormal)
        })
    };
    let t_out = mc.output_frames(cfg.stft_frames);
    let targets: Vec<Vec<FrameTargets>> = (0..cfg.batch)
        .map(|_| {
            (0..t_out)
                .map(|_| FrameTargets {
                    tracks: (0..mc.n_track)
                        .map(|_| {
                            if rng.random_bool(0.7) {
                                let doa = DoaAngle::new(rng.random_range(-3.0..3.0), rng.random_range(-1.2..1.2))
                                    .expect("in range");
                                TrackTarget::event(rng.random_range(0..mc.n_cla), doa)
                            } else {
                                TrackTarget::silent(mc.n_cla)
                            }
                        })
                        .collect(),
                })
                .collect()
        })
        .collect();
    let target_refs: Vec<&[FrameTargets]> = targets.iter().map(|t| t.as_slice()).collect();

    let pass = model.forward_array(input.clone(), Mode::Train)?;
    let (lb, out_grads) = tpit_loss_with_grad(&pass.outputs, &target_refs)?;
    let mut assignment = Vec::new();
    let mut k = 0;
    for t in &targets {
        assignment.push(lb.frames[k..k + t.len()].iter().map(|f| f.selected).collect::<Vec<_>>());
        k += t.len();
    }
    let analytic = model.backward(&pass, &out_grads)?;
    let all_finite = analytic.all_finite() && lb.objective().is_finite();

    let objective = |m: &Model<f64>| -> Result<f64> {
        let pass = m.forward_array(input.clone(), Mode::Train)?;
        Ok(assignment_loss_with_grad(&pass.outputs, &target_refs, &assignment)?.0.objective())
    };

    let names: Vec<String> = model.param_names().to_vec();
    let mut per_param = Vec::new();
    let mut n_checked = 0;
    for (slot, name) in names.iter().enumerate() {
        let kind = layer_kind(name);
        if cfg.heads_only && !name.ends_with("fc.weight") && !name.ends_with("fc.bias") {
            continue;
        }
        let mut worst = ParamCheck {
            name: name.clone(),
            kind: kind.to_string(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_error: 0.0,
        };
        for idx in 0..model.params()[slot].len() {
            let orig = model.params()[slot].as_slice().expect("contiguous")[idx];
            let mut at = |delta: f64| -> Result<f64> {
                model.params_mut()[slot].as_slice_mut().expect("contiguous")[idx] = orig + delta;
                objective(&model)
            };
            let h = cfg.step;
            // Five-point central stencil, fourth-order accurate.
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            model.params_mut()[slot].as_slice_mut().expect("contiguous")[idx] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = analytic.tensors[slot].as_slice().expect("contiguous")[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            n_checked += 1;
            if !(rel <= worst.rel_error) {
                worst.worst_index = idx;
                worst.analytic = a;
                worst.numeric = numeric;
                worst.rel_error = rel;
            }
        }
        per_param.push(worst);
    }
    let mut per_kind = BTreeMap::new();
    for p in &per_param {
        let e = per_kind.entry(p.kind.clone()).or_insert(0.0f64);
        *e = e.max(p.rel_error);
    }
    Ok(GradCheckReport {
        n_params: model.param_count(),
        n_checked,
        max_rel_error: per_param.iter().map(|p| p.rel_error).fold(0.0, f64::max),
        per_kind,
        per_param,
        all_finite,
    })
}
