//! Track-wise losses and frame-level permutation invariant training.
//!
//! Per frame, every permutation of the target tracks is scored with the sum
//! over tracks of the SED cross-entropy, the EAD binary cross-entropy and the
//! masked DoA term; the cheapest permutation is the one trained on.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use thiserror::Error;

use crate::doa::{wrap_difference, DoaAngle};
use crate::model::{sigmoid, OutputGrads, TrackOutputs};
use crate::scene::LabelGrid;

/// Probability clamp for the EAD cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Default EAD binarization threshold.
pub const DEFAULT_EAD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PitError {
    #[error("outputs have {outputs} frames but targets have {targets}")]
    FrameMismatch { outputs: usize, targets: usize },
    #[error("outputs have {outputs} tracks but targets have {targets}")]
    TrackMismatch { outputs: usize, targets: usize },
    #[error("target class {class} out of range for {n_cla} classes")]
    InvalidClass { class: usize, n_cla: usize },
    #[error("batch has {outputs} outputs but {targets} target sequences")]
    BatchMismatch { outputs: usize, targets: usize },
    #[error("permutation index {0} out of range")]
    BadAssignment(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PitError> = std::result::Result<T, E>;

/// Ground truth for one track of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackTarget {
    /// `0..n_cla` for events; `n_cla` is silence.
    pub class_id: usize,
    pub active: bool,
    /// Meaningful only when active; `(0, 0)` otherwise.
    pub doa: DoaAngle,
}

impl TrackTarget {
    pub fn silent(n_cla: usize) -> Self {
        Self {
            class_id: n_cla,
            active: false,
            doa: DoaAngle::default(),
        }
    }

    pub fn event(class_id: usize, doa: DoaAngle) -> Self {
        Self {
            class_id,
            active: true,
            doa,
        }
    }

    pub fn ead(&self) -> f64 {
        if self.active {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub tracks: Vec<TrackTarget>,
}

impl FrameTargets {
    /// One entry per label frame, tracks in the grid's own order.
    pub fn from_grid(grid: &LabelGrid, n_cla: usize) -> Result<Vec<FrameTargets>> {
        (0..grid.n_frames())
            .map(|f| {
                let tracks = grid
                    .frame(f)
                    .iter()
                    .map(|slot| match slot {
                        None => Ok(TrackTarget::silent(n_cla)),
                        Some(l) if l.class_id < n_cla => Ok(TrackTarget::event(l.class_id, l.doa)),
                        Some(l) => Err(PitError::InvalidClass {
                            class: l.class_id,
                            n_cla,
                        }),
                    })
                    .collect::<Result<_>>()?;
                Ok(FrameTargets { tracks })
            })
            .collect()
    }

    /// Targets reordered so that new track `i` holds old track `perm[i]`.
    pub fn permuted(&self, perm: &Permutation) -> FrameTargets {
        FrameTargets {
            tracks: perm.0.iter().map(|&j| self.tracks[j]).collect(),
        }
    }
}

/// A bijection on track indices; output track `i` is paired with target
/// track `self[i]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return None;
            }
        }
        Some(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    /// All `n!` permutations in lexicographic order, identity first.
    pub fn all(n: usize) -> Vec<Permutation> {
        let mut cur: Vec<usize> = (0..n).collect();
        let mut out = vec![Permutation(cur.clone())];
        loop {
            let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
                return out;
            };
            let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot exists");
            cur.swap(i - 1, j);
            cur[i..].reverse();
            out.push(Permutation(cur.clone()));
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl std::ops::Index<usize> for Permutation {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(" "))
    }
}

/// `-log softmax(logits)[class]` with max subtraction.
pub fn sed_loss_frame(logits: ArrayView1<f64>, class: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[class]
}

/// Binary cross-entropy on a probability, clamped to `[1e-7, 1 - 1e-7]`.
pub fn ead_loss_frame(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Binary cross-entropy of `sigmoid(logit)`, evaluated without forming the
/// probability: `softplus(x) - t x`.
pub fn ead_loss_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) + (-logit.abs()).exp().ln_1p() - target * logit
}

/// `1/2 (|wrap(d az)| + |d el|) * mask`, angles in radians.
pub fn doa_loss_frame(pred: [f64; 2], target: [f64; 2], mask: f64) -> f64 {
    if mask == 0.0 {
        return 0.0;
    }
    0.5 * (wrap_difference(pred[0] - target[0]).abs() + (pred[1] - target[1]).abs()) * mask
}

fn doa_loss_grad(pred: [f64; 2], target: [f64; 2], mask: f64) -> [f64; 2] {
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    [
        0.5 * sign(wrap_difference(pred[0] - target[0])) * mask,
        0.5 * sign(pred[1] - target[1]) * mask,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    /// Ground-truth activity.
    Train,
    /// `ead > threshold` and SED argmax on an event class.
    Test { threshold: f64 },
}

/// Per-track DoA mask for one frame. In training mode `ead_values` holds
/// ground-truth activities, in test mode predicted probabilities; `sed_logits`
/// is `[n_track, n_cla + 1]` and only consulted in test mode.
pub fn ead_mask(mode: MaskMode, ead_values: &[f64], sed_logits: ndarray::ArrayView2<f64>) -> Vec<f64> {
    match mode {
        MaskMode::Train => ead_values.to_vec(),
        MaskMode::Test { threshold } => {
            let silence = sed_logits.ncols() - 1;
            ead_values
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let active = p > threshold && argmax(sed_logits.row(i)) != silence;
                    if active {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss terms of one output track against one target track.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairLoss {
    pub sed: f64,
    pub ead: f64,
    pub doa: f64,
    pub mask: f64,
}

impl PairLoss {
    pub fn total(&self) -> f64 {
        self.sed + self.ead + self.doa
    }
}

/// Loss of output track `track` at `frame` against `target`, in training mode.
pub fn pair_loss(out: &TrackOutputs, frame: usize, track: usize, target: &TrackTarget) -> PairLoss {
    let mask = target.ead();
    PairLoss {
        sed: sed_loss_frame(out.sed_logits.slice(ndarray::s![frame, track, ..]), target.class_id),
        ead: ead_loss_logit(out.ead_logits[[frame, track]], target.ead()),
        doa: doa_loss_frame(
            [out.doa[[frame, track, 0]], out.doa[[frame, track, 1]]],
            [target.doa.azimuth(), target.doa.elevation()],
            mask,
        ),
        mask,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLoss {
    /// Total loss under each permutation, in [`Permutation::all`] order.
    pub costs: Vec<f64>,
    pub selected: usize,
    /// Components of the selected permutation, summed over tracks.
    pub sed: f64,
    pub ead: f64,
    pub doa: f64,
    pub mask: f64,
}

impl FrameLoss {
    pub fn min_cost(&self) -> f64 {
        self.costs[self.selected]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub permutations: Vec<Permutation>,
    /// Frames of all clips, clip by clip.
    pub frames: Vec<FrameLoss>,
    /// Sum over frames and tracks of the selected SED terms.
    pub l_sed: f64,
    /// Sum over frames and tracks of the selected EAD terms.
    pub l_ead: f64,
    /// Selected DoA terms divided by the mask total (0 when nothing is active).
    pub l_doa: f64,
    /// Sum over frames of the per-frame minimum.
    pub l_tpit: f64,
    pub mask_sum: f64,
    pub n_track_frames: usize,
}

impl LossBreakdown {
    /// The scalar that is minimized: SED and EAD averaged over track-frames
    /// plus the mask-normalized DoA loss.
    pub fn objective(&self) -> f64 {
        let z = self.n_track_frames.max(1) as f64;
        (self.l_sed + self.l_ead) / z + self.l_doa
    }

    pub fn selected(&self, frame: usize) -> &Permutation {
        &self.permutations[self.frames[frame].selected]
    }
}

fn check_geometry(out: &TrackOutputs, targets: &[FrameTargets]) -> Result<()> {
    if out.n_frames() != targets.len() {
        return Err(PitError::FrameMismatch {
            outputs: out.n_frames(),
            targets: targets.len(),
        });
    }
    for ft in targets {
        if ft.tracks.len() != out.n_track() {
            return Err(PitError::TrackMismatch {
                outputs: out.n_track(),
                targets: ft.tracks.len(),
            });
        }
        for t in &ft.tracks {
            if t.class_id > out.n_cla() || (t.active != (t.class_id < out.n_cla())) {
                return Err(PitError::InvalidClass {
                    class: t.class_id,
                    n_cla: out.n_cla(),
                });
            }
        }
    }
    Ok(())
}

fn frame_loss(out: &TrackOutputs, frame: usize, targets: &FrameTargets, perms: &[Permutation], forced: Option<usize>) -> FrameLoss {
    let n = out.n_track();
    let pairs: Vec<Vec<PairLoss>> = (0..n)
        .map(|i| (0..n).map(|j| pair_loss(out, frame, i, &targets.tracks[j])).collect())
        .collect();
    let costs: Vec<f64> = perms
        .iter()
        .map(|p| (0..n).map(|i| pairs[i][p[i]].total()).sum())
        .collect();
    let selected = forced.unwrap_or_else(|| {
        let mut best = 0;
        for (k, &c) in costs.iter().enumerate() {
            if c < costs[best] {
                best = k;
            }
        }
        best
    });
    let p = &perms[selected];
    let mut fl = FrameLoss {
        costs,
        selected,
        sed: 0.0,
        ead: 0.0,
        doa: 0.0,
        mask: 0.0,
    };
    for (i, row) in pairs.iter().enumerate() {
        let pl = row[p[i]];
        fl.sed += pl.sed;
        fl.ead += pl.ead;
        fl.doa += pl.doa;
        fl.mask += pl.mask;
    }
    fl
}

fn evaluate(
    outputs: &[TrackOutputs],
    targets: &[&[FrameTargets]],
    assignment: Option<&[Vec<usize>]>,
) -> Result<LossBreakdown> {
    if outputs.len() != targets.len() {
        return Err(PitError::BatchMismatch {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    let n_track = outputs.first().map_or(0, |o| o.n_track());
    let perms = Permutation::all(n_track);
    let mut frames = Vec::new();
    let mut n_track_frames = 0;
    for (c, (out, tg)) in outputs.iter().zip(targets).enumerate() {
        check_geometry(out, tg)?;
        if out.n_track() != n_track {
            return Err(PitError::TrackMismatch {
                outputs: out.n_track(),
                targets: n_track,
            });
        }
        for (f, ft) in tg.iter().enumerate() {
            let forced = match assignment {
                Some(a) => {
                    let k = *a
                        .get(c)
                        .and_then(|v| v.get(f))
                        .ok_or(PitError::BadAssignment(usize::MAX))?;
                    if k >= perms.len() {
                        return Err(PitError::BadAssignment(k));
                    }
                    Some(k)
                }
                None => None,
            };
            frames.push(frame_loss(out, f, ft, &perms, forced));
        }
        n_track_frames += out.n_frames() * out.n_track();
    }
    let l_sed = frames.iter().map(|f| f.sed).sum();
    let l_ead = frames.iter().map(|f| f.ead).sum();
    let doa_sum: f64 = frames.iter().map(|f| f.doa).sum();
    let mask_sum: f64 = frames.iter().map(|f| f.mask).sum();
    let l_tpit = frames.iter().map(|f| f.min_cost()).sum();
    Ok(LossBreakdown {
        permutations: perms,
        frames,
        l_sed,
        l_ead,
        l_doa: if mask_sum > 0.0 { doa_sum / mask_sum } else { 0.0 },
        l_tpit,
        mask_sum,
        n_track_frames,
    })
}

/// tPIT loss of a batch; `targets[c]` holds clip `c`'s frames.
pub fn tpit_loss(outputs: &[TrackOutputs], targets: &[&[FrameTargets]]) -> Result<LossBreakdown> {
    evaluate(outputs, targets, None)
}

/// tPIT loss together with the gradient of [`LossBreakdown::objective`]
/// with respect to the outputs. Only selected pairs contribute.
pub fn tpit_loss_with_grad(outputs: &[TrackOutputs], targets: &[&[FrameTargets]]) -> Result<(LossBreakdown, Vec<OutputGrads>)> {
    let lb = evaluate(outputs, targets, None)?;
    let grads = objective_grads(outputs, targets, &lb);
    Ok((lb, grads))
}

/// Loss and gradient under a fixed per-frame permutation choice
/// (`assignment[c][f]` indexes [`Permutation::all`]).
pub fn assignment_loss_with_grad(
    outputs: &[TrackOutputs],
    targets: &[&[FrameTargets]],
    assignment: &[Vec<usize>],
) -> Result<(LossBreakdown, Vec<OutputGrads>)> {
    let lb = evaluate(outputs, targets, Some(assignment))?;
    let grads = objective_grads(outputs, targets, &lb);
    Ok((lb, grads))
}

fn objective_grads(outputs: &[TrackOutputs], targets: &[&[FrameTargets]], lb: &LossBreakdown) -> Vec<OutputGrads> {
    let inv_z = 1.0 / lb.n_track_frames.max(1) as f64;
    let inv_m = if lb.mask_sum > 0.0 { 1.0 / lb.mask_sum } else { 0.0 };
    let mut frame_idx = 0;
    outputs
        .iter()
        .zip(targets)
        .map(|(out, tg)| {
            let mut g = TrackOutputs::zeros(out.n_frames(), out.n_track(), out.n_cla());
            for (f, ft) in tg.iter().enumerate() {
                let perm = &lb.permutations[lb.frames[frame_idx].selected];
                frame_idx += 1;
                for i in 0..out.n_track() {
                    let target = &ft.tracks[perm[i]];
                    for (k, p) in out.sed_softmax(f, i).into_iter().enumerate() {
                        let onehot = if k == target.class_id { 1.0 } else { 0.0 };
                        g.sed_logits[[f, i, k]] = (p - onehot) * inv_z;
                    }
                    g.ead_logits[[f, i]] = (sigmoid(out.ead_logits[[f, i]]) - target.ead()) * inv_z;
                    let d = doa_loss_grad(
                        [out.doa[[f, i, 0]], out.doa[[f, i, 1]]],
                        [target.doa.azimuth(), target.doa.elevation()],
                        target.ead(),
                    );
                    g.doa[[f, i, 0]] = d[0] * inv_m;
                    g.doa[[f, i, 1]] = d[1] * inv_m;
                }
            }
            g
        })
        .collect()
}

/// Per-epoch loss history written as `epoch,l_sed,l_ead,l_doa,l_tpit`.
pub fn write_loss_csv(path: impl AsRef<Path>, rows: &[(usize, LossTotals)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,l_sed,l_ead,l_doa,l_tpit")?;
    for (epoch, t) in rows {
        writeln!(out, "{epoch},{},{},{},{}", t.l_sed, t.l_ead, t.l_doa, t.l_tpit)?;
    }
    out.flush()?;
    Ok(())
}

/// Scalar totals of a [`LossBreakdown`].
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossTotals {
    pub l_sed: f64,
    pub l_ead: f64,
    pub l_doa: f64,
    pub l_tpit: f64,
    pub objective: f64,
}

impl From<&LossBreakdown> for LossTotals {
    fn from(lb: &LossBreakdown) -> Self {
        Self {
            l_sed: lb.l_sed,
            l_ead: lb.l_ead,
            l_doa: lb.l_doa,
            l_tpit: lb.l_tpit,
            objective: lb.objective(),
        }
    }
}
