//! Location-sensitive detection and class-dependent localization metrics.
//!
//! Frames are scored independently: within every class, predictions and
//! references are paired by minimum total angular distance. A pair within
//! the threshold is a true positive, a pair beyond it counts as one false
//! positive and one false negative, unpaired entries are FP or FN. Error
//! rate is aggregated over fixed-length segments of frames, where
//! `S = min(FP, FN)`, `D = max(0, FN - FP)`, `I = max(0, FP - FN)`.
//! Localization error and recall use every class match regardless of the
//! threshold.

use pathfinding::prelude::{kuhn_munkres_min, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doa::DoaAngle;
use crate::scene::LabelGrid;

/// Class groups up to this size are matched by exhaustive search.
const BRUTE_FORCE_MAX: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid metrics configuration: {0}")]
    Config(String),
    #[error("prediction has {pred} frames, reference {reference}")]
    FrameMismatch { pred: usize, reference: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub threshold_deg: f64,
    pub segment_len_frames: usize,
    /// Pad the shorter grid with silence instead of rejecting a mismatch.
    pub pad_frames: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold_deg: 20.0,
            segment_len_frames: 10,
            pad_frames: true,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_deg > 0.0) || !self.threshold_deg.is_finite() {
            return Err(MetricsError::Config(format!("threshold {} must be positive", self.threshold_deg)));
        }
        if self.segment_len_frames == 0 {
            return Err(MetricsError::Config("segment length must be at least one frame".into()));
        }
        Ok(())
    }
}

/// Great-circle distance in degrees.
pub fn angular_distance(a: &DoaAngle, b: &DoaAngle) -> f64 {
    a.angular_distance_deg(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub doa: DoaAngle,
}

/// Active entries of one grid frame.
pub fn frame_detections(grid: &LabelGrid, frame: usize) -> Vec<Detection> {
    grid.active(frame)
        .map(|(_, l)| Detection {
            class_id: l.class_id,
            doa: l.doa,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(pred index, ref index, distance in degrees)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_refs: Vec<usize>,
}

impl FrameMatch {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Minimum-distance pairing of same-class predictions and references.
pub fn match_frame(preds: &[Detection], refs: &[Detection]) -> FrameMatch {
    let mut classes: Vec<usize> = preds.iter().chain(refs).map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = FrameMatch::default();
    for c in classes {
        let p: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class_id == c).collect();
        let r: Vec<usize> = (0..refs.len()).filter(|&j| refs[j].class_id == c).collect();
        let cost: Vec<Vec<f64>> = p
            .iter()
            .map(|&i| r.iter().map(|&j| angular_distance(&preds[i].doa, &refs[j].doa)).collect())
            .collect();
        let pairs = assign(&cost, p.len(), r.len());
        let mut used_p = vec![false; p.len()];
        let mut used_r = vec![false; r.len()];
        for (a, b) in pairs {
            used_p[a] = true;
            used_r[b] = true;
            out.pairs.push((p[a], r[b], cost[a][b]));
        }
        out.unmatched_preds.extend(p.iter().zip(&used_p).filter(|(_, &u)| !u).map(|(&i, _)| i));
        out.unmatched_refs.extend(r.iter().zip(&used_r).filter(|(_, &u)| !u).map(|(&j, _)| j));
    }
    out
}

/// Minimum-cost matching of size `min(rows, cols)` on a dense cost matrix.
fn assign(cost: &[Vec<f64>], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |a: usize, b: usize| if transpose { cost[b][a] } else { cost[a][b] };
    let pairs: Vec<(usize, usize)> = if m <= BRUTE_FORCE_MAX {
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut cur = Vec::with_capacity(n);
        let mut used = vec![false; m];
        brute_force(n, m, &at, &mut cur, &mut used, 0.0, &mut best);
        best.expect("n <= m").1.into_iter().enumerate().collect()
    } else {
        // Integer weights in nano-degrees; the solver needs an ordered type.
        let weights = Matrix::from_fn(n, m, |(a, b)| (at(a, b) * 1e9).round() as i64);
        let (_, cols_of) = kuhn_munkres_min(&weights);
        cols_of.into_iter().enumerate().collect()
    };
    pairs
        .into_iter()
        .map(|(a, b)| if transpose { (b, a) } else { (a, b) })
        .collect()
}

fn brute_force(
    n: usize,
    m: usize,
    at: &dyn Fn(usize, usize) -> f64,
    cur: &mut Vec<usize>,
    used: &mut [bool],
    acc: f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if cur.len() == n {
        if best.as_ref().is_none_or(|(b, _)| acc < *b) {
            *best = Some((acc, cur.clone()));
        }
        return;
    }
    let a = cur.len();
    for b in 0..m {
        if !used[b] {
            used[b] = true;
            cur.push(b);
            brute_force(n, m, at, cur, used, acc + at(a, b), best);
            cur.pop();
            used[b] = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    /// Reference instances.
    pub n: usize,
    /// Class-matched pairs, regardless of distance.
    pub matches: usize,
    pub match_distance_sum: f64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.s += o.s;
        self.d += o.d;
        self.i += o.i;
        self.n += o.n;
        self.matches += o.matches;
        self.match_distance_sum += o.match_distance_sum;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub er: f64,
    pub f: f64,
    /// `None` when nothing was class-matched.
    pub le_deg: Option<f64>,
    /// `None` when there are no references.
    pub lr: Option<f64>,
    pub threshold_deg: f64,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_counts(c: Counts, threshold_deg: f64) -> Self {
        let f_den = 2 * c.tp + c.fp + c.fn_;
        Self {
            er: if c.n == 0 { 0.0 } else { (c.s + c.d + c.i) as f64 / c.n as f64 },
            f: if f_den == 0 { 0.0 } else { 2.0 * c.tp as f64 / f_den as f64 },
            le_deg: (c.matches > 0).then(|| c.match_distance_sum / c.matches as f64),
            lr: (c.n > 0).then(|| c.matches as f64 / c.n as f64),
            threshold_deg,
            counts: c,
        }
    }
}

/// Raw counts of one prediction/reference pair of grids.
pub fn count_grids(pred: &LabelGrid, reference: &LabelGrid, config: &MetricsConfig) -> Result<Counts> {
    config.validate()?;
    let n_frames = if pred.n_frames() == reference.n_frames() {
        pred.n_frames()
    } else if config.pad_frames {
        pred.n_frames().max(reference.n_frames())
    } else {
        return Err(MetricsError::FrameMismatch {
            pred: pred.n_frames(),
            reference: reference.n_frames(),
        });
    };
    let mut total = Counts::default();
    let mut seg_fp = 0;
    let mut seg_fn = 0;
    let close_segment = |total: &mut Counts, fp: &mut usize, fn_: &mut usize| {
        total.s += (*fp).min(*fn_);
        total.d += fn_.saturating_sub(*fp);
        total.i += fp.saturating_sub(*fn_);
        *fp = 0;
        *fn_ = 0;
    };
    for f in 0..n_frames {
        let p = if f < pred.n_frames() { frame_detections(pred, f) } else { Vec::new() };
        let r = if f < reference.n_frames() {
            frame_detections(reference, f)
        } else {
            Vec::new()
        };
        let m = match_frame(&p, &r);
        for &(_, _, d) in &m.pairs {
            if d <= config.threshold_deg {
                total.tp += 1;
            } else {
                total.fp += 1;
                total.fn_ += 1;
                seg_fp += 1;
                seg_fn += 1;
            }
            total.matches += 1;
            total.match_distance_sum += d;
        }
        total.fp += m.unmatched_preds.len();
        total.fn_ += m.unmatched_refs.len();
        seg_fp += m.unmatched_preds.len();
        seg_fn += m.unmatched_refs.len();
        total.n += r.len();
        if (f + 1) % config.segment_len_frames == 0 {
            close_segment(&mut total, &mut seg_fp, &mut seg_fn);
        }
    }
    close_segment(&mut total, &mut seg_fp, &mut seg_fn);
    Ok(total)
}

pub fn compute_metrics(pred: &LabelGrid, reference: &LabelGrid, config: &MetricsConfig) -> Result<MetricsReport> {
    let c = count_grids(pred, reference, config)?;
    Ok(MetricsReport::from_counts(c, config.threshold_deg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::TrackLabel;
    use proptest::prelude::*;

    fn det(class_id: usize, az: f64, el: f64) -> Detection {
        Detection {
            class_id,
            doa: DoaAngle::from_degrees(az, el).unwrap(),
        }
    }

    #[test]
    fn distance_examples() {
        let a = DoaAngle::from_degrees(12.0, -7.0).unwrap();
        assert!(angular_distance(&a, &a).abs() < 1e-12);
        let b = DoaAngle::from_degrees(0.0, 0.0).unwrap();
        let c = DoaAngle::from_degrees(-180.0, 0.0).unwrap();
        assert!((angular_distance(&b, &c) - 180.0).abs() < 1e-12);
        let d = DoaAngle::from_degrees(90.0, 0.0).unwrap();
        assert!((angular_distance(&b, &d) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_matches_at_any_distance() {
        let m = match_frame(&[det(1, 0.0, 0.0)], &[det(1, 170.0, 0.0)]);
        assert_eq!(m.pairs.len(), 1);
        assert!((m.pairs[0].2 - 170.0).abs() < 1e-9);
    }

    #[test]
    fn crossed_pairs_are_uncrossed() {
        let preds = [det(0, 80.0, 0.0), det(0, -10.0, 0.0)];
        let refs = [det(0, 0.0, 0.0), det(0, 90.0, 0.0)];
        let m = match_frame(&preds, &refs);
        let mut pairs: Vec<_> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert!((m.total_distance() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_classes_never_match() {
        let m = match_frame(&[det(0, 0.0, 0.0)], &[det(1, 0.0, 0.0), det(2, 5.0, 0.0)]);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_preds, vec![0]);
        assert_eq!(m.unmatched_refs, vec![0, 1]);
    }

    #[test]
    fn hungarian_path_agrees_with_brute_force() {
        // Six same-class detections force the solver backend.
        let preds: Vec<_> = (0..6).map(|i| det(0, -150.0 + 47.0 * i as f64, (i as f64 * 13.0) % 40.0)).collect();
        let refs: Vec<_> = (0..6).map(|i| det(0, -160.0 + 53.0 * ((i * 5) % 6) as f64, 5.0)).collect();
        let m = match_frame(&preds, &refs);
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..6).collect();
        permute(&mut perm, 0, &mut |p| {
            let d: f64 = p.iter().enumerate().map(|(i, &j)| angular_distance(&preds[i].doa, &refs[j].doa)).sum();
            best = best.min(d);
        });
        assert!((m.total_distance() - best).abs() < 1e-6);
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    fn one_event_grid(frames: usize, az: f64) -> LabelGrid {
        let mut g = LabelGrid::new(frames, 2);
        for f in 0..frames {
            g.set(
                f,
                0,
                Some(TrackLabel {
                    class_id: 1,
                    doa: DoaAngle::from_degrees(az, 10.0).unwrap(),
                }),
            );
        }
        g
    }

    #[test]
    fn offset_predictions() {
        let reference = one_event_grid(20, 0.0);
        let pred = one_event_grid(20, 30.0);
        let r = compute_metrics(&pred, &reference, &MetricsConfig::default()).unwrap();
        assert_eq!(r.f, 0.0);
        assert_eq!(r.er, 1.0);
        assert_eq!(r.lr, Some(1.0));
        // 30 degrees of azimuth at 10 degrees elevation.
        let e = 10f64.to_radians();
        let oracle = (e.sin().powi(2) + e.cos().powi(2) * 30f64.to_radians().cos()).acos().to_degrees();
        assert!((r.le_deg.unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn empty_prediction() {
        let reference = one_event_grid(15, 0.0);
        let r = compute_metrics(&LabelGrid::new(15, 2), &reference, &MetricsConfig::default()).unwrap();
        assert_eq!((r.f, r.er, r.lr, r.le_deg), (0.0, 1.0, Some(0.0), None));
        assert_eq!(r.counts.d, 15);
    }

    #[test]
    fn frame_mismatch_needs_padding() {
        let cfg = MetricsConfig {
            pad_frames: false,
            ..Default::default()
        };
        let a = one_event_grid(10, 0.0);
        let b = one_event_grid(12, 0.0);
        assert!(matches!(compute_metrics(&a, &b, &cfg), Err(MetricsError::FrameMismatch { .. })));
        let r = compute_metrics(&a, &b, &MetricsConfig::default()).unwrap();
        assert_eq!(r.counts.fn_, 2);
    }

    #[test]
    fn config_validation() {
        assert!(MetricsConfig { threshold_deg: 0.0, ..Default::default() }.validate().is_err());
        assert!(MetricsConfig { segment_len_frames: 0, ..Default::default() }.validate().is_err());
    }

    fn grid_strategy() -> impl Strategy<Value = LabelGrid> {
        prop::collection::vec(
            prop::option::weighted(0.6, (0usize..3, -180i32..180, -80i32..=80)),
            2..60,
        )
        .prop_map(|cells| {
            let frames = cells.len() / 2;
            let mut g = LabelGrid::new(frames, 2);
            for f in 0..frames {
                for t in 0..2 {
                    if let Some((c, az, el)) = cells[2 * f + t] {
                        let doa = DoaAngle::from_degrees(az as f64, el as f64).unwrap();
                        g.set(f, t, Some(TrackLabel { class_id: c, doa }));
                    }
                }
            }
            g
        })
    }

    fn jitter(g: &LabelGrid, seed: u64) -> LabelGrid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = LabelGrid::new(g.n_frames(), g.n_track());
        for f in 0..g.n_frames() {
            for (t, l) in g.active(f) {
                let doa = DoaAngle::from_unbounded(
                    l.doa.azimuth() + rng.random_range(-0.6..0.6),
                    l.doa.elevation() + rng.random_range(-0.6..0.6),
                )
                .unwrap();
                out.set(f, t, Some(TrackLabel { class_id: l.class_id, doa }));
            }
            if rng.random_bool(0.1) {
                out.set(f, 1, None);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn identical_grids_are_perfect(g in grid_strategy()) {
            prop_assume!((0..g.n_frames()).any(|f| g.active_count(f) > 0));
            let r = compute_metrics(&g, &g, &MetricsConfig::default()).unwrap();
            prop_assert_eq!(r.er, 0.0);
            prop_assert_eq!(r.f, 1.0);
            prop_assert_eq!(r.lr, Some(1.0));
            prop_assert!(r.le_deg.unwrap() < 1e-9);
        }

        #[test]
        fn threshold_monotone_and_le_independent(g in grid_strategy(), seed in any::<u64>()) {
            let p = jitter(&g, seed);
            let mut prev: Option<MetricsReport> = None;
            for t in [5.0, 10.0, 20.0, 40.0] {
                let cfg = MetricsConfig { threshold_deg: t, ..Default::default() };
                let r = compute_metrics(&p, &g, &cfg).unwrap();
                if let Some(q) = &prev {
                    prop_assert!(r.f >= q.f);
                    prop_assert!(r.er <= q.er);
                    prop_assert_eq!(r.le_deg, q.le_deg);
                    prop_assert_eq!(r.lr, q.lr);
                }
                prev = Some(r);
            }
        }

        #[test]
        fn matching_is_optimal_for_small_groups(
            raw_p in prop::collection::vec((0usize..2, -180.0f64..180.0, -80.0f64..80.0), 0..4),
            raw_r in prop::collection::vec((0usize..2, -180.0f64..180.0, -80.0f64..80.0), 0..4),
        ) {
            let preds: Vec<_> = raw_p.iter().map(|&(c, a, e)| det(c, a, e)).collect();
            let refs: Vec<_> = raw_r.iter().map(|&(c, a, e)| det(c, a, e)).collect();
            let m = match_frame(&preds, &refs);
            // Exhaustive oracle: every injective pairing within classes of maximal size.
            let mut best = 0.0;
            for c in 0..2 {
                let p: Vec<_> = preds.iter().filter(|d| d.class_id == c).collect();
                let r: Vec<_> = refs.iter().filter(|d| d.class_id == c).collect();
                let (small, large) = if p.len() <= r.len() { (&p, &r) } else { (&r, &p) };
                let mut idx: Vec<usize> = (0..large.len()).collect();
                let mut class_best = f64::INFINITY;
                permute(&mut idx, 0, &mut |perm| {
                    let d: f64 = small.iter().enumerate().map(|(i, s)| angular_distance(&s.doa, &large[perm[i]].doa)).sum();
                    class_best = class_best.min(d);
                });
                best += if small.is_empty() { 0.0 } else { class_best };
            }
            prop_assert!((m.total_distance() - best).abs() < 1e-9);
            prop_assert_eq!(m.pairs.len() + m.unmatched_preds.len(), preds.len());
            prop_assert_eq!(m.pairs.len() + m.unmatched_refs.len(), refs.len());
        }
    }
}
