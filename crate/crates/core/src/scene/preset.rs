//! Random scene specifications for training and evaluation sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SceneError, SceneEvent, SourceKind, SynthConfig, Trajectory, LABEL_HOP_S};
use crate::doa::DoaAngle;

/// Parameters of a randomly generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_clips: usize,
    pub synth: SynthConfig,
    pub min_event_s: f64,
    pub max_event_s: f64,
    pub max_gap_s: f64,
    /// Probability that a clip is forced to contain a same-class overlap.
    pub same_class_overlap_prob: f64,
    /// Minimum angular distance between any two simultaneous events.
    pub min_separation_deg: f64,
    pub moving_prob: f64,
    pub max_speed_deg_s: f64,
    pub max_elevation_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_clips: 24,
            synth: SynthConfig::default(),
            min_event_s: 1.0,
            max_event_s: 2.5,
            max_gap_s: 1.0,
            same_class_overlap_prob: 0.5,
            min_separation_deg: 60.0,
            moving_prob: 0.25,
            max_speed_deg_s: 40.0,
            max_elevation_deg: 40.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |m: String| Err(SceneError::Config(m));
        if self.n_clips == 0 {
            return fail("n_clips must be at least 1".into());
        }
        if !(self.min_event_s > 0.0) || self.max_event_s < self.min_event_s {
            return fail(format!("event length range [{}, {}] s", self.min_event_s, self.max_event_s));
        }
        if self.min_event_s > self.synth.clip_len_s {
            return fail("shortest event is longer than the clip".into());
        }
        for (name, p) in [
            ("same_class_overlap_prob", self.same_class_overlap_prob),
            ("moving_prob", self.moving_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        if !(0.0..=90.0).contains(&self.max_elevation_deg) {
            return fail(format!("max_elevation_deg {} outside [0, 90]", self.max_elevation_deg));
        }
        if !(self.min_separation_deg >= 0.0) || !(self.max_gap_s >= 0.0) {
            return fail("separation and gap must be non-negative".into());
        }
        if self.synth.n_cla == 0 || self.synth.n_track == 0 || self.synth.sample_rate_hz == 0 {
            return fail("synthesis needs classes, tracks and a sample rate".into());
        }
        Ok(())
    }
}

/// Events of one generated clip plus bookkeeping for the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub events: Vec<SceneEvent>,
    pub same_class_overlap: bool,
}

impl ClipSpec {
    /// True when two events of one class share at least one label frame.
    pub fn has_same_class_overlap(events: &[SceneEvent]) -> bool {
        events.iter().enumerate().any(|(i, a)| {
            events[i + 1..].iter().any(|b| {
                a.class_id == b.class_id && frames_overlap(a, b)
            })
        })
    }
}

fn frames_overlap(a: &SceneEvent, b: &SceneEvent) -> bool {
    let ra = a.label_frames(LABEL_HOP_S);
    let rb = b.label_frames(LABEL_HOP_S);
    ra.start < rb.end && rb.start < ra.end
}

fn quantize(t: f64) -> f64 {
    (t / LABEL_HOP_S).round() * LABEL_HOP_S
}

/// Generates `config.n_clips` clip specifications. Events are laid out on
/// `n_track` independent timelines, so at most `n_track` overlap at once.
pub fn generate_clip_specs(config: &DatasetConfig, seed: u64) -> Vec<ClipSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.n_clips)
        .map(|i| {
            let clip_seed: u64 = rng.random();
            let mut clip_rng = ChaCha8Rng::seed_from_u64(clip_seed);
            let events = random_events(config, &mut clip_rng);
            ClipSpec {
                id: format!("clip_{i:04}"),
                seed: clip_seed,
                duration_s: config.synth.clip_len_s,
                same_class_overlap: ClipSpec::has_same_class_overlap(&events),
                events,
            }
        })
        .collect()
}

fn random_events(config: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<SceneEvent> {
    let clip_len = config.synth.clip_len_s;
    let n_cla = config.synth.n_cla.max(1);
    let mut lanes: Vec<Vec<SceneEvent>> = Vec::new();
    for _ in 0..config.synth.n_track {
        let mut lane = Vec::new();
        let mut t = quantize(rng.random_range(0.0..=config.max_gap_s));
        while t + config.min_event_s <= clip_len + 1e-9 {
            let dur = quantize(rng.random_range(config.min_event_s..=config.max_event_s));
            let end = quantize((t + dur).min(clip_len));
            let class_id = rng.random_range(0..n_cla);
            lane.push(SceneEvent {
                class_id,
                onset_s: t,
                offset_s: end,
                trajectory: Trajectory::fixed(DoaAngle::default()),
                source: SourceKind::for_class(class_id),
            });
            t = end + quantize(rng.random_range(0.2..=config.max_gap_s.max(0.2)));
        }
        lanes.push(lane);
    }

    if lanes.len() >= 2 && rng.random_bool(config.same_class_overlap_prob.clamp(0.0, 1.0)) {
        let pairs: Vec<(usize, usize)> = lanes[0]
            .iter()
            .enumerate()
            .flat_map(|(i, a)| {
                lanes[1]
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| frames_overlap(a, b))
                    .map(move |(j, _)| (i, j))
            })
            .collect();
        if !pairs.is_empty() {
            let (i, j) = pairs[rng.random_range(0..pairs.len())];
            let class_id = lanes[0][i].class_id;
            lanes[1][j].class_id = class_id;
            lanes[1][j].source = SourceKind::for_class(class_id);
        }
    }

    let mut events: Vec<SceneEvent> = lanes.into_iter().flatten().collect();
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    for i in 0..events.len() {
        let mut best = None;
        for _ in 0..200 {
            let traj = random_trajectory(config, &events[i], rng);
            let candidate = SceneEvent {
                trajectory: traj,
                ..events[i].clone()
            };
            let sep = events[..i]
                .iter()
                .filter(|e| frames_overlap(e, &candidate))
                .map(|e| min_separation_deg(e, &candidate))
                .fold(f64::INFINITY, f64::min);
            let better = best.as_ref().map_or(true, |(s, _)| sep > *s);
            if better {
                best = Some((sep, candidate));
            }
            if sep >= config.min_separation_deg {
                break;
            }
        }
        events[i] = best.expect("at least one attempt").1;
    }
    events
}

fn random_trajectory(config: &DatasetConfig, event: &SceneEvent, rng: &mut ChaCha8Rng) -> Trajectory {
    let az = rng.random_range(-180.0..180.0f64);
    let el = rng.random_range(-config.max_elevation_deg..=config.max_elevation_deg);
    let start = DoaAngle::from_degrees(az, el).expect("sampled in range");
    if rng.random_bool(config.moving_prob.clamp(0.0, 1.0)) && config.max_speed_deg_s > 10.0 {
        let speed = rng.random_range(10.0..config.max_speed_deg_s)
            * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let end_az = az + speed * (event.offset_s - event.onset_s);
        let end = DoaAngle::from_unbounded(end_az.to_radians(), el.to_radians())
            .expect("finite");
        Trajectory::linear(start, end, event.onset_s, event.offset_s)
    } else {
        Trajectory::fixed(start)
    }
}

fn min_separation_deg(a: &SceneEvent, b: &SceneEvent) -> f64 {
    let ra = a.label_frames(LABEL_HOP_S);
    let rb = b.label_frames(LABEL_HOP_S);
    (ra.start.max(rb.start)..ra.end.min(rb.end))
        .map(|f| {
            a.doa_at_frame(f, LABEL_HOP_S)
                .angular_distance_deg(&b.doa_at_frame(f, LABEL_HOP_S))
        })
        .fold(f64::INFINITY, f64::min)
}
