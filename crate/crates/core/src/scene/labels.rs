//! DCASE-style label CSV: `frame,class,track,azimuth_deg,elevation_deg`,
//! one row per active track, 100 ms frames, integer degrees.

use std::path::Path;

use super::{LabelGrid, Result, SceneError, TrackLabel};
use crate::doa::DoaAngle;

/// What a label file is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSchema {
    pub n_cla: usize,
    pub n_track: usize,
    /// Minimum grid length; files only list active frames.
    pub n_frames: usize,
}

fn round_degrees(rad: f64) -> i64 {
    rad.to_degrees().round() as i64
}

pub fn write_labels(grid: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for f in 0..grid.n_frames() {
        for (track, label) in grid.active(f) {
            let mut az = round_degrees(label.doa.azimuth());
            if az >= 180 {
                az -= 360;
            }
            let el = round_degrees(label.doa.elevation()).clamp(-90, 90);
            w.write_record(&[
                f.to_string(),
                label.class_id.to_string(),
                track.to_string(),
                az.to_string(),
                el.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<LabelGrid> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let bad = |reason: String| SceneError::LabelRow { row, reason };
        if record.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", record.len())));
        }
        let int = |k: usize, name: &str| -> Result<i64> {
            record[k]
                .parse::<i64>()
                .map_err(|_| bad(format!("{name} {:?} is not an integer", &record[k])))
        };
        let num = |k: usize, name: &str| -> Result<f64> {
            record[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("{name} {:?} is not a number", &record[k])))
        };
        let frame = int(0, "frame")?;
        let class = int(1, "class")?;
        let track = int(2, "track")?;
        let az = num(3, "azimuth")?;
        let el = num(4, "elevation")?;
        if frame < 0 {
            return Err(bad(format!("negative frame {frame}")));
        }
        if class < 0 || class as usize >= schema.n_cla {
            return Err(bad(format!("class {class} outside 0..{}", schema.n_cla)));
        }
        if track < 0 || track as usize >= schema.n_track {
            return Err(bad(format!("track {track} outside 0..{}", schema.n_track)));
        }
        if !(-180.0..180.0).contains(&az) {
            return Err(bad(format!("azimuth {az} outside [-180, 180)")));
        }
        if !(-90.0..=90.0).contains(&el) {
            return Err(bad(format!("elevation {el} outside [-90, 90]")));
        }
        let doa = DoaAngle::from_degrees(az, el).map_err(|e| bad(e.to_string()))?;
        rows.push((row, frame as usize, track as usize, class as usize, doa));
    }

    let n_frames = rows
        .iter()
        .map(|r| r.1 + 1)
        .max()
        .unwrap_or(0)
        .max(schema.n_frames);
    let mut grid = LabelGrid::new(n_frames, schema.n_track);
    for (row, frame, track, class_id, doa) in rows {
        if grid.get(frame, track).is_some() {
            return Err(SceneError::LabelRow {
                row,
                reason: format!("duplicate entry for frame {frame}, track {track}"),
            });
        }
        grid.set(frame, track, Some(TrackLabel { class_id, doa }));
    }
    Ok(grid)
}
