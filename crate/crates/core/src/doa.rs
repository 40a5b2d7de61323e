//! Direction-of-arrival angles on the unit sphere.
//!
//! Azimuth is measured counter-clockwise from the +x axis in the horizontal
//! plane, elevation upwards from that plane. The Cartesian convention matches
//! the first-order Ambisonic dipole gains used by [`crate::scene`]:
//! `(cos el cos az, cos el sin az, sin el)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoaError {
    #[error("non-finite angle (azimuth {azimuth}, elevation {elevation})")]
    NonFinite { azimuth: f64, elevation: f64 },
    #[error("elevation {0} rad outside [-pi/2, pi/2]")]
    ElevationOutOfRange(f64),
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    let w = (x + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        -PI
    } else {
        w
    }
}

/// Wraps an angular difference into `(-pi, pi]`.
pub fn wrap_difference(x: f64) -> f64 {
    let w = wrap_angle(x);
    if w == -PI {
        PI
    } else {
        w
    }
}

/// A direction on the unit sphere with azimuth in `[-pi, pi)` and elevation
/// in `[-pi/2, pi/2]`, both in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawDoa", into = "RawDoa")]
pub struct DoaAngle {
    azimuth: f64,
    elevation: f64,
}

#[derive(Serialize, Deserialize)]
struct RawDoa {
    azimuth: f64,
    elevation: f64,
}

impl TryFrom<RawDoa> for DoaAngle {
    type Error = DoaError;
    fn try_from(raw: RawDoa) -> Result<Self, Self::Error> {
        DoaAngle::new(raw.azimuth, raw.elevation)
    }
}

impl From<DoaAngle> for RawDoa {
    fn from(d: DoaAngle) -> Self {
        RawDoa {
            azimuth: d.azimuth,
            elevation: d.elevation,
        }
    }
}

impl DoaAngle {
    /// Builds an angle, wrapping the azimuth into range. Elevation outside
    /// `[-pi/2, pi/2]` is rejected rather than folded.
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self, DoaError> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(DoaError::NonFinite { azimuth, elevation });
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&elevation) {
            return Err(DoaError::ElevationOutOfRange(elevation));
        }
        Ok(Self {
            azimuth: wrap_angle(azimuth),
            elevation,
        })
    }

    pub fn from_degrees(azimuth_deg: f64, elevation_deg: f64) -> Result<Self, DoaError> {
        Self::new(azimuth_deg.to_radians(), elevation_deg.to_radians())
    }

    /// Maps arbitrary (possibly out-of-range) angles onto the sphere point
    /// they parameterize. Used for unconstrained regression outputs.
    pub fn from_unbounded(azimuth: f64, elevation: f64) -> Result<Self, DoaError> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(DoaError::NonFinite { azimuth, elevation });
        }
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        Ok(Self::from_vector([ce * ca, ce * sa, se]).unwrap_or_else(|| Self {
            azimuth: wrap_angle(azimuth),
            elevation: 0.0,
        }))
    }

    /// Direction of a Cartesian vector; `None` for the zero vector.
    pub fn from_vector(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        let horizontal = v[0].hypot(v[1]);
        let elevation = v[2].atan2(horizontal);
        let azimuth = if horizontal > 0.0 {
            wrap_angle(v[1].atan2(v[0]))
        } else {
            0.0
        };
        Some(Self { azimuth, elevation })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth.to_degrees()
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation.to_degrees()
    }

    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [ce * ca, ce * sa, se]
    }

    /// Great-circle distance in degrees.
    ///
    /// Equal to `acos(sin e1 sin e2 + cos e1 cos e2 cos(a1 - a2))`, evaluated
    /// as `atan2(|u x v|, u . v)` which stays accurate near 0 and 180 degrees.
    pub fn angular_distance_deg(&self, other: &DoaAngle) -> f64 {
        let u = self.to_unit_vector();
        let v = other.to_unit_vector();
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let sin_d = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let cos_d = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        sin_d.atan2(cos_d).to_degrees()
    }

    /// Linear interpolation in (azimuth, elevation), taking the shorter way
    /// around in azimuth. `frac` is clamped to `[0, 1]`.
    pub fn lerp(&self, other: &DoaAngle, frac: f64) -> DoaAngle {
        let frac = frac.clamp(0.0, 1.0);
        let d_az = wrap_difference(other.azimuth - self.azimuth);
        DoaAngle {
            azimuth: wrap_angle(self.azimuth + frac * d_az),
            elevation: (self.elevation + frac * (other.elevation - self.elevation))
                .clamp(-FRAC_PI_2, FRAC_PI_2),
        }
    }
}

impl fmt::Display for DoaAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(az {:.2} deg, el {:.2} deg)",
            self.azimuth_deg(),
            self.elevation_deg()
        )
    }
}
