//! Rigid-motion k-space artifact simulation.

mod degrade;
mod fft;
mod rigid;
mod simulate;

pub use degrade::{case_seed, case_timelines, degrade_dataset, degrade_volume, DegradedCase};
pub use fft::{fft3, fft3_complex, ifft3, Complex64, ComplexSpectrum};
pub use rigid::{
    apply_rigid, resample_rigid, RigidMotionState, MAX_ROTATION_DEG, MAX_TRANSLATION_VOX,
};
pub use simulate::{composite_spectrum, plane_owners, simulate_motion};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant motion over contiguous k-space plane blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTimeline {
    /// `(fraction of planes, state)` in acquisition order.
    pub segments: Vec<(f64, RigidMotionState)>,
    /// Phase-encode axis whose planes are partitioned.
    pub axis: usize,
}

impl MotionTimeline {
    pub fn still(axis: usize) -> Self {
        MotionTimeline {
            segments: vec![(1.0, RigidMotionState::IDENTITY)],
            axis,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Parameter("motion timeline has no segments".into()));
        }
        if self.axis > 2 {
            return Err(Error::Parameter(format!(
                "phase-encode axis {} not in 0..=2",
                self.axis
            )));
        }
        for (f, s) in &self.segments {
            if !(f.is_finite() && *f > 0.0 && *f <= 1.0) {
                return Err(Error::Parameter(format!(
                    "segment fraction {f} outside (0, 1]"
                )));
            }
            s.validate()?;
        }
        let total: f64 = self.segments.iter().map(|(f, _)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "segment fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

/// Motion severity: how many segments and how far the subject may move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityPreset {
    pub name: String,
    /// Inclusive range of segment counts.
    pub k_segments: (usize, usize),
    pub max_rotation_deg: f64,
    pub max_translation_vox: f64,
}

impl SeverityPreset {
    /// Repository default for the degraded dataset: 2 to 4 segments,
    /// up to 5 degrees and 2 voxels.
    pub fn s2() -> Self {
        SeverityPreset {
            name: "S2".into(),
            k_segments: (2, 4),
            max_rotation_deg: 5.0,
            max_translation_vox: 2.0,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        (name == "S2").then(Self::s2)
    }

    /// A built-in preset name or a path to a preset file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(p) => Ok(p),
            None => Self::load(Path::new(name_or_path)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.k_segments;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "k_segments {lo}..{hi} must be a nonempty range starting at >= 1"
            )));
        }
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "max_rot_deg {} outside [0, {MAX_ROTATION_DEG}]",
                self.max_rotation_deg
            )));
        }
        if !(0.0..=MAX_TRANSLATION_VOX).contains(&self.max_translation_vox) {
            return Err(Error::Config(format!(
                "max_trans_vox {} outside [0, {MAX_TRANSLATION_VOX}]",
                self.max_translation_vox
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\', '.']) {
            return Err(Error::Config(format!(
                "preset name {:?} is not usable as a file suffix",
                self.name
            )));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep the
    /// `S2` defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Self::s2();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("preset line {line:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::Config(format!("{k}: bad number {v:?}")))
            };
            let int = |v: &str| -> Result<usize> {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{k}: bad integer {v:?}")))
            };
            match k {
                "name" => p.name = v.to_string(),
                "k_segments" => {
                    p.k_segments = match v.split_once("..") {
                        Some((a, b)) => (int(a)?, int(b)?),
                        None => (int(v)?, int(v)?),
                    }
                }
                "max_rot_deg" => p.max_rotation_deg = num(v)?,
                "max_trans_vox" => p.max_translation_vox = num(v)?,
                other => return Err(Error::Config(format!("unknown preset key {other:?}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "name={}\nk_segments={}..{}\nmax_rot_deg={}\nmax_trans_vox={}\n",
            self.name,
            self.k_segments.0,
            self.k_segments.1,
            self.max_rotation_deg,
            self.max_translation_vox
        )
    }

    /// Samples a timeline: the first segment is the reference position, the
    /// others are uniform within the preset limits; block sizes are random
    /// with weights in `[0.5, 1.5)`.
    pub fn sample_timeline<R: Rng>(&self, rng: &mut R) -> MotionTimeline {
        let k = rng.gen_range(self.k_segments.0..=self.k_segments.1);
        let axis = rng.gen_range(0..3);
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let total: f64 = weights.iter().sum();
        let mut uniform = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let mut segments = Vec::with_capacity(k);
        for (i, w) in weights.iter().enumerate() {
            let state = if i == 0 {
                RigidMotionState::IDENTITY
            } else {
                RigidMotionState {
                    rotation: std::array::from_fn(|_| uniform(self.max_rotation_deg)),
                    translation: std::array::from_fn(|_| uniform(self.max_translation_vox)),
                }
            };
            segments.push((w / total, state));
        }
        // absorb rounding so the fractions sum to 1 to machine precision
        let head: f64 = segments[..k - 1].iter().map(|s| s.0).sum();
        segments[k - 1].0 = 1.0 - head;
        MotionTimeline { segments, axis }
    }
}
