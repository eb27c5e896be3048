use std::path::Path;

use super::nifti::{self, DataType};
use super::{raw, LabelVolume, ScalarVolume};
use crate::error::{Error, Result};

fn is_raw(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("raw" | "meta")
    )
}

/// Loads a scalar volume from `.nii` or a `.raw`/`.meta` pair.
pub fn load_volume(path: &Path) -> Result<ScalarVolume> {
    if is_raw(path) {
        return Ok(raw::read(path)?.0);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => nifti::read(path),
        Some("gz") => Err(Error::Unsupported(format!(
            "{}: compressed NIfTI",
            path.display()
        ))),
        _ => Err(Error::Unsupported(format!(
            "{}: unknown volume format",
            path.display()
        ))),
    }
}

/// Saves as `float64` NIfTI (`.nii`) or a raw pair, chosen by extension.
pub fn save_volume(path: &Path, volume: &ScalarVolume) -> Result<()> {
    if is_raw(path) {
        return raw::write(path, volume, None);
    }
    nifti::write(path, volume, DataType::Float64)
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let v = load_volume(path)?;
    let mut codes = Vec::with_capacity(v.data.len());
    for (index, &x) in v.data.iter().enumerate() {
        if x.fract() != 0.0 {
            return Err(Error::InvalidLabel {
                code: x as i32,
                index,
            });
        }
        codes.push(x as i32);
    }
    LabelVolume::from_codes(v.dims, &codes)
}

/// Labels are stored as `int16` NIfTI.
pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let v = ScalarVolume::new(
        labels.dims,
        [1.0; 3],
        labels.data.iter().map(|&c| c as f64).collect(),
    )?;
    if is_raw(path) {
        return raw::write(path, &v, None);
    }
    nifti::write(path, &v, DataType::Int16)
}
