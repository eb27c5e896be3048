//! On-disk dataset layout.
//!
//! One directory per case under the dataset root:
//! `<root>/<case>/<case>_<tag>.<ext>` for each modality (`t1`, `t1ce`, `t2`,
//! `flair`) and `<case>_seg.<ext>` for labels, where `<ext>` is `nii` or
//! `raw` (with its `.meta` sidecar). Degraded copies carry an extra suffix
//! before the extension, e.g. `<case>_flair_S2.nii`.

use std::path::{Path, PathBuf};

use super::io::{load_labels, load_volume, save_labels, save_volume};
use super::split::CaseRecord;
use super::{LabelVolume, Modality, MultiModalVolume, ScalarVolume};
use crate::error::{Error, Result};

pub const LABEL_TAG: &str = "seg";

fn file_in(dir: &Path, case_id: &str, tag: &str, suffix: Option<&str>, ext: &str) -> PathBuf {
    let name = match suffix {
        Some(s) => format!("{case_id}_{tag}_{s}.{ext}"),
        None => format!("{case_id}_{tag}.{ext}"),
    };
    dir.join(case_id).join(name)
}

/// Inserts `_<suffix>` before the extension of `path`.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_{suffix}.{ext}"),
        None => format!("{stem}_{suffix}"),
    };
    path.with_file_name(name)
}

/// Paths of the degraded modality files belonging to `record`.
pub fn degraded_paths(record: &CaseRecord, suffix: &str) -> Vec<PathBuf> {
    record.volumes.iter().map(|p| suffixed(p, suffix)).collect()
}

/// Writes a case as NIfTI under `root` and returns its record.
pub fn write_case(
    root: &Path,
    volume: &MultiModalVolume,
    labels: &LabelVolume,
) -> Result<CaseRecord> {
    if labels.dims != volume.dims {
        return Err(Error::shape(format!(
            "labels {:?} do not match volume {:?}",
            labels.dims, volume.dims
        )));
    }
    let id = &volume.case_id;
    let dir = root.join(id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut volumes = Vec::with_capacity(4);
    for m in Modality::ALL {
        let path = file_in(root, id, m.tag(), None, "nii");
        save_volume(&path, &volume.channel_volume(m))?;
        volumes.push(path);
    }
    let label_path = file_in(root, id, LABEL_TAG, None, "nii");
    save_labels(&label_path, labels)?;
    Ok(CaseRecord {
        case_id: id.clone(),
        volumes,
        labels: label_path,
    })
}

fn find(root: &Path, case_id: &str, tag: &str) -> Result<PathBuf> {
    for ext in ["nii", "raw"] {
        let p = file_in(root, case_id, tag, None, ext);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!(
        "case {case_id}: no {tag} volume under {}",
        root.join(case_id).display()
    )))
}

/// Lists the cases under `root`, sorted by case id.
pub fn scan_dataset(root: &Path) -> Result<Vec<CaseRecord>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                ids.push(name.to_string());
            }
        }
    }
    ids.sort();
    ids.iter()
        .map(|id| {
            let volumes = Modality::ALL
                .iter()
                .map(|m| find(root, id, m.tag()))
                .collect::<Result<Vec<_>>>()?;
            Ok(CaseRecord {
                case_id: id.clone(),
                volumes,
                labels: find(root, id, LABEL_TAG)?,
            })
        })
        .collect()
}

pub fn load_modalities(case_id: &str, paths: &[PathBuf]) -> Result<MultiModalVolume> {
    if paths.len() != 4 {
        return Err(Error::Data(format!(
            "case {case_id}: expected 4 modality paths, got {}",
            paths.len()
        )));
    }
    let channels = paths
        .iter()
        .map(|p| load_volume(p))
        .collect::<Result<Vec<ScalarVolume>>>();
    MultiModalVolume::from_channels(case_id, &channels.map_err(|e| e.in_case(case_id))?)
        .map_err(|e| e.in_case(case_id))
}

/// Loads the clean modalities and labels of a case.
pub fn load_case(record: &CaseRecord) -> Result<(MultiModalVolume, LabelVolume)> {
    let volume = load_modalities(&record.case_id, &record.volumes)?;
    let labels = load_labels(&record.labels).map_err(|e| e.in_case(&record.case_id))?;
    if labels.dims != volume.dims {
        return Err(Error::shape(format!(
            "labels {:?} vs volume {:?}",
            labels.dims, volume.dims
        ))
        .in_case(&record.case_id));
    }
    Ok((volume, labels))
}
