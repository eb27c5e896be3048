use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{simulate_motion, MotionTimeline, SeverityPreset};
use crate::error::{Error, Result};
use crate::volume::{
    load_modalities, save_volume, suffixed, CaseRecord, Modality, MultiModalVolume,
};

/// Seed for one case (and one modality when timelines are not shared).
pub fn case_seed(seed: u64, case_id: &str, modality: Option<Modality>) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(case_id.as_bytes());
    if let Some(m) = modality {
        h.update([0u8]);
        h.update(m.tag().as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Timelines used for the four modalities of a case, in `Modality` order.
pub fn case_timelines(
    preset: &SeverityPreset,
    seed: u64,
    case_id: &str,
    per_modality: bool,
) -> Vec<MotionTimeline> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(case_seed(seed, case_id, per_modality.then_some(m)));
            preset.sample_timeline(&mut rng)
        })
        .collect()
}

/// Degrades every modality of a case in memory.
pub fn degrade_volume(
    volume: &MultiModalVolume,
    preset: &SeverityPreset,
    seed: u64,
    per_modality: bool,
) -> Result<(MultiModalVolume, Vec<MotionTimeline>)> {
    preset.validate()?;
    let timelines = case_timelines(preset, seed, &volume.case_id, per_modality);
    let mut out = volume.clone();
    for (m, t) in Modality::ALL.iter().zip(&timelines) {
        let moved = simulate_motion(&volume.channel_volume(*m), t)?;
        out.channel_mut(*m).copy_from_slice(&moved.data);
    }
    Ok((out, timelines))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradedCase {
    /// Clean case as stored in the output dataset.
    pub record: CaseRecord,
    /// Degraded modality files, in `Modality` order.
    pub degraded: Vec<PathBuf>,
    pub timelines: Vec<MotionTimeline>,
}

fn copy_with_sidecar(from: &Path, to: &Path) -> Result<()> {
    if from == to {
        return Ok(());
    }
    std::fs::copy(from, to).map_err(|e| Error::io(from, e))?;
    if from.extension().and_then(|e| e.to_str()) == Some("raw") {
        let (a, b) = (from.with_extension("meta"), to.with_extension("meta"));
        std::fs::copy(&a, &b).map_err(|e| Error::io(&a, e))?;
    }
    Ok(())
}

fn relocate(path: &Path, root: &Path, case_id: &str) -> PathBuf {
    root.join(case_id)
        .join(path.file_name().unwrap_or_default())
}

/// Writes a motion-degraded copy of every case.
///
/// Degraded files get `_<preset name>` before the extension. With `out`
/// set, the clean volumes and labels are copied there too so the output is a
/// self-contained dataset; otherwise files are written next to the originals.
pub fn degrade_dataset(
    cases: &[CaseRecord],
    preset: &SeverityPreset,
    seed: u64,
    out: Option<&Path>,
    per_modality: bool,
) -> Result<Vec<DegradedCase>> {
    preset.validate()?;
    let mut result = Vec::with_capacity(cases.len());
    for case in cases {
        let id = &case.case_id;
        let volume = load_modalities(id, &case.volumes)?;
        let (degraded, timelines) =
            degrade_volume(&volume, preset, seed, per_modality).map_err(|e| e.in_case(id))?;
        let record = match out {
            None => case.clone(),
            Some(root) => {
                let dir = root.join(id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e).in_case(id))?;
                let record = CaseRecord {
                    case_id: id.clone(),
                    volumes: case.volumes.iter().map(|p| relocate(p, root, id)).collect(),
                    labels: relocate(&case.labels, root, id),
                };
                for (a, b) in case
                    .volumes
                    .iter()
                    .zip(&record.volumes)
                    .chain([(&case.labels, &record.labels)])
                {
                    copy_with_sidecar(a, b).map_err(|e| e.in_case(id))?;
                }
                record
            }
        };
        let paths: Vec<PathBuf> = record
            .volumes
            .iter()
            .map(|p| suffixed(p, &preset.name))
            .collect();
        for (m, p) in Modality::ALL.iter().zip(&paths) {
            save_volume(p, &degraded.channel_volume(*m)).map_err(|e| e.in_case(id))?;
        }
        result.push(DegradedCase {
            record,
            degraded: paths,
            timelines,
        });
    }
    Ok(result)
}
