//! Case preparation, intensity normalization and aligned patch sampling.

use rand::Rng;

use super::config::{DataConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::motion::{case_seed, degrade_volume, SeverityPreset};
use crate::volume::{
    degraded_paths, generate_phantom, labels_to_regions, load_labels, load_modalities,
    read_manifest, scan_dataset, split_dataset, voxels, Bucket, CaseRecord, Dims, LabelVolume,
    Modality, MultiModalVolume, PhantomProfile, RegionMasks,
};

/// A case ready for the network: normalized input, the clean reference in
/// the same intensity space (when loaded), and the ET/TC/WT targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
    /// `[4, D, H, W]`.
    pub input: Vec<f64>,
    /// `[4, D, H, W]`, normalized with the input's statistics.
    pub clean: Option<Vec<f64>>,
    pub regions: RegionMasks,
    /// `[3, D, H, W]` binary targets in (ET, TC, WT) order.
    pub target: Vec<f64>,
}

/// Voxels above this fraction of a channel's maximum define its foreground.
const FOREGROUND_FRACTION: f64 = 0.1;

/// Mean of a channel over its bright foreground (1 when there is none).
///
/// Motion ghosting leaves the background of a degraded volume slightly
/// nonzero, so a nonzero-support mean would be dominated by noise; a
/// relative threshold is stable for clean and degraded data alike.
pub fn foreground_mean(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
    let (sum, n) = values
        .iter()
        .filter(|&&v| max > 0.0 && v > FOREGROUND_FRACTION * max)
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 || sum <= 0.0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Divides every channel of the input, and identically of the clean
/// reference, by the input's foreground mean. Background stays near zero
/// and intensities stay nonnegative, which suits the stem's leaky output.
pub fn normalize_pair(
    input: &MultiModalVolume,
    clean: Option<&MultiModalVolume>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut x = input.data.clone();
    let mut c = clean.map(|v| v.data.clone());
    let n = voxels(input.dims);
    for m in Modality::ALL {
        let scale = 1.0 / foreground_mean(input.channel(m));
        let range = m.index() * n..(m.index() + 1) * n;
        x[range.clone()].iter_mut().for_each(|v| *v *= scale);
        if let Some(c) = c.as_mut() {
            c[range].iter_mut().for_each(|v| *v *= scale);
        }
    }
    (x, c)
}

pub fn prepare_case(
    input: &MultiModalVolume,
    clean: Option<&MultiModalVolume>,
    labels: &LabelVolume,
) -> Result<PreparedCase> {
    if labels.dims != input.dims || clean.is_some_and(|c| c.dims != input.dims) {
        return Err(Error::shape(format!(
            "case {}: input, clean and label grids differ",
            input.case_id
        )));
    }
    let regions = labels_to_regions(labels)?;
    let (x, c) = normalize_pair(input, clean);
    Ok(PreparedCase {
        case_id: input.case_id.clone(),
        dims: input.dims,
        spacing: input.spacing,
        input: x,
        clean: c,
        target: regions.to_channels(),
        regions,
    })
}

/// Train / validation / test cases of one run.
#[derive(Debug, Clone, Default)]
pub struct PreparedSplit {
    pub train: Vec<PreparedCase>,
    pub val: Vec<PreparedCase>,
    pub test: Vec<PreparedCase>,
}

/// Synthesizes `phantoms` clean cases with their degraded copies.
pub fn synth_phantoms(
    data: &DataConfig,
    seed: u64,
) -> Result<Vec<(MultiModalVolume, MultiModalVolume, LabelVolume)>> {
    let preset = SeverityPreset::resolve(&data.severity)?;
    let n = data.phantom_size;
    let profile = PhantomProfile::for_size(n);
    (0..data.phantoms)
        .map(|i| {
            let id = format!("phantom_{i:03}");
            let (mut clean, labels) =
                generate_phantom(case_seed(seed, &id, None), [n; 3], &profile)?;
            clean.case_id = id;
            let (degraded, _) = degrade_volume(&clean, &preset, seed, data.per_modality_motion)?;
            Ok((clean, degraded, labels))
        })
        .collect()
}

fn split_ids(config: &TrainConfig, records: &[CaseRecord]) -> Result<Vec<(String, Bucket)>> {
    let data = &config.data;
    match &data.manifest {
        Some(p) => read_manifest(p),
        None => Ok(split_dataset(records, data.split_ratios, config.seed)?.manifest_entries()),
    }
}

fn bucket_of(entries: &[(String, Bucket)], id: &str) -> Option<Bucket> {
    entries.iter().find(|(c, _)| c == id).map(|(_, b)| *b)
}

fn place(split: &mut PreparedSplit, bucket: Bucket, case: PreparedCase) {
    match bucket {
        Bucket::Train => split.train.push(case),
        Bucket::Val => split.val.push(case),
        Bucket::Test => split.test.push(case),
    }
}

/// Loads (or synthesizes) and splits the cases of a run. Clean references
/// are read only for training cases of runs that use them.
pub fn load_split(config: &TrainConfig) -> Result<PreparedSplit> {
    let need_clean = config.needs_clean();
    let mut split = PreparedSplit::default();
    match &config.data.root {
        None => {
            let cases = synth_phantoms(&config.data, config.seed)?;
            let records: Vec<CaseRecord> = cases
                .iter()
                .map(|(c, _, _)| CaseRecord {
                    case_id: c.case_id.clone(),
                    volumes: Vec::new(),
                    labels: Default::default(),
                })
                .collect();
            let entries = split_ids(config, &records)?;
            for (clean, degraded, labels) in &cases {
                let Some(bucket) = bucket_of(&entries, &clean.case_id) else {
                    continue;
                };
                let input = if config.data.degraded_suffix.is_some() {
                    degraded
                } else {
                    clean
                };
                let reference = (need_clean && bucket == Bucket::Train).then_some(clean);
                place(&mut split, bucket, prepare_case(input, reference, labels)?);
            }
        }
        Some(root) => {
            let records = scan_dataset(root)?;
            let entries = split_ids(config, &records)?;
            for record in &records {
                let Some(bucket) = bucket_of(&entries, &record.case_id) else {
                    continue;
                };
                let id = &record.case_id;
                let input_paths = match &config.data.degraded_suffix {
                    Some(s) => degraded_paths(record, s),
                    None => record.volumes.clone(),
                };
                let input = load_modalities(id, &input_paths)?;
                let clean = if need_clean && bucket == Bucket::Train {
                    Some(load_modalities(id, &record.volumes)?)
                } else {
                    None
                };
                let labels = load_labels(&record.labels).map_err(|e| e.in_case(id))?;
                place(
                    &mut split,
                    bucket,
                    prepare_case(&input, clean.as_ref(), &labels).map_err(|e| e.in_case(id))?,
                );
            }
        }
    }
    if split.train.is_empty() {
        return Err(Error::Data("split has no training cases".into()));
    }
    Ok(split)
}

/// A spatial window `[origin, origin + size)` shared by all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// Draws a window with every valid corner equally likely.
pub fn crop_window<R: Rng>(dims: Dims, size: [usize; 3], rng: &mut R) -> Result<CropWindow> {
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return Err(Error::shape(format!(
            "crop {size:?} does not fit volume {dims:?}"
        )));
    }
    let origin = std::array::from_fn(|a| rng.gen_range(0..=dims[a] - size[a]));
    Ok(CropWindow { origin, size })
}

/// Copies the window out of every channel of a `[C, D, H, W]` array.
pub fn extract(values: &[f64], dims: Dims, w: &CropWindow) -> Vec<f64> {
    let n = voxels(dims);
    let [sd, sh, sw] = w.size;
    let [od, oh, ow] = w.origin;
    let mut out = Vec::with_capacity(values.len() / n * sd * sh * sw);
    for ch in values.chunks_exact(n) {
        for z in od..od + sd {
            for y in oh..oh + sh {
                let start = (z * dims[1] + y) * dims[2] + ow;
                out.extend_from_slice(&ch[start..start + sw]);
            }
        }
    }
    out
}

/// One training sample: network input, reconstruction reference and target
/// cut from the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub window: CropWindow,
    pub input: Vec<f64>,
    pub clean: Option<Vec<f64>>,
    pub target: Vec<f64>,
}

/// Samples an aligned patch; with `clean_input` the clean reference is fed
/// to the network instead of the degraded volume.
pub fn random_crop<R: Rng>(
    case: &PreparedCase,
    size: [usize; 3],
    rng: &mut R,
    clean_input: bool,
) -> Result<Patch> {
    let window = crop_window(case.dims, size, rng).map_err(|e| e.in_case(&case.case_id))?;
    let clean = case.clean.as_ref().map(|c| extract(c, case.dims, &window));
    let input = match (&clean, clean_input) {
        (Some(c), true) => c.clone(),
        (None, true) => {
            return Err(Error::Data(format!(
                "case {}: clean input requested but not loaded",
                case.case_id
            )))
        }
        _ => extract(&case.input, case.dims, &window),
    };
    Ok(Patch {
        window,
        input,
        clean,
        target: extract(&case.target, case.dims, &window),
    })
}
