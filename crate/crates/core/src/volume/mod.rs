//! Multimodal volumes, label maps and their region hierarchy.

mod dataset;
mod io;
pub mod nifti;
mod phantom;
pub mod raw;
mod split;

pub use dataset::{
    degraded_paths, load_case, load_modalities, scan_dataset, suffixed, write_case, LABEL_TAG,
};
pub use io::{load_labels, load_volume, save_labels, save_volume};
pub use phantom::{generate_phantom, ModalityContrast, PhantomProfile};
pub use split::{read_manifest, split_dataset, write_manifest, Bucket, CaseRecord, DatasetSplit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MRI contrast; the discriminant is the channel index in a [`MultiModalVolume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1 = 0,
    T1ce = 1,
    T2 = 2,
    Flair = 3,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    /// File-name tag (`t1`, `t1ce`, `t2`, `flair`).
    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(tag))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

pub type Dims = [usize; 3];

pub(crate) fn voxels(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Single-channel 3D volume, row-major `[D,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != voxels(dims) {
            return Err(Error::shape(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(ScalarVolume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        ScalarVolume {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; voxels(dims)],
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }
}

/// Four co-registered channels in [`Modality`] order, `[4,D,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub case_id: String,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl MultiModalVolume {
    pub fn new(
        case_id: impl Into<String>,
        dims: Dims,
        spacing: [f64; 3],
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != 4 * voxels(dims) {
            return Err(Error::shape(format!(
                "{} values for [4, {dims:?}]",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite voxel value".into()));
        }
        Ok(MultiModalVolume {
            case_id: case_id.into(),
            dims,
            spacing,
            data,
        })
    }

    /// Stacks four channels given in [`Modality`] order.
    pub fn from_channels(case_id: impl Into<String>, channels: &[ScalarVolume]) -> Result<Self> {
        if channels.len() != 4 {
            return Err(Error::shape(format!(
                "expected 4 modalities, got {}",
                channels.len()
            )));
        }
        let dims = channels[0].dims;
        if channels.iter().any(|c| c.dims != dims) {
            return Err(Error::shape("modalities differ in spatial dims"));
        }
        let mut data = Vec::with_capacity(4 * voxels(dims));
        for c in channels {
            data.extend_from_slice(&c.data);
        }
        Self::new(case_id, dims, channels[0].spacing, data)
    }

    pub fn channel(&self, m: Modality) -> &[f64] {
        let n = voxels(self.dims);
        &self.data[m.index() * n..(m.index() + 1) * n]
    }

    pub fn channel_mut(&mut self, m: Modality) -> &mut [f64] {
        let n = voxels(self.dims);
        &mut self.data[m.index() * n..(m.index() + 1) * n]
    }

    pub fn channel_volume(&self, m: Modality) -> ScalarVolume {
        ScalarVolume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.channel(m).to_vec(),
        }
    }
}

/// Tissue codes: 0 background, 1 necrotic core, 2 edema, 4 enhancing tumor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub data: Vec<u8>,
}

pub const LABEL_CODES: [u8; 4] = [0, 1, 2, 4];

impl LabelVolume {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxels(dims) {
            return Err(Error::shape(format!(
                "{} labels for dims {dims:?}",
                data.len()
            )));
        }
        if let Some((index, &code)) = data
            .iter()
            .enumerate()
            .find(|(_, c)| !LABEL_CODES.contains(c))
        {
            return Err(Error::InvalidLabel {
                code: code as i32,
                index,
            });
        }
        Ok(LabelVolume { dims, data })
    }

    /// Converts arbitrary integer codes, rejecting anything outside {0,1,2,4}.
    pub fn from_codes(dims: Dims, codes: &[i32]) -> Result<Self> {
        let mut data = Vec::with_capacity(codes.len());
        for (index, &code) in codes.iter().enumerate() {
            if !(0..=4).contains(&code) || !LABEL_CODES.contains(&(code as u8)) {
                return Err(Error::InvalidLabel { code, index });
            }
            data.push(code as u8);
        }
        Self::new(dims, data)
    }
}

/// Binary mask over a `[D,H,W]` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != voxels(dims) {
            return Err(Error::shape(format!(
                "{} mask voxels for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![false; voxels(dims)],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Thresholds probabilities at `threshold` (inclusive).
    pub fn from_probs(dims: Dims, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::new(dims, probs.iter().map(|&p| p >= threshold).collect())
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Enhancing tumor, tumor core and whole tumor masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub et: Mask,
    pub tc: Mask,
    pub wt: Mask,
}

/// Evaluation regions in prediction channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "et",
            Region::Tc => "tc",
            Region::Wt => "wt",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &Mask {
        match r {
            Region::Et => &self.et,
            Region::Tc => &self.tc,
            Region::Wt => &self.wt,
        }
    }

    pub fn is_nested(&self) -> bool {
        self.et.is_subset_of(&self.tc) && self.tc.is_subset_of(&self.wt)
    }

    /// `[3, D, H, W]` as 0/1 values in (ET, TC, WT) order.
    pub fn to_channels(&self) -> Vec<f64> {
        Region::ALL
            .iter()
            .flat_map(|&r| self.get(r).data.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect()
    }
}

/// ET = {4}, TC = {1, 4}, WT = {1, 2, 4}.
pub fn labels_to_regions(labels: &LabelVolume) -> Result<RegionMasks> {
    let n = labels.data.len();
    let (mut et, mut tc, mut wt) = (vec![false; n], vec![false; n], vec![false; n]);
    for (i, &code) in labels.data.iter().enumerate() {
        match code {
            0 => {}
            1 => {
                tc[i] = true;
                wt[i] = true;
            }
            2 => wt[i] = true,
            4 => {
                et[i] = true;
                tc[i] = true;
                wt[i] = true;
            }
            other => {
                return Err(Error::InvalidLabel {
                    code: other as i32,
                    index: i,
                })
            }
        }
    }
    let dims = labels.dims;
    Ok(RegionMasks {
        et: Mask { dims, data: et },
        tc: Mask { dims, data: tc },
        wt: Mask { dims, data: wt },
    })
}

/// Mean and standard deviation of one channel over its nonzero support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

const STD_GUARD: f64 = 1e-12;

pub fn channel_stats(values: &[f64]) -> Option<ChannelStats> {
    let support: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let n = support.len() as f64;
    let mean = support.iter().sum::<f64>() / n;
    let var = support.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Some(ChannelStats {
        mean,
        std: if std < STD_GUARD { 1.0 } else { std },
    })
}

/// Applies `(x - mean) / std` to nonzero voxels; zeros stay zero.
pub fn apply_stats(values: &mut [f64], stats: ChannelStats) {
    for v in values.iter_mut().filter(|v| **v != 0.0) {
        *v = (*v - stats.mean) / stats.std;
    }
}

/// Per-channel z-score over the nonzero support; all-zero channels are unchanged.
pub fn znorm(volume: &MultiModalVolume) -> MultiModalVolume {
    let mut out = volume.clone();
    for m in Modality::ALL {
        if let Some(stats) = channel_stats(volume.channel(m)) {
            apply_stats(out.channel_mut(m), stats);
        }
    }
    out
}

/// Per-channel statistics of `volume` (None for all-zero channels).
pub fn znorm_stats(volume: &MultiModalVolume) -> [Option<ChannelStats>; 4] {
    Modality::ALL.map(|m| channel_stats(volume.channel(m)))
}

/// Normalizes `volume` with externally computed per-channel statistics.
pub fn znorm_with(
    volume: &MultiModalVolume,
    stats: &[Option<ChannelStats>; 4],
) -> MultiModalVolume {
    let mut out = volume.clone();
    for m in Modality::ALL {
        if let Some(s) = stats[m.index()] {
            apply_stats(out.channel_mut(m), s);
        }
    }
    out
}
