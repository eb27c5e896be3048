//! Uncompressed single-file NIfTI-1 (`.nii`), little-endian only.
//!
//! Arrays are exposed as `[dim1, dim2, dim3]` in row-major order, so the
//! file's fastest axis (`dim1`) becomes the slowest array axis.

use std::io::Write;
use std::path::Path;

use super::{voxels, Dims, ScalarVolume};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

/// On-disk voxel type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
}

impl DataType {
    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            4 => Some(DataType::Int16),
            16 => Some(DataType::Float32),
            64 => Some(DataType::Float64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DataType::Int16 => 2,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub datatype: DataType,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "header needs {HEADER_SIZE} bytes, file has {}",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348"
        )));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Format(format!(
            "magic {magic:?} is not single-file NIfTI-1"
        )));
    }
    let ndim = i16_at(bytes, 40);
    let dim: Vec<i16> = (0..8).map(|i| i16_at(bytes, 40 + 2 * i)).collect();
    let spatial_ok = (1..=3).all(|i| dim[i] >= 1);
    let extra_ok = (4..=(ndim.clamp(3, 7) as usize)).all(|i| dim[i] == 1);
    if !(3..=7).contains(&ndim) || !spatial_ok || !extra_ok {
        return Err(Error::Format(format!(
            "need 3 spatial dims, header has {:?}",
            &dim[..=ndim.clamp(0, 7) as usize]
        )));
    }
    let code = i16_at(bytes, 70);
    let datatype = DataType::from_code(code)
        .ok_or_else(|| Error::Unsupported(format!("NIfTI datatype {code}")))?;
    let bitpix = i16_at(bytes, 72);
    if bitpix as usize != 8 * datatype.bytes() {
        return Err(Error::Format(format!(
            "bitpix {bitpix} inconsistent with datatype {code}"
        )));
    }
    let spacing = [1, 2, 3].map(|i| f32_at(bytes, 76 + 4 * i).abs() as f64);
    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    Ok(Header {
        dims: [dim[1] as usize, dim[2] as usize, dim[3] as usize],
        spacing,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: f32_at(bytes, 112),
        scl_inter: f32_at(bytes, 116),
    })
}

pub fn encode_header(h: &Header) -> [u8; HEADER_SIZE] {
    let mut b = [0u8; HEADER_SIZE];
    b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [
        3,
        h.dims[0] as i16,
        h.dims[1] as i16,
        h.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    b[70..72].copy_from_slice(&h.datatype.code().to_le_bytes());
    b[72..74].copy_from_slice(&((8 * h.datatype.bytes()) as i16).to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        h.spacing[0] as f32,
        h.spacing[1] as f32,
        h.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        b[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    b[108..112].copy_from_slice(&(h.vox_offset as f32).to_le_bytes());
    b[112..116].copy_from_slice(&h.scl_slope.to_le_bytes());
    b[116..120].copy_from_slice(&h.scl_inter.to_le_bytes());
    // xyzt_units: mm
    b[123] = 2;
    b[344..348].copy_from_slice(b"n+1\0");
    b
}

/// Decodes a whole `.nii` image held in memory.
pub fn decode(bytes: &[u8]) -> Result<ScalarVolume> {
    let h = parse_header(bytes)?;
    let n = voxels(h.dims);
    let need = h.vox_offset + n * h.datatype.bytes();
    if bytes.len() < need {
        return Err(Error::Corruption(format!(
            "image body has {} bytes, header implies {}",
            bytes.len().saturating_sub(h.vox_offset),
            need - h.vox_offset
        )));
    }
    let body = &bytes[h.vox_offset..need];
    let raw: Vec<f64> = match h.datatype {
        DataType::Int16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DataType::Float32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DataType::Float64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let scale = h.scl_slope != 0.0 && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let [a, b, c] = h.dims;
    let mut data = vec![0.0; n];
    // file order: index = i + a*(j + b*k); array order: (i*b + j)*c + k
    for k in 0..c {
        for j in 0..b {
            for i in 0..a {
                let mut v = raw[i + a * (j + b * k)];
                if scale {
                    v = v * h.scl_slope as f64 + h.scl_inter as f64;
                }
                data[(i * b + j) * c + k] = v;
            }
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite voxel in NIfTI body".into()));
    }
    ScalarVolume::new(h.dims, h.spacing, data)
}

pub fn encode(volume: &ScalarVolume, datatype: DataType) -> Result<Vec<u8>> {
    if volume.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(Error::Format(format!(
            "dims {:?} not representable in NIfTI-1",
            volume.dims
        )));
    }
    let h = Header {
        dims: volume.dims,
        spacing: volume.spacing,
        datatype,
        vox_offset: VOX_OFFSET,
        scl_slope: 1.0,
        scl_inter: 0.0,
    };
    let n = voxels(volume.dims);
    let mut out = Vec::with_capacity(VOX_OFFSET + n * datatype.bytes());
    out.extend_from_slice(&encode_header(&h));
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    let [a, b, c] = volume.dims;
    for k in 0..c {
        for j in 0..b {
            for i in 0..a {
                let v = volume.data[(i * b + j) * c + k];
                match datatype {
                    DataType::Int16 => {
                        let r = v.round();
                        if r < i16::MIN as f64 || r > i16::MAX as f64 {
                            return Err(Error::Format(format!("value {v} overflows int16")));
                        }
                        out.extend_from_slice(&(r as i16).to_le_bytes())
                    }
                    DataType::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DataType::Float64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<ScalarVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, volume: &ScalarVolume, datatype: DataType) -> Result<()> {
    let bytes = encode(volume, datatype)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: Dims) -> ScalarVolume {
        let n = voxels(dims);
        ScalarVolume::new(
            dims,
            [1.0, 1.5, 2.0],
            (0..n).map(|i| i as f64 * 0.25 - 3.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn paper_scale_header_dims() {
        let v = ScalarVolume::new([240, 240, 150], [1.0; 3], vec![0.0; 240 * 240 * 150]).unwrap();
        let bytes = encode(&v, DataType::Int16).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.dims, [240, 240, 150]);
        assert_eq!(back.data.len(), 240 * 240 * 150);
    }

    #[test]
    fn axis_order_follows_header() {
        let v = ramp([2, 3, 4]);
        let bytes = encode(&v, DataType::Float64).unwrap();
        // first body value is (0,0,0); second on disk is dim1 index 1 = array (1,0,0)
        let second = f64::from_le_bytes(bytes[VOX_OFFSET + 8..VOX_OFFSET + 16].try_into().unwrap());
        assert_eq!(second, v.data[v.index(1, 0, 0)]);
        assert_eq!(decode(&bytes).unwrap(), v);
    }

    #[test]
    fn int16_and_float32_round_trip() {
        let v = ScalarVolume::new(
            [3, 2, 2],
            [1.0; 3],
            vec![0., 1., 2., 4., -5., 7., 8., 9., 10., 11., 12., 300.],
        )
        .unwrap();
        assert_eq!(decode(&encode(&v, DataType::Int16).unwrap()).unwrap(), v);
        assert_eq!(decode(&encode(&v, DataType::Float32).unwrap()).unwrap(), v);
    }

    #[test]
    fn truncated_body_is_corruption() {
        let bytes = encode(&ramp([4, 4, 4]), DataType::Float32).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut), Err(Error::Corruption(_))));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = encode(&ramp([2, 2, 2]), DataType::Float32).unwrap();
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes()); // uint8
        bytes[72..74].copy_from_slice(&8i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode(&[0u8; 100]), Err(Error::Format(_))));
        let mut bytes = encode(&ramp([2, 2, 2]), DataType::Float32).unwrap();
        bytes[344] = b'x';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut bytes = encode(&ramp([2, 2, 2]), DataType::Float32).unwrap();
        bytes[40..42].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn scaling_is_applied() {
        let v = ScalarVolume::new([1, 1, 2], [1.0; 3], vec![2.0, 4.0]).unwrap();
        let mut bytes = encode(&v, DataType::Int16).unwrap();
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap().data, vec![2.0, 3.0]);
    }
}
