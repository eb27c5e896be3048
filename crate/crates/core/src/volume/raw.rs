//! Raw little-endian `f64` volumes with a `key=value` text sidecar.
//!
//! `<case>.raw` holds `D*H*W` values in row-major `[D,H,W]` order;
//! `<case>.meta` holds `dims=D,H,W`, `spacing=x,y,z` and `modality=<tag>`.

use std::path::{Path, PathBuf};

use super::{voxels, Modality, ScalarVolume};
use crate::error::{Error, Result};

fn parse_triple<T: std::str::FromStr>(key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Format(format!(
            "{key} needs 3 comma-separated values, got {v:?}"
        )));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Format(format!("{key}: cannot parse {p:?}")))?,
        );
    }
    out.try_into().map_err(|_| Error::Format(key.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: Option<Modality>,
}

pub fn parse_sidecar(text: &str) -> Result<Sidecar> {
    let mut dims = None;
    let mut spacing = [1.0; 3];
    let mut modality = None;
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("sidecar line {line:?} is not key=value")))?;
        match k.trim() {
            "dims" => dims = Some(parse_triple::<usize>("dims", v)?),
            "spacing" => spacing = parse_triple::<f64>("spacing", v)?,
            "modality" => {
                let v = v.trim();
                modality = Some(
                    Modality::from_tag(v)
                        .ok_or_else(|| Error::Format(format!("unknown modality {v:?}")))?,
                );
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| Error::Format("sidecar has no dims".into()))?;
    Ok(Sidecar {
        dims,
        spacing,
        modality,
    })
}

pub fn sidecar_text(dims: [usize; 3], spacing: [f64; 3], modality: Option<Modality>) -> String {
    let mut s = format!(
        "dims={},{},{}\nspacing={},{},{}\n",
        dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2]
    );
    if let Some(m) = modality {
        s.push_str(&format!("modality={}\n", m.tag()));
    }
    s
}

/// `(x.raw, x.meta)` for a path naming either file or their common stem.
pub fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("meta"))
}

pub fn read(path: &Path) -> Result<(ScalarVolume, Option<Modality>)> {
    let (raw_path, meta_path) = paths(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_sidecar(&text)?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = voxels(meta.dims);
    if bytes.len() != 8 * n {
        return Err(Error::Corruption(format!(
            "{}: {} bytes for dims {:?} (expected {})",
            raw_path.display(),
            bytes.len(),
            meta.dims,
            8 * n
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite voxel",
            raw_path.display()
        )));
    }
    Ok((
        ScalarVolume::new(meta.dims, meta.spacing, data)?,
        meta.modality,
    ))
}

pub fn write(path: &Path, volume: &ScalarVolume, modality: Option<Modality>) -> Result<()> {
    let (raw_path, meta_path) = paths(path);
    let mut bytes = Vec::with_capacity(8 * volume.data.len());
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    std::fs::write(
        &meta_path,
        sidecar_text(volume.dims, volume.spacing, modality),
    )
    .map_err(|e| Error::io(&meta_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_parses() {
        let s = parse_sidecar("dims=4,5,6\nspacing=1,1,2.5\nmodality=flair\n").unwrap();
        assert_eq!(s.dims, [4, 5, 6]);
        assert_eq!(s.spacing, [1.0, 1.0, 2.5]);
        assert_eq!(s.modality, Some(Modality::Flair));
        assert!(matches!(
            parse_sidecar("spacing=1,1,1"),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_sidecar("dims=1,2"), Err(Error::Format(_))));
    }
}
