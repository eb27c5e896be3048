//! Rigid resampling about the volume center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, ScalarVolume};

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_TRANSLATION_VOX: f64 = 5.0;

/// Rotation (degrees, about array axes 0, 1, 2) and translation (voxels).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidMotionState {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidMotionState {
    pub const IDENTITY: RigidMotionState = RigidMotionState {
        rotation: [0.0; 3],
        translation: [0.0; 3],
    };

    pub fn translation(t: [f64; 3]) -> Self {
        RigidMotionState {
            rotation: [0.0; 3],
            translation: t,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == [0.0; 3] && self.translation == [0.0; 3]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .rotation
            .iter()
            .chain(&self.translation)
            .all(|v| v.is_finite());
        if !finite
            || self.rotation.iter().any(|r| r.abs() > MAX_ROTATION_DEG)
            || self
                .translation
                .iter()
                .any(|t| t.abs() > MAX_TRANSLATION_VOX)
        {
            return Err(Error::Parameter(format!(
                "rigid state {self:?} outside |rotation| <= {MAX_ROTATION_DEG} deg, |translation| <= {MAX_TRANSLATION_VOX} vox"
            )));
        }
        Ok(())
    }

    /// Forward rotation matrix `R = R0 * R1 * R2` (rotation about axis 2 applied first).
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let mut r = IDENTITY3;
        for axis in 0..3 {
            r = matmul3(&r, &axis_rotation(axis, self.rotation[axis].to_radians()));
        }
        r
    }
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn axis_rotation(axis: usize, theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let (i, j) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = IDENTITY3;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Coordinates within this distance of a lattice point are snapped onto it.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

fn sample(values: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    let base = p.map(|v| v.floor());
    let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a]);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0isize; 3];
        for a in 0..3 {
            let bit = (corner >> (2 - a)) & 1;
            idx[a] = base[a] as isize + bit as isize;
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if idx
            .iter()
            .zip(&dims)
            .any(|(&i, &n)| i < 0 || i >= n as isize)
        {
            continue;
        }
        acc +=
            w * values[(idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize];
    }
    acc
}

/// Trilinear resampling of `values` under `state` without the sanity bounds.
///
/// Output voxel `p` reads the input at `R^T (p - c - t) + c`; samples outside
/// the grid contribute zero.
pub fn resample_rigid(values: &[f64], dims: Dims, state: &RigidMotionState) -> Vec<f64> {
    if state.is_identity() {
        return values.to_vec();
    }
    let r = state.rotation_matrix();
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; values.len()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [
                    z as f64 - c[0] - state.translation[0],
                    y as f64 - c[1] - state.translation[1],
                    x as f64 - c[2] - state.translation[2],
                ];
                // inverse rotation = transpose
                let src: [f64; 3] = std::array::from_fn(|i| {
                    snap((0..3).map(|k| r[k][i] * q[k]).sum::<f64>() + c[i])
                });
                out[(z * dims[1] + y) * dims[2] + x] = sample(values, dims, src);
            }
        }
    }
    out
}

/// Rigidly moves a volume; the state must respect the simulator bounds.
pub fn apply_rigid(volume: &ScalarVolume, state: &RigidMotionState) -> Result<ScalarVolume> {
    state.validate()?;
    if volume.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("apply_rigid: non-finite input".into()));
    }
    Ok(ScalarVolume {
        dims: volume.dims,
        spacing: volume.spacing,
        data: resample_rigid(&volume.data, volume.dims, state),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: Dims, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        ScalarVolume::new(
            dims,
            [1.0; 3],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let v = random([5, 6, 7], 1);
        assert_eq!(apply_rigid(&v, &RigidMotionState::IDENTITY).unwrap(), v);
    }

    #[test]
    fn integer_translation_is_an_index_shift() {
        let v = random([6, 5, 8], 2);
        let out = apply_rigid(&v, &RigidMotionState::translation([0.0, 0.0, 2.0])).unwrap();
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..8 {
                    let expect = if x >= 2 {
                        v.data[v.index(z, y, x - 2)]
                    } else {
                        0.0
                    };
                    assert_eq!(out.data[v.index(z, y, x)], expect);
                }
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_the_lattice() {
        let v = random([6, 6, 6], 3);
        // +90 deg about axis 0 maps (y, x) -> (-x, y) around the centre
        let s = RigidMotionState {
            rotation: [90.0, 0.0, 0.0],
            translation: [0.0; 3],
        };
        assert!(apply_rigid(&v, &s).is_err());
        let out = resample_rigid(&v.data, v.dims, &s);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    // source of output (y, x) is (x, 5 - y)
                    assert_eq!(out[v.index(z, y, x)], v.data[v.index(z, x, 5 - y)]);
                }
            }
        }
    }

    #[test]
    fn bounds_are_enforced() {
        let v = random([4, 4, 4], 4);
        assert!(matches!(
            apply_rigid(&v, &RigidMotionState::translation([0.0, 5.5, 0.0])),
            Err(Error::Parameter(_))
        ));
        let s = RigidMotionState {
            rotation: [0.0, -16.0, 0.0],
            translation: [0.0; 3],
        };
        assert!(matches!(apply_rigid(&v, &s), Err(Error::Parameter(_))));
    }
}
