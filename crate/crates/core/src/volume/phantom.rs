//! Synthetic multimodal brain phantoms with nested tumors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{voxels, Dims, LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};

/// Mean intensity of each tissue class in one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityContrast {
    pub brain: f64,
    pub edema: f64,
    pub necrotic: f64,
    pub enhancing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomProfile {
    /// Brain semi-axes as fractions of the grid extent.
    pub brain_semi_axes: [f64; 3],
    /// Whole-tumor, tumor-core and enhancing radii, in voxels.
    pub tumor_radii: [f64; 3],
    /// Per-axis stretch of the tumor shells; the product is normalized to 1.
    pub tumor_aspect: [f64; 3],
    /// Relative amplitude of the smooth radial deformation shared by all shells.
    pub deformation: f64,
    /// Random relative scaling of all tumor radii (uniform in `1 ± jitter`).
    pub radius_jitter: f64,
    /// Random tumor-center displacement as a fraction of the free room.
    pub center_jitter: f64,
    /// Smooth multiplicative brain texture amplitude.
    pub texture: f64,
    pub noise_sigma: f64,
    /// Indexed by `Modality`.
    pub contrasts: [ModalityContrast; 4],
}

impl PhantomProfile {
    /// Profile with tumor radii scaled to a grid whose smallest extent is `n`.
    pub fn for_size(n: usize) -> Self {
        let n = n as f64;
        PhantomProfile {
            brain_semi_axes: [0.42, 0.40, 0.38],
            tumor_radii: [0.21 * n, 0.13 * n, 0.075 * n],
            tumor_aspect: [1.15, 1.0, 0.87],
            deformation: 0.12,
            radius_jitter: 0.12,
            center_jitter: 0.8,
            texture: 0.08,
            noise_sigma: 0.04,
            contrasts: [
                // T1: tumor mildly hypointense
                ModalityContrast {
                    brain: 1.0,
                    edema: 0.8,
                    necrotic: 0.5,
                    enhancing: 0.85,
                },
                // T1ce: enhancing rim bright only here
                ModalityContrast {
                    brain: 1.0,
                    edema: 0.8,
                    necrotic: 0.45,
                    enhancing: 2.0,
                },
                // T2: fluid bright
                ModalityContrast {
                    brain: 1.0,
                    edema: 1.8,
                    necrotic: 2.1,
                    enhancing: 1.3,
                },
                // FLAIR: edema bright, necrosis suppressed
                ModalityContrast {
                    brain: 1.0,
                    edema: 2.0,
                    necrotic: 0.7,
                    enhancing: 1.4,
                },
            ],
        }
    }
}

/// Smooth bounded direction-dependent perturbation in `[-1, 1]`.
struct Deformation {
    coeffs: [f64; 5],
}

impl Deformation {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Deformation {
            coeffs: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn at(&self, u: [f64; 3]) -> f64 {
        let c = &self.coeffs;
        let raw = c[0] * u[0] * u[1]
            + c[1] * u[1] * u[2]
            + c[2] * u[2] * u[0]
            + c[3] * (u[0] * u[0] - u[1] * u[1])
            + c[4] * (3.0 * u[2] * u[2] - 1.0) / 2.0;
        (raw / 2.5).clamp(-1.0, 1.0)
    }
}

/// Synthesizes a 4-channel brain with a nested tumor and its label map.
///
/// The tumor is three concentric shells sharing one deformation field:
/// edema (code 2) outermost, necrotic core (1), enhancing tumor (4) innermost.
pub fn generate_phantom(
    seed: u64,
    dims: Dims,
    profile: &PhantomProfile,
) -> Result<(MultiModalVolume, LabelVolume)> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::Config(format!(
            "phantom dims {dims:?} must be at least 8 per axis"
        )));
    }
    let [r_wt, r_tc, r_et] = profile.tumor_radii;
    if !(r_wt > r_tc && r_tc > r_et && r_et > 0.0) {
        return Err(Error::Config(format!(
            "tumor radii {:?} must be strictly decreasing and positive",
            profile.tumor_radii
        )));
    }
    if profile.tumor_aspect.iter().any(|&a| !(a > 0.0))
        || !(0.0..0.5).contains(&profile.deformation)
    {
        return Err(Error::Config(
            "tumor aspect must be positive and deformation in [0, 0.5)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let brain_axes: [f64; 3] = std::array::from_fn(|i| profile.brain_semi_axes[i] * dims[i] as f64);
    let norm = profile.tumor_aspect.iter().product::<f64>().cbrt();
    let aspect = profile.tumor_aspect.map(|a| a / norm);
    let scale = 1.0 + profile.radius_jitter * rng.gen_range(-1.0..1.0);
    let radii = profile.tumor_radii.map(|r| r * scale);
    let reach: [f64; 3] =
        std::array::from_fn(|i| radii[0] * aspect[i] * (1.0 + profile.deformation));
    let room: Vec<f64> = (0..3).map(|i| brain_axes[i] - reach[i]).collect();
    if room.iter().any(|&r| r < 0.0) {
        return Err(Error::Config(format!(
            "whole-tumor radius {:.2} (extent {reach:?}) exceeds brain semi-axes {brain_axes:?}",
            radii[0]
        )));
    }
    // displacement stays inside the ellipsoid of free room
    let tumor_center: [f64; 3] = loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if u.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            break std::array::from_fn(|i| {
                (center[i] + u[i] * room[i] * profile.center_jitter * 0.57).round()
            });
        }
    };
    let deform = Deformation::sample(&mut rng);
    let phases: [[f64; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)));
    let freqs: [[f64; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.5..2.0)));

    let n = voxels(dims);
    let mut labels = vec![0u8; n];
    let mut brain = vec![false; n];
    let mut texture = vec![0.0; n];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let i = (z * dims[1] + y) * dims[2] + x;
                let rb: f64 = (0..3)
                    .map(|a| ((p[a] - center[a]) / brain_axes[a]).powi(2))
                    .sum();
                if rb > 1.0 {
                    continue;
                }
                brain[i] = true;
                let mut t = 0.0;
                for k in 0..3 {
                    let arg: f64 = (0..3)
                        .map(|a| {
                            freqs[k][a] * std::f64::consts::PI * p[a] / dims[a] as f64
                                + phases[k][a]
                        })
                        .sum();
                    t += arg.sin() / 3.0;
                }
                texture[i] = t;
                let q: [f64; 3] = std::array::from_fn(|a| (p[a] - tumor_center[a]) / aspect[a]);
                let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let factor = if rho > 0.0 {
                    1.0 + profile.deformation * deform.at(q.map(|v| v / rho))
                } else {
                    1.0
                };
                let rho = rho / factor;
                labels[i] = if rho <= radii[2] {
                    4
                } else if rho <= radii[1] {
                    1
                } else if rho <= radii[0] {
                    2
                } else {
                    0
                };
            }
        }
    }

    let noise =
        Normal::new(0.0, profile.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = vec![0.0; 4 * n];
    for (m, contrast) in profile.contrasts.iter().enumerate() {
        for i in 0..n {
            if !brain[i] {
                continue;
            }
            let base = match labels[i] {
                0 => contrast.brain * (1.0 + profile.texture * texture[i]),
                1 => contrast.necrotic,
                2 => contrast.edema,
                _ => contrast.enhancing,
            };
            let v = base
                + if profile.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
            // keep the brain support strictly nonzero
            data[m * n + i] = if v == 0.0 { f64::MIN_POSITIVE } else { v };
        }
    }
    let volume = MultiModalVolume::new(format!("phantom_{seed}"), dims, [1.0; 3], data)?;
    Ok((volume, LabelVolume::new(dims, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{labels_to_regions, Modality};

    #[test]
    fn regions_are_nested_and_deterministic() {
        let p = PhantomProfile::for_size(32);
        let (v1, l1) = generate_phantom(7, [32, 32, 32], &p).unwrap();
        let (v2, l2) = generate_phantom(7, [32, 32, 32], &p).unwrap();
        assert_eq!(l1, l2);
        assert!(v1
            .data
            .iter()
            .zip(&v2.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let r = labels_to_regions(&l1).unwrap();
        assert!(r.is_nested());
        assert!(!r.et.is_empty());
        let (v3, _) = generate_phantom(8, [32, 32, 32], &p).unwrap();
        assert_ne!(v1.data, v3.data);
    }

    #[test]
    fn shell_volumes_match_analytic_spheres() {
        let mut p = PhantomProfile::for_size(40);
        p.tumor_radii = [10.0, 6.0, 3.0];
        p.tumor_aspect = [1.0; 3];
        p.deformation = 0.0;
        p.radius_jitter = 0.0;
        let (_, labels) = generate_phantom(3, [40, 40, 40], &p).unwrap();
        let r = labels_to_regions(&labels).unwrap();
        for (mask, radius) in [(&r.wt, 10.0f64), (&r.tc, 6.0), (&r.et, 3.0)] {
            // exhaustive lattice count of a ball of this radius
            let k = radius.ceil() as i64;
            let mut lattice = 0usize;
            for a in -k..=k {
                for b in -k..=k {
                    for c in -k..=k {
                        if ((a * a + b * b + c * c) as f64).sqrt() <= radius {
                            lattice += 1;
                        }
                    }
                }
            }
            assert_eq!(mask.count(), lattice);
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
            assert!(
                (mask.count() as f64 - analytic).abs() <= 0.1 * analytic,
                "{} vs {analytic}",
                mask.count()
            );
        }
    }

    #[test]
    fn enhancing_is_bright_only_in_t1ce() {
        let mut p = PhantomProfile::for_size(32);
        p.noise_sigma = 0.0;
        let (v, l) = generate_phantom(1, [32, 32, 32], &p).unwrap();
        let i = l.data.iter().position(|&c| c == 4).unwrap();
        let n = 32 * 32 * 32;
        let t1ce = v.data[Modality::T1ce.index() * n + i];
        for m in [Modality::T1, Modality::T2, Modality::Flair] {
            assert!(v.data[m.index() * n + i] < t1ce);
        }
    }

    #[test]
    fn oversized_tumor_is_rejected() {
        let mut p = PhantomProfile::for_size(16);
        p.tumor_radii = [9.0, 4.0, 2.0];
        assert!(matches!(
            generate_phantom(0, [16, 16, 16], &p),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_phantom(0, [7, 16, 16], &PhantomProfile::for_size(16)),
            Err(Error::Config(_))
        ));
    }
}
