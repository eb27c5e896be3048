//! Separable 3D discrete Fourier transform.
//!
//! Forward is unnormalized; the inverse carries the `1/(D*H*W)` factor.

pub use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::volume::{voxels, Dims};

/// Complex `[D,H,W]` spectrum (or complex image).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub dims: Dims,
    pub data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn transform_axis(
    data: &mut [Complex64],
    dims: Dims,
    axis: usize,
    planner: &mut FftPlanner<f64>,
    inverse: bool,
) {
    let n = dims[axis];
    if n <= 1 {
        return;
    }
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[base + i * stride];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (i, v) in line.iter().enumerate() {
                data[base + i * stride] = *v;
            }
        }
    }
}

pub fn fft3_complex(mut data: Vec<Complex64>, dims: Dims) -> ComplexSpectrum {
    assert_eq!(data.len(), voxels(dims), "spectrum length must match dims");
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, dims, axis, &mut planner, false);
    }
    ComplexSpectrum { dims, data }
}

/// Forward transform of a real volume.
pub fn fft3(values: &[f64], dims: Dims) -> ComplexSpectrum {
    fft3_complex(
        values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        dims,
    )
}

/// Inverse transform, including the `1/N` normalization.
pub fn ifft3(spectrum: &ComplexSpectrum) -> Vec<Complex64> {
    let mut data = spectrum.data.clone();
    let mut planner = FftPlanner::new();
    for axis in 0..3 {
        transform_axis(&mut data, spectrum.dims, axis, &mut planner, true);
    }
    let inv = 1.0 / voxels(spectrum.dims) as f64;
    data.iter_mut().for_each(|v| *v *= inv);
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let back = ifft3(&fft3(&x, [8, 8, 8]));
        let err = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b.re).abs().max(b.im.abs()))
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn delta_has_flat_magnitude() {
        let mut x = vec![0.0; 6 * 5 * 4];
        x[(3 * 5 + 2) * 4 + 2] = 2.0;
        let s = fft3(&x, [6, 5, 4]);
        assert!(s.data.iter().all(|c| (c.norm() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [7, 4, 9];
        let x: Vec<f64> = (0..voxels(dims))
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let e: f64 = x.iter().map(|v| v * v).sum();
        let s = fft3(&x, dims);
        assert!(((s.energy() / voxels(dims) as f64) - e).abs() / e < 1e-9);
    }

    #[test]
    fn degenerate_axes() {
        let x = vec![1.0, 2.0, 3.0];
        let back = ifft3(&fft3(&x, [1, 1, 3]));
        assert!((back[2].re - 3.0).abs() < 1e-12);
    }
}
