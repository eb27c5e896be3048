//! Brute-force oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use std::f64::consts::PI;

use dabseg::volume::{Mask, ScalarVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type C = (f64, f64);

pub fn random_volume(dims: [usize; 3], seed: u64) -> ScalarVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    ScalarVolume::new(
        dims,
        [1.0; 3],
        (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
    )
    .unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Direct O(N^2) 3D DFT on an n^3 grid; `sign` = -1 forward, +1 inverse (unscaled).
pub fn direct_dft(x: &[C], n: usize, sign: f64) -> Vec<C> {
    let mut out = vec![(0.0, 0.0); n * n * n];
    for k0 in 0..n {
        for k1 in 0..n {
            for k2 in 0..n {
                let mut acc = (0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            let phase = sign * 2.0 * PI * ((k0 * a + k1 * b + k2 * c) % n) as f64
                                / n as f64;
                            let (s, co) = phase.sin_cos();
                            let v = x[(a * n + b) * n + c];
                            acc.0 += v.0 * co - v.1 * s;
                            acc.1 += v.0 * s + v.1 * co;
                        }
                    }
                }
                out[(k0 * n + k1) * n + k2] = acc;
            }
        }
    }
    out
}

/// Reference simulation for translation-only timelines on an n^3 grid.
pub fn oracle_simulation(
    x: &[f64],
    n: usize,
    shifts: &[(f64, [isize; 3])],
    axis: usize,
) -> Vec<f64> {
    let spectra: Vec<Vec<C>> = shifts
        .iter()
        .map(|(_, t)| {
            let mut moved = vec![(0.0, 0.0); n * n * n];
            for z in 0..n as isize {
                for y in 0..n as isize {
                    for w in 0..n as isize {
                        let src = [z - t[0], y - t[1], w - t[2]];
                        if src.iter().all(|&s| (0..n as isize).contains(&s)) {
                            let i = ((src[0] * n as isize + src[1]) * n as isize + src[2]) as usize;
                            moved[((z * n as isize + y) * n as isize + w) as usize] = (x[i], 0.0);
                        }
                    }
                }
            }
            direct_dft(&moved, n, -1.0)
        })
        .collect();
    // linear sweep -n/2 .. n/2-1 split into contiguous runs
    let sweep: Vec<usize> = (0..n as isize)
        .map(|s| (s - n as isize / 2).rem_euclid(n as isize) as usize)
        .collect();
    let mut owner = vec![0; n];
    let mut cum = 0.0;
    let mut start = 0;
    for (seg, (frac, _)) in shifts.iter().enumerate() {
        cum += frac;
        let end = if seg + 1 == shifts.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        for &f in &sweep[start..end] {
            owner[f] = seg;
        }
        start = end;
    }
    let mut composite = vec![(0.0, 0.0); n * n * n];
    for z in 0..n {
        for y in 0..n {
            for w in 0..n {
                let i = (z * n + y) * n + w;
                composite[i] = spectra[owner[[z, y, w][axis]]][i];
            }
        }
    }
    let scale = 1.0 / (n * n * n) as f64;
    direct_dft(&composite, n, 1.0)
        .iter()
        .map(|(re, im)| (re * re + im * im).sqrt() * scale)
        .collect()
}

pub fn brute_dice(a: &Mask, b: &Mask) -> f64 {
    let inter = (0..a.data.len())
        .filter(|&i| a.data[i] && b.data[i])
        .count();
    let total = a.data.iter().filter(|&&x| x).count() + b.data.iter().filter(|&&x| x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub fn brute_surface(m: &Mask) -> Vec<[usize; 3]> {
    let [d, h, w] = m.dims;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m.data[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if inside(z, y, x)
                    && [
                        (1, 0, 0),
                        (-1, 0, 0),
                        (0, 1, 0),
                        (0, -1, 0),
                        (0, 0, 1),
                        (0, 0, -1),
                    ]
                    .iter()
                    .any(|(a, b, c)| !inside(z + a, y + b, x + c))
                {
                    out.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    out
}

pub fn brute_hd95(a: &Mask, b: &Mask, spacing: [f64; 3]) -> f64 {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return (0..3)
            .map(|i| (a.dims[i] as f64 * spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|i| ((p[i] as f64 - q[i] as f64) * spacing[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut all: Vec<f64> = Vec::new();
    for (from, to) in [(&sa, &sb), (&sb, &sa)] {
        for p in from {
            all.push(to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
    }
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let pos = 0.95 * (all.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= all.len() {
        all[i]
    } else {
        all[i] * (1.0 - (pos - i as f64)) + all[i + 1] * (pos - i as f64)
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Mask {
    let n = dims.iter().product::<usize>();
    let kind = rng.gen_range(0..6);
    let data = match kind {
        0 => vec![false; n],
        1 => {
            let mut v = vec![false; n];
            v[rng.gen_range(0..n)] = true;
            v
        }
        2 => {
            // axis-aligned box
            let lo: [usize; 3] = std::array::from_fn(|i| rng.gen_range(0..dims[i]));
            let hi: [usize; 3] = std::array::from_fn(|i| rng.gen_range(lo[i]..dims[i]));
            (0..n)
                .map(|k| {
                    let p = [
                        k / (dims[1] * dims[2]),
                        (k / dims[2]) % dims[1],
                        k % dims[2],
                    ];
                    (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
                })
                .collect()
        }
        _ => {
            let density = rng.gen_range(0.05..0.9);
            (0..n).map(|_| rng.gen_bool(density)).collect()
        }
    };
    Mask::new(dims, data).unwrap()
}
