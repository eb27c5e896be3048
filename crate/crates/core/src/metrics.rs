//! Hard Dice and 95th-percentile Hausdorff distance on binary masks.

use crate::volume::{Dims, Mask};

/// `2|P ∩ G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice_metric(pred: &Mask, gt: &Mask) -> f64 {
    assert_eq!(pred.dims, gt.dims, "dice_metric: mask shapes differ");
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        inter += usize::from(a && b);
        np += usize::from(a);
        ng += usize::from(b);
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Mask voxels with at least one six-connected background neighbour;
/// positions outside the grid count as background.
pub fn surface_voxels(mask: &Mask) -> Vec<usize> {
    let [d, h, w] = mask.dims;
    let at = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                if border
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push((z * h + y) * w + x);
                }
            }
        }
    }
    out
}

/// Exact 1D squared distance transform of `f` sampled every `step` units
/// (lower envelope of parabolas). Infinite entries are not features.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let s =
                ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while j < k as usize && z[j + 1] < pos(q) {
            j += 1;
        }
        let p = v[j];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest feature voxel,
/// with anisotropic `spacing`. Separable and exact.
pub fn squared_distance_transform(features: &[usize], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let total: usize = dims.iter().product();
    let mut g = vec![f64::INFINITY; total];
    for &i in features {
        g[i] = 0.0;
    }
    let longest = dims.iter().copied().max().unwrap_or(0);
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zs) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = dims[axis];
        if n == 0 {
            return g;
        }
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for i in 0..n {
                    line[i] = g[base + i * stride];
                }
                edt_line(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zs);
                for i in 0..n {
                    g[base + i * stride] = out[i];
                }
            }
        }
    }
    g
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Physical length of the grid diagonal, the distance reported when exactly
/// one mask is empty.
pub fn diagonal(dims: Dims, spacing: [f64; 3]) -> f64 {
    dims.iter()
        .zip(&spacing)
        .map(|(&n, &s)| (n as f64 * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// 95th percentile of the pooled surface-to-surface distances in both
/// directions. Both masks empty gives 0, exactly one empty gives the grid
/// diagonal.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> f64 {
    assert_eq!(pred.dims, gt.dims, "hd95: mask shapes differ");
    let (sp, sg) = (surface_voxels(pred), surface_voxels(gt));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return diagonal(pred.dims, spacing),
        _ => {}
    }
    let to_gt = squared_distance_transform(&sg, gt.dims, spacing);
    let to_pred = squared_distance_transform(&sp, pred.dims, spacing);
    let mut d: Vec<f64> = sp
        .iter()
        .map(|&i| to_gt[i].sqrt())
        .chain(sg.iter().map(|&i| to_pred[i].sqrt()))
        .collect();
    percentile(&mut d, 95.0)
}
