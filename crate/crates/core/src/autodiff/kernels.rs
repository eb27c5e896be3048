//! Raw array kernels behind the graph operators.
//!
//! Every reduction runs in a fixed order so that forward values and
//! gradients are bitwise reproducible across runs.

use crate::real::Real;

#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut c = a.chunks_exact(8);
    for x in &mut c {
        for j in 0..8 {
            acc[j] += x[j];
        }
    }
    let mut tail = T::zero();
    for &x in c.remainder() {
        tail += x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(crow, a[i * k + kk], &b[kk * n..(kk + 1) * n]);
        }
    }
    c
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a<T: Real>(
    dc: &[T],
    b: &[T],
    da: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            da[i * k + kk] += dot(drow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`
pub(crate) fn matmul_grad_b<T: Real>(
    a: &[T],
    dc: &[T],
    db: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(&mut db[kk * n..(kk + 1) * n], a[i * k + kk], drow);
        }
    }
}

/// Geometry of a cubic-kernel 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Output extent along one axis, if the window tiles the padded input exactly.
    pub fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if stride == 0 || padded < k || !(padded - k).is_multiple_of(stride) {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    /// Output indices `o` in `[lo, hi)` whose tap `kk` lands inside an axis of length `n`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, no: usize) -> (usize, usize) {
        let (p, s) = (self.pad, self.stride);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        let top = n + p;
        if top <= kk {
            return (0, 0);
        }
        let hi = ((top - kk - 1) / s + 1).min(no);
        (lo, hi.max(lo))
    }
}

/// `C[i, j] += sum_k A[i, k] * B[k, j]` on row-major operands with leading
/// dimensions `lda`, `ldb`, `ldc`. Register-blocked 4 x 8; each output is
/// accumulated over `k` in order, then added to `C`.
pub(crate) fn gemm_acc<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut j0 = 0;
    while j0 + NR <= n {
        let mut i0 = 0;
        while i0 + MR <= m {
            let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i0 + r) * lda..][..k]);
            let mut acc = [[T::zero(); NR]; MR];
            for kk in 0..k {
                let brow: &[T; NR] = b[kk * ldb + j0..][..NR].try_into().expect("NR columns");
                for r in 0..MR {
                    let av = rows[r][kk];
                    for q in 0..NR {
                        acc[r][q] += av * brow[q];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                let crow = &mut c[(i0 + r) * ldc + j0..][..NR];
                for q in 0..NR {
                    crow[q] += acc_row[q];
                }
            }
            i0 += MR;
        }
        for i in i0..m {
            let row = &a[i * lda..][..k];
            let mut acc = [T::zero(); NR];
            for (kk, &av) in row.iter().enumerate() {
                let brow = &b[kk * ldb + j0..][..NR];
                for q in 0..NR {
                    acc[q] += av * brow[q];
                }
            }
            let crow = &mut c[i * ldc + j0..][..NR];
            for q in 0..NR {
                crow[q] += acc[q];
            }
        }
        j0 += NR;
    }
    for i in 0..m {
        let row = &a[i * lda..][..k];
        for j in j0..n {
            let mut acc = T::zero();
            for (kk, &av) in row.iter().enumerate() {
                acc += av * b[kk * ldb + j];
            }
            c[i * ldc + j] += acc;
        }
    }
}

/// Rows `(ci, kd, kh, kw)` of the unfolded input for output depth `od`;
/// `cols` is `[cin * k^3, oh * ow]`, padding reads as zero.
fn im2col<T: Real>(
    xs: &[T],
    g: &ConvGeom,
    od: usize,
    kw_ranges: &[(usize, usize)],
    cols: &mut [T],
) {
    let [d, h, wd] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let isp = g.in_spatial();
    let plane = oh_n * ow_n;
    for ci in 0..g.cin {
        let xplane = &xs[ci * isp..][..isp];
        for kd in 0..k {
            let id = (od * s + kd).checked_sub(p).filter(|&i| i < d);
            for kh in 0..k {
                for (kw, &(w0, w1)) in kw_ranges.iter().enumerate() {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &mut cols[r * plane..][..plane];
                    let Some(id) = id else {
                        row.fill(T::zero());
                        continue;
                    };
                    for oh in 0..oh_n {
                        let dst = &mut row[oh * ow_n..][..ow_n];
                        let Some(ih) = (oh * s + kh).checked_sub(p).filter(|&i| i < h) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let xrow = &xplane[(id * h + ih) * wd..][..wd];
                        dst[..w0].fill(T::zero());
                        dst[w1.max(w0)..].fill(T::zero());
                        if s == 1 {
                            dst[w0..w1].copy_from_slice(&xrow[w0 + kw - p..w1 + kw - p]);
                        } else {
                            for ow in w0..w1 {
                                dst[ow] = xrow[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto the input gradient.
fn col2im<T: Real>(
    cols: &[T],
    g: &ConvGeom,
    od: usize,
    kw_ranges: &[(usize, usize)],
    dxs: &mut [T],
) {
    let [d, h, wd] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let isp = g.in_spatial();
    let plane = oh_n * ow_n;
    for ci in 0..g.cin {
        let dxplane = &mut dxs[ci * isp..][..isp];
        for kd in 0..k {
            let Some(id) = (od * s + kd).checked_sub(p).filter(|&i| i < d) else {
                continue;
            };
            for kh in 0..k {
                for (kw, &(w0, w1)) in kw_ranges.iter().enumerate() {
                    if w0 >= w1 {
                        continue;
                    }
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let row = &cols[r * plane..][..plane];
                    for oh in 0..oh_n {
                        let Some(ih) = (oh * s + kh).checked_sub(p).filter(|&i| i < h) else {
                            continue;
                        };
                        let src = &row[oh * ow_n..][..ow_n];
                        let dxrow = &mut dxplane[(id * h + ih) * wd..][..wd];
                        if s == 1 {
                            for (o, &v) in
                                dxrow[w0 + kw - p..w1 + kw - p].iter_mut().zip(&src[w0..w1])
                            {
                                *o += v;
                            }
                        } else {
                            for ow in w0..w1 {
                                dxrow[ow * s + kw - p] += src[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn kw_ranges(&self) -> Vec<(usize, usize)> {
        (0..self.kernel)
            .map(|kw| self.valid(kw, self.input[2], self.output[2]))
            .collect()
    }

    fn unfolded_rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }
}

/// Convolution as one GEMM per output depth slice: `W[cout, cin k^3]`
/// times the unfolded input `[cin k^3, oh ow]`.
pub(crate) fn conv3d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (isp, osp) = (g.in_spatial(), g.out_spatial());
    let (rows, plane) = (g.unfolded_rows(), g.out_plane());
    let kw_ranges = g.kw_ranges();
    let mut out = vec![T::zero(); g.batch * g.cout * osp];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(osp).enumerate() {
            chunk.fill(b[i % g.cout]);
        }
    }
    let mut cols = vec![T::zero(); rows * plane];
    for bi in 0..g.batch {
        let xs = &x[bi * g.cin * isp..][..g.cin * isp];
        for od in 0..g.output[0] {
            im2col(xs, g, od, &kw_ranges, &mut cols);
            let c = &mut out[bi * g.cout * osp + od * plane..];
            gemm_acc(g.cout, plane, rows, w, rows, &cols, plane, c, osp);
        }
    }
    out
}

/// Accumulates the input gradient of a convolution into `dx`.
pub(crate) fn conv3d_backward_input<T: Real>(dout: &[T], w: &[T], dx: &mut [T], g: &ConvGeom) {
    let (isp, osp) = (g.in_spatial(), g.out_spatial());
    let (rows, plane) = (g.unfolded_rows(), g.out_plane());
    let kw_ranges = g.kw_ranges();
    let mut wt = vec![T::zero(); rows * g.cout];
    for co in 0..g.cout {
        for r in 0..rows {
            wt[r * g.cout + co] = w[co * rows + r];
        }
    }
    let mut dcols = vec![T::zero(); rows * plane];
    for bi in 0..g.batch {
        let dxs = &mut dx[bi * g.cin * isp..][..g.cin * isp];
        for od in 0..g.output[0] {
            dcols.fill(T::zero());
            let b = &dout[bi * g.cout * osp + od * plane..];
            gemm_acc(rows, plane, g.cout, &wt, g.cout, b, osp, &mut dcols, plane);
            col2im(&dcols, g, od, &kw_ranges, dxs);
        }
    }
}

/// Accumulates weight and bias gradients of a convolution.
pub(crate) fn conv3d_backward_params<T: Real>(
    dout: &[T],
    x: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let (isp, osp) = (g.in_spatial(), g.out_spatial());
    if let Some(db) = db {
        for co in 0..g.cout {
            let mut acc = T::zero();
            for bi in 0..g.batch {
                acc += sum(&dout[(bi * g.cout + co) * osp..][..osp]);
            }
            db[co] += acc;
        }
    }
    let Some(dw) = dw else { return };
    let (rows, plane) = (g.unfolded_rows(), g.out_plane());
    let kw_ranges = g.kw_ranges();
    let mut cols = vec![T::zero(); rows * plane];
    let mut acc = vec![T::zero(); g.cout * rows];
    for bi in 0..g.batch {
        let xs = &x[bi * g.cin * isp..][..g.cin * isp];
        for od in 0..g.output[0] {
            im2col(xs, g, od, &kw_ranges, &mut cols);
            for co in 0..g.cout {
                let drow = &dout[(bi * g.cout + co) * osp + od * plane..][..plane];
                let arow = &mut acc[co * rows..][..rows];
                for (r, a) in arow.iter_mut().enumerate() {
                    *a += dot(drow, &cols[r * plane..][..plane]);
                }
            }
        }
    }
    for (dst, &a) in dw.iter_mut().zip(&acc) {
        *dst += a;
    }
}

/// Nearest-neighbour x2 upsampling of `[planes, d, h, w]`.
pub(crate) fn upsample2x<T: Real>(x: &[T], planes: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * d2 * h2 * w2];
    for pl in 0..planes {
        let xp = &x[pl * d * h * w..][..d * h * w];
        let op = &mut out[pl * d2 * h2 * w2..][..d2 * h2 * w2];
        for z in 0..d2 {
            for y in 0..h2 {
                let xrow = &xp[((z / 2) * h + y / 2) * w..][..w];
                let orow = &mut op[(z * h2 + y) * w2..][..w2];
                for (xx, o) in orow.iter_mut().enumerate() {
                    *o = xrow[xx / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(
    dout: &[T],
    dx: &mut [T],
    planes: usize,
    dims: [usize; 3],
) {
    let [d, h, w] = dims;
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    for pl in 0..planes {
        let dp = &dout[pl * d2 * h2 * w2..][..d2 * h2 * w2];
        let xp = &mut dx[pl * d * h * w..][..d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = &dp[((2 * z + dz) * h2 + 2 * y + dy) * w2..];
                            acc += row[2 * x] + row[2 * x + 1];
                        }
                    }
                    xp[(z * h + y) * w + x] += acc;
                }
            }
        }
    }
}

/// Trilinear x2 upsampling (align-corners = false) of `[planes, d, h, w]`.
pub(crate) fn trilinear_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

pub(crate) fn trilinear2x<T: Real>(
    x: &[T],
    planes: usize,
    dims: [usize; 3],
    adjoint: Option<&[T]>,
) -> Vec<T> {
    let [d, h, w] = dims;
    let (tz, ty, tx) = (trilinear_taps(d), trilinear_taps(h), trilinear_taps(w));
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    match adjoint {
        None => {
            let mut out = vec![T::zero(); planes * d2 * h2 * w2];
            for pl in 0..planes {
                let xp = &x[pl * d * h * w..][..d * h * w];
                let op = &mut out[pl * d2 * h2 * w2..][..d2 * h2 * w2];
                for (z, az) in tz.iter().enumerate() {
                    for (y, ay) in ty.iter().enumerate() {
                        for (xx, ax) in tx.iter().enumerate() {
                            let mut acc = T::zero();
                            for &(iz, wz) in az {
                                for &(iy, wy) in ay {
                                    for &(ix, wx) in ax {
                                        acc += T::of(wz * wy * wx) * xp[(iz * h + iy) * w + ix];
                                    }
                                }
                            }
                            op[(z * h2 + y) * w2 + xx] = acc;
                        }
                    }
                }
            }
            out
        }
        Some(dout) => {
            let mut dx = vec![T::zero(); planes * d * h * w];
            for pl in 0..planes {
                let dp = &dout[pl * d2 * h2 * w2..][..d2 * h2 * w2];
                let xp = &mut dx[pl * d * h * w..][..d * h * w];
                for (z, az) in tz.iter().enumerate() {
                    for (y, ay) in ty.iter().enumerate() {
                        for (xx, ax) in tx.iter().enumerate() {
                            let g = dp[(z * h2 + y) * w2 + xx];
                            for &(iz, wz) in az {
                                for &(iy, wy) in ay {
                                    for &(ix, wx) in ax {
                                        xp[(iz * h + iy) * w + ix] += T::of(wz * wy * wx) * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
    }
}
