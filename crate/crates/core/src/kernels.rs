//! Tape-free numeric kernels: padding, valid convolution and its two adjoints,
//! instance normalization. The autodiff layer composes these.
//!
//! Convolution follows the cross-correlation convention (kernels are not
//! flipped). Work is split per batch sample through [`crate::exec`], and
//! batch reductions (weight gradients) are summed in sample order, so every
//! kernel is bit-stable across thread counts.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Spatial padding applied on all four sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    /// Mirror without repeating the edge pixel (`[a b c] -> b [a b c] b`).
    Reflect(usize),
}

impl Padding {
    pub const NONE: Padding = Padding::Zero(0);

    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

/// Maps padded coordinate `i` (in `0..len + 2p`) to a source index.
#[inline]
fn source_index(i: usize, len: usize, pad: Padding) -> Option<usize> {
    let p = pad.amount();
    let i = i as isize - p as isize;
    let len = len as isize;
    match pad {
        Padding::Zero(_) => (0..len).contains(&i).then_some(i as usize),
        Padding::Reflect(_) => {
            let r = if i < 0 {
                -i
            } else if i >= len {
                2 * (len - 1) - i
            } else {
                i
            };
            Some(r as usize)
        }
    }
}

fn check_pad(shape: &[usize], pad: Padding) -> Result<[usize; 4]> {
    let [n, c, h, w] = dims4(shape)?;
    if let Padding::Reflect(p) = pad {
        if p >= h || p >= w {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("reflect padding {p} needs spatial extents > {p}"),
            });
        }
    }
    Ok([n, c, h, w])
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected rank-4 (N, C, H, W)".into(),
        }),
    }
}

pub fn pad(x: &Tensor, pad: Padding) -> Result<Tensor> {
    let [n, c, h, w] = check_pad(x.shape(), pad)?;
    let p = pad.amount();
    if p == 0 {
        return Ok(x.clone());
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let rows: Vec<Option<usize>> = (0..hp).map(|i| source_index(i, h, pad)).collect();
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source_index(j, w, pad)).collect();
    let src = x.data();
    let mut out = vec![0.0; n * c * hp * wp];
    exec::for_each_chunk_mut(&mut out, hp * wp, |plane, dst| {
        let src = &src[plane * h * w..(plane + 1) * h * w];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = *ri else { continue };
            for (j, rj) in cols.iter().enumerate() {
                if let Some(rj) = *rj {
                    dst[i * wp + j] = src[ri * w + rj];
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, hp, wp], out))
}

/// Adjoint of [`pad`]: folds a padded tensor back onto the unpadded grid,
/// accumulating mirrored contributions (reflect) or cropping (zero).
pub fn unpad(g: &Tensor, pad: Padding) -> Result<Tensor> {
    let [n, c, hp, wp] = dims4(g.shape())?;
    let p = pad.amount();
    if p == 0 {
        return Ok(g.clone());
    }
    if hp <= 2 * p || wp <= 2 * p {
        return Err(Error::InvalidShape {
            shape: g.shape().to_vec(),
            reason: format!("cannot remove padding {p}"),
        });
    }
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    check_pad(&[n, c, h, w], pad)?;
    let rows: Vec<Option<usize>> = (0..hp).map(|i| source_index(i, h, pad)).collect();
    let cols: Vec<Option<usize>> = (0..wp).map(|j| source_index(j, w, pad)).collect();
    let src = g.data();
    let mut out = vec![0.0; n * c * h * w];
    exec::for_each_chunk_mut(&mut out, h * w, |plane, dst| {
        let src = &src[plane * hp * wp..(plane + 1) * hp * wp];
        for (i, ri) in rows.iter().enumerate() {
            let Some(ri) = *ri else { continue };
            for (j, rj) in cols.iter().enumerate() {
                if let Some(rj) = *rj {
                    dst[ri * w + rj] += src[i * wp + j];
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Geometry of one valid (unpadded) strided convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        let [n, cin, h, w] = dims4(input)?;
        let [cout, kcin, kh, kw] = dims4(kernel)?;
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels vs kernel)",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.p()
    }

    /// Unfolds output rows `rows` of one sample into `cols[k * T + t]`,
    /// `T = rows.len() * ow`.
    fn im2col(&self, x: &[f64], rows: Range<usize>, cols: &mut [f64]) {
        let t_len = rows.len() * self.ow;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * t_len;
                    let dst = &mut cols[row..row + t_len];
                    for (r, oy) in rows.clone().enumerate() {
                        let src = &plane[(oy * self.stride + ky) * self.w + kx..];
                        let d = &mut dst[r * self.ow..(r + 1) * self.ow];
                        if self.stride == 1 {
                            d.copy_from_slice(&src[..self.ow]);
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = src[ox * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto one sample (adjoint of [`Self::im2col`]).
    fn col2im(&self, cols: &[f64], rows: Range<usize>, x: &mut [f64]) {
        let t_len = rows.len() * self.ow;
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((ci * self.kh + ky) * self.kw + kx) * t_len;
                    let src = &cols[row..row + t_len];
                    for (r, oy) in rows.clone().enumerate() {
                        let base = (oy * self.stride + ky) * self.w + kx;
                        let s = &src[r * self.ow..(r + 1) * self.ow];
                        if self.stride == 1 {
                            for (d, v) in plane[base..base + self.ow].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in s.iter().enumerate() {
                                plane[base + ox * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output-row ranges whose unfolded columns stay cache-sized.
    fn row_tiles(&self) -> impl Iterator<Item = Range<usize>> {
        let per = (TILE_ELEMS / (self.k() * self.ow).max(1)).clamp(1, self.oh);
        let oh = self.oh;
        (0..oh).step_by(per).map(move |r| r..(r + per).min(oh))
    }
}

/// Target size (in values) of one unfolded column tile.
const TILE_ELEMS: usize = 1 << 14;

/// Strided view of a read-only matrix: element `(i, j)` is
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

/// `out[i * ldo + j] += sum_l a(i, l) * b[l * ldb + j]` for `i < m`,
/// `j < n`, `l < kd`.
///
/// Register-blocked in `MR x NR` tiles; every output still accumulates its
/// terms in increasing `l`, so the result does not depend on the blocking
/// (nor on which instruction set runs it: products and sums are never
/// fused).
fn gemm_acc(a: View, b: &[f64], ldb: usize, out: &mut [f64], ldo: usize, (m, kd, n): (usize, usize, usize)) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { gemm_acc_avx2(a, b, ldb, out, ldo, (m, kd, n)) };
        return;
    }
    gemm_acc_body(a, b, ldb, out, ldo, (m, kd, n));
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2(a: View, b: &[f64], ldb: usize, out: &mut [f64], ldo: usize, dims: (usize, usize, usize)) {
    gemm_acc_body(a, b, ldb, out, ldo, dims);
}

#[inline(always)]
fn gemm_acc_body(a: View, b: &[f64], ldb: usize, out: &mut [f64], ldo: usize, (m, kd, n): (usize, usize, usize)) {
    const MR: usize = 4;
    const NR: usize = 8;
    let at = |i: usize, l: usize| a.data[i * a.rs + l * a.cs];
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * ldo + j..(i + r) * ldo + j + NR]);
            }
            for l in 0..kd {
                let bv: [f64; NR] = b[l * ldb + j..l * ldb + j + NR].try_into().expect("NR values");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = at(i + r, l);
                    for (o, bc) in row.iter_mut().zip(bv) {
                        *o += av * bc;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * ldo + j..(i + r) * ldo + j + NR].copy_from_slice(row);
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                axpy_rows(at, r, b, ldb, &mut out[r * ldo + j..r * ldo + n], kd, j);
            }
        }
        i += MR;
    }
    for r in i..m {
        axpy_rows(at, r, b, ldb, &mut out[r * ldo..r * ldo + n], kd, 0);
    }
}

/// `row[j] += sum_l a(r, l) * b[l * ldb + j0 + j]`, one `l` at a time.
#[inline(always)]
fn axpy_rows(at: impl Fn(usize, usize) -> f64, r: usize, b: &[f64], ldb: usize, row: &mut [f64], kd: usize, j0: usize) {
    let len = row.len();
    for l in 0..kd {
        let av = at(r, l);
        for (o, bv) in row.iter_mut().zip(&b[l * ldb + j0..l * ldb + j0 + len]) {
            *o += av * bv;
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Output extent of a valid strided convolution, or `None` if the kernel
/// does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && stride > 0).then(|| (input - kernel) / stride + 1)
}

/// Valid cross-correlation: `x[N,Cin,H,W] * k[Cout,Cin,kh,kw] -> [N,Cout,H',W']`.
pub fn conv_valid(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride)?;
    let (k_len, p_len) = (g.k(), g.p());
    let (xd, wd) = (x.data(), kernel.data());
    let w = View { data: wd, rs: k_len, cs: 1 };
    let mut out = vec![0.0; g.n * g.out_len()];
    exec::for_each_chunk_mut(&mut out, g.out_len(), |s, o| {
        let sample = &xd[s * g.in_len()..(s + 1) * g.in_len()];
        let mut cols = Vec::new();
        for rows in g.row_tiles() {
            let (p0, t_len) = (rows.start * g.ow, rows.len() * g.ow);
            cols.resize(k_len * t_len, 0.0);
            g.im2col(sample, rows, &mut cols);
            gemm_acc(w, &cols, t_len, &mut o[p0..], p_len, (g.cout, k_len, t_len));
        }
    });
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Adjoint of [`conv_valid`] with respect to its input. `input_hw` is the
/// spatial extent of the original input; rows/columns a strided conv skipped
/// receive zero.
pub fn conv_valid_adjoint(dy: &Tensor, kernel: &Tensor, stride: usize, input_hw: (usize, usize)) -> Result<Tensor> {
    let [n, cout, oh, ow] = dims4(dy.shape())?;
    let [kcout, cin, _, _] = dims4(kernel.shape())?;
    if kcout != cout {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose (input channels vs kernel)",
            lhs: dy.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    let g = ConvGeom::new(&[n, cin, input_hw.0, input_hw.1], kernel.shape(), stride)?;
    if (g.oh, g.ow) != (oh, ow) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose (output geometry)",
            lhs: dy.shape().to_vec(),
            rhs: vec![n, cin, input_hw.0, input_hw.1],
        });
    }
    let (k_len, p_len) = (g.k(), g.p());
    let (gd, wd) = (dy.data(), kernel.data());
    let wt = View { data: wd, rs: 1, cs: k_len };
    let mut out = vec![0.0; n * g.in_len()];
    exec::for_each_chunk_mut(&mut out, g.in_len(), |s, dx| {
        let grad = &gd[s * g.out_len()..(s + 1) * g.out_len()];
        let mut cols = Vec::new();
        for rows in g.row_tiles() {
            let (p0, t_len) = (rows.start * g.ow, rows.len() * g.ow);
            cols.clear();
            cols.resize(k_len * t_len, 0.0);
            gemm_acc(wt, &grad[p0..], p_len, &mut cols, t_len, (k_len, cout, t_len));
            g.col2im(&cols, rows, dx);
        }
    });
    Ok(Tensor::from_parts(vec![n, cin, input_hw.0, input_hw.1], out))
}

/// Gradient of `<dy, conv_valid(x, k)>` with respect to `k`.
pub fn conv_valid_kernel_grad(x: &Tensor, dy: &Tensor, stride: usize, kernel_shape: &[usize]) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), kernel_shape, stride)?;
    if dy.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::ShapeMismatch {
            op: "conv2d kernel gradient",
            lhs: dy.shape().to_vec(),
            rhs: vec![g.n, g.cout, g.oh, g.ow],
        });
    }
    let (k_len, p_len) = (g.k(), g.p());
    let w_len = g.cout * k_len;
    let (xd, gd) = (x.data(), dy.data());
    let mut partial = vec![0.0; g.n * w_len];
    exec::for_each_chunk_mut(&mut partial, w_len, |s, dw| {
        let sample = &xd[s * g.in_len()..(s + 1) * g.in_len()];
        let grad = &gd[s * g.out_len()..(s + 1) * g.out_len()];
        let (mut cols, mut cols_t) = (Vec::new(), Vec::new());
        for rows in g.row_tiles() {
            let (p0, t_len) = (rows.start * g.ow, rows.len() * g.ow);
            cols.resize(k_len * t_len, 0.0);
            cols_t.resize(k_len * t_len, 0.0);
            g.im2col(sample, rows, &mut cols);
            transpose(&cols, k_len, t_len, &mut cols_t);
            let dy_tile = View { data: &grad[p0..], rs: p_len, cs: 1 };
            gemm_acc(dy_tile, &cols_t, k_len, dw, k_len, (g.cout, t_len, k_len));
        }
    });
    let mut dw = vec![0.0; w_len];
    for chunk in partial.chunks(w_len) {
        for (a, b) in dw.iter_mut().zip(chunk) {
            *a += b;
        }
    }
    Ok(Tensor::from_parts(kernel_shape.to_vec(), dw))
}

/// Sobel responses of single-channel planes `[M, 1, H+2, W+2]` (already
/// padded by one pixel) as `[M, 2, H, W]`: channel 0 horizontal, channel 1
/// vertical.
///
/// Equivalent to a valid cross-correlation with the stacked Sobel kernels,
/// but evaluated as sums of pixel differences, so a constant plane yields
/// exactly zero and scaling the input scales the output exactly.
pub fn sobel_valid(padded: &Tensor) -> Result<Tensor> {
    let [m, c, hp, wp] = dims4(padded.shape())?;
    if c != 1 || hp < 3 || wp < 3 {
        return Err(Error::InvalidShape {
            shape: padded.shape().to_vec(),
            reason: "Sobel expects padded single-channel planes of at least 3x3".into(),
        });
    }
    let (h, w) = (hp - 2, wp - 2);
    let src = padded.data();
    let mut out = vec![0.0; m * 2 * h * w];
    exec::for_each_chunk_mut(&mut out, 2 * h * w, |s, dst| {
        let x = &src[s * hp * wp..(s + 1) * hp * wp];
        let at = |i: usize, j: usize| x[i * wp + j];
        let (horiz, vert) = dst.split_at_mut(h * w);
        for i in 0..h {
            for j in 0..w {
                // padded (i + 1, j + 1) is the centre pixel
                let d_top = at(i, j + 2) - at(i, j);
                let d_mid = at(i + 1, j + 2) - at(i + 1, j);
                let d_bot = at(i + 2, j + 2) - at(i + 2, j);
                horiz[i * w + j] = d_top + 2.0 * d_mid + d_bot;
                let d_left = at(i + 2, j) - at(i, j);
                let d_centre = at(i + 2, j + 1) - at(i, j + 1);
                let d_right = at(i + 2, j + 2) - at(i, j + 2);
                vert[i * w + j] = d_left + 2.0 * d_centre + d_right;
            }
        }
    });
    Ok(Tensor::from_parts(vec![m, 2, h, w], out))
}

/// Per-(sample, channel) statistics saved by [`instance_norm`] for the
/// backward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

fn check_affine(x: &[usize], scale: &Tensor, shift: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = dims4(x)?;
    for t in [scale, shift] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "instance_norm (per-channel affine)",
                lhs: x.to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok([n, c, h, w])
}

/// `(x - mean) / sqrt(var + eps) * scale + shift` with biased mean/variance
/// taken over each (sample, channel) plane.
pub fn instance_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<(Tensor, InstanceNormCache)> {
    let [n, c, h, w] = check_affine(x.shape(), scale, shift)?;
    let hw = h * w;
    let xd = x.data();
    let mut normalized = vec![0.0; n * c * hw];
    let inv_std: Vec<f64> = normalized
        .chunks_mut(hw)
        .enumerate()
        .map(|(plane, xn)| {
            let src = &xd[plane * hw..(plane + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in xn.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
            inv
        })
        .collect();
    let (sc, sh) = (scale.data(), shift.data());
    let out = normalized
        .chunks(hw)
        .enumerate()
        .flat_map(|(plane, xn)| {
            let ch = plane % c;
            xn.iter().map(move |v| v * sc[ch] + sh[ch])
        })
        .collect();
    let shape = vec![n, c, h, w];
    Ok((
        Tensor::from_parts(shape.clone(), out),
        InstanceNormCache {
            normalized: Tensor::from_parts(shape, normalized),
            inv_std,
        },
    ))
}

/// Returns `(dx, dscale, dshift)`.
pub fn instance_norm_backward(dy: &Tensor, scale: &Tensor, cache: &InstanceNormCache) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = dims4(dy.shape())?;
    if cache.normalized.shape() != dy.shape() {
        return Err(Error::ShapeMismatch {
            op: "instance_norm backward",
            lhs: dy.shape().to_vec(),
            rhs: cache.normalized.shape().to_vec(),
        });
    }
    let hw = h * w;
    let m = hw as f64;
    let (gd, xn, sc) = (dy.data(), cache.normalized.data(), scale.data());
    let mut dx = vec![0.0; n * c * hw];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for plane in 0..n * c {
        let ch = plane % c;
        let g = &gd[plane * hw..(plane + 1) * hw];
        let x = &xn[plane * hw..(plane + 1) * hw];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
        dshift[ch] += sum_g;
        dscale[ch] += sum_gx;
        let k = sc[ch] * cache.inv_std[plane];
        for ((d, gv), xv) in dx[plane * hw..(plane + 1) * hw].iter_mut().zip(g).zip(x) {
            *d = k * (gv - sum_g / m - xv * sum_gx / m);
        }
    }
    Ok((
        Tensor::from_parts(vec![n, c, h, w], dx),
        Tensor::from_parts(vec![c], dscale),
        Tensor::from_parts(vec![c], dshift),
    ))
}
