//! Raw array kernels behind the recorded ops. Convolution lowers to
//! im2col + sgemm per batch item; batch items run in parallel and every
//! cross-item reduction is summed in item order, so results do not depend
//! on thread scheduling.

use std::borrow::Cow;

use rayon::prelude::*;

use super::tensor::Shape;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on every side; preserves extents at stride 1.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, cout: usize, k: usize, stride: usize, padding: Padding) -> Option<Self> {
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        if stride == 0 || input.h + 2 * pad < k || input.w + 2 * pad < k {
            return None;
        }
        Some(Self {
            cin: input.c,
            cout,
            k,
            stride,
            pad,
            h: input.h,
            w: input.w,
            ho: (input.h + 2 * pad - k) / stride + 1,
            wo: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    /// Rows of the lowered patch matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` m×k and `b` k×n,
/// either operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index sgemm touches given the
    // strides computed for the stated row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn lowered<'a>(x_item: &'a [f32], g: &ConvGeom) -> Cow<'a, [f32]> {
    if g.is_pointwise() {
        Cow::Borrowed(x_item)
    } else {
        let mut cols = vec![0.0; g.patch() * g.out_plane()];
        im2col(x_item, g, &mut cols);
        Cow::Owned(cols)
    }
}

pub(crate) fn conv2d_forward(x: &[f32], batch: usize, g: &ConvGeom, w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let mut out = vec![0.0; batch * out_item];
    out.par_chunks_mut(out_item).enumerate().for_each(|(n, y)| {
        let cols = lowered(&x[n * in_item..(n + 1) * in_item], g);
        gemm(g.cout, g.patch(), g.out_plane(), w, false, &cols, false, y, false);
        if let Some(b) = b {
            for (co, row) in y.chunks_mut(g.out_plane()).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Weight, bias and (optional) input gradients of one batch item.
type ItemGrads = (Vec<f32>, Vec<f32>, Option<Vec<f32>>);

pub(crate) fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    dy: &[f32],
    need_dx: bool,
) -> ConvGrads {
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let wlen = g.cout * g.patch();
    let per_item: Vec<ItemGrads> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let cols = lowered(&x[n * in_item..(n + 1) * in_item], g);
            let dy_n = &dy[n * out_item..(n + 1) * out_item];
            let mut dw = vec![0.0; wlen];
            gemm(g.cout, g.out_plane(), g.patch(), dy_n, false, &cols, true, &mut dw, false);
            let db = dy_n
                .chunks(g.out_plane())
                .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
                .collect();
            let dx = need_dx.then(|| {
                let mut dcols = vec![0.0; g.patch() * g.out_plane()];
                gemm(g.patch(), g.cout, g.out_plane(), w, true, dy_n, false, &mut dcols, false);
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; in_item];
                    col2im(&dcols, g, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![0.0; wlen];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(batch * in_item));
    for (dw_n, db_n, dx_n) in per_item {
        dw.iter_mut().zip(&dw_n).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&db_n).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx.extend_from_slice(&dx_n);
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 stride-2 max pooling; returns output and the flat input index of each maximum.
pub(crate) fn maxpool2_forward(x: &[f32], s: Shape) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(x: &[f32], s: Shape) -> Vec<f32> {
    let (ho, wo) = (s.h * 2, s.w * 2);
    let mut out = Vec::with_capacity(s.n * s.c * ho * wo);
    for plane in x.chunks(s.plane()) {
        for oy in 0..ho {
            let row = &plane[(oy / 2) * s.w..][..s.w];
            for ox in 0..wo {
                out.push(row[ox / 2]);
            }
        }
    }
    out
}

/// Gradient of nearest 2× upsampling: sums each 2×2 block back to its source.
pub(crate) fn upsample2_backward(dy: &[f32], s: Shape) -> Vec<f32> {
    let wo = s.w * 2;
    let mut dx = vec![0.0; s.numel()];
    for (nc, plane) in dx.chunks_mut(s.plane()).enumerate() {
        let src = &dy[nc * s.plane() * 4..][..s.plane() * 4];
        for y in 0..s.h {
            for x in 0..s.w {
                let i = 2 * y * wo + 2 * x;
                plane[y * s.w + x] = src[i] + src[i + 1] + src[i + wo] + src[i + wo + 1];
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over (n, h, w), accumulated in f64.
pub(crate) fn channel_moments(x: &[f32], s: Shape) -> (Vec<f64>, Vec<f64>) {
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for c in 0..s.c {
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += x[(n * s.c + c) * s.plane()..][..s.plane()].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x[(n * s.c + c) * s.plane()..][..s.plane()]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}
