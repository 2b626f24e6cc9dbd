//! Raw forward/backward kernels on row-major slices.
//!
//! Convolutions lower each image to a column matrix and hand the product to
//! a blocked GEMM.

use std::borrow::Cow;

use super::Shape;
use crate::error::{Error, Result};
use crate::scalar::{matmul, matmul_a_bt, matmul_at_b, Scalar};

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
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
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if weight.c != input.c {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels, weight expects {}",
                input.c, weight.c
            )));
        }
        if weight.h != weight.w || weight.h == 0 {
            return Err(Error::dim(format!("conv2d: kernel must be square, got {weight}")));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be >= 1"));
        }
        let k = weight.h;
        let span_h = input.h + 2 * pad;
        let span_w = input.w + 2 * pad;
        if span_h < k || span_w < k {
            return Err(Error::dim(format!(
                "conv2d: kernel {k} larger than padded input {}x{}",
                span_h, span_w
            )));
        }
        if !(span_h - k).is_multiple_of(stride) || !(span_w - k).is_multiple_of(stride) {
            return Err(Error::config(format!(
                "conv2d: output extent of {}x{} input with k={k}, stride={stride}, pad={pad} is not integral",
                input.h, input.w
            )));
        }
        Ok(ConvGeom {
            cin: input.c,
            cout: weight.n,
            k,
            stride,
            pad,
            h: input.h,
            w: input.w,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for ic in 0..g.cin {
        let src = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ic * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for ic in 0..g.cin {
        let dst = &mut dx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ic * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn lower<'a, T: Scalar>(g: &ConvGeom, x: &'a [T], scratch: &'a mut Vec<T>) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        scratch.resize(g.col_rows() * g.out_plane(), T::zero());
        im2col(g, x, scratch);
        Cow::Borrowed(&scratch[..])
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_per = g.cin * g.h * g.w;
    let out_plane = g.out_plane();
    let out_per = g.cout * out_plane;
    let mut out = vec![T::zero(); n * out_per];
    let mut scratch = Vec::new();
    for b in 0..n {
        let col = lower(g, &x[b * in_per..(b + 1) * in_per], &mut scratch);
        let y = &mut out[b * out_per..(b + 1) * out_per];
        matmul(g.cout, g.col_rows(), out_plane, weight, &col, y, false);
        if let Some(bias) = bias {
            for (oc, row) in y.chunks_exact_mut(out_plane).enumerate() {
                let bv = bias[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution into `dx`, `dw` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let in_per = g.cin * g.h * g.w;
    let out_plane = g.out_plane();
    let out_per = g.cout * out_plane;
    if let Some(db) = db {
        for b in 0..n {
            for (oc, row) in dy[b * out_per..(b + 1) * out_per]
                .chunks_exact(out_plane)
                .enumerate()
            {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
    }
    let mut scratch = Vec::new();
    if let Some(dw) = dw {
        for b in 0..n {
            let col = lower(g, &x[b * in_per..(b + 1) * in_per], &mut scratch);
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            matmul_a_bt(g.cout, out_plane, g.col_rows(), dyb, &col, dw, true);
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); g.col_rows() * out_plane];
        for b in 0..n {
            let dyb = &dy[b * out_per..(b + 1) * out_per];
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                matmul_at_b(g.col_rows(), g.cout, out_plane, weight, dyb, dxb, true);
            } else {
                matmul_at_b(g.col_rows(), g.cout, out_plane, weight, dyb, &mut dcol, false);
                col2im_add(g, &dcol, dxb);
            }
        }
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2; weight is `[Cin, Cout, 2, 2]`.
pub fn deconv2x2_forward<T: Scalar>(
    input: Shape,
    cout: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (h, w) = (input.h, input.w);
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let in_per = input.c * plane;
    let out_per = cout * oh * ow;
    let mut out = vec![T::zero(); input.n * out_per];
    let mut z = vec![T::zero(); cout * 4 * plane];
    for b in 0..input.n {
        matmul_at_b(cout * 4, input.c, plane, weight, &x[b * in_per..(b + 1) * in_per], &mut z, false);
        let y = &mut out[b * out_per..(b + 1) * out_per];
        for oc in 0..cout {
            let bv = bias.map_or(T::zero(), |bs| bs[oc]);
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let zrow = &z[(oc * 4 + d) * plane..(oc * 4 + d + 1) * plane];
                for iy in 0..h {
                    let yrow = &mut y[(oc * oh + 2 * iy + dy) * ow..(oc * oh + 2 * iy + dy + 1) * ow];
                    for ix in 0..w {
                        yrow[2 * ix + dx] = zrow[iy * w + ix] + bv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2x2_backward<T: Scalar>(
    input: Shape,
    cout: usize,
    x: &[T],
    weight: &[T],
    dy_all: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (h, w) = (input.h, input.w);
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let in_per = input.c * plane;
    let out_per = cout * oh * ow;
    let mut dz = vec![T::zero(); cout * 4 * plane];
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for b in 0..input.n {
        let dyb = &dy_all[b * out_per..(b + 1) * out_per];
        for oc in 0..cout {
            let mut bsum = T::zero();
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let zrow = &mut dz[(oc * 4 + d) * plane..(oc * 4 + d + 1) * plane];
                for iy in 0..h {
                    let yrow = &dyb[(oc * oh + 2 * iy + ddy) * ow..(oc * oh + 2 * iy + ddy + 1) * ow];
                    for ix in 0..w {
                        let v = yrow[2 * ix + ddx];
                        zrow[iy * w + ix] = v;
                        bsum += v;
                    }
                }
            }
            if let Some(db) = db.as_deref_mut() {
                db[oc] += bsum;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            matmul(input.c, cout * 4, plane, weight, &dz, &mut dx[b * in_per..(b + 1) * in_per], true);
        }
        if let Some(dw) = dw.as_deref_mut() {
            matmul_a_bt(input.c, plane, cout * 4, &x[b * in_per..(b + 1) * in_per], &dz, dw, true);
        }
    }
}

/// 2x2 stride-2 max pooling. Returns outputs and the flat input index of each maximum.
pub fn maxpool2_forward<T: Scalar>(s: Shape, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * s.w + 2 * ox;
                // row-major scan; strict comparison keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_geometry_is_detected() {
        let g = ConvGeom::new(Shape::new(1, 4, 5, 5), Shape::new(2, 4, 1, 1), 1, 0).unwrap();
        assert!(g.is_pointwise());
        assert_eq!((g.ho, g.wo), (5, 5));
    }

    #[test]
    fn non_integral_extent_is_config_error() {
        let e = ConvGeom::new(Shape::new(1, 1, 5, 5), Shape::new(1, 1, 2, 2), 2, 0).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ConvGeom::new(Shape::new(1, 2, 5, 5), Shape::new(1, 1, 3, 3), 1, 1).unwrap_err();
        assert!(matches!(e, Error::Dimension(_)));
    }

    #[test]
    fn maxpool_ties_go_to_first_occurrence() {
        let x = [7.0f64, 7.0, 7.0, 7.0];
        let (y, arg) = maxpool2_forward(Shape::new(1, 1, 2, 2), &x);
        assert_eq!(y, vec![7.0]);
        assert_eq!(arg, vec![0]);
        let x = [1.0f64, 3.0, 3.0, 2.0];
        let (_, arg) = maxpool2_forward(Shape::new(1, 1, 2, 2), &x);
        assert_eq!(arg, vec![1]);
    }
}
