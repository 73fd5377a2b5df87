//! Square-kernel 2-D convolution as im2col + GEMM, forward and backward,
//! for `f32` and `f64` CPU tensors.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};

use crate::error::Result;

trait Gemm: Copy + Default + std::ops::AddAssign + candle_core::WithDType {
    /// `c = alpha·a·b + beta·c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Gemm for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Gemm for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (&[b, ci, h, w], &[co, ci2, k, k2]) = (x, wt) else {
            candle_core::bail!("conv2d expects 4-d input and kernel, got {x:?} and {wt:?}")
        };
        if ci != ci2 || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv2d shape mismatch: input {x:?}, kernel {wt:?}, pad {pad}")
        }
        Ok(Self {
            b,
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.w + p > kj { ((self.w + p - kj - 1) / s + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(col_offset, in_offset, len)` for each run of in-bounds taps;
    /// within a run the input advances by `stride` per output column.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n = self.pixels();
        for c in 0..self.ci {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let (lo, hi) = self.col_range(kj);
                    if lo == hi {
                        continue;
                    }
                    for oi in 0..self.ho {
                        let ii = oi * s + ki;
                        if ii < p || ii - p >= self.h {
                            continue;
                        }
                        let src = (c * self.h + ii - p) * self.w + lo * s + kj - p;
                        f(row * n + oi * self.wo + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    /// Columns for the whole batch: `cols[row, bi*n + px]`.
    fn im2col<T: Gemm>(&self, x: &[T], cols: &mut [T]) {
        cols.fill(T::default());
        let (n, bn, in_sz, s) = (self.pixels(), self.b * self.pixels(), self.ci * self.h * self.w, self.stride);
        for bi in 0..self.b {
            let xb = &x[bi * in_sz..(bi + 1) * in_sz];
            self.runs(|dst, src, len| {
                let (row, px) = (dst / n, dst % n);
                let out = &mut cols[row * bn + bi * n + px..][..len];
                if s == 1 {
                    out.copy_from_slice(&xb[src..src + len]);
                } else {
                    for (o, v) in out.iter_mut().zip(xb[src..].iter().step_by(s)) {
                        *o = *v;
                    }
                }
            });
        }
    }

    fn col2im<T: Gemm>(&self, cols: &[T], gx: &mut [T]) {
        let (n, bn, in_sz, s) = (self.pixels(), self.b * self.pixels(), self.ci * self.h * self.w, self.stride);
        for bi in 0..self.b {
            let gxb = &mut gx[bi * in_sz..(bi + 1) * in_sz];
            self.runs(|dst, src, len| {
                let (row, px) = (dst / n, dst % n);
                let inp = &cols[row * bn + bi * n + px..][..len];
                for (o, v) in gxb[src..].iter_mut().step_by(s).zip(inp) {
                    *o += *v;
                }
            });
        }
    }
}

fn forward<T: Gemm>(g: &Geometry, x: &[T], wt: &[T]) -> Vec<T> {
    let (kd, n) = (g.kdim(), g.pixels());
    let mut y = vec![T::default(); g.b * g.co * n];
    if g.is_pointwise() {
        for bi in 0..g.b {
            let xb = &x[bi * kd * n..(bi + 1) * kd * n];
            let yb = &mut y[bi * g.co * n..(bi + 1) * g.co * n];
            unsafe {
                T::gemm(g.co, kd, n, wt.as_ptr(), kd as isize, 1, xb.as_ptr(), n as isize, 1, T::default(), yb.as_mut_ptr(), n as isize, 1);
            }
        }
        return y;
    }
    let bn = g.b * n;
    let mut cols = vec![T::default(); kd * bn];
    g.im2col(x, &mut cols);
    let mut yc = vec![T::default(); g.co * bn];
    unsafe {
        T::gemm(g.co, kd, bn, wt.as_ptr(), kd as isize, 1, cols.as_ptr(), bn as isize, 1, T::default(), yc.as_mut_ptr(), bn as isize, 1);
    }
    for c in 0..g.co {
        for bi in 0..g.b {
            let src = &yc[c * bn + bi * n..c * bn + (bi + 1) * n];
            y[(bi * g.co + c) * n..(bi * g.co + c + 1) * n].copy_from_slice(src);
        }
    }
    y
}

fn backward<T: Gemm>(g: &Geometry, x: &[T], wt: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let (kd, n) = (g.kdim(), g.pixels());
    let bn = g.b * n;
    let mut gx = vec![T::default(); x.len()];
    let mut gw = vec![T::default(); g.co * kd];
    // gY as [Co, B*n]
    let mut gyc = vec![T::default(); g.co * bn];
    for c in 0..g.co {
        for bi in 0..g.b {
            gyc[c * bn + bi * n..c * bn + (bi + 1) * n].copy_from_slice(&gy[(bi * g.co + c) * n..(bi * g.co + c + 1) * n]);
        }
    }
    let mut gcols = vec![T::default(); kd * bn];
    if g.is_pointwise() {
        // x viewed as [Ci, B*n] through strides: row c, column (bi, px)
        let mut xc = vec![T::default(); kd * bn];
        for c in 0..kd {
            for bi in 0..g.b {
                xc[c * bn + bi * n..c * bn + (bi + 1) * n].copy_from_slice(&x[(bi * kd + c) * n..(bi * kd + c + 1) * n]);
            }
        }
        unsafe {
            T::gemm(g.co, bn, kd, gyc.as_ptr(), bn as isize, 1, xc.as_ptr(), 1, bn as isize, T::default(), gw.as_mut_ptr(), kd as isize, 1);
            T::gemm(kd, g.co, bn, wt.as_ptr(), 1, kd as isize, gyc.as_ptr(), bn as isize, 1, T::default(), gcols.as_mut_ptr(), bn as isize, 1);
        }
        for c in 0..kd {
            for bi in 0..g.b {
                gx[(bi * kd + c) * n..(bi * kd + c + 1) * n].copy_from_slice(&gcols[c * bn + bi * n..c * bn + (bi + 1) * n]);
            }
        }
        return (gx, gw);
    }
    let mut cols = vec![T::default(); kd * bn];
    g.im2col(x, &mut cols);
    unsafe {
        // gW = gY · colsᵀ
        T::gemm(g.co, bn, kd, gyc.as_ptr(), bn as isize, 1, cols.as_ptr(), 1, bn as isize, T::default(), gw.as_mut_ptr(), kd as isize, 1);
        // gcols = Wᵀ · gY
        T::gemm(kd, g.co, bn, wt.as_ptr(), 1, kd as isize, gyc.as_ptr(), bn as isize, 1, T::default(), gcols.as_mut_ptr(), bn as isize, 1);
    }
    g.col2im(&gcols, &mut gx);
    (gx, gw)
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d needs contiguous operands"),
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.b, g.co, g.ho, g.wo));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                Ok((CpuStorage::F32(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                Ok((CpuStorage::F64(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?)), shape))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        }
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.pad)?;
        let grad = grad.contiguous()?;
        let (gx, gw) = match x.dtype() {
            DType::F32 => {
                let (a, b) = backward(
                    &g,
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                );
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, w.shape(), w.device())?)
            }
            DType::F64 => {
                let (a, b) = backward(
                    &g,
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                );
                (Tensor::from_vec(a, x.shape(), x.device())?, Tensor::from_vec(b, w.shape(), w.device())?)
            }
            other => candle_core::bail!("conv2d backward does not support {other:?}"),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// `x [B, Ci, H, W]` convolved with `w [Co, Ci, k, k]`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    Ok(x.apply_op2(&w, Conv2dOp { stride, pad })?)
}
