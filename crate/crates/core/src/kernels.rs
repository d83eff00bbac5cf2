//! Value-level numeric kernels shared by the tape and by tape-free callers.

use crate::error::{Error, Result};
use crate::tensor::{axpy_slice, dot, Scalar, Tensor};

/// Stride and (possibly asymmetric) zero padding of a 2-D convolution.
/// The same padding applies to both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvParams {
            stride,
            pad_lo: padding,
            pad_hi: padding,
        }
    }

    /// Padding that keeps the spatial size for stride 1. Even kernels put
    /// the extra row/column at the high end.
    pub fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        ConvParams {
            stride: 1,
            pad_lo: total / 2,
            pad_hi: total - total / 2,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        let padded = input + self.pad_lo + self.pad_hi;
        if kernel > padded {
            return Err(Error::invalid(format!(
                "kernel {kernel} larger than padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Geometry of one convolution, resolved from input and weight shapes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    p: ConvParams,
}

impl ConvGeom {
    pub(crate) fn new(xshape: &[usize], wshape: &[usize], p: ConvParams) -> Result<Self> {
        if xshape.len() != 4 || wshape.len() != 4 || xshape[3] != wshape[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xshape.to_vec(),
                rhs: wshape.to_vec(),
            });
        }
        let (n, h, w, ci) = (xshape[0], xshape[1], xshape[2], xshape[3]);
        let (kh, kw, co) = (wshape[0], wshape[1], wshape[3]);
        let ho = p.output_len(h, kh)?;
        let wo = p.output_len(w, kw)?;
        Ok(ConvGeom {
            n,
            h,
            w,
            ci,
            kh,
            kw,
            co,
            ho,
            wo,
            p,
        })
    }

    pub(crate) fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.co]
    }

    pub(crate) fn in_shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.ci]
    }

    pub(crate) fn w_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.ci, self.co]
    }

    #[inline]
    fn input_index(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.p.stride + k) as isize - self.p.pad_lo as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let mut out = Tensor::zeros(g.out_shape());
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    let (ci, co) = (g.ci, g.co);
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let obase = ((n * g.ho + oy) * g.wo + ox) * co;
                let orow = &mut od[obase..obase + co];
                for ky in 0..g.kh {
                    let Some(iy) = g.input_index(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_index(ox, kx, g.w) else { continue };
                        let xs = &xd[((n * g.h + iy) * g.w + ix) * ci..][..ci];
                        let wk = &wd[(ky * g.kw + kx) * ci * co..][..ci * co];
                        if co == 1 {
                            orow[0] = orow[0] + dot(xs, wk);
                        } else {
                            for (c, &a) in xs.iter().enumerate() {
                                if a != T::zero() {
                                    axpy_slice(orow, a, &wk[c * co..(c + 1) * co]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `<conv(x, w), gy>` with respect to `x` (transposed convolution).
pub(crate) fn conv2d_input_grad<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let mut gx = Tensor::zeros(g.in_shape());
    let (gyd, wd) = (gy.data(), w.data());
    let gxd = gx.data_mut();
    let (ci, co) = (g.ci, g.co);
    // Per tap, w transposed to Cout×Cin so the inner update is a contiguous axpy.
    let mut wt = vec![T::zero(); wd.len()];
    for tap in 0..g.kh * g.kw {
        for c in 0..ci {
            for o in 0..co {
                wt[tap * ci * co + o * ci + c] = wd[tap * ci * co + c * co + o];
            }
        }
    }
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let grow = &gyd[((n * g.ho + oy) * g.wo + ox) * co..][..co];
                if grow.iter().all(|v| *v == T::zero()) {
                    continue;
                }
                for ky in 0..g.kh {
                    let Some(iy) = g.input_index(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_index(ox, kx, g.w) else { continue };
                        let xs = &mut gxd[((n * g.h + iy) * g.w + ix) * ci..][..ci];
                        let wk = &wt[(ky * g.kw + kx) * ci * co..][..ci * co];
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv != T::zero() {
                                axpy_slice(xs, gv, &wk[o * ci..(o + 1) * ci]);
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `<conv(x, w), gy>` with respect to `w`.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let mut gw = Tensor::zeros(g.w_shape());
    let (xd, gyd) = (x.data(), gy.data());
    let gwd = gw.data_mut();
    let (ci, co) = (g.ci, g.co);
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let grow = &gyd[((n * g.ho + oy) * g.wo + ox) * co..][..co];
                for ky in 0..g.kh {
                    let Some(iy) = g.input_index(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.input_index(ox, kx, g.w) else { continue };
                        let xs = &xd[((n * g.h + iy) * g.w + ix) * ci..][..ci];
                        let wk = &mut gwd[(ky * g.kw + kx) * ci * co..][..ci * co];
                        if co == 1 {
                            axpy_slice(wk, grow[0], xs);
                        } else {
                            for (c, &a) in xs.iter().enumerate() {
                                if a != T::zero() {
                                    axpy_slice(&mut wk[c * co..(c + 1) * co], a, grow);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Plain 2-D convolution on `H×W×Cin` or `N×H×W×Cin` input with an
/// `k×k×Cin×Cout` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let p = ConvParams::new(stride, padding);
    if x.rank() == 3 {
        let s = x.shape();
        let x4 = x.clone().reshape([1, s[0], s[1], s[2]])?;
        let g = ConvGeom::new(x4.shape(), w.shape(), p)?;
        let out = conv2d_forward(&x4, w, &g);
        let [_, ho, wo, co] = g.out_shape();
        return out.reshape([ho, wo, co]);
    }
    let g = ConvGeom::new(x.shape(), w.shape(), p)?;
    Ok(conv2d_forward(x, w, &g))
}

fn transposed<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    let d = a.data();
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new([c, r], out).expect("transpose shape")
}

/// `op(a) · op(b)` where `op` optionally transposes a rank-2 tensor.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let a_owned;
    let a = if ta {
        a_owned = transposed(a);
        &a_owned
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transposed(b);
        &b_owned
    } else {
        b
    };
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av != T::zero() {
                axpy_slice(orow, av, &bd[p * n..(p + 1) * n]);
            }
        }
    }
    Tensor::new([m, n], out)
}

/// Split a shape into (outer, axis, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!("concat axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::invalid(format!(
            "slice [{start}, {}) of axis {axis} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, mid, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

/// Inverse of `slice_axis`: embed `x` at `start` in a zero tensor whose
/// `axis` extent is `total`.
pub(crate) fn pad_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, total: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    if start + len > total {
        return Err(Error::invalid("pad_axis target too small"));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape, out)
}

/// View of a tensor as `[rows, middle, channels]`: first axis, product of
/// middle axes, last axis. Rank-1 tensors are a single row.
pub(crate) fn md_view(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        _ => {
            let d = shape[shape.len() - 1];
            let m = shape[0];
            (m, shape[1..shape.len() - 1].iter().product(), d)
        }
    }
}

/// Whether `c` is a valid channel vector for `x`: shape `[D]` (shared) or
/// `[M, D]` (one row per leading index). Returns `Some(per_row)`.
pub(crate) fn channel_vector_kind(xshape: &[usize], cshape: &[usize]) -> Option<bool> {
    let (m, _, d) = md_view(xshape);
    match cshape {
        [cd] if *cd == d => Some(false),
        [cm, cd] if *cm == m && *cd == d && xshape.len() >= 2 => Some(true),
        _ => None,
    }
}

pub(crate) fn modulate<T: Scalar>(x: &Tensor<T>, c: &Tensor<T>, per_row: bool) -> Tensor<T> {
    let (m, s, d) = md_view(x.shape());
    let mut out = x.clone();
    let od = out.data_mut();
    let cd = c.data();
    for r in 0..m {
        let crow = if per_row { &cd[r * d..(r + 1) * d] } else { cd };
        for j in 0..s {
            let base = (r * s + j) * d;
            for (o, &cv) in od[base..base + d].iter_mut().zip(crow) {
                *o = *o * cv;
            }
        }
    }
    out
}

pub(crate) fn reduce_md<T: Scalar>(x: &Tensor<T>, per_row: bool) -> Tensor<T> {
    let (m, s, d) = md_view(x.shape());
    let rows = if per_row { m } else { 1 };
    let mut out = vec![T::zero(); rows * d];
    let xd = x.data();
    for r in 0..m {
        let orow = if per_row { r } else { 0 };
        for j in 0..s {
            let base = (r * s + j) * d;
            axpy_slice(&mut out[orow * d..(orow + 1) * d], T::one(), &xd[base..base + d]);
        }
    }
    if per_row {
        Tensor::new([m, d], out).expect("reduce shape")
    } else {
        Tensor::vector(out)
    }
}

pub(crate) fn expand_md<T: Scalar>(c: &Tensor<T>, shape: &[usize], per_row: bool) -> Tensor<T> {
    let (m, s, d) = md_view(shape);
    let mut out = Vec::with_capacity(m * s * d);
    let cd = c.data();
    for r in 0..m {
        let crow = if per_row { &cd[r * d..(r + 1) * d] } else { cd };
        for _ in 0..s {
            out.extend_from_slice(crow);
        }
    }
    Tensor::new(shape.to_vec(), out).expect("expand shape")
}

pub(crate) fn gather_rows<T: Scalar>(src: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let rows = src.shape()[0];
    let row_len = src.len() / rows.max(1);
    let mut out = Vec::with_capacity(idx.len() * row_len);
    for &i in idx {
        if i >= rows {
            return Err(Error::invalid(format!("gather index {i} >= {rows}")));
        }
        out.extend_from_slice(&src.data()[i * row_len..(i + 1) * row_len]);
    }
    let mut shape = src.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

pub(crate) fn scatter_add_rows<T: Scalar>(src: &Tensor<T>, idx: &[usize], rows: usize) -> Tensor<T> {
    let row_len = src.len() / idx.len().max(1);
    let mut out = vec![T::zero(); rows * row_len];
    for (k, &i) in idx.iter().enumerate() {
        axpy_slice(
            &mut out[i * row_len..(i + 1) * row_len],
            T::one(),
            &src.data()[k * row_len..(k + 1) * row_len],
        );
    }
    let mut shape = src.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, out).expect("scatter shape")
}

/// PELU activation: identity for `t >= 0`, `alpha (exp(t/alpha) - 1)` below.
#[inline]
pub fn pelu_scalar<T: Scalar>(t: T, alpha: T) -> T {
    if t >= T::zero() {
        t
    } else {
        alpha * ((t / alpha).exp() - T::one())
    }
}

#[inline]
pub(crate) fn pelu_deriv_scalar<T: Scalar>(t: T, alpha: T) -> T {
    if t >= T::zero() {
        T::one()
    } else {
        (t / alpha).exp()
    }
}

#[inline]
pub(crate) fn pelu_second_scalar<T: Scalar>(t: T, alpha: T) -> T {
    if t >= T::zero() {
        T::zero()
    } else {
        (t / alpha).exp() / alpha
    }
}

pub fn pelu<T: Scalar>(t: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    if !(alpha > T::zero()) {
        return Err(Error::invalid(format!("PELU alpha must be positive, got {alpha}")));
    }
    Ok(t.map(|v| pelu_scalar(v, alpha)))
}

/// Per-channel statistics of a `[rows, channels]` view.
pub(crate) struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> ChannelStats<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let r = x.len() / d.max(1);
    let mut mean = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        axpy_slice(&mut mean, T::one(), row);
    }
    let inv = T::one() / T::of(r as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
            let c = xv - m;
            *v = *v + c * c;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv);
    ChannelStats { mean, var }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sum_convolution() {
        let x = Tensor::<f64>::from_f64([2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::ones([2, 2, 1, 1]);
        let y = conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_f64([2, 3, 1], &[1.0, -2.0, 3.0, 0.5, 5.0, 6.0]).unwrap();
        let w = Tensor::<f64>::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn output_size_formula() {
        let p = ConvParams::new(2, 1);
        assert_eq!(p.output_len(7, 3).unwrap(), 4);
        assert!(ConvParams::new(1, 0).output_len(2, 3).is_err());
        let same = ConvParams::same(4);
        assert_eq!((same.pad_lo, same.pad_hi), (1, 2));
        assert_eq!(same.output_len(10, 4).unwrap(), 10);
    }

    #[test]
    fn kernel_larger_than_input_is_error() {
        let x = Tensor::<f32>::zeros([2, 2, 1]);
        let w = Tensor::<f32>::zeros([3, 3, 1, 1]);
        assert!(conv2d(&x, &w, 1, 0).is_err());
    }

    #[test]
    fn matmul_transposes() {
        let a = Tensor::<f64>::from_f64([2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.5, -1.0, 2.0]).unwrap();
        let atb = matmul(&a, &b, true, false).unwrap();
        let at = transposed(&a);
        assert_eq!(atb, matmul(&at, &b, false, false).unwrap());
        let bbt = matmul(&b, &b, false, true).unwrap();
        assert_eq!(bbt, matmul(&b, &transposed(&b), false, false).unwrap());
    }

    #[test]
    fn slice_pad_concat_agree() {
        let a = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 1], &[9.0, 8.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert_eq!(slice_axis(&c, 1, 2, 1).unwrap(), b);
        let padded = pad_axis(&b, 1, 2, 3).unwrap();
        assert_eq!(padded.data(), &[0.0, 0.0, 9.0, 0.0, 0.0, 8.0]);
    }

    #[test]
    fn pelu_values() {
        let a = 0.05;
        assert_eq!(pelu_scalar(2.0, a), 2.0);
        assert_eq!(pelu_scalar(0.0, a), 0.0);
        let v: f64 = pelu_scalar(-0.05, a);
        assert!((v - 0.05 * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert!((v + 0.0316060).abs() < 1e-7);
        assert!(pelu(&Tensor::<f64>::zeros([1]), 0.0).is_err());
    }
}
