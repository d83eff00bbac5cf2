//! Precise ROI pooling.
//!
//! The feature map is treated as a continuous surface by bilinear
//! interpolation, with sample `i` sitting at coordinate `i` and zero
//! outside the grid. A pooled bin is the exact integral of that surface
//! over the bin rectangle divided by the bin area. The interpolation kernel
//! is the hat function, whose antiderivative is piecewise quadratic, so the
//! integral (and its derivative with respect to the bin edges) has a closed
//! form.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Minimum box side accepted by pooling.
pub const MIN_BOX_SIDE: f64 = 1e-6;

/// Axis-aligned box: center and size, in pixels (or feature cells).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    /// From top-left corner and size (the usual ground-truth text layout).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn xywh(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Apply `p -> p * scale + offset` to both axes.
    pub fn affine(&self, scale: f64, offset_x: f64, offset_y: f64) -> Self {
        BoundingBox {
            cx: self.cx * scale + offset_x,
            cy: self.cy * scale + offset_y,
            w: self.w * scale,
            h: self.h * scale,
        }
    }
}

/// `(cx/w, cy/h, ln w, ln h)`.
pub fn box_encode<T: Scalar>(b: &BoundingBox) -> Result<Tensor<T>> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::invalid(format!("cannot encode box with size {}x{}", b.w, b.h)));
    }
    Tensor::from_f64([4], &[b.cx / b.w, b.cy / b.h, b.w.ln(), b.h.ln()])
}

pub fn box_decode<T: Scalar>(t: &Tensor<T>) -> Result<BoundingBox> {
    if t.len() != 4 || !t.is_finite() {
        return Err(Error::invalid(format!("cannot decode {t:?}")));
    }
    let v = t.to_f64_vec();
    let w = v[2].exp();
    let h = v[3].exp();
    BoundingBox::new(v[0] * w, v[1] * h, w, h)
}

/// Fixed-size pooled representation of a box region.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature<T> {
    pub data: Tensor<T>,
    pub source: BoundingBox,
    pub bins: usize,
}

/// Bilinear interpolation of an `H×W×D` map at continuous `(x, y)`.
/// Samples outside the grid read as zero.
pub fn bilinear_at<T: Scalar>(map: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    let (h, w, d) = map_dims(map)?;
    let mut out = vec![T::zero(); d];
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let (iy, ix) = (y0 as isize + dy, x0 as isize + dx);
            let coef = wy * wx;
            if coef == 0.0 || iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                continue;
            }
            let base = (iy as usize * w + ix as usize) * d;
            let c = T::of(coef);
            for (o, &v) in out.iter_mut().zip(&map.data()[base..base + d]) {
                *o = *o + c * v;
            }
        }
    }
    Ok(out)
}

fn map_dims<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match map.shape() {
        [h, w, d] | [1, h, w, d] => Ok((*h, *w, *d)),
        s => Err(Error::invalid(format!("expected an H×W×D map, got {s:?}"))),
    }
}

/// Pool `map` (`H×W×D`) over `b` (in map coordinates) into `bins×bins` cells.
pub fn prpool<T: Scalar>(map: &Tensor<T>, b: &BoundingBox, bins: usize) -> Result<PooledFeature<T>> {
    let (h, w, d) = map_dims(map)?;
    let map4 = map.clone().reshape([1, h, w, d])?;
    let [x1, y1, x2, y2] = b.corners();
    let boxes = Tensor::from_f64([1, 4], &[x1, y1, x2, y2])?;
    let out = prpool_forward(&map4, &boxes, &[0], bins)?;
    Ok(PooledFeature {
        data: out.reshape([bins, bins, d])?,
        source: *b,
        bins,
    })
}

/// Record `cx, cy, w, h` rows → `x1, y1, x2, y2` rows on the tape.
pub fn centers_to_corners<T: Scalar>(tape: &mut Tape<T>, boxes: Var) -> Result<Var> {
    #[rustfmt::skip]
    let m = Tensor::from_f64([4, 4], &[
        1.0, 0.0, 1.0, 0.0,
        0.0, 1.0, 0.0, 1.0,
        -0.5, 0.0, 0.5, 0.0,
        0.0, -0.5, 0.0, 0.5,
    ])?;
    let m = tape.constant(m);
    tape.matmul(boxes, m)
}

/// Antiderivative of the hat kernel `max(0, 1 - |t|)`.
#[inline]
fn hat_integral(t: f64) -> f64 {
    if t <= -1.0 {
        0.0
    } else if t <= 0.0 {
        0.5 * (t + 1.0) * (t + 1.0)
    } else if t < 1.0 {
        1.0 - 0.5 * (1.0 - t) * (1.0 - t)
    } else {
        1.0
    }
}

#[inline]
fn hat(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Index range of samples whose hat overlaps `(lo, hi)`, clamped to `[0, n)`.
fn support(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil() + 1.0).max(0.0).min(n as f64) as usize;
    a.min(b)..b
}

struct Bin {
    xs: f64,
    xe: f64,
    ys: f64,
    ye: f64,
}

impl Bin {
    fn of(corners: &[f64], a: usize, b: usize, bins: usize) -> Bin {
        let bw = (corners[2] - corners[0]) / bins as f64;
        let bh = (corners[3] - corners[1]) / bins as f64;
        Bin {
            xs: corners[0] + b as f64 * bw,
            xe: corners[0] + (b + 1) as f64 * bw,
            ys: corners[1] + a as f64 * bh,
            ye: corners[1] + (a + 1) as f64 * bh,
        }
    }
}

fn check_pool_args<T: Scalar>(map: &Tensor<T>, boxes: &Tensor<T>, idx: &[usize], bins: usize) -> Result<()> {
    if map.rank() != 4 || boxes.shape() != [idx.len(), 4] {
        return Err(Error::ShapeMismatch {
            op: "prpool",
            lhs: map.shape().to_vec(),
            rhs: boxes.shape().to_vec(),
        });
    }
    if bins == 0 {
        return Err(Error::invalid("prpool needs at least one bin"));
    }
    let n = map.shape()[0];
    for (m, &i) in idx.iter().enumerate() {
        if i >= n {
            return Err(Error::invalid(format!("prpool image index {i} >= {n}")));
        }
        let c = &boxes.data()[m * 4..m * 4 + 4];
        let (bw, bh) = ((c[2] - c[0]).f64(), (c[3] - c[1]).f64());
        if !(bw > MIN_BOX_SIDE && bh > MIN_BOX_SIDE) {
            return Err(Error::invalid(format!("degenerate pooling box of size {bw}x{bh}")));
        }
    }
    Ok(())
}

pub(crate) fn prpool_forward<T: Scalar>(
    map: &Tensor<T>,
    boxes: &Tensor<T>,
    idx: &[usize],
    bins: usize,
) -> Result<Tensor<T>> {
    check_pool_args(map, boxes, idx, bins)?;
    let [_, h, w, d] = [map.shape()[0], map.shape()[1], map.shape()[2], map.shape()[3]];
    let mut out = Tensor::zeros([idx.len(), bins, bins, d]);
    let od = out.data_mut();
    let md = map.data();
    let mut wx = Vec::new();
    for (m, &img) in idx.iter().enumerate() {
        let corners: Vec<f64> = boxes.data()[m * 4..m * 4 + 4].iter().map(|v| v.f64()).collect();
        for a in 0..bins {
            for b in 0..bins {
                let bin = Bin::of(&corners, a, b, bins);
                let area = (bin.xe - bin.xs) * (bin.ye - bin.ys);
                let xr = support(bin.xs, bin.xe, w);
                wx.clear();
                wx.extend(
                    xr.clone()
                        .map(|i| hat_integral(bin.xe - i as f64) - hat_integral(bin.xs - i as f64)),
                );
                let obase = ((m * bins + a) * bins + b) * d;
                let orow = &mut od[obase..obase + d];
                for j in support(bin.ys, bin.ye, h) {
                    let wy = hat_integral(bin.ye - j as f64) - hat_integral(bin.ys - j as f64);
                    if wy == 0.0 {
                        continue;
                    }
                    for (k, i) in xr.clone().enumerate() {
                        let coef = wy * wx[k] / area;
                        if coef == 0.0 {
                            continue;
                        }
                        let c = T::of(coef);
                        let base = ((img * h + j) * w + i) * d;
                        for (o, &v) in orow.iter_mut().zip(&md[base..base + d]) {
                            *o = *o + c * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `<prpool(map, boxes), g>` with respect to the map and the
/// box corners.
pub(crate) fn prpool_backward<T: Scalar>(
    map: &Tensor<T>,
    boxes: &Tensor<T>,
    idx: &[usize],
    bins: usize,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pool_args(map, boxes, idx, bins)?;
    let [_, h, w, d] = [map.shape()[0], map.shape()[1], map.shape()[2], map.shape()[3]];
    let mut gmap = Tensor::zeros(map.shape().to_vec());
    let mut gbox = vec![0.0f64; idx.len() * 4];
    let md = map.data();
    let gd = g.data();
    let kf = bins as f64;
    for (m, &img) in idx.iter().enumerate() {
        let corners: Vec<f64> = boxes.data()[m * 4..m * 4 + 4].iter().map(|v| v.f64()).collect();
        for a in 0..bins {
            for b in 0..bins {
                let bin = Bin::of(&corners, a, b, bins);
                let (bw, bh) = (bin.xe - bin.xs, bin.ye - bin.ys);
                let area = bw * bh;
                let grow = &gd[((m * bins + a) * bins + b) * d..][..d];
                let xr = support(bin.xs, bin.xe, w);
                let yr = support(bin.ys, bin.ye, h);
                // <g, S> weighted sums against the interior and edge kernels.
                let (mut gs, mut gs_xe, mut gs_xs, mut gs_ye, mut gs_ys) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in yr.clone() {
                    let yj = j as f64;
                    let wy = hat_integral(bin.ye - yj) - hat_integral(bin.ys - yj);
                    let (ky_e, ky_s) = (hat(bin.ye - yj), hat(bin.ys - yj));
                    for i in xr.clone() {
                        let xi = i as f64;
                        let wx = hat_integral(bin.xe - xi) - hat_integral(bin.xs - xi);
                        let (kx_e, kx_s) = (hat(bin.xe - xi), hat(bin.xs - xi));
                        if wx == 0.0 && wy == 0.0 {
                            continue;
                        }
                        let base = ((img * h + j) * w + i) * d;
                        let gf: f64 = grow
                            .iter()
                            .zip(&md[base..base + d])
                            .map(|(gv, fv)| gv.f64() * fv.f64())
                            .sum();
                        gs += wy * wx * gf;
                        gs_xe += wy * kx_e * gf;
                        gs_xs -= wy * kx_s * gf;
                        gs_ye += wx * ky_e * gf;
                        gs_ys -= wx * ky_s * gf;
                        let coef = wy * wx / area;
                        if coef != 0.0 {
                            let c = T::of(coef);
                            let gm = &mut gmap.data_mut()[base..base + d];
                            for (o, &gv) in gm.iter_mut().zip(grow) {
                                *o = *o + c * gv;
                            }
                        }
                    }
                }
                let gv = gs / area;
                let d_xe = (gs_xe - gv * bh) / area;
                let d_xs = (gs_xs + gv * bh) / area;
                let d_ye = (gs_ye - gv * bw) / area;
                let d_ys = (gs_ys + gv * bw) / area;
                let (fb, fa) = (b as f64, a as f64);
                let gb = &mut gbox[m * 4..m * 4 + 4];
                gb[0] += d_xs * (1.0 - fb / kf) + d_xe * (1.0 - (fb + 1.0) / kf);
                gb[2] += d_xs * (fb / kf) + d_xe * ((fb + 1.0) / kf);
                gb[1] += d_ys * (1.0 - fa / kf) + d_ye * (1.0 - (fa + 1.0) / kf);
                gb[3] += d_ys * (fa / kf) + d_ye * ((fa + 1.0) / kf);
            }
        }
    }
    let gbox = Tensor::new([idx.len(), 4], gbox.into_iter().map(T::of).collect())?;
    Ok((gmap, gbox))
}
