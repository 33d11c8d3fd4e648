//! Raw convolution kernels.
//!
//! One gather kernel, one scatter kernel, and one weight-gradient kernel
//! cover forward and backward of both convolution and transposed
//! convolution; the scatter loop is the exact adjoint of the gather loop,
//! which is what the inner-product identity tests check. Accumulation
//! order is fixed (channel-major, then kernel taps), so results are
//! deterministic.

use super::Scalar;

/// Shape of a `[c, z, y, x]` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Sp {
    pub c: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Sp {
    pub fn count(&self) -> usize {
        self.c * self.vox()
    }

    pub fn vox(&self) -> usize {
        self.z * self.y * self.x
    }
}

pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

fn fill_bias<T: Scalar>(out: &mut [T], cout: usize, vox: usize, bias: Option<&[T]>) {
    for co in 0..cout {
        let b = bias.map_or_else(T::zero, |b| b[co]);
        for v in &mut out[co * vox..(co + 1) * vox] {
            *v = b;
        }
    }
}

/// out[co, q] (+)= sum_ci sum_k w[co, ci, k] * x[ci, stride*q + k - pad].
///
/// `init` seeds the output with the bias (or zero); otherwise contributions
/// accumulate into the existing buffer and `bias` must be `None`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gather<T: Scalar>(
    x: &[T],
    xs: Sp,
    w: &[T],
    k: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Sp,
    init: bool,
) {
    let (cin, cout) = (xs.c, os.c);
    if init {
        fill_bias(out, cout, os.vox(), bias);
    } else {
        debug_assert!(bias.is_none());
    }
    let p = pad as isize;
    if stride == 1 {
        for co in 0..cout {
            for ci in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                            let (dz, dy, dx) = (kz as isize - p, ky as isize - p, kx as isize - p);
                            let oz0 = (-dz).max(0) as usize;
                            let oz1 = (xs.z as isize - dz).min(os.z as isize).max(0) as usize;
                            let oy0 = (-dy).max(0) as usize;
                            let oy1 = (xs.y as isize - dy).min(os.y as isize).max(0) as usize;
                            let ox0 = (-dx).max(0) as usize;
                            let ox1 = (xs.x as isize - dx).min(os.x as isize).max(0) as usize;
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oz in oz0..oz1 {
                                let iz = (oz as isize + dz) as usize;
                                for oy in oy0..oy1 {
                                    let iy = (oy as isize + dy) as usize;
                                    let ob = ((co * os.z + oz) * os.y + oy) * os.x;
                                    let ib = ((ci * xs.z + iz) * xs.y + iy) * xs.x;
                                    let ix0 = (ox0 as isize + dx) as usize;
                                    let orow = &mut out[ob + ox0..ob + ox1];
                                    let irow = &x[ib + ix0..ib + ix0 + (ox1 - ox0)];
                                    for (o, &i) in orow.iter_mut().zip(irow) {
                                        *o = *o + wv * i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        for co in 0..cout {
            for ci in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                            for oz in 0..os.z {
                                let iz = (oz * stride + kz) as isize - p;
                                if iz < 0 || iz >= xs.z as isize {
                                    continue;
                                }
                                for oy in 0..os.y {
                                    let iy = (oy * stride + ky) as isize - p;
                                    if iy < 0 || iy >= xs.y as isize {
                                        continue;
                                    }
                                    let ob = ((co * os.z + oz) * os.y + oy) * os.x;
                                    let ib = ((ci * xs.z + iz as usize) * xs.y + iy as usize) * xs.x;
                                    for ox in 0..os.x {
                                        let ix = (ox * stride + kx) as isize - p;
                                        if ix < 0 || ix >= xs.x as isize {
                                            continue;
                                        }
                                        out[ob + ox] = out[ob + ox] + wv * x[ib + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[c2, stride*q + k - pad] (+)= sum_c1 sum_k w[c1, c2, k] * x[c1, q].
///
/// Adjoint of `gather`: used as transposed-convolution forward and as the
/// input gradient of convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter<T: Scalar>(
    x: &[T],
    xs: Sp,
    w: &[T],
    k: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
    os: Sp,
    init: bool,
) {
    let (cin, cout) = (xs.c, os.c);
    if init {
        fill_bias(out, cout, os.vox(), bias);
    } else {
        debug_assert!(bias.is_none());
    }
    let p = pad as isize;
    for c1 in 0..cin {
        for c2 in 0..cout {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[(((c1 * cout + c2) * k + kz) * k + ky) * k + kx];
                        let (dz, dy, dx) = (kz as isize - p, ky as isize - p, kx as isize - p);
                        if stride == 1 {
                            let iz0 = (-dz).max(0) as usize;
                            let iz1 = (os.z as isize - dz).min(xs.z as isize).max(0) as usize;
                            let iy0 = (-dy).max(0) as usize;
                            let iy1 = (os.y as isize - dy).min(xs.y as isize).max(0) as usize;
                            let ix0 = (-dx).max(0) as usize;
                            let ix1 = (os.x as isize - dx).min(xs.x as isize).max(0) as usize;
                            if ix0 >= ix1 {
                                continue;
                            }
                            for iz in iz0..iz1 {
                                let oz = (iz as isize + dz) as usize;
                                for iy in iy0..iy1 {
                                    let oy = (iy as isize + dy) as usize;
                                    let ib = ((c1 * xs.z + iz) * xs.y + iy) * xs.x;
                                    let ob = ((c2 * os.z + oz) * os.y + oy) * os.x;
                                    let ox0 = (ix0 as isize + dx) as usize;
                                    let orow = &mut out[ob + ox0..ob + ox0 + (ix1 - ix0)];
                                    let irow = &x[ib + ix0..ib + ix1];
                                    for (o, &i) in orow.iter_mut().zip(irow) {
                                        *o = *o + wv * i;
                                    }
                                }
                            }
                        } else {
                            for iz in 0..xs.z {
                                let oz = (iz * stride + kz) as isize - p;
                                if oz < 0 || oz >= os.z as isize {
                                    continue;
                                }
                                for iy in 0..xs.y {
                                    let oy = (iy * stride + ky) as isize - p;
                                    if oy < 0 || oy >= os.y as isize {
                                        continue;
                                    }
                                    let ib = ((c1 * xs.z + iz) * xs.y + iy) * xs.x;
                                    let ob =
                                        ((c2 * os.z + oz as usize) * os.y + oy as usize) * os.x;
                                    for ix in 0..xs.x {
                                        let ox = (ix * stride + kx) as isize - p;
                                        if ox < 0 || ox >= os.x as isize {
                                            continue;
                                        }
                                        out[ob + ox as usize] =
                                            out[ob + ox as usize] + wv * x[ib + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dw[a, b, k] += sum_q small[a, q] * big[b, stride*q + k - pad].
///
/// With `small = dy, big = x` this is the weight gradient of convolution
/// (layout `[cout, cin, k^3]`); with `small = x, big = dy` it is the weight
/// gradient of transposed convolution (layout `[cin, cout, k^3]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad<T: Scalar>(
    small: &[T],
    ss: Sp,
    big: &[T],
    bs: Sp,
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [T],
) {
    let p = pad as isize;
    for a in 0..ss.c {
        for b in 0..bs.c {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let (dz, dy, dx) = (kz as isize - p, ky as isize - p, kx as isize - p);
                        let mut acc = T::zero();
                        if stride == 1 {
                            let qz0 = (-dz).max(0) as usize;
                            let qz1 = (bs.z as isize - dz).min(ss.z as isize).max(0) as usize;
                            let qy0 = (-dy).max(0) as usize;
                            let qy1 = (bs.y as isize - dy).min(ss.y as isize).max(0) as usize;
                            let qx0 = (-dx).max(0) as usize;
                            let qx1 = (bs.x as isize - dx).min(ss.x as isize).max(0) as usize;
                            for qz in qz0..qz1 {
                                let bz = (qz as isize + dz) as usize;
                                for qy in qy0..qy1 {
                                    let by = (qy as isize + dy) as usize;
                                    let sb = ((a * ss.z + qz) * ss.y + qy) * ss.x;
                                    let bb = ((b * bs.z + bz) * bs.y + by) * bs.x;
                                    if qx0 >= qx1 {
                                        continue;
                                    }
                                    let bx0 = (qx0 as isize + dx) as usize;
                                    let srow = &small[sb + qx0..sb + qx1];
                                    let brow = &big[bb + bx0..bb + bx0 + (qx1 - qx0)];
                                    for (&s, &g) in srow.iter().zip(brow) {
                                        acc = acc + s * g;
                                    }
                                }
                            }
                        } else {
                            for qz in 0..ss.z {
                                let bz = (qz * stride + kz) as isize - p;
                                if bz < 0 || bz >= bs.z as isize {
                                    continue;
                                }
                                for qy in 0..ss.y {
                                    let by = (qy * stride + ky) as isize - p;
                                    if by < 0 || by >= bs.y as isize {
                                        continue;
                                    }
                                    let sb = ((a * ss.z + qz) * ss.y + qy) * ss.x;
                                    let bb =
                                        ((b * bs.z + bz as usize) * bs.y + by as usize) * bs.x;
                                    for qx in 0..ss.x {
                                        let bx = (qx * stride + kx) as isize - p;
                                        if bx < 0 || bx >= bs.x as isize {
                                            continue;
                                        }
                                        acc = acc + small[sb + qx] * big[bb + bx as usize];
                                    }
                                }
                            }
                        }
                        let wi = (((a * bs.c + b) * k + kz) * k + ky) * k + kx;
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
}
