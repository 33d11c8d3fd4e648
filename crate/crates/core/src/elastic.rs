//! Smooth random displacement fields and warping.
//!
//! A field is drawn on a coarse control grid, upsampled trilinearly to the
//! volume grid, Gaussian-smoothed per component, and clamped so no
//! component exceeds the configured maximum. Warping pulls back through the
//! field: `out(x) = in(x + d(x))`, trilinear for intensities and
//! nearest-neighbor for labels, with out-of-volume samples clamped to the
//! boundary. One field can warp every constituent of a training sample, so
//! target, atlases, candidates and ground truth stay aligned.

use crate::error::{Error, Result};
use crate::volcore::{LabelMap, Volume};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct ElasticParams {
    /// Control points per axis (≥ 2).
    pub control_points: usize,
    /// Per-component displacement bound, in voxels.
    pub max_displacement: f64,
    /// Gaussian smoothing sigma, in voxels; 0 skips smoothing.
    pub smooth_sigma: f64,
}

impl ElasticParams {
    pub fn validate(&self) -> Result<()> {
        if self.control_points < 2 {
            return Err(Error::Config(format!(
                "control grid needs at least 2 points per axis, got {}",
                self.control_points
            )));
        }
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return Err(Error::Config(format!(
                "max_displacement {} must be finite and non-negative",
                self.max_displacement
            )));
        }
        if !(self.smooth_sigma >= 0.0) || !self.smooth_sigma.is_finite() {
            return Err(Error::Config(format!(
                "smooth_sigma {} must be finite and non-negative",
                self.smooth_sigma
            )));
        }
        Ok(())
    }
}

/// Per-voxel displacement vectors, one component volume per axis, in
/// x-fastest voxel order.
pub struct DisplacementField {
    dims: (usize, usize, usize),
    comps: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn zero(dims: (usize, usize, usize)) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        DisplacementField {
            dims,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn max_component(&self) -> f32 {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// 1-D Gaussian blur along one axis with replicated edges, applied in
/// place. `stride` walks the axis, `lines` enumerates start offsets.
fn blur_axis(data: &mut [f32], len: usize, stride: usize, starts: &[usize], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut line = vec![0.0f32; len];
    for &s in starts {
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[s + i * stride];
        }
        for i in 0..len {
            let mut acc = 0.0f64;
            for (j, k) in kernel.iter().enumerate() {
                let p = (i as i64 + j as i64 - radius).clamp(0, len as i64 - 1) as usize;
                acc += k * line[p] as f64;
            }
            data[s + i * stride] = acc as f32;
        }
    }
}

fn axis_starts(dims: (usize, usize, usize), axis: usize) -> Vec<usize> {
    let (nx, ny, nz) = dims;
    let mut starts = Vec::new();
    match axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    starts.push((z * ny + y) * nx);
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    starts.push(z * ny * nx + x);
                }
            }
        }
        _ => {
            for y in 0..ny {
                for x in 0..nx {
                    starts.push(y * nx + x);
                }
            }
        }
    }
    starts
}

/// Draws a random field: uniform control-point displacements in
/// `[-max, max]`, trilinear upsampling, per-component Gaussian smoothing,
/// then a final clamp back to `[-max, max]`.
pub fn random_field(
    dims: (usize, usize, usize),
    p: &ElasticParams,
    rng: &mut impl Rng,
) -> Result<DisplacementField> {
    p.validate()?;
    let (nx, ny, nz) = dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::Shape("field dims must be positive".into()));
    }
    if p.max_displacement == 0.0 {
        return Ok(DisplacementField::zero(dims));
    }
    let k = p.control_points;
    let m = p.max_displacement;
    // component-major draw order keeps the stream layout stable
    let mut grids = Vec::with_capacity(3);
    for _ in 0..3 {
        let g: Vec<f64> = (0..k * k * k).map(|_| rng.gen_range(-m..=m)).collect();
        grids.push(g);
    }
    let n = nx * ny * nz;
    let mut comps = [vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]];
    let scale = |v: usize, nv: usize| -> f64 {
        if nv <= 1 {
            0.0
        } else {
            v as f64 * (k - 1) as f64 / (nv - 1) as f64
        }
    };
    for (c, comp) in comps.iter_mut().enumerate() {
        let grid = &grids[c];
        for z in 0..nz {
            let gz = scale(z, nz);
            let (z0, fz) = (gz.floor() as usize, gz.fract());
            let z1 = (z0 + 1).min(k - 1);
            for y in 0..ny {
                let gy = scale(y, ny);
                let (y0, fy) = (gy.floor() as usize, gy.fract());
                let y1 = (y0 + 1).min(k - 1);
                for x in 0..nx {
                    let gx = scale(x, nx);
                    let (x0, fx) = (gx.floor() as usize, gx.fract());
                    let x1 = (x0 + 1).min(k - 1);
                    let at = |zz: usize, yy: usize, xx: usize| grid[(zz * k + yy) * k + xx];
                    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    comp[(z * ny + y) * nx + x] = (c0 * (1.0 - fz) + c1 * fz) as f32;
                }
            }
        }
        if p.smooth_sigma > 0.0 {
            blur_axis(comp, nx, 1, &axis_starts(dims, 0), p.smooth_sigma);
            blur_axis(comp, ny, nx, &axis_starts(dims, 1), p.smooth_sigma);
            blur_axis(comp, nz, nx * ny, &axis_starts(dims, 2), p.smooth_sigma);
        }
        let mf = m as f32;
        for v in comp.iter_mut() {
            *v = v.clamp(-mf, mf);
        }
    }
    let field = DisplacementField { dims, comps };
    debug_assert!(field.dims() == dims && field.max_component() <= m as f32);
    Ok(field)
}

fn check_dims(field: &DisplacementField, dims: (usize, usize, usize)) -> Result<()> {
    if field.dims != dims {
        return Err(Error::Shape(format!(
            "field dims {:?} do not match volume dims {dims:?}",
            field.dims
        )));
    }
    Ok(())
}

/// Trilinear pull-back warp of every channel.
pub fn warp_volume(v: &Volume, field: &DisplacementField) -> Result<Volume> {
    check_dims(field, v.dims())?;
    let (nx, ny, nz) = v.dims();
    let n = nx * ny * nz;
    let mut out = v.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let sx = (x as f64 + field.comps[0][i] as f64).clamp(0.0, (nx - 1) as f64);
                let sy = (y as f64 + field.comps[1][i] as f64).clamp(0.0, (ny - 1) as f64);
                let sz = (z as f64 + field.comps[2][i] as f64).clamp(0.0, (nz - 1) as f64);
                let (x0, fx) = (sx.floor() as usize, sx.fract());
                let (y0, fy) = (sy.floor() as usize, sy.fract());
                let (z0, fz) = (sz.floor() as usize, sz.fract());
                let (x1, y1, z1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1), (z0 + 1).min(nz - 1));
                for c in 0..v.channels() {
                    let base = c * n;
                    let at = |zz: usize, yy: usize, xx: usize| {
                        v.data()[base + (zz * ny + yy) * nx + xx] as f64
                    };
                    let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                    let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                    let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                    let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    out.data_mut()[base + i] = (c0 * (1.0 - fz) + c1 * fz) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor pull-back warp of a label map.
pub fn warp_labels(lm: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    check_dims(field, lm.dims())?;
    let (nx, ny, nz) = lm.dims();
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                let sx = (x as f64 + field.comps[0][i] as f64).round().clamp(0.0, (nx - 1) as f64);
                let sy = (y as f64 + field.comps[1][i] as f64).round().clamp(0.0, (ny - 1) as f64);
                let sz = (z as f64 + field.comps[2][i] as f64).round().clamp(0.0, (nz - 1) as f64);
                out.push(lm.labels()[(sz as usize * ny + sy as usize) * nx + sx as usize]);
            }
        }
    }
    LabelMap::new(lm.dims(), lm.label_count(), out)
}
