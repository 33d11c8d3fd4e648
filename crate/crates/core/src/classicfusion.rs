//! Classical label fusion: majority voting, spatially varying weighted
//! voting (SVWV), and joint label fusion (JLF), all over a per-voxel
//! neighborhood search.
//!
//! The search compares multi-channel intensity patches between the target
//! and a candidate displacement in the atlas. Windows truncate at volume
//! boundaries; the truncated sum is rescaled by full/valid voxel count so
//! boundary voxels are not rewarded for smaller windows. Intensities are
//! z-normalized per channel inside `svwv` and `jlf`, which makes the
//! similarity exponents transferable across scans.
//!
//! Everything is per-voxel independent, so the slice-parallel paths produce
//! results identical to the serial ones.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volcore::{znormalize, AtlasBundle, LabelMap, Volume};

#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    /// Similarity exponent: SVWV uses `exp(-beta * ssd)`, JLF raises the
    /// error products to `beta`.
    pub beta: f64,
    /// Patch half-extent per axis; (1,1,0) means a 3x3x1 window.
    pub patch_radius: (usize, usize, usize),
    /// Search half-extent per axis.
    pub search_radius: (usize, usize, usize),
    /// JLF conditioning: `M += ridge * mean(diag(M)) * I`.
    pub ridge: f64,
}

impl FusionParams {
    /// Published SVWV operating point.
    pub fn svwv_preset() -> Self {
        FusionParams {
            beta: 0.05,
            patch_radius: (1, 1, 0),
            search_radius: (4, 4, 1),
            ridge: 0.0,
        }
    }

    /// Published JLF operating point.
    pub fn jlf_preset() -> Self {
        FusionParams {
            beta: 2.0,
            patch_radius: (1, 1, 0),
            search_radius: (3, 3, 1),
            ridge: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::Config(format!(
                "ridge {} must be non-negative",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Best displacement and its (rescaled) SSD for every voxel, in x-fastest
/// voxel order.
pub struct SearchField {
    dims: (usize, usize, usize),
    pub disp: Vec<[i32; 3]>,
    pub ssd: Vec<f64>,
}

impl SearchField {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
}

fn check_same_dims(expect: (usize, usize, usize), got: (usize, usize, usize)) -> Result<()> {
    if expect != got {
        return Err(Error::Shape(format!(
            "dims mismatch: {expect:?} vs {got:?}"
        )));
    }
    Ok(())
}

/// Per-voxel modal label; ties go to the lowest label index.
pub fn majority_vote(candidates: &[&LabelMap]) -> Result<LabelMap> {
    let Some(first) = candidates.first() else {
        return Err(Error::Data("majority_vote needs at least one candidate".into()));
    };
    let dims = first.dims();
    let mut label_count = 2usize;
    for c in candidates {
        check_same_dims(dims, c.dims())?;
        label_count = label_count.max(c.label_count());
    }
    let vox = dims.0 * dims.1 * dims.2;
    let mut out = vec![0u32; vox];
    let mut hist = vec![0u32; label_count];
    for n in 0..vox {
        hist.iter_mut().for_each(|h| *h = 0);
        for c in candidates {
            hist[c.labels()[n] as usize] += 1;
        }
        let mut best = 0usize;
        for l in 1..label_count {
            if hist[l] > hist[best] {
                best = l;
            }
        }
        out[n] = best as u32;
    }
    LabelMap::new(dims, label_count, out)
}

/// SSD between the target patch at `(x,y,z)` and the atlas patch displaced
/// by `d`, over all channels, truncated at boundaries and rescaled to the
/// full window size.
#[allow(clippy::too_many_arguments)]
fn patch_ssd(
    t: &Volume,
    a: &Volume,
    x: usize,
    y: usize,
    z: usize,
    d: [i32; 3],
    pr: (usize, usize, usize),
) -> f64 {
    let (nx, ny, nz) = t.dims();
    let ch = t.channels();
    let (rx, ry, rz) = (pr.0 as i32, pr.1 as i32, pr.2 as i32);
    let full = ((2 * rx + 1) * (2 * ry + 1) * (2 * rz + 1)) as f64 * ch as f64;
    let mut acc = 0.0f64;
    let mut valid = 0usize;
    let td = t.data();
    let ad = a.data();
    for oz in -rz..=rz {
        let tz = z as i32 + oz;
        let az = tz + d[2];
        if tz < 0 || tz >= nz as i32 || az < 0 || az >= nz as i32 {
            continue;
        }
        for oy in -ry..=ry {
            let ty = y as i32 + oy;
            let ay = ty + d[1];
            if ty < 0 || ty >= ny as i32 || ay < 0 || ay >= ny as i32 {
                continue;
            }
            for ox in -rx..=rx {
                let tx = x as i32 + ox;
                let ax = tx + d[0];
                if tx < 0 || tx >= nx as i32 || ax < 0 || ax >= nx as i32 {
                    continue;
                }
                let ti = (tz as usize * ny + ty as usize) * nx + tx as usize;
                let ai = (az as usize * ny + ay as usize) * nx + ax as usize;
                for c in 0..ch {
                    let cb = c * nz * ny * nx;
                    let diff = (td[cb + ti] - ad[cb + ai]) as f64;
                    acc += diff * diff;
                }
                valid += ch;
            }
        }
    }
    // the shared center offset is always in bounds, so valid >= ch >= 1
    acc * full / valid as f64
}

/// For every target voxel, the displacement inside the search window whose
/// patch SSD is smallest. Displacements that move the window center outside
/// the volume are skipped. Ties prefer smaller L1 norm, then lexicographic
/// `(dx, dy, dz)`.
pub fn neighborhood_search(
    target: &Volume,
    atlas_img: &Volume,
    p: &FusionParams,
) -> Result<SearchField> {
    p.validate()?;
    check_same_dims(target.dims(), atlas_img.dims())?;
    if target.channels() != atlas_img.channels() {
        return Err(Error::Shape(format!(
            "channel mismatch: target {} vs atlas {}",
            target.channels(),
            atlas_img.channels()
        )));
    }
    let (nx, ny, nz) = target.dims();
    let (sx, sy, sz) = (
        p.search_radius.0 as i32,
        p.search_radius.1 as i32,
        p.search_radius.2 as i32,
    );
    let mut disp = vec![[0i32; 3]; nx * ny * nz];
    let mut ssd = vec![0.0f64; nx * ny * nz];
    let slice = nx * ny;
    disp.par_chunks_mut(slice)
        .zip(ssd.par_chunks_mut(slice))
        .enumerate()
        .for_each(|(z, (dslice, sslice))| {
            for y in 0..ny {
                for x in 0..nx {
                    let mut best_d = [0i32; 3];
                    let mut best_ssd = f64::INFINITY;
                    let mut best_l1 = i32::MAX;
                    for dz in -sz..=sz {
                        let cz = z as i32 + dz;
                        if cz < 0 || cz >= nz as i32 {
                            continue;
                        }
                        for dy in -sy..=sy {
                            let cy = y as i32 + dy;
                            if cy < 0 || cy >= ny as i32 {
                                continue;
                            }
                            for dx in -sx..=sx {
                                let cx = x as i32 + dx;
                                if cx < 0 || cx >= nx as i32 {
                                    continue;
                                }
                                let d = [dx, dy, dz];
                                let s =
                                    patch_ssd(target, atlas_img, x, y, z, d, p.patch_radius);
                                let l1 = dx.abs() + dy.abs() + dz.abs();
                                let better = s < best_ssd
                                    || (s == best_ssd
                                        && (l1 < best_l1
                                            || (l1 == best_l1
                                                && (d[0], d[1], d[2])
                                                    < (best_d[0], best_d[1], best_d[2]))));
                                if better {
                                    best_ssd = s;
                                    best_l1 = l1;
                                    best_d = d;
                                }
                            }
                        }
                    }
                    let n = y * nx + x;
                    dslice[n] = best_d;
                    sslice[n] = best_ssd;
                }
            }
        });
    Ok(SearchField {
        dims: (nx, ny, nz),
        disp,
        ssd,
    })
}

/// Atlas labels resampled through the matched displacements.
fn searched_candidates(labels: &LabelMap, field: &SearchField) -> Vec<u32> {
    let (nx, ny, nz) = field.dims;
    let mut out = vec![0u32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let n = (z * ny + y) * nx + x;
                let d = field.disp[n];
                let (ax, ay, az) = (
                    (x as i32 + d[0]) as usize,
                    (y as i32 + d[1]) as usize,
                    (z as i32 + d[2]) as usize,
                );
                out[n] = labels.labels()[(az * ny + ay) * nx + ax];
            }
        }
    }
    out
}

/// Fusion result: labels plus the per-atlas normalized weight volumes. For
/// JLF, `uniform_fallbacks` counts voxels where the dependency system was
/// singular (or summed to a non-positive weight) and uniform weights were
/// used instead.
pub struct FusedLabels {
    pub labels: LabelMap,
    pub weights: Vec<Volume>,
    pub uniform_fallbacks: usize,
}

fn vote_argmax(votes: &[f64]) -> u32 {
    let mut best = 0usize;
    for l in 1..votes.len() {
        if votes[l] > votes[best] {
            best = l;
        }
    }
    best as u32
}

struct FusionInputs {
    t_norm: Volume,
    fields: Vec<SearchField>,
    cands: Vec<Vec<u32>>,
    label_count: usize,
}

fn prepare(target: &Volume, atlases: &[AtlasBundle], p: &FusionParams) -> Result<FusionInputs> {
    if atlases.is_empty() {
        return Err(Error::Data("fusion needs at least one atlas".into()));
    }
    let t_norm = znormalize(target);
    let mut fields = Vec::with_capacity(atlases.len());
    let mut cands = Vec::with_capacity(atlases.len());
    let mut label_count = 2usize;
    for a in atlases {
        check_same_dims(target.dims(), a.images.dims())?;
        check_same_dims(target.dims(), a.labels.dims())?;
        let field = neighborhood_search(&t_norm, &znormalize(&a.images), p)?;
        cands.push(searched_candidates(&a.labels, &field));
        fields.push(field);
        label_count = label_count.max(a.labels.label_count());
    }
    Ok(FusionInputs {
        t_norm,
        fields,
        cands,
        label_count,
    })
}

fn weights_to_volumes(
    dims: (usize, usize, usize),
    m: usize,
    w: &[f32],
) -> Result<Vec<Volume>> {
    let vox = dims.0 * dims.1 * dims.2;
    (0..m)
        .map(|i| {
            let data: Vec<f32> = (0..vox).map(|n| w[n * m + i]).collect();
            Volume::new(1, dims, [1.0, 1.0, 1.0], data)
        })
        .collect()
}

/// Spatially varying weighted voting: per voxel, atlas `i` gets weight
/// `exp(-beta * ssd_i)`, normalized across atlases (uniform if all weights
/// underflow to zero), and each atlas casts that weight for its matched
/// candidate label.
pub fn svwv(target: &Volume, atlases: &[AtlasBundle], p: &FusionParams) -> Result<FusedLabels> {
    let inp = prepare(target, atlases, p)?;
    let m = atlases.len();
    let dims = target.dims();
    let vox = dims.0 * dims.1 * dims.2;
    let mut labels = vec![0u32; vox];
    let mut weights = vec![0.0f32; vox * m];
    let mut votes = vec![0.0f64; inp.label_count];
    for n in 0..vox {
        let mut sum = 0.0f64;
        for i in 0..m {
            let w = (-p.beta * inp.fields[i].ssd[n]).exp() as f32;
            weights[n * m + i] = w;
            sum += w as f64;
        }
        votes.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            let wn = if sum > 0.0 {
                (weights[n * m + i] as f64 / sum) as f32
            } else {
                (1.0 / m as f64) as f32
            };
            weights[n * m + i] = wn;
            votes[inp.cands[i][n] as usize] += wn as f64;
        }
        labels[n] = vote_argmax(&votes);
    }
    Ok(FusedLabels {
        labels: LabelMap::new(dims, inp.label_count, labels)?,
        weights: weights_to_volumes(dims, m, &weights)?,
        uniform_fallbacks: 0,
    })
}

/// Solves `M w = 1` in place by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot vanishes relative to the matrix scale.
fn solve_ones(mat: &mut [f64], m: usize) -> Option<Vec<f64>> {
    let scale = mat
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = scale * 1e-13;
    let mut rhs = vec![1.0f64; m];
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if mat[r * m + col].abs() > mat[piv * m + col].abs() {
                piv = r;
            }
        }
        if mat[piv * m + col].abs() <= tol {
            return None;
        }
        if piv != col {
            for c in 0..m {
                mat.swap(col * m + c, piv * m + c);
            }
            rhs.swap(col, piv);
        }
        let pv = mat[col * m + col];
        for r in col + 1..m {
            let f = mat[r * m + col] / pv;
            if f == 0.0 {
                continue;
            }
            for c in col..m {
                mat[r * m + c] -= f * mat[col * m + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    for col in (0..m).rev() {
        let mut v = rhs[col];
        for c in col + 1..m {
            v -= mat[col * m + c] * rhs[c];
        }
        rhs[col] = v / mat[col * m + col];
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(rhs)
}

/// Joint label fusion: per voxel, the atlas dependency matrix
/// `M_ij = (Σ_patch |e_i|·|e_j|)^beta` over matched error patches (outside
/// voxels contribute zero) is ridge-conditioned, and weights solve
/// `w = M⁻¹1 / (1ᵀM⁻¹1)`. Negative weights are legitimate; a singular
/// system or non-positive weight sum falls back to uniform weights.
pub fn jlf(target: &Volume, atlases: &[AtlasBundle], p: &FusionParams) -> Result<FusedLabels> {
    let inp = prepare(target, atlases, p)?;
    let m = atlases.len();
    let dims = target.dims();
    let (nx, ny, nz) = dims;
    let vox = nx * ny * nz;
    let ch = target.channels();
    let a_norm: Vec<Volume> = atlases.iter().map(|a| znormalize(&a.images)).collect();
    let (rx, ry, rz) = (
        p.patch_radius.0 as i32,
        p.patch_radius.1 as i32,
        p.patch_radius.2 as i32,
    );
    let patch_len = ((2 * rx + 1) * (2 * ry + 1) * (2 * rz + 1)) as usize * ch;

    let mut labels = vec![0u32; vox];
    let mut weights = vec![0.0f32; vox * m];
    let fallbacks: usize;
    {
        let slice = nx * ny;
        let fallback_per_slice: Vec<usize> = labels
            .par_chunks_mut(slice)
            .zip(weights.par_chunks_mut(slice * m))
            .enumerate()
            .map(|(z, (lslice, wslice))| {
                let mut errs = vec![0.0f64; m * patch_len];
                let mut mat = vec![0.0f64; m * m];
                let mut votes = vec![0.0f64; inp.label_count];
                let mut fb = 0usize;
                let td = inp.t_norm.data();
                for y in 0..ny {
                    for x in 0..nx {
                        let n = (z * ny + y) * nx + x;
                        errs.iter_mut().for_each(|e| *e = 0.0);
                        for (i, an) in a_norm.iter().enumerate() {
                            let d = inp.fields[i].disp[n];
                            let ad = an.data();
                            let mut k = 0usize;
                            for oz in -rz..=rz {
                                let tz = z as i32 + oz;
                                let az = tz + d[2];
                                for oy in -ry..=ry {
                                    let ty = y as i32 + oy;
                                    let ay = ty + d[1];
                                    for ox in -rx..=rx {
                                        let tx = x as i32 + ox;
                                        let ax = tx + d[0];
                                        let inside = tz >= 0
                                            && tz < nz as i32
                                            && ty >= 0
                                            && ty < ny as i32
                                            && tx >= 0
                                            && tx < nx as i32
                                            && az >= 0
                                            && az < nz as i32
                                            && ay >= 0
                                            && ay < ny as i32
                                            && ax >= 0
                                            && ax < nx as i32;
                                        if inside {
                                            let ti = (tz as usize * ny + ty as usize) * nx
                                                + tx as usize;
                                            let ai = (az as usize * ny + ay as usize) * nx
                                                + ax as usize;
                                            for c in 0..ch {
                                                let cb = c * vox;
                                                errs[i * patch_len + k + c] = (td[cb + ti]
                                                    - ad[cb + ai])
                                                    as f64;
                                            }
                                        }
                                        k += ch;
                                    }
                                }
                            }
                        }
                        for i in 0..m {
                            for j in i..m {
                                let mut s = 0.0f64;
                                for k in 0..patch_len {
                                    s += errs[i * patch_len + k].abs()
                                        * errs[j * patch_len + k].abs();
                                }
                                let v = s.powf(p.beta);
                                mat[i * m + j] = v;
                                mat[j * m + i] = v;
                            }
                        }
                        let mean_diag =
                            (0..m).map(|i| mat[i * m + i]).sum::<f64>() / m as f64;
                        for i in 0..m {
                            mat[i * m + i] += p.ridge * mean_diag;
                        }
                        let w = solve_ones(&mut mat, m).and_then(|w| {
                            let s: f64 = w.iter().sum();
                            if s > 0.0 {
                                Some(w.iter().map(|v| v / s).collect::<Vec<f64>>())
                            } else {
                                None
                            }
                        });
                        let w = match w {
                            Some(w) => w,
                            None => {
                                fb += 1;
                                vec![1.0 / m as f64; m]
                            }
                        };
                        votes.iter_mut().for_each(|v| *v = 0.0);
                        let ln = (y * nx + x) * m;
                        for i in 0..m {
                            wslice[ln + i] = w[i] as f32;
                            votes[inp.cands[i][n] as usize] += w[i];
                        }
                        lslice[y * nx + x] = vote_argmax(&votes);
                    }
                }
                fb
            })
            .collect();
        fallbacks = fallback_per_slice.iter().sum();
    }
    Ok(FusedLabels {
        labels: LabelMap::new(dims, inp.label_count, labels)?,
        weights: weights_to_volumes(dims, m, &weights)?,
        uniform_fallbacks: fallbacks,
    })
}
