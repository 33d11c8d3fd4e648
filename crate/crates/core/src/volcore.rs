//! Volumetric data types, the DLFV file format, and patch machinery.
//!
//! A `Volume` stores `C` channels of `Nx x Ny x Nz` f32 voxels, channel-major
//! with z slowest and x fastest inside a channel. A `LabelMap` stores one
//! integer label per voxel. Both round-trip bit-exactly through the DLFV
//! format: a fixed 40-byte little-endian header followed by the raw payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DLFV_MAGIC: [u8; 4] = *b"DLFV";
pub const DLFV_VERSION: u32 = 1;
pub const DLFV_HEADER_LEN: usize = 40;

const DTYPE_F32: u8 = 0;
const DTYPE_I32: u8 = 1;

/// Multi-channel f32 image with per-axis voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    nx: usize,
    ny: usize,
    nz: usize,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: (usize, usize, usize),
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if channels == 0 || nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Shape(format!(
                "volume dims must be positive, got {channels}x{nx}x{ny}x{nz}"
            )));
        }
        let count = checked_count(channels, dims)?;
        if data.len() != count {
            return Err(Error::Shape(format!(
                "payload holds {} values, dims {}x{}x{}x{} need {}",
                data.len(),
                channels,
                nx,
                ny,
                nz,
                count
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(Self { channels, nx, ny, nz, spacing, data })
    }

    pub fn zeros(channels: usize, dims: (usize, usize, usize), spacing: [f32; 3]) -> Result<Self> {
        let count = checked_count(channels, dims)?;
        Self::new(channels, dims, spacing, vec![0.0; count])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.nz + z) * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks single-volume channels into one multi-channel volume.
    pub fn stack(parts: &[&Volume]) -> Result<Volume> {
        let first = parts.first().ok_or_else(|| Error::Shape("stack of zero volumes".into()))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims() != first.dims() {
                return Err(Error::Shape("stack: volume dims differ".into()));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Volume::new(channels, first.dims(), first.spacing, data)
    }
}

/// Integer segmentation aligned to a volume grid. Labels lie in `0..label_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    nx: usize,
    ny: usize,
    nz: usize,
    label_count: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(dims: (usize, usize, usize), label_count: usize, labels: Vec<u32>) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Shape("labelmap dims must be positive".into()));
        }
        if label_count < 2 {
            return Err(Error::Data(format!("label count must be at least 2, got {label_count}")));
        }
        let count = checked_count(1, dims)?;
        if labels.len() != count {
            return Err(Error::Shape(format!(
                "labelmap holds {} voxels, dims need {}",
                labels.len(),
                count
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= label_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {label_count} labels"
            )));
        }
        Ok(Self { nx, ny, nz, label_count, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.index(x, y, z)]
    }

    /// Same grid, new label values.
    pub fn with_labels(&self, label_count: usize, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.dims(), label_count, labels)
    }
}

/// Registered atlas: a 2-channel intensity volume plus its segmentation,
/// both already resampled onto the target grid.
#[derive(Debug, Clone)]
pub struct AtlasBundle {
    pub images: Volume,
    pub labels: LabelMap,
}

impl AtlasBundle {
    pub fn new(images: Volume, labels: LabelMap) -> Result<Self> {
        if images.channels() != 2 {
            return Err(Error::Shape(format!(
                "atlas images must have 2 channels, got {}",
                images.channels()
            )));
        }
        if images.dims() != labels.dims() {
            return Err(Error::Shape("atlas image and label dims differ".into()));
        }
        Ok(Self { images, labels })
    }
}

fn checked_count(channels: usize, dims: (usize, usize, usize)) -> Result<usize> {
    let (nx, ny, nz) = dims;
    channels
        .checked_mul(nx)
        .and_then(|v| v.checked_mul(ny))
        .and_then(|v| v.checked_mul(nz))
        .filter(|&v| v.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("dims {channels}x{nx}x{ny}x{nz} overflow")))
}

fn encode_header(dtype: u8, channels: usize, dims: (usize, usize, usize), spacing: [f32; 3]) -> Result<[u8; DLFV_HEADER_LEN]> {
    let (nx, ny, nz) = dims;
    for (name, v) in [("channels", channels), ("nx", nx), ("ny", ny), ("nz", nz)] {
        if v > u32::MAX as usize {
            return Err(Error::Format(format!("{name} {v} exceeds u32 range")));
        }
    }
    let mut h = [0u8; DLFV_HEADER_LEN];
    h[0..4].copy_from_slice(&DLFV_MAGIC);
    h[4..8].copy_from_slice(&DLFV_VERSION.to_le_bytes());
    h[8] = dtype;
    // bytes 9..12 stay zero (padding)
    h[12..16].copy_from_slice(&(channels as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(nx as u32).to_le_bytes());
    h[20..24].copy_from_slice(&(ny as u32).to_le_bytes());
    h[24..28].copy_from_slice(&(nz as u32).to_le_bytes());
    h[28..32].copy_from_slice(&spacing[0].to_le_bytes());
    h[32..36].copy_from_slice(&spacing[1].to_le_bytes());
    h[36..40].copy_from_slice(&spacing[2].to_le_bytes());
    Ok(h)
}

struct Header {
    dtype: u8,
    channels: usize,
    dims: (usize, usize, usize),
    spacing: [f32; 3],
}

fn decode_header(h: &[u8; DLFV_HEADER_LEN]) -> Result<Header> {
    if h[0..4] != DLFV_MAGIC {
        return Err(Error::Format("bad magic, not a DLFV file".into()));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != DLFV_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = h[8];
    if dtype != DTYPE_F32 && dtype != DTYPE_I32 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    if h[9] != 0 || h[10] != 0 || h[11] != 0 {
        return Err(Error::Format("nonzero header padding".into()));
    }
    let u = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap()) as usize;
    let f = |o: usize| f32::from_le_bytes(h[o..o + 4].try_into().unwrap());
    Ok(Header {
        dtype,
        channels: u(12),
        dims: (u(16), u(20), u(24)),
        spacing: [f(28), f(32), f(36)],
    })
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(DTYPE_F32, v.channels, v.dims(), v.spacing)?)?;
    for val in &v.data {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labelmap(lm: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(DTYPE_I32, 1, lm.dims(), [1.0, 1.0, 1.0])?)?;
    for val in &lm.labels {
        w.write_all(&(*val as i32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Either payload kind a DLFV file can carry.
pub enum DlfvPayload {
    Image(Volume),
    Labels(LabelMap),
}

pub fn read_any(path: impl AsRef<Path>) -> Result<DlfvPayload> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut hbytes = [0u8; DLFV_HEADER_LEN];
    r.read_exact(&mut hbytes)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let h = decode_header(&hbytes)?;
    let count = checked_count(h.channels, h.dims)?;
    let mut payload = vec![0u8; count * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format("truncated payload".into()))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    match h.dtype {
        DTYPE_F32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(DlfvPayload::Image(Volume::new(h.channels, h.dims, h.spacing, data)?))
        }
        _ => {
            if h.channels != 1 {
                return Err(Error::Format("label payload must have one channel".into()));
            }
            let mut max = 0i32;
            let mut labels = Vec::with_capacity(count);
            for b in payload.chunks_exact(4) {
                let v = i32::from_le_bytes(b.try_into().unwrap());
                if v < 0 {
                    return Err(Error::Data(format!("negative label {v}")));
                }
                max = max.max(v);
                labels.push(v as u32);
            }
            let label_count = (max as usize + 1).max(2);
            Ok(DlfvPayload::Labels(LabelMap::new(h.dims, label_count, labels)?))
        }
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_any(path)? {
        DlfvPayload::Image(v) => Ok(v),
        DlfvPayload::Labels(_) => Err(Error::Format("expected image payload, found labels".into())),
    }
}

pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_any(path)? {
        DlfvPayload::Labels(l) => Ok(l),
        DlfvPayload::Image(_) => Err(Error::Format("expected label payload, found image".into())),
    }
}

/// Per-channel z-normalization with population statistics. A constant
/// channel maps to all zeros instead of dividing by zero.
pub fn znormalize(v: &Volume) -> Volume {
    let n = v.voxels();
    let mut out = v.clone();
    for c in 0..v.channels {
        let src = v.channel(c);
        let mean = src.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = src.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var.sqrt() + 1e-12);
        let dst = &mut out.data[c * n..(c + 1) * n];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s as f64 - mean) * inv) as f32;
        }
    }
    out
}

/// Three-channel volume of normalized voxel coordinates in [-1, 1]
/// (x, y, z channels in that order). A single-voxel axis maps to 0.
pub fn coordinate_maps(dims: (usize, usize, usize)) -> Volume {
    let (nx, ny, nz) = dims;
    let axis = |i: usize, n: usize| -> f32 {
        if n > 1 {
            (2.0 * i as f64 / (n - 1) as f64 - 1.0) as f32
        } else {
            0.0
        }
    };
    let mut v = Volume::zeros(3, dims, [1.0, 1.0, 1.0]).expect("valid dims");
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                v.set(0, x, y, z, axis(x, nx));
                v.set(1, x, y, z, axis(y, ny));
                v.set(2, x, y, z, axis(z, nz));
            }
        }
    }
    v
}

/// Expands labels into an indicator volume with one channel per label.
pub fn one_hot(lm: &LabelMap) -> Volume {
    let l = lm.label_count;
    let n = lm.labels.len();
    let mut data = vec![0.0f32; l * n];
    for (i, &lab) in lm.labels.iter().enumerate() {
        data[lab as usize * n + i] = 1.0;
    }
    Volume::new(l, lm.dims(), [1.0, 1.0, 1.0], data).expect("valid one-hot")
}

/// Patch request. The center is clamped so the patch always lies fully
/// inside the volume; nothing is ever padded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub center: (usize, usize, usize),
    pub size: (usize, usize, usize),
}

impl PatchSpec {
    pub fn cube(center: (usize, usize, usize), side: usize) -> Self {
        Self { center, size: (side, side, side) }
    }

    /// Start corner after center clamping. Errors when the patch cannot fit.
    pub fn clamped_start(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let one = |c: usize, s: usize, n: usize| -> Result<usize> {
            if s == 0 || s > n {
                return Err(Error::Shape(format!("patch size {s} does not fit axis of {n}")));
            }
            Ok((c.saturating_sub(s / 2)).min(n - s))
        };
        Ok((
            one(self.center.0, self.size.0, dims.0)?,
            one(self.center.1, self.size.1, dims.1)?,
            one(self.center.2, self.size.2, dims.2)?,
        ))
    }
}

pub fn extract_patch(v: &Volume, spec: &PatchSpec) -> Result<Volume> {
    let (sx, sy, sz) = spec.clamped_start(v.dims())?;
    let (px, py, pz) = spec.size;
    let mut out = Volume::zeros(v.channels, spec.size, v.spacing)?;
    for c in 0..v.channels {
        for z in 0..pz {
            for y in 0..py {
                let src = v.index(c, sx, sy + y, sz + z);
                let dst = out.index(c, 0, y, z);
                out.data[dst..dst + px].copy_from_slice(&v.data[src..src + px]);
            }
        }
    }
    Ok(out)
}

pub fn extract_label_patch(lm: &LabelMap, spec: &PatchSpec) -> Result<LabelMap> {
    let (sx, sy, sz) = spec.clamped_start(lm.dims())?;
    let (px, py, pz) = spec.size;
    let mut labels = Vec::with_capacity(px * py * pz);
    for z in 0..pz {
        for y in 0..py {
            let src = lm.index(sx, sy + y, sz + z);
            labels.extend_from_slice(&lm.labels[src..src + px]);
        }
    }
    LabelMap::new(spec.size, lm.label_count, labels)
}

/// Patch centers stepped by `stride` along each axis, with the final center
/// clamped so the union of patches covers every voxel.
pub fn dense_grid_centers(
    dims: (usize, usize, usize),
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<Vec<(usize, usize, usize)>> {
    let axis = |n: usize, p: usize, s: usize| -> Result<Vec<usize>> {
        if p == 0 || p > n {
            return Err(Error::Shape(format!("patch size {p} does not fit axis of {n}")));
        }
        if s == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if s > p {
            return Err(Error::Config(format!(
                "stride {s} exceeds patch size {p}, grid would leave holes"
            )));
        }
        let lo = p / 2;
        let hi = (n - p) + p / 2;
        let mut cs = Vec::new();
        let mut c = lo;
        while c < hi {
            cs.push(c);
            c += s;
        }
        cs.push(hi);
        Ok(cs)
    };
    let xs = axis(dims.0, patch.0, stride.0)?;
    let ys = axis(dims.1, patch.1, stride.1)?;
    let zs = axis(dims.2, patch.2, stride.2)?;
    let mut centers = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                centers.push((x, y, z));
            }
        }
    }
    Ok(centers)
}

/// Reassembles per-patch channel maps into a full volume, averaging where
/// patches overlap. Every voxel must be covered by at least one patch.
pub fn stitch_patches(
    patches: &[Volume],
    centers: &[(usize, usize, usize)],
    dims: (usize, usize, usize),
) -> Result<Volume> {
    if patches.is_empty() || patches.len() != centers.len() {
        return Err(Error::Shape(format!(
            "got {} patches for {} centers",
            patches.len(),
            centers.len()
        )));
    }
    let channels = patches[0].channels;
    let n = dims.0 * dims.1 * dims.2;
    let mut sum = vec![0.0f32; channels * n];
    let mut hits = vec![0u32; n];
    let mut acc = Volume::zeros(channels, dims, patches[0].spacing)?;
    for (patch, &center) in patches.iter().zip(centers) {
        if patch.channels != channels {
            return Err(Error::Shape("patch channel counts differ".into()));
        }
        let spec = PatchSpec { center, size: patch.dims() };
        let (sx, sy, sz) = spec.clamped_start(dims)?;
        let (px, py, pz) = patch.dims();
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let vi = ((sz + z) * dims.1 + (sy + y)) * dims.0 + (sx + x);
                    for c in 0..channels {
                        sum[c * n + vi] += patch.at(c, x, y, z);
                    }
                }
                let row = ((sz + z) * dims.1 + (sy + y)) * dims.0 + sx;
                for h in &mut hits[row..row + px] {
                    *h += 1;
                }
            }
        }
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Shape(format!("voxel {i} not covered by any patch")));
    }
    for c in 0..channels {
        for (i, &h) in hits.iter().enumerate() {
            acc.data[c * n + i] = sum[c * n + i] / h as f32;
        }
    }
    Ok(acc)
}

/// Per-voxel channel argmax; ties go to the lowest channel index.
pub fn argmax_labels(logits: &Volume) -> Result<LabelMap> {
    let l = logits.channels;
    if l < 2 {
        return Err(Error::Shape("argmax needs at least 2 channels".into()));
    }
    let n = logits.voxels();
    let mut labels = vec![0u32; n];
    for (i, lab) in labels.iter_mut().enumerate() {
        let mut best = logits.data[i];
        let mut arg = 0u32;
        for c in 1..l {
            let v = logits.data[c * n + i];
            if v > best {
                best = v;
                arg = c as u32;
            }
        }
        *lab = arg;
    }
    LabelMap::new(logits.dims(), l, labels)
}
