//! Deep label fusion: a two-stage network that replaces hand-designed
//! atlas weighting.
//!
//! Stage one runs one shared weighted-voting subnet per atlas on
//! `[target, atlas image, coordinates]` and emits a per-label weight map.
//! Each atlas's candidate segmentation, as a one-hot volume, is multiplied
//! by its weight map to form votes, and the votes are averaged across
//! atlases. Stage two feeds the averaged votes (plus coordinates) through a
//! fine-tuning subnet whose output is masked to the labels that enough
//! atlases actually proposed, and the argmax of the masked activations is
//! the segmentation. Every step is differentiable, so supervision at the
//! output trains both subnets end to end.
//!
//! Averaging over atlases (instead of concatenating) is what lets a trained
//! model take any number of atlases at inference time.

use crate::error::{Error, Result};
use crate::gridnet::checkpoint::{self, ParamEntry};
use crate::gridnet::{neumaier, Graph, Scalar, Tensor};
use crate::unet::{
    self, build_unet, forward_eval, forward_train_bound, UNetConfig, UNetParams,
    DS_WEIGHTS_DEFAULT,
};
use crate::volcore::{argmax_labels, one_hot, AtlasBundle, LabelMap, Volume};
use std::path::Path;

/// Label-absence smoothing inside the generalized dice loss.
pub const GDL_EPS: f64 = 1e-5;

/// Default vote fraction a label needs before the mask admits it.
pub const MASK_THRESHOLD_DEFAULT: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct DlfConfig {
    pub label_count: usize,
    pub wv_cfg: UNetConfig,
    pub ft_cfg: UNetConfig,
    /// Vote fraction threshold for the label mask, inclusive.
    pub mask_threshold: f64,
    /// Replace predicted weight maps with all-ones.
    pub ablate_wv: bool,
    /// Skip the fine-tuning subnet; argmax the masked averaged votes.
    pub ablate_ft: bool,
    /// Replace the label mask with all-ones.
    pub ablate_mask: bool,
}

impl DlfConfig {
    /// Builds a config with the published topology shape: the
    /// weighted-voting subnet reads `[target(2), atlas(2), coords(3)]`, the
    /// fine-tuning subnet reads `[votes(L), coords(3)]`, and only the
    /// fine-tuning subnet carries deep supervision. The published model
    /// uses `wv_levels = 3` and `ft_levels = 4`; smaller patches need fewer
    /// levels to stay divisible.
    pub fn with_shape(
        label_count: usize,
        wv_levels: usize,
        ft_levels: usize,
        base_features: usize,
    ) -> Self {
        let ds_len = DS_WEIGHTS_DEFAULT.len().min(ft_levels + 1);
        DlfConfig {
            label_count,
            wv_cfg: UNetConfig {
                in_channels: 7,
                out_channels: label_count,
                levels: wv_levels,
                base_features,
                deep_supervision: false,
                ds_weights: vec![1.0],
            },
            ft_cfg: UNetConfig {
                in_channels: label_count + 3,
                out_channels: label_count,
                levels: ft_levels,
                base_features,
                deep_supervision: true,
                ds_weights: DS_WEIGHTS_DEFAULT[..ds_len].to_vec(),
            },
            mask_threshold: MASK_THRESHOLD_DEFAULT,
            ablate_wv: false,
            ablate_ft: false,
            ablate_mask: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_count < 2 {
            return Err(Error::Config(format!(
                "label_count {} must be at least 2",
                self.label_count
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config(format!(
                "mask_threshold {} outside [0, 1]",
                self.mask_threshold
            )));
        }
        self.wv_cfg.validate()?;
        self.ft_cfg.validate()?;
        if self.wv_cfg.out_channels != self.label_count
            || self.ft_cfg.out_channels != self.label_count
        {
            return Err(Error::Config(format!(
                "both subnets must emit {} channels (wv {}, ft {})",
                self.label_count, self.wv_cfg.out_channels, self.ft_cfg.out_channels
            )));
        }
        if self.wv_cfg.in_channels != 7 {
            return Err(Error::Config(format!(
                "weighted-voting subnet reads 7 channels, config says {}",
                self.wv_cfg.in_channels
            )));
        }
        if self.ft_cfg.in_channels != self.label_count + 3 {
            return Err(Error::Config(format!(
                "fine-tuning subnet reads {} channels, config says {}",
                self.label_count + 3,
                self.ft_cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Both subnets must see dims divisible by this.
    pub fn dims_divisor(&self) -> usize {
        1usize << self.wv_cfg.levels.max(self.ft_cfg.levels)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("label_count".to_string(), self.label_count.to_string()),
            ("mask_threshold".to_string(), self.mask_threshold.to_string()),
            ("ablate_wv".to_string(), self.ablate_wv.to_string()),
            ("ablate_ft".to_string(), self.ablate_ft.to_string()),
            ("ablate_mask".to_string(), self.ablate_mask.to_string()),
        ];
        pairs.extend(self.wv_cfg.to_pairs("wv."));
        pairs.extend(self.ft_cfg.to_pairs("ft."));
        pairs
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let take = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("config key {key} missing")))
        };
        let parse_bool = |key: &str| -> Result<bool> {
            take(key)?
                .parse::<bool>()
                .map_err(|_| Error::Format(format!("config key {key} is not a bool")))
        };
        let cfg = DlfConfig {
            label_count: take("label_count")?
                .parse()
                .map_err(|_| Error::Format("label_count is not an integer".into()))?,
            mask_threshold: take("mask_threshold")?
                .parse()
                .map_err(|_| Error::Format("mask_threshold is not a number".into()))?,
            ablate_wv: parse_bool("ablate_wv")?,
            ablate_ft: parse_bool("ablate_ft")?,
            ablate_mask: parse_bool("ablate_mask")?,
            wv_cfg: UNetConfig::from_pairs(pairs, "wv.")?,
            ft_cfg: UNetConfig::from_pairs(pairs, "ft.")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone)]
pub struct DlfParams<T: Scalar> {
    pub wv: UNetParams<T>,
    pub ft: UNetParams<T>,
}

impl<T: Scalar> DlfParams<T> {
    pub fn cast<U: Scalar>(&self) -> DlfParams<U> {
        DlfParams {
            wv: self.wv.cast(),
            ft: self.ft.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.wv.param_count() + self.ft.param_count()
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        let mut e = self.wv.entries("wv.");
        e.extend(self.ft.entries("ft."));
        e
    }

    pub fn from_entries(cfg: &DlfConfig, entries: &[ParamEntry]) -> Result<Self> {
        let split = entries.iter().position(|e| e.name.starts_with("ft."));
        let split = split.unwrap_or(entries.len());
        Ok(DlfParams {
            wv: UNetParams::from_entries(&cfg.wv_cfg, &entries[..split], "wv.")?,
            ft: UNetParams::from_entries(&cfg.ft_cfg, &entries[split..], "ft.")?,
        })
    }
}

/// Fresh parameters for both subnets; the two draws are decorrelated by
/// offsetting the fine-tuning seed.
pub fn build_dlf<T: Scalar>(cfg: &DlfConfig, seed: u64) -> Result<DlfParams<T>> {
    cfg.validate()?;
    Ok(DlfParams {
        wv: build_unet(&cfg.wv_cfg, seed)?,
        ft: build_unet(&cfg.ft_cfg, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?,
    })
}

/// Writes config plus both subnets' parameters and batchnorm buffers.
pub fn save_dlf_checkpoint(
    dir: impl AsRef<Path>,
    cfg: &DlfConfig,
    params: &DlfParams<f32>,
) -> Result<()> {
    let dir = dir.as_ref();
    checkpoint::save_params(dir, &params.entries())?;
    checkpoint::save_config(&dir.join("config.txt"), &cfg.to_pairs())
}

pub fn load_dlf_checkpoint(dir: impl AsRef<Path>) -> Result<(DlfConfig, DlfParams<f32>)> {
    let dir = dir.as_ref();
    let cfg = DlfConfig::from_pairs(&checkpoint::load_config(&dir.join("config.txt"))?)?;
    let params = DlfParams::from_entries(&cfg, &checkpoint::load_params(dir)?)?;
    Ok((cfg, params))
}

/// Everything the fusion stage computed on the way to the final labels:
/// per-atlas weight maps w, candidate one-hots s, votes v = w·s, the
/// across-atlas vote mean, and the label mask.
pub struct FusionIntermediates {
    pub weight_maps: Vec<Volume>,
    pub candidates: Vec<Volume>,
    pub votes: Vec<Volume>,
    pub initial: Volume,
    pub mask: Volume,
}

/// Elementwise product of a weight map and a candidate one-hot (or any two
/// volumes of matching shape).
pub fn compose_votes(w: &Volume, s: &Volume) -> Result<Volume> {
    if w.channels() != s.channels() || w.dims() != s.dims() {
        return Err(Error::Shape(format!(
            "vote compose shape mismatch: {}ch {:?} vs {}ch {:?}",
            w.channels(),
            w.dims(),
            s.channels(),
            s.dims()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(s.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Volume::new(w.channels(), w.dims(), [1.0, 1.0, 1.0], data)
}

/// Arithmetic mean of the vote maps, elementwise across atlases. The
/// compensated accumulation makes the mean of k identical maps reproduce
/// the map bitwise, which is what makes atlas duplication undetectable
/// downstream.
pub fn average_votes(votes: &[Volume]) -> Result<Volume> {
    let Some(first) = votes.first() else {
        return Err(Error::Data("average_votes needs at least one vote map".into()));
    };
    for v in votes {
        if v.channels() != first.channels() || v.dims() != first.dims() {
            return Err(Error::Shape("vote maps differ in shape".into()));
        }
    }
    let m = votes.len() as f64;
    let count = first.data().len();
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let (hi, lo) = neumaier(votes.iter().map(|v| v.data()[j] as f64));
        out.push((hi / m + lo / m) as f32);
    }
    Volume::new(first.channels(), first.dims(), [1.0, 1.0, 1.0], out)
}

/// Binary mask over labels: channel l is on where at least `tau` of the
/// atlases proposed label l. The background channel is always on, so the
/// downstream argmax is defined even where no atlas agrees.
pub fn atlas_mask(candidates: &[Volume], tau: f64) -> Result<Volume> {
    let Some(first) = candidates.first() else {
        return Err(Error::Data("atlas_mask needs at least one candidate".into()));
    };
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("mask threshold {tau} outside [0, 1]")));
    }
    let count = first.data().len();
    for c in candidates {
        if c.channels() != first.channels() || c.dims() != first.dims() {
            return Err(Error::Shape("candidate one-hots differ in shape".into()));
        }
        if c.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("candidate volumes must be binary".into()));
        }
    }
    let m = candidates.len() as f64;
    let mut data = vec![0.0f32; count];
    for j in 0..count {
        let votes: u32 = candidates.iter().map(|c| c.data()[j] as u32).sum();
        if votes as f64 / m >= tau {
            data[j] = 1.0;
        }
    }
    let vox = count / first.channels();
    data[..vox].fill(1.0);
    Volume::new(first.channels(), first.dims(), [1.0, 1.0, 1.0], data)
}

fn check_inputs(
    cfg: &DlfConfig,
    target: &Volume,
    coords: &Volume,
    atlases: &[AtlasBundle],
) -> Result<()> {
    cfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::Data("fusion needs at least one atlas".into()));
    }
    if target.channels() != 2 {
        return Err(Error::Shape(format!(
            "target must have 2 channels, got {}",
            target.channels()
        )));
    }
    if coords.channels() != 3 || coords.dims() != target.dims() {
        return Err(Error::Shape("coords must be 3 channels on the target grid".into()));
    }
    let (nx, ny, nz) = target.dims();
    let div = cfg.dims_divisor();
    if nx % div != 0 || ny % div != 0 || nz % div != 0 {
        return Err(Error::Shape(format!(
            "dims {nx}x{ny}x{nz} must be divisible by {div}"
        )));
    }
    for a in atlases {
        if a.images.channels() != 2 || a.images.dims() != target.dims() {
            return Err(Error::Shape("atlas images must be 2 channels on the target grid".into()));
        }
        if a.labels.dims() != target.dims() {
            return Err(Error::Shape("atlas labels must live on the target grid".into()));
        }
        if a.labels.label_count() != cfg.label_count {
            return Err(Error::Shape(format!(
                "atlas has {} labels, model fuses {}",
                a.labels.label_count(),
                cfg.label_count
            )));
        }
    }
    Ok(())
}

fn ones_volume(channels: usize, dims: (usize, usize, usize)) -> Volume {
    let n = channels * dims.0 * dims.1 * dims.2;
    Volume::new(channels, dims, [1.0, 1.0, 1.0], vec![1.0; n]).expect("static shape")
}

/// Full fusion pass in inference mode. Expects intensities the caller has
/// already z-normalized, and spatial dims divisible by `dims_divisor`.
/// Returns the labels, the masked logits they were argmaxed from, and the
/// fusion intermediates.
pub fn dlf_forward(
    cfg: &DlfConfig,
    params: &DlfParams<f32>,
    target: &Volume,
    coords: &Volume,
    atlases: &[AtlasBundle],
) -> Result<(LabelMap, Volume, FusionIntermediates)> {
    check_inputs(cfg, target, coords, atlases)?;
    let dims = target.dims();
    let (nx, ny, nz) = dims;
    let l = cfg.label_count;

    let mut weight_maps = Vec::with_capacity(atlases.len());
    let mut candidates = Vec::with_capacity(atlases.len());
    let mut votes = Vec::with_capacity(atlases.len());
    for a in atlases {
        let s = one_hot(&a.labels);
        let w = if cfg.ablate_wv {
            ones_volume(l, dims)
        } else {
            let x = Volume::stack(&[target, &a.images, coords])?;
            let mut g = Graph::<f32>::new();
            let xt = g.constant(&[7, nz, ny, nx], x.data().to_vec())?;
            let yt = forward_eval(&mut g, &params.wv, xt)?;
            Volume::new(l, dims, [1.0, 1.0, 1.0], g.value(yt).to_vec())?
        };
        votes.push(compose_votes(&w, &s)?);
        weight_maps.push(w);
        candidates.push(s);
    }
    let initial = average_votes(&votes)?;
    let mask = if cfg.ablate_mask {
        ones_volume(l, dims)
    } else {
        atlas_mask(&candidates, cfg.mask_threshold)?
    };
    let pre = if cfg.ablate_ft {
        initial.clone()
    } else {
        let x = Volume::stack(&[&initial, coords])?;
        let mut g = Graph::<f32>::new();
        let xt = g.constant(&[l + 3, nz, ny, nx], x.data().to_vec())?;
        let yt = forward_eval(&mut g, &params.ft, xt)?;
        Volume::new(l, dims, [1.0, 1.0, 1.0], g.value(yt).to_vec())?
    };
    let logits = compose_votes(&pre, &mask)?;
    let labels = argmax_labels(&logits)?;
    Ok((
        labels,
        logits,
        FusionIntermediates {
            weight_maps,
            candidates,
            votes,
            initial,
            mask,
        },
    ))
}

/// One training instance with everything cast to the graph scalar type.
pub struct DlfBatch<T> {
    dims: (usize, usize, usize),
    target: Vec<T>,
    coords: Vec<T>,
    atlas_images: Vec<Vec<T>>,
    atlas_onehot: Vec<Vec<T>>,
}

fn cast_slice<T: Scalar>(data: &[f32]) -> Vec<T> {
    data.iter().map(|&v| T::from_f64(v as f64)).collect()
}

impl<T: Scalar> DlfBatch<T> {
    pub fn new(
        cfg: &DlfConfig,
        target: &Volume,
        coords: &Volume,
        atlases: &[AtlasBundle],
    ) -> Result<Self> {
        check_inputs(cfg, target, coords, atlases)?;
        Ok(DlfBatch {
            dims: target.dims(),
            target: cast_slice(target.data()),
            coords: cast_slice(coords.data()),
            atlas_images: atlases.iter().map(|a| cast_slice(a.images.data())).collect(),
            atlas_onehot: atlases
                .iter()
                .map(|a| cast_slice(one_hot(&a.labels).data()))
                .collect(),
        })
    }

    pub fn atlas_count(&self) -> usize {
        self.atlas_images.len()
    }
}

/// Training-mode forward. `heads[0]` is the masked full-resolution logits;
/// the rest are the fine-tuning subnet's unmasked deep-supervision heads.
/// Slot tensors are bound once per subnet, so gradients from all atlas
/// passes accumulate onto the shared weighted-voting parameters. An ablated
/// subnet contributes no slot tensors.
pub struct DlfTrainOut {
    pub heads: Vec<Tensor>,
    pub wv_slots: Vec<Tensor>,
    pub ft_slots: Vec<Tensor>,
}

pub fn dlf_forward_train<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &DlfConfig,
    params: &mut DlfParams<T>,
    batch: &DlfBatch<T>,
) -> Result<DlfTrainOut> {
    let (nx, ny, nz) = batch.dims;
    let l = cfg.label_count;
    let m = batch.atlas_count();
    let vox = nx * ny * nz;

    let coords = g.constant(&[3, nz, ny, nx], batch.coords.clone())?;
    let mut wv_slots = Vec::new();
    if !cfg.ablate_wv {
        wv_slots = unet::bind_params(g, &params.wv, true)?;
    }
    let mut votes = Vec::with_capacity(m);
    for i in 0..m {
        let s = g.constant(&[l, nz, ny, nx], batch.atlas_onehot[i].clone())?;
        if cfg.ablate_wv {
            votes.push(s);
        } else {
            let mut xdata = Vec::with_capacity(7 * vox);
            xdata.extend_from_slice(&batch.target);
            xdata.extend_from_slice(&batch.atlas_images[i]);
            xdata.extend_from_slice(&batch.coords);
            let x = g.constant(&[7, nz, ny, nx], xdata)?;
            let out = forward_train_bound(g, &mut params.wv, &wv_slots, x)?;
            votes.push(g.mul(out.heads[0], s)?);
        }
    }
    let initial = g.mean_over(&votes)?;

    let mask_data: Vec<T> = if cfg.ablate_mask {
        vec![T::from_f64(1.0); l * vox]
    } else {
        let mut data = vec![T::from_f64(0.0); l * vox];
        for j in 0..l * vox {
            let c: u32 = batch
                .atlas_onehot
                .iter()
                .map(|s| s[j].as_f64() as u32)
                .sum();
            if c as f64 / m as f64 >= cfg.mask_threshold {
                data[j] = T::from_f64(1.0);
            }
        }
        data[..vox].fill(T::from_f64(1.0));
        data
    };
    let mask = g.constant(&[l, nz, ny, nx], mask_data)?;

    let mut ft_slots = Vec::new();
    let heads = if cfg.ablate_ft {
        vec![g.mul(initial, mask)?]
    } else {
        ft_slots = unet::bind_params(g, &params.ft, true)?;
        let x = g.concat_channels(&[initial, coords])?;
        let out = forward_train_bound(g, &mut params.ft, &ft_slots, x)?;
        let mut heads = vec![g.mul(out.heads[0], mask)?];
        heads.extend(&out.heads[1..]);
        heads
    };
    Ok(DlfTrainOut {
        heads,
        wv_slots,
        ft_slots,
    })
}

/// Nearest-neighbor downsampling by an integer factor: each output voxel
/// takes the first voxel of its block.
pub fn downsample_labels(lm: &LabelMap, factor: usize) -> Result<LabelMap> {
    let (nx, ny, nz) = lm.dims();
    if factor == 0 || nx % factor != 0 || ny % factor != 0 || nz % factor != 0 {
        return Err(Error::Shape(format!(
            "dims {nx}x{ny}x{nz} not divisible by factor {factor}"
        )));
    }
    let (ox, oy, oz) = (nx / factor, ny / factor, nz / factor);
    let mut out = vec![0u32; ox * oy * oz];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                out[(z * oy + y) * ox + x] =
                    lm.labels()[((z * factor) * ny + y * factor) * nx + x * factor];
            }
        }
    }
    LabelMap::new((ox, oy, oz), lm.label_count(), out)
}

/// Weighted sum of per-head generalized dice losses against progressively
/// downsampled ground truth: `Σ_k weights[k] · GDL(softmax(heads[k]), gt_k)`
/// where `gt_k` is `gt` nearest-neighbor downsampled to the head's scale.
pub fn deep_supervision_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &[Tensor],
    gt: &LabelMap,
    weights: &[f64],
) -> Result<Tensor> {
    if heads.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} heads but {} supervision weights",
            heads.len(),
            weights.len()
        )));
    }
    if heads.is_empty() {
        return Err(Error::Config("supervision needs at least one head".into()));
    }
    let (nx, ny, nz) = gt.dims();
    let mut total: Option<Tensor> = None;
    for (k, (&h, &w)) in heads.iter().zip(weights).enumerate() {
        let hs = g.shape(h).to_vec();
        let factor = nx / hs[3];
        if hs[3] * factor != nx || hs[2] * factor != ny || hs[1] * factor != nz {
            return Err(Error::Shape(format!(
                "head {k} shape {hs:?} is not an integer downscale of {nx}x{ny}x{nz}"
            )));
        }
        let gt_k = downsample_labels(gt, factor)?;
        let g_onehot = one_hot(&gt_k);
        let gt_t = g.constant(&hs, cast_slice(g_onehot.data()))?;
        let p = g.softmax_channels(h)?;
        let lk = g.generalized_dice_loss(p, gt_t, GDL_EPS)?;
        let term = g.scale(lk, w);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}
