//! Patch sampling, elastic augmentation, the two training loops, and
//! dense-grid inference.
//!
//! Training data is built leave-one-out: every subject serves as the
//! target once, with the remaining subjects as its atlas pool. All
//! randomness flows through counter-based RNG streams keyed by
//! (seed, role, subject, sample), so the sampled patches, atlas draws,
//! and deformation fields cannot change with worker count or iteration
//! order.

pub use crate::elastic::ElasticParams;

use crate::dlf::{
    build_dlf, deep_supervision_loss, dlf_forward, dlf_forward_train, DlfBatch, DlfConfig,
    DlfParams,
};
use crate::elastic::{random_field, warp_labels, warp_volume};
use crate::error::{Error, Result};
use crate::gridnet::optim::{AdamState, OptimConfig};
use crate::gridnet::Graph;
use crate::synthlab;
use crate::unet::{build_unet, forward_eval, forward_train, UNetConfig, UNetParams};
use crate::volcore::{
    argmax_labels, coordinate_maps, dense_grid_centers, extract_label_patch, extract_patch,
    read_labelmap, read_volume, stitch_patches, znormalize, AtlasBundle, LabelMap, PatchSpec,
    Volume,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fs;
use std::path::Path;

const TAG_CENTERS: u64 = 1;
const TAG_ATLAS: u64 = 2;
const TAG_ELASTIC: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

/// One ChaCha stream per (role, subject, sample) triple of a fixed seed.
fn stream_rng(seed: u64, tag: u64, subject: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 56) | ((subject as u64 & 0xFFFF) << 40) | (sample as u64 & 0xFF_FFFF_FFFF));
    rng
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub patch_size: (usize, usize, usize),
    /// Patches per target centered on labeled voxels.
    pub fg_patches: usize,
    /// Patches per target centered on background.
    pub bg_patches: usize,
    /// Atlases drawn with replacement for each sample.
    pub n_atlas_draw: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub elastic: ElasticParams,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale fusion-model recipe: 10+2 patches per target, 4 atlas
    /// draws, 10 epochs at batch 1.
    pub fn dlf_preset() -> Self {
        TrainConfig {
            patch_size: (24, 24, 24),
            fg_patches: 10,
            bg_patches: 2,
            n_atlas_draw: 4,
            epochs: 10,
            batch_size: 1,
            optim: OptimConfig::dlf_preset(),
            elastic: ElasticParams {
                control_points: 4,
                max_displacement: 3.0,
                smooth_sigma: 2.0,
            },
            seed: 0,
        }
    }

    /// Baseline network recipe: 20+8 patches, no atlases, 20 epochs at
    /// batch 7.
    pub fn unet_preset() -> Self {
        TrainConfig {
            fg_patches: 20,
            bg_patches: 8,
            n_atlas_draw: 0,
            epochs: 20,
            batch_size: 7,
            optim: OptimConfig::unet_preset(),
            ..Self::dlf_preset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (px, py, pz) = self.patch_size;
        if px == 0 || py == 0 || pz == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.fg_patches + self.bg_patches == 0 {
            return Err(Error::Config("at least one patch per target".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optim.validate()?;
        self.elastic.validate()
    }
}

/// One registered subject: a two-modality image and its label map.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub images: Volume,
    pub labels: LabelMap,
}

impl Subject {
    pub fn new(id: impl Into<String>, images: Volume, labels: LabelMap) -> Result<Self> {
        if images.channels() != 2 {
            return Err(Error::Shape(format!(
                "subject images need 2 modality channels, got {}",
                images.channels()
            )));
        }
        if images.dims() != labels.dims() {
            return Err(Error::Shape(format!(
                "images {:?} vs labels {:?}",
                images.dims(),
                labels.dims()
            )));
        }
        Ok(Subject {
            id: id.into(),
            images,
            labels,
        })
    }

    pub fn from_phantom(s: &synthlab::Subject) -> Result<Self> {
        Subject::new(s.id.clone(), Volume::stack(&[&s.t1, &s.t2])?, s.labels.clone())
    }
}

/// Reads `manifest.txt` and `subjects/<id>/{t1,t2,labels}.dlfv` under
/// `dir`, in manifest order. All subjects must share one grid and one
/// label alphabet; atlases only make sense on a common registered grid.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Subject>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut subjects = Vec::new();
    for id in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let base = dir.join("subjects").join(id);
        let t1 = read_volume(base.join("t1.dlfv"))?;
        let t2 = read_volume(base.join("t2.dlfv"))?;
        let labels = read_labelmap(base.join("labels.dlfv"))?;
        subjects.push(Subject::new(id, Volume::stack(&[&t1, &t2])?, labels)?);
    }
    check_uniform(&subjects)?;
    Ok(subjects)
}

fn check_uniform(subjects: &[Subject]) -> Result<()> {
    if let Some(first) = subjects.first() {
        for s in subjects {
            if s.images.dims() != first.images.dims() {
                return Err(Error::Shape(format!(
                    "subject {} grid {:?} differs from {:?}",
                    s.id,
                    s.images.dims(),
                    first.images.dims()
                )));
            }
            if s.labels.label_count() != first.labels.label_count() {
                return Err(Error::Data(format!(
                    "subject {} uses {} labels, expected {}",
                    s.id,
                    s.labels.label_count(),
                    first.labels.label_count()
                )));
            }
        }
    }
    Ok(())
}

/// One training sample: co-located patches of the target (z-normalized),
/// the whole-grid coordinate maps, the ground truth, and the drawn atlas
/// multiset (images z-normalized per patch).
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub target: Volume,
    pub coords: Volume,
    pub gt: LabelMap,
    pub atlases: Vec<AtlasBundle>,
    pub center: (usize, usize, usize),
    pub foreground: bool,
}

/// `n_draw` uniform draws with replacement; repeats are intentional, they
/// reweight the implicit atlas distribution seen in training.
pub fn resample_atlases<T: Clone>(
    atlases: &[T],
    n_draw: usize,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    if atlases.is_empty() {
        return Err(Error::Config("cannot draw from an empty atlas set".into()));
    }
    Ok((0..n_draw)
        .map(|_| atlases[rng.gen_range(0..atlases.len())].clone())
        .collect())
}

/// Leave-one-out patch sets: per target, `fg_patches` centers drawn
/// uniformly among its labeled voxels and `bg_patches` among background,
/// each with a fresh atlas multiset. Patches near the border are shifted
/// inward to fit, but the drawn center keeps its identity.
pub fn sample_training_patches(
    subjects: &[Subject],
    cfg: &TrainConfig,
) -> Result<Vec<TrainSample>> {
    cfg.validate()?;
    if subjects.len() < 2 {
        return Err(Error::Config(
            "leave-one-out sampling needs at least 2 subjects".into(),
        ));
    }
    check_uniform(subjects)?;
    let (nx, ny, _) = subjects[0].images.dims();
    let mut samples = Vec::new();
    for (ti, tgt) in subjects.iter().enumerate() {
        let coords_full = coordinate_maps(tgt.images.dims());
        let fg: Vec<usize> = (0..tgt.labels.labels().len())
            .filter(|&i| tgt.labels.labels()[i] != 0)
            .collect();
        let bg: Vec<usize> = (0..tgt.labels.labels().len())
            .filter(|&i| tgt.labels.labels()[i] == 0)
            .collect();
        if cfg.fg_patches > 0 && fg.is_empty() {
            return Err(Error::Data(format!("subject {} has no foreground", tgt.id)));
        }
        if cfg.bg_patches > 0 && bg.is_empty() {
            return Err(Error::Data(format!("subject {} has no background", tgt.id)));
        }
        let mut crng = stream_rng(cfg.seed, TAG_CENTERS, ti, 0);
        let mut centers = Vec::with_capacity(cfg.fg_patches + cfg.bg_patches);
        for _ in 0..cfg.fg_patches {
            centers.push((fg[crng.gen_range(0..fg.len())], true));
        }
        for _ in 0..cfg.bg_patches {
            centers.push((bg[crng.gen_range(0..bg.len())], false));
        }
        let pool: Vec<usize> = (0..subjects.len()).filter(|&j| j != ti).collect();
        for (si, &(flat, foreground)) in centers.iter().enumerate() {
            let center = (flat % nx, (flat / nx) % ny, flat / (nx * ny));
            let spec = PatchSpec {
                center,
                size: cfg.patch_size,
            };
            let mut arng = stream_rng(cfg.seed, TAG_ATLAS, ti, si);
            let drawn = resample_atlases(&pool, cfg.n_atlas_draw, &mut arng)?;
            let atlases = drawn
                .iter()
                .map(|&j| {
                    AtlasBundle::new(
                        znormalize(&extract_patch(&subjects[j].images, &spec)?),
                        extract_label_patch(&subjects[j].labels, &spec)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(TrainSample {
                target: znormalize(&extract_patch(&tgt.images, &spec)?),
                coords: extract_patch(&coords_full, &spec)?,
                gt: extract_label_patch(&tgt.labels, &spec)?,
                atlases,
                center,
                foreground,
            });
        }
    }
    Ok(samples)
}

/// One smooth random field warps every constituent of the sample: target
/// image trilinearly, ground truth and atlas candidates nearest-neighbor.
/// Coordinate channels stay fixed; the patch has not moved, its content
/// has.
pub fn elastic_augment(
    sample: &TrainSample,
    params: &ElasticParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    let field = random_field(sample.gt.dims(), params, rng)?;
    let atlases = sample
        .atlases
        .iter()
        .map(|a| AtlasBundle::new(warp_volume(&a.images, &field)?, warp_labels(&a.labels, &field)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSample {
        target: warp_volume(&sample.target, &field)?,
        coords: sample.coords.clone(),
        gt: warp_labels(&sample.gt, &field)?,
        atlases,
        center: sample.center,
        foreground: sample.foreground,
    })
}

/// Doubles the set: the originals followed by one deformed copy of each,
/// fields drawn from per-sample streams of `seed`.
pub fn augment_dataset(
    samples: &[TrainSample],
    params: &ElasticParams,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let mut out = samples.to_vec();
    for (i, s) in samples.iter().enumerate() {
        let mut rng = stream_rng(seed, TAG_ELASTIC, 0, i);
        out.push(elastic_augment(s, params, &mut rng)?);
    }
    Ok(out)
}

fn dlf_supervision_weights(cfg: &DlfConfig) -> Vec<f64> {
    if cfg.ablate_ft {
        vec![1.0]
    } else {
        cfg.ft_cfg.ds_weights.clone()
    }
}

/// Trains the fusion model from a fresh seeded initialization and returns
/// it with the per-epoch mean loss trace. Epoch indices are 1-based for
/// the learning-rate schedule; zero epochs returns the initialization
/// untouched. Batches larger than one average per-sample gradients in
/// sample order before the shared optimizer step.
pub fn train_dlf(
    samples: &[TrainSample],
    dcfg: &DlfConfig,
    tcfg: &TrainConfig,
) -> Result<(DlfParams<f32>, Vec<f64>)> {
    dcfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if samples[0].gt.label_count() != dcfg.label_count {
        return Err(Error::Data(format!(
            "ground truth uses {} labels, model expects {}",
            samples[0].gt.label_count(),
            dcfg.label_count
        )));
    }
    let mut params: DlfParams<f32> = build_dlf(dcfg, tcfg.seed)?;
    let w_off = params.wv.slots.len();
    let sizes: Vec<usize> = params
        .wv
        .slots
        .iter()
        .chain(params.ft.slots.iter())
        .map(|s| s.data.len())
        .collect();
    let mut adam = AdamState::new(&sizes, &tcfg.optim);
    let weights = dlf_supervision_weights(dcfg);
    let mut trace = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let lr = tcfg.optim.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(tcfg.seed, TAG_SHUFFLE, 0, epoch));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &si in batch {
                let s = &samples[si];
                let mut g: Graph<f32> = Graph::new();
                let b = DlfBatch::new(dcfg, &s.target, &s.coords, &s.atlases)?;
                let out = dlf_forward_train(&mut g, dcfg, &mut params, &b)?;
                let loss = deep_supervision_loss(&mut g, &out.heads, &s.gt, &weights)?;
                let lv = g.value(loss)[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss became {lv} in epoch {epoch}"
                    )));
                }
                epoch_loss += lv;
                g.backward(loss)?;
                for (k, &t) in out.wv_slots.iter().enumerate() {
                    if let Some(gr) = g.grad(t) {
                        for (a, &v) in acc[k].iter_mut().zip(gr) {
                            *a += v as f64;
                        }
                    }
                }
                for (k, &t) in out.ft_slots.iter().enumerate() {
                    if let Some(gr) = g.grad(t) {
                        for (a, &v) in acc[w_off + k].iter_mut().zip(gr) {
                            *a += v as f64;
                        }
                    }
                }
            }
            let bn = batch.len() as f64;
            adam.begin_step();
            for (k, slot) in params.wv.slots.iter_mut().enumerate() {
                let grad: Vec<f32> = acc[k].iter().map(|&v| (v / bn) as f32).collect();
                adam.update(k, lr, &mut slot.data, &grad);
            }
            for (k, slot) in params.ft.slots.iter_mut().enumerate() {
                let grad: Vec<f32> = acc[w_off + k].iter().map(|&v| (v / bn) as f32).collect();
                adam.update(w_off + k, lr, &mut slot.data, &grad);
            }
            // the loss check alone can miss a blowup: rectifiers turn NaN
            // activations into zeros and the loss comes back finite
            check_finite(params.wv.slots.iter().chain(params.ft.slots.iter()), epoch)?;
        }
        trace.push(epoch_loss / samples.len() as f64);
    }
    Ok((params, trace))
}

fn check_finite<'a, T: crate::gridnet::Scalar + 'a>(
    slots: impl Iterator<Item = &'a crate::unet::Slot<T>>,
    epoch: usize,
) -> Result<()> {
    for s in slots {
        if s.data.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::Diverged(format!(
                "parameter {} became non-finite in epoch {epoch}",
                s.name
            )));
        }
    }
    Ok(())
}

/// Trains the baseline network on [t1, t2, x, y, z] patches; same loop
/// shape and determinism contract as the fusion trainer.
pub fn train_unet(
    samples: &[TrainSample],
    ucfg: &UNetConfig,
    tcfg: &TrainConfig,
) -> Result<(UNetParams<f32>, Vec<f64>)> {
    ucfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if ucfg.in_channels != 5 {
        return Err(Error::Config(format!(
            "baseline expects 5 input channels [t1, t2, x, y, z], config says {}",
            ucfg.in_channels
        )));
    }
    if samples[0].gt.label_count() != ucfg.out_channels {
        return Err(Error::Data(format!(
            "ground truth uses {} labels, model expects {}",
            samples[0].gt.label_count(),
            ucfg.out_channels
        )));
    }
    let mut params: UNetParams<f32> = build_unet(ucfg, tcfg.seed)?;
    let sizes: Vec<usize> = params.slots.iter().map(|s| s.data.len()).collect();
    let mut adam = AdamState::new(&sizes, &tcfg.optim);
    let mut trace = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let lr = tcfg.optim.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(tcfg.seed, TAG_SHUFFLE, 0, epoch));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &si in batch {
                let s = &samples[si];
                let (px, py, pz) = s.gt.dims();
                let x = Volume::stack(&[&s.target, &s.coords])?;
                let mut g: Graph<f32> = Graph::new();
                let xt = g.constant(&[5, pz, py, px], x.data().to_vec())?;
                let out = forward_train(&mut g, &mut params, xt)?;
                let loss = deep_supervision_loss(&mut g, &out.heads, &s.gt, &ucfg.ds_weights)?;
                let lv = g.value(loss)[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss became {lv} in epoch {epoch}"
                    )));
                }
                epoch_loss += lv;
                g.backward(loss)?;
                for (k, &t) in out.slot_tensors.iter().enumerate() {
                    if let Some(gr) = g.grad(t) {
                        for (a, &v) in acc[k].iter_mut().zip(gr) {
                            *a += v as f64;
                        }
                    }
                }
            }
            let bn = batch.len() as f64;
            adam.begin_step();
            for (k, slot) in params.slots.iter_mut().enumerate() {
                let grad: Vec<f32> = acc[k].iter().map(|&v| (v / bn) as f32).collect();
                adam.update(k, lr, &mut slot.data, &grad);
            }
            check_finite(params.slots.iter(), epoch)?;
        }
        trace.push(epoch_loss / samples.len() as f64);
    }
    Ok((params, trace))
}

/// Dense-grid fusion inference: per-patch logits averaged where patches
/// overlap, then argmax. The atlas count is free to differ from training.
pub fn infer_dlf(
    dcfg: &DlfConfig,
    params: &DlfParams<f32>,
    images: &Volume,
    atlases: &[AtlasBundle],
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<LabelMap> {
    dcfg.validate()?;
    if atlases.is_empty() {
        return Err(Error::Config("fusion inference needs at least one atlas".into()));
    }
    let dims = images.dims();
    for a in atlases {
        if a.images.dims() != dims {
            return Err(Error::Shape(format!(
                "atlas grid {:?} differs from target {:?}",
                a.images.dims(),
                dims
            )));
        }
    }
    let coords_full = coordinate_maps(dims);
    let centers = dense_grid_centers(dims, patch, stride)?;
    let logit_patches: Vec<Volume> = centers
        .par_iter()
        .map(|&center| {
            let spec = PatchSpec { center, size: patch };
            let t = znormalize(&extract_patch(images, &spec)?);
            let c = extract_patch(&coords_full, &spec)?;
            let ab = atlases
                .iter()
                .map(|a| {
                    AtlasBundle::new(
                        znormalize(&extract_patch(&a.images, &spec)?),
                        extract_label_patch(&a.labels, &spec)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, logits, _) = dlf_forward(dcfg, params, &t, &c, &ab)?;
            Ok(logits)
        })
        .collect::<Result<Vec<_>>>()?;
    argmax_labels(&stitch_patches(&logit_patches, &centers, dims)?)
}

/// Dense-grid baseline inference over [t1, t2, x, y, z] patches.
pub fn infer_unet(
    params: &UNetParams<f32>,
    images: &Volume,
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<LabelMap> {
    params.cfg.validate()?;
    if params.cfg.in_channels != 5 {
        return Err(Error::Config(format!(
            "baseline expects 5 input channels, config says {}",
            params.cfg.in_channels
        )));
    }
    let dims = images.dims();
    let coords_full = coordinate_maps(dims);
    let centers = dense_grid_centers(dims, patch, stride)?;
    let logit_patches: Vec<Volume> = centers
        .par_iter()
        .map(|&center| {
            let spec = PatchSpec { center, size: patch };
            let t = znormalize(&extract_patch(images, &spec)?);
            let c = extract_patch(&coords_full, &spec)?;
            let x = Volume::stack(&[&t, &c])?;
            let (px, py, pz) = patch;
            let mut g: Graph<f32> = Graph::new();
            let xt = g.constant(&[5, pz, py, px], x.data().to_vec())?;
            let y = forward_eval(&mut g, params, xt)?;
            Volume::new(
                params.cfg.out_channels,
                patch,
                images.spacing(),
                g.value(y).to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    argmax_labels(&stitch_patches(&logit_patches, &centers, dims)?)
}
