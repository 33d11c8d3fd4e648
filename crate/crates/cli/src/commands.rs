//! One function per subcommand. Every artifact-producing command writes a
//! `run.txt` manifest next to its outputs: the command, tool and format
//! versions, worker count, arguments, and the full effective configuration
//! including defaulted keys. Nothing in the manifest depends on time, so
//! identical runs produce identical bytes.

use std::path::Path;

use dlf_core::classicfusion::{jlf, majority_vote, svwv, FusionParams};
use dlf_core::dlf::{build_dlf, load_dlf_checkpoint, save_dlf_checkpoint, DlfConfig};
use dlf_core::evalkit::{evaluate, paired_ttest};
use dlf_core::gridnet::checkpoint;
use dlf_core::synthlab::{make_dataset, PhantomConfig};
use dlf_core::trainer::{
    augment_dataset, infer_dlf, infer_unet, load_dataset, sample_training_patches, train_dlf,
    train_unet, Subject, TrainConfig,
};
use dlf_core::unet::{load_unet_checkpoint, save_unet_checkpoint, UNetConfig, DS_WEIGHTS_DEFAULT};
use dlf_core::volcore::{read_labelmap, write_labelmap, AtlasBundle, DLFV_VERSION};

use crate::config::{triple_string, RunConfig};
use crate::{CliError, DropPart, Method, ModelKind};

type Effective = Vec<(String, String)>;

fn manifest(
    dir: &Path,
    command: &str,
    workers: usize,
    args: &[(&str, String)],
    effective: &Effective,
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("command={command}\n"));
    text.push_str(&format!("tool=dlf {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("format=dlfv {DLFV_VERSION}\n"));
    text.push_str(&format!("workers={workers}\n"));
    for (k, v) in args {
        text.push_str(&format!("arg.{k}={v}\n"));
    }
    for (k, v) in effective {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(dir.join("run.txt"), text)
        .map_err(|e| CliError::Runtime(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn phantom_from(rc: &RunConfig) -> Result<(PhantomConfig, Effective), CliError> {
    let dims = rc.triple_or("phantom.dims", (16, 16, 16))?;
    let labels = rc.usize_or("phantom.labels", 3)?;
    let subjects = rc.usize_or("phantom.subjects", 5)?;
    let misalign = rc.f64_or("phantom.misalign_sigma", 1.5)?;
    let noise = rc.f64_or("phantom.noise_sigma", 0.05)?;
    let seed = rc.u64_or("phantom.seed", 7)?;
    let effective = vec![
        ("phantom.dims".into(), triple_string(dims)),
        ("phantom.labels".into(), labels.to_string()),
        ("phantom.misalign_sigma".into(), misalign.to_string()),
        ("phantom.noise_sigma".into(), noise.to_string()),
        ("phantom.seed".into(), seed.to_string()),
        ("phantom.subjects".into(), subjects.to_string()),
    ];
    Ok((
        PhantomConfig::preset(dims, labels, subjects, misalign, noise, seed),
        effective,
    ))
}

pub fn synth(config: Option<&Path>, out: &Path, workers: usize) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let (pcfg, effective) = phantom_from(&rc)?;
    ensure_dir(out)?;
    make_dataset(&pcfg, out)?;
    manifest(
        out,
        "synth",
        workers,
        &[("out", out.display().to_string())],
        &effective,
    )?;
    println!("wrote {} subjects under {}", pcfg.n_subjects, out.display());
    Ok(())
}

/// Splits a dataset into the named target and atlas bundles of everyone
/// else, preserving manifest order.
fn split_target(
    subjects: Vec<Subject>,
    target: &str,
) -> Result<(Subject, Vec<AtlasBundle>), CliError> {
    let Some(pos) = subjects.iter().position(|s| s.id == target) else {
        return Err(CliError::Runtime(format!(
            "no subject {target:?} in the dataset manifest"
        )));
    };
    let mut atlases = Vec::with_capacity(subjects.len() - 1);
    let mut picked = None;
    for (i, s) in subjects.into_iter().enumerate() {
        if i == pos {
            picked = Some(s);
        } else {
            atlases.push(AtlasBundle::new(s.images, s.labels)?);
        }
    }
    if atlases.is_empty() {
        return Err(CliError::Runtime(
            "dataset has no atlases besides the target".into(),
        ));
    }
    Ok((picked.expect("position was found"), atlases))
}

fn fusion_params_from(rc: &RunConfig, base: FusionParams) -> Result<(FusionParams, Effective), CliError> {
    let p = FusionParams {
        beta: rc.f64_or("fusion.beta", base.beta)?,
        patch_radius: rc.triple_or("fusion.patch_radius", base.patch_radius)?,
        search_radius: rc.triple_or("fusion.search_radius", base.search_radius)?,
        ridge: rc.f64_or("fusion.ridge", base.ridge)?,
    };
    let effective = vec![
        ("fusion.beta".into(), p.beta.to_string()),
        ("fusion.patch_radius".into(), triple_string(p.patch_radius)),
        ("fusion.ridge".into(), p.ridge.to_string()),
        ("fusion.search_radius".into(), triple_string(p.search_radius)),
    ];
    Ok((p, effective))
}

pub fn fuse(
    method: Method,
    data: &Path,
    target: &str,
    config: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let subjects = load_dataset(data)?;
    let (t, atlases) = split_target(subjects, target)?;
    let (fused, effective) = match method {
        Method::Mv => {
            let refs: Vec<&dlf_core::volcore::LabelMap> =
                atlases.iter().map(|a| &a.labels).collect();
            (majority_vote(&refs)?, Vec::new())
        }
        Method::Svwv => {
            let (p, eff) = fusion_params_from(&rc, FusionParams::svwv_preset())?;
            (svwv(&t.images, &atlases, &p)?.labels, eff)
        }
        Method::Jlf => {
            let (p, eff) = fusion_params_from(&rc, FusionParams::jlf_preset())?;
            (jlf(&t.images, &atlases, &p)?.labels, eff)
        }
    };
    ensure_dir(out)?;
    write_labelmap(&fused, out.join("seg.dlfv"))?;
    manifest(
        out,
        "fuse",
        workers,
        &[
            ("data", data.display().to_string()),
            ("method", format!("{method:?}").to_lowercase()),
            ("out", out.display().to_string()),
            ("target", target.to_string()),
        ],
        &effective,
    )?;
    println!("wrote {}", out.join("seg.dlfv").display());
    Ok(())
}

struct TrainSettings {
    tcfg: TrainConfig,
    levels: usize,
    base: usize,
    augment: bool,
    tau: f64,
    effective: Effective,
}

fn train_settings_from(rc: &RunConfig, base_cfg: TrainConfig) -> Result<TrainSettings, CliError> {
    let mut tcfg = base_cfg;
    tcfg.patch_size = rc.triple_or("train.patch", tcfg.patch_size)?;
    tcfg.fg_patches = rc.usize_or("train.fg_patches", tcfg.fg_patches)?;
    tcfg.bg_patches = rc.usize_or("train.bg_patches", tcfg.bg_patches)?;
    tcfg.n_atlas_draw = rc.usize_or("train.atlas_draw", tcfg.n_atlas_draw)?;
    tcfg.epochs = rc.usize_or("train.epochs", tcfg.epochs)?;
    tcfg.batch_size = rc.usize_or("train.batch", tcfg.batch_size)?;
    tcfg.seed = rc.u64_or("train.seed", tcfg.seed)?;
    tcfg.optim.lr0 = rc.f64_or("train.lr0", tcfg.optim.lr0)?;
    let levels = rc.usize_or("train.levels", 2)?;
    let base = rc.usize_or("train.base", 4)?;
    let augment = rc.bool_or("train.augment", false)?;
    let tau = rc.f64_or("fusion.tau", dlf_core::dlf::MASK_THRESHOLD_DEFAULT)?;
    let effective = vec![
        ("fusion.tau".into(), tau.to_string()),
        ("train.atlas_draw".into(), tcfg.n_atlas_draw.to_string()),
        ("train.augment".into(), augment.to_string()),
        ("train.base".into(), base.to_string()),
        ("train.batch".into(), tcfg.batch_size.to_string()),
        ("train.bg_patches".into(), tcfg.bg_patches.to_string()),
        ("train.epochs".into(), tcfg.epochs.to_string()),
        ("train.fg_patches".into(), tcfg.fg_patches.to_string()),
        ("train.levels".into(), levels.to_string()),
        ("train.lr0".into(), tcfg.optim.lr0.to_string()),
        ("train.patch".into(), triple_string(tcfg.patch_size)),
        ("train.seed".into(), tcfg.seed.to_string()),
    ];
    Ok(TrainSettings {
        tcfg,
        levels,
        base,
        augment,
        tau,
        effective,
    })
}

pub fn train(
    model: ModelKind,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let subjects = load_dataset(data)?;
    let label_count = subjects
        .first()
        .map(|s| s.labels.label_count())
        .ok_or_else(|| CliError::Runtime("dataset is empty".into()))?;
    let base_cfg = match model {
        ModelKind::Dlf => TrainConfig::dlf_preset(),
        ModelKind::Unet => TrainConfig::unet_preset(),
    };
    let s = train_settings_from(&rc, base_cfg)?;
    let mut samples = sample_training_patches(&subjects, &s.tcfg)?;
    if s.augment {
        samples = augment_dataset(&samples, &s.tcfg.elastic, s.tcfg.seed)?;
    }
    ensure_dir(out)?;
    let trace = match model {
        ModelKind::Dlf => {
            let mut dcfg = DlfConfig::with_shape(label_count, s.levels, s.levels, s.base);
            dcfg.mask_threshold = s.tau;
            let (params, trace) = train_dlf(&samples, &dcfg, &s.tcfg)?;
            save_dlf_checkpoint(out, &dcfg, &params)?;
            trace
        }
        ModelKind::Unet => {
            let ds_len = DS_WEIGHTS_DEFAULT.len().min(s.levels + 1);
            let ucfg = UNetConfig {
                in_channels: 5,
                out_channels: label_count,
                levels: s.levels,
                base_features: s.base,
                deep_supervision: true,
                ds_weights: DS_WEIGHTS_DEFAULT[..ds_len].to_vec(),
            };
            let (params, trace) = train_unet(&samples, &ucfg, &s.tcfg)?;
            save_unet_checkpoint(out, &params)?;
            trace
        }
    };
    let mut loss_text = String::new();
    for (epoch, loss) in trace.iter().enumerate() {
        println!("epoch {} loss {loss}", epoch + 1);
        loss_text.push_str(&format!("{loss}\n"));
    }
    std::fs::write(out.join("loss.txt"), loss_text)
        .map_err(|e| CliError::Runtime(format!("cannot write loss trace: {e}")))?;
    manifest(
        out,
        "train",
        workers,
        &[
            ("data", data.display().to_string()),
            ("model", format!("{model:?}").to_lowercase()),
            ("out", out.display().to_string()),
        ],
        &s.effective,
    )?;
    println!("wrote checkpoint under {}", out.display());
    Ok(())
}

fn patch_and_stride(
    rc: &RunConfig,
) -> Result<((usize, usize, usize), (usize, usize, usize), Effective), CliError> {
    let patch = rc.triple_or("train.patch", (24, 24, 24))?;
    let default_stride = (
        (patch.0 / 2).max(1),
        (patch.1 / 2).max(1),
        (patch.2 / 2).max(1),
    );
    let stride = rc.triple_or("train.stride", default_stride)?;
    let effective = vec![
        ("train.patch".into(), triple_string(patch)),
        ("train.stride".into(), triple_string(stride)),
    ];
    Ok((patch, stride, effective))
}

/// A checkpoint's config names `label_count` only for the fusion model.
fn checkpoint_is_dlf(model: &Path) -> Result<bool, CliError> {
    let pairs = checkpoint::load_config(&model.join("config.txt"))?;
    Ok(pairs.iter().any(|(k, _)| k == "label_count"))
}

pub fn infer(
    model: &Path,
    data: &Path,
    target: &str,
    config: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let (patch, stride, mut effective) = patch_and_stride(&rc)?;
    let subjects = load_dataset(data)?;
    let (t, atlases) = split_target(subjects, target)?;
    let lm = if checkpoint_is_dlf(model)? {
        let (mut dcfg, params) = load_dlf_checkpoint(model)?;
        dcfg.mask_threshold = rc.f64_or("fusion.tau", dcfg.mask_threshold)?;
        effective.insert(0, ("fusion.tau".into(), dcfg.mask_threshold.to_string()));
        infer_dlf(&dcfg, &params, &t.images, &atlases, patch, stride)?
    } else {
        let params = load_unet_checkpoint(model)?;
        infer_unet(&params, &t.images, patch, stride)?
    };
    ensure_dir(out)?;
    write_labelmap(&lm, out.join("seg.dlfv"))?;
    manifest(
        out,
        "infer",
        workers,
        &[
            ("data", data.display().to_string()),
            ("model", model.display().to_string()),
            ("out", out.display().to_string()),
            ("target", target.to_string()),
        ],
        &effective,
    )?;
    println!("wrote {}", out.join("seg.dlfv").display());
    Ok(())
}

pub fn ablate(
    model: Option<&Path>,
    drops: &[DropPart],
    data: &Path,
    target: &str,
    config: Option<&Path>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    if drops.is_empty() {
        return Err(CliError::Usage(
            "ablate needs at least one --drop (wv, ft or mask)".into(),
        ));
    }
    let rc = RunConfig::load(config)?;
    let (patch, stride, mut effective) = patch_and_stride(&rc)?;
    let subjects = load_dataset(data)?;
    let label_count = subjects
        .first()
        .map(|s| s.labels.label_count())
        .ok_or_else(|| CliError::Runtime("dataset is empty".into()))?;
    let (t, atlases) = split_target(subjects, target)?;

    let drop_wv = drops.contains(&DropPart::Wv);
    let drop_ft = drops.contains(&DropPart::Ft);
    let (mut dcfg, params) = match model {
        Some(dir) => load_dlf_checkpoint(dir)?,
        None => {
            // with both subnets dropped no weights are ever evaluated, so
            // a freshly built parameter set is just a placeholder
            if !(drop_wv && drop_ft) {
                return Err(CliError::Usage(
                    "ablate without --model needs both wv and ft dropped".into(),
                ));
            }
            let cfg = DlfConfig::with_shape(label_count, 1, 1, 1);
            let params = build_dlf(&cfg, 0)?;
            (cfg, params)
        }
    };
    dcfg.ablate_wv |= drop_wv;
    dcfg.ablate_ft |= drop_ft;
    dcfg.ablate_mask |= drops.contains(&DropPart::Mask);
    dcfg.mask_threshold = rc.f64_or("fusion.tau", dcfg.mask_threshold)?;
    effective.insert(0, ("fusion.tau".into(), dcfg.mask_threshold.to_string()));

    let lm = infer_dlf(&dcfg, &params, &t.images, &atlases, patch, stride)?;
    ensure_dir(out)?;
    write_labelmap(&lm, out.join("seg.dlfv"))?;
    let mut drop_names: Vec<&str> = drops
        .iter()
        .map(|d| match d {
            DropPart::Wv => "wv",
            DropPart::Ft => "ft",
            DropPart::Mask => "mask",
        })
        .collect();
    drop_names.sort_unstable();
    drop_names.dedup();
    manifest(
        out,
        "ablate",
        workers,
        &[
            ("data", data.display().to_string()),
            ("drop", drop_names.join(",")),
            (
                "model",
                model.map_or("none".into(), |m| m.display().to_string()),
            ),
            ("out", out.display().to_string()),
            ("target", target.to_string()),
        ],
        &effective,
    )?;
    println!("wrote {}", out.join("seg.dlfv").display());
    Ok(())
}

pub fn eval(
    pred: &Path,
    reference: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    workers: usize,
) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let p = read_labelmap(pred)?;
    let r = read_labelmap(reference)?;
    let label_count = p.label_count().max(r.label_count());
    let foreground: Vec<u32> = (1..label_count as u32).collect();
    let gdsc_labels = rc.labels_or("eval.labels", foreground)?;
    let report = evaluate(&p, &r, [1.0, 1.0, 1.0], &gdsc_labels)?;

    let mut lines = String::new();
    for (l, d) in report.dsc.iter().enumerate() {
        lines.push_str(&format!("dsc.{l}={d:.6}\n"));
    }
    let set: Vec<String> = gdsc_labels.iter().map(|l| l.to_string()).collect();
    lines.push_str(&format!("gdsc={:.6}\n", report.gdsc));
    lines.push_str(&format!("gdsc_labels={}\n", set.join(",")));
    for (l, v) in report.volumes_mm3.iter().enumerate() {
        lines.push_str(&format!("volume_mm3.{l}={v:.3}\n"));
    }
    print!("{lines}");
    if let Some(dir) = out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("metrics.txt"), &lines)
            .map_err(|e| CliError::Runtime(format!("cannot write metrics: {e}")))?;
        manifest(
            dir,
            "eval",
            workers,
            &[
                ("out", dir.display().to_string()),
                ("pred", pred.display().to_string()),
                ("ref", reference.display().to_string()),
            ],
            &vec![("eval.labels".into(), set.join(","))],
        )?;
    }
    Ok(())
}

/// One score per line; blank lines and `#` comments are skipped.
fn read_scores(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse().map_err(|_| {
            CliError::Runtime(format!(
                "{} line {}: not a number: {raw:?}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    Ok(out)
}

pub fn ttest(a: &Path, b: &Path) -> Result<(), CliError> {
    let x = read_scores(a)?;
    let y = read_scores(b)?;
    let r = paired_ttest(&x, &y)?;
    println!("n={}", x.len());
    println!("t={}", r.t);
    println!("p={}", r.p);
    println!("degenerate={}", r.degenerate);
    Ok(())
}
