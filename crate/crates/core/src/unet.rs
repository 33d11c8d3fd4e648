//! Configurable 3-D U-Net builder and forward pass.
//!
//! One recipe serves three uses: the weighted-voting subnet (3 levels, 7
//! input channels), the fine-tuning subnet (deep supervision enabled), and
//! the plain segmentation baseline. Per encoder level: two rounds of
//! conv(3x3x3, pad 1) -> batchnorm -> relu, then 2x2x2 max pooling. The last
//! pool's output is the bottom block. Per decoder level: transposed conv
//! (doubles dims), concatenation with the same-level encoder output, then
//! two conv-bn-relu rounds. A 1x1x1 convolution maps to output channels;
//! with deep supervision, extra 1x1x1 heads tap each coarser decoder output
//! and finally the bottom block.
//!
//! Feature width doubles per level starting at `base_features`. Weights are
//! He fan-in initialized from a seeded generator, biases start at zero, and
//! batchnorm starts as the identity, so builds are bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gridnet::checkpoint::{self, ParamEntry};
use crate::gridnet::{Graph, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Deep-supervision loss weights from the published training setup.
pub const DS_WEIGHTS_DEFAULT: [f64; 4] = [1.0, 0.5, 0.2, 0.1];

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub levels: usize,
    pub base_features: usize,
    pub deep_supervision: bool,
    /// Per-head loss weights, index 0 = full-resolution head. Ignored when
    /// `deep_supervision` is off.
    pub ds_weights: Vec<f64>,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_features == 0 {
            return Err(Error::Config("base_features must be >= 1".into()));
        }
        if self.deep_supervision {
            if self.ds_weights.is_empty() {
                return Err(Error::Config(
                    "deep supervision enabled but ds_weights is empty".into(),
                ));
            }
            if self.ds_weights.len() > self.levels + 1 {
                return Err(Error::Config(format!(
                    "{} supervision heads but only {} scales exist ({} decoder outputs + bottom)",
                    self.ds_weights.len(),
                    self.levels + 1,
                    self.levels
                )));
            }
            if self.ds_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::Config(format!(
                    "ds_weights must be positive and finite, got {:?}",
                    self.ds_weights
                )));
            }
        }
        Ok(())
    }

    /// Feature width at encoder/decoder level `i`.
    pub fn features(&self, i: usize) -> usize {
        self.base_features << i
    }

    /// Number of output heads the forward pass produces in training mode.
    pub fn head_count(&self) -> usize {
        if self.deep_supervision {
            self.ds_weights.len()
        } else {
            1
        }
    }

    /// Flat `key=value` form, with every key prefixed.
    pub fn to_pairs(&self, prefix: &str) -> Vec<(String, String)> {
        let ds = self
            .ds_weights
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            (format!("{prefix}in_channels"), self.in_channels.to_string()),
            (format!("{prefix}out_channels"), self.out_channels.to_string()),
            (format!("{prefix}levels"), self.levels.to_string()),
            (
                format!("{prefix}base_features"),
                self.base_features.to_string(),
            ),
            (
                format!("{prefix}deep_supervision"),
                self.deep_supervision.to_string(),
            ),
            (format!("{prefix}ds_weights"), ds),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)], prefix: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            let full = format!("{prefix}{key}");
            pairs
                .iter()
                .find(|(k, _)| *k == full)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("missing config key {full}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {prefix}{key}")))
        };
        let ds_raw = get("ds_weights")?;
        let ds_weights = if ds_raw.is_empty() {
            Vec::new()
        } else {
            ds_raw
                .split(',')
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| Error::Format(format!("bad ds_weights entry {p:?}")))
                })
                .collect::<Result<Vec<f64>>>()?
        };
        let cfg = UNetConfig {
            in_channels: num("in_channels")?,
            out_channels: num("out_channels")?,
            levels: num("levels")?,
            base_features: num("base_features")?,
            deep_supervision: get("deep_supervision")?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {prefix}deep_supervision")))?,
            ds_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One trainable parameter block.
#[derive(Clone, Debug)]
pub struct Slot<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// One non-trainable state block (batchnorm running statistics).
#[derive(Clone, Debug)]
pub struct BufferSlot<T> {
    pub name: String,
    pub data: Vec<T>,
}

/// Parameter set plus running statistics. Slot order is fixed by the build
/// recipe; the forward pass consumes them in the same order.
#[derive(Clone, Debug)]
pub struct UNetParams<T: Scalar> {
    pub cfg: UNetConfig,
    pub slots: Vec<Slot<T>>,
    pub buffers: Vec<BufferSlot<T>>,
}

impl<T: Scalar> UNetParams<T> {
    /// Total trainable element count.
    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            cfg: self.cfg.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: s.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| BufferSlot {
                    name: b.name.clone(),
                    data: b.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Slots then buffers as checkpoint entries, names prefixed.
    pub fn entries(&self, prefix: &str) -> Vec<ParamEntry> {
        let mut out = Vec::with_capacity(self.slots.len() + self.buffers.len());
        for s in &self.slots {
            out.push(ParamEntry::new(
                format!("{prefix}{}", s.name),
                s.shape.clone(),
                s.data.iter().map(|v| v.as_f64() as f32).collect(),
            ));
        }
        for b in &self.buffers {
            out.push(ParamEntry::new(
                format!("{prefix}{}", b.name),
                vec![b.data.len()],
                b.data.iter().map(|v| v.as_f64() as f32).collect(),
            ));
        }
        out
    }

    /// Rebuilds a parameter set from checkpoint entries. The entries must
    /// contain exactly the recipe's slots and buffers under `prefix`, in
    /// build order.
    pub fn from_entries(cfg: &UNetConfig, entries: &[ParamEntry], prefix: &str) -> Result<Self> {
        let mut params: UNetParams<T> = build_unet(cfg, 0)?;
        let expected = params.slots.len() + params.buffers.len();
        if entries.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} entries under {prefix:?}, recipe wants {expected}",
                entries.len()
            )));
        }
        for (i, slot) in params.slots.iter_mut().enumerate() {
            let e = &entries[i];
            let want = format!("{prefix}{}", slot.name);
            if e.name != want || e.shape != slot.shape {
                return Err(Error::Format(format!(
                    "checkpoint entry {i} is {} {:?}, recipe wants {want} {:?}",
                    e.name, e.shape, slot.shape
                )));
            }
            slot.data = e.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        }
        let n = params.slots.len();
        for (i, buf) in params.buffers.iter_mut().enumerate() {
            let e = &entries[n + i];
            let want = format!("{prefix}{}", buf.name);
            if e.name != want || e.data.len() != buf.data.len() {
                return Err(Error::Format(format!(
                    "checkpoint entry {} is {}, recipe wants {want}",
                    n + i,
                    e.name
                )));
            }
            buf.data = e.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        }
        Ok(params)
    }
}

struct Builder<T> {
    rng: ChaCha8Rng,
    slots: Vec<Slot<T>>,
    buffers: Vec<BufferSlot<T>>,
}

impl<T: Scalar> Builder<T> {
    /// He fan-in initialization: N(0, sqrt(2 / fan_in)) drawn in f64 so the
    /// stream of values is the same for every scalar type.
    fn he(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        (0..n)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect()
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let w = self.he(cout * cin * k * k * k, cin * k * k * k);
        self.slots.push(Slot {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k, k],
            data: w,
        });
        self.slots.push(Slot {
            name: format!("{name}.b"),
            shape: vec![cout],
            data: vec![T::zero(); cout],
        });
    }

    fn tconv(&mut self, name: &str, cin: usize, cout: usize) {
        let w = self.he(cin * cout * 27, cin * 27);
        self.slots.push(Slot {
            name: format!("{name}.w"),
            shape: vec![cin, cout, 3, 3, 3],
            data: w,
        });
        self.slots.push(Slot {
            name: format!("{name}.b"),
            shape: vec![cout],
            data: vec![T::zero(); cout],
        });
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.slots.push(Slot {
            name: format!("{name}.g"),
            shape: vec![c],
            data: vec![T::one(); c],
        });
        self.slots.push(Slot {
            name: format!("{name}.b"),
            shape: vec![c],
            data: vec![T::zero(); c],
        });
        self.buffers.push(BufferSlot {
            name: format!("{name}.rm"),
            data: vec![T::zero(); c],
        });
        self.buffers.push(BufferSlot {
            name: format!("{name}.rv"),
            data: vec![T::one(); c],
        });
    }
}

/// Builds a freshly initialized parameter set. Same config and seed give
/// bit-identical parameters, for any [`Scalar`] type.
pub fn build_unet<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<UNetParams<T>> {
    cfg.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        slots: Vec::new(),
        buffers: Vec::new(),
    };
    let mut cin = cfg.in_channels;
    for i in 0..cfg.levels {
        let f = cfg.features(i);
        b.conv(&format!("enc{i}.conv_a"), f, cin, 3);
        b.bn(&format!("enc{i}.bn_a"), f);
        b.conv(&format!("enc{i}.conv_b"), f, f, 3);
        b.bn(&format!("enc{i}.bn_b"), f);
        cin = f;
    }
    for j in (0..cfg.levels).rev() {
        let f = cfg.features(j);
        let up_in = if j + 1 == cfg.levels {
            cfg.features(cfg.levels - 1)
        } else {
            cfg.features(j + 1)
        };
        b.tconv(&format!("dec{j}.up"), up_in, f);
        b.conv(&format!("dec{j}.conv_a"), f, 2 * f, 3);
        b.bn(&format!("dec{j}.bn_a"), f);
        b.conv(&format!("dec{j}.conv_b"), f, f, 3);
        b.bn(&format!("dec{j}.bn_b"), f);
    }
    b.conv("head", cfg.out_channels, cfg.features(0), 1);
    if cfg.deep_supervision {
        for k in 1..cfg.ds_weights.len() {
            let src = if k < cfg.levels {
                cfg.features(k)
            } else {
                cfg.features(cfg.levels - 1)
            };
            b.conv(&format!("aux{k}"), cfg.out_channels, src, 1);
        }
    }
    Ok(UNetParams {
        cfg: cfg.clone(),
        slots: b.slots,
        buffers: b.buffers,
    })
}

/// Result of a training-mode forward pass.
pub struct ForwardOut {
    /// `heads[k]` is the logits tensor at scale 1/2^k; `heads[0]` is full
    /// resolution. Length 1 without deep supervision.
    pub heads: Vec<Tensor>,
    /// Graph leaf for each slot, aligned with `params.slots`. Gradients are
    /// read from these after `backward`.
    pub slot_tensors: Vec<Tensor>,
}

/// Sequential reader over slots; names double as structural assertions.
struct SlotCursor<'a, T> {
    slots: &'a [Slot<T>],
    i: usize,
}

impl<'a, T: Scalar> SlotCursor<'a, T> {
    fn next(&mut self, name: &str) -> Result<&'a Slot<T>> {
        let s = self.slots.get(self.i).ok_or_else(|| {
            Error::Graph(format!("parameter walk ran past the end looking for {name}"))
        })?;
        if s.name != name {
            return Err(Error::Graph(format!(
                "parameter walk out of step: found {}, expected {name}",
                s.name
            )));
        }
        self.i += 1;
        Ok(s)
    }
}

enum BnMode<'a, T> {
    Train(&'a mut [BufferSlot<T>]),
    Eval(&'a [BufferSlot<T>]),
}

struct BnCursor<'a, T: Scalar> {
    mode: BnMode<'a, T>,
    i: usize,
}

impl<'a, T: Scalar> BnCursor<'a, T> {
    fn apply(
        &mut self,
        g: &mut Graph<T>,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        name: &str,
    ) -> Result<Tensor> {
        let i = self.i;
        self.i += 2;
        let check = |b: &BufferSlot<T>, suffix: &str| -> Result<()> {
            let want = format!("{name}.{suffix}");
            if b.name != want {
                return Err(Error::Graph(format!(
                    "buffer walk out of step: found {}, expected {want}",
                    b.name
                )));
            }
            Ok(())
        };
        match &mut self.mode {
            BnMode::Train(bufs) => {
                let (head, tail) = bufs.split_at_mut(i + 1);
                let rm = &mut head[i];
                let rv = &mut tail[0];
                check(rm, "rm")?;
                check(rv, "rv")?;
                g.batchnorm_train(
                    x,
                    gamma,
                    beta,
                    &mut rm.data,
                    &mut rv.data,
                    BN_MOMENTUM,
                    BN_EPS,
                )
            }
            BnMode::Eval(bufs) => {
                let (rm, rv) = (&bufs[i], &bufs[i + 1]);
                check(rm, "rm")?;
                check(rv, "rv")?;
                g.batchnorm_eval(x, gamma, beta, &rm.data, &rv.data, BN_EPS)
            }
        }
    }
}

struct Walk<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    slots: SlotCursor<'a, T>,
    bn: BnCursor<'a, T>,
    needs_grad: bool,
    bound: Option<&'a [Tensor]>,
    slot_tensors: Vec<Tensor>,
}

impl<'a, T: Scalar> Walk<'a, T> {
    fn bind(&mut self, name: &str) -> Result<Tensor> {
        let s = self.slots.next(name)?;
        let t = match self.bound {
            Some(b) => *b.get(self.slot_tensors.len()).ok_or_else(|| {
                Error::Graph(format!("bound tensor list ends before {name}"))
            })?,
            None => self.g.leaf(&s.shape, s.data.clone(), self.needs_grad)?,
        };
        self.slot_tensors.push(t);
        Ok(t)
    }

    fn conv_bn_relu(&mut self, name: &str, bn_name: &str, x: Tensor) -> Result<Tensor> {
        let w = self.bind(&format!("{name}.w"))?;
        let b = self.bind(&format!("{name}.b"))?;
        let y = self.g.conv3d(x, w, b, 1)?;
        let ga = self.bind(&format!("{bn_name}.g"))?;
        let be = self.bind(&format!("{bn_name}.b"))?;
        let y = self.bn.apply(self.g, y, ga, be, bn_name)?;
        Ok(self.g.relu(y))
    }

    fn head(&mut self, name: &str, x: Tensor) -> Result<Tensor> {
        let w = self.bind(&format!("{name}.w"))?;
        let b = self.bind(&format!("{name}.b"))?;
        self.g.conv3d(x, w, b, 1)
    }
}

fn run_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    slots: &[Slot<T>],
    mode: BnMode<'_, T>,
    x: Tensor,
    needs_grad: bool,
    bound: Option<&[Tensor]>,
) -> Result<ForwardOut> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[0] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input must be [{}, z, y, x], got {xs:?}",
            cfg.in_channels
        )));
    }
    let div = 1usize << cfg.levels;
    if xs[1..].iter().any(|&d| d % div != 0 || d / div == 0) {
        return Err(Error::Shape(format!(
            "input dims {}x{}x{} must be positive multiples of {div} for {} levels",
            xs[3], xs[2], xs[1], cfg.levels
        )));
    }
    let mut w = Walk {
        g,
        slots: SlotCursor { slots, i: 0 },
        bn: BnCursor { mode, i: 0 },
        needs_grad,
        bound,
        slot_tensors: Vec::with_capacity(slots.len()),
    };
    let mut cur = x;
    let mut skips = Vec::with_capacity(cfg.levels);
    for i in 0..cfg.levels {
        cur = w.conv_bn_relu(&format!("enc{i}.conv_a"), &format!("enc{i}.bn_a"), cur)?;
        cur = w.conv_bn_relu(&format!("enc{i}.conv_b"), &format!("enc{i}.bn_b"), cur)?;
        skips.push(cur);
        cur = w.g.maxpool3d(cur)?;
    }
    let bottom = cur;
    let mut dec = vec![bottom; cfg.levels];
    for j in (0..cfg.levels).rev() {
        let up_w = w.bind(&format!("dec{j}.up.w"))?;
        let up_b = w.bind(&format!("dec{j}.up.b"))?;
        cur = w.g.conv_transpose3d(cur, up_w, up_b)?;
        cur = w.g.concat_channels(&[cur, skips[j]])?;
        cur = w.conv_bn_relu(&format!("dec{j}.conv_a"), &format!("dec{j}.bn_a"), cur)?;
        cur = w.conv_bn_relu(&format!("dec{j}.conv_b"), &format!("dec{j}.bn_b"), cur)?;
        dec[j] = cur;
    }
    let mut heads = vec![w.head("head", dec[0])?];
    if cfg.deep_supervision {
        for k in 1..cfg.ds_weights.len() {
            let src = if k < cfg.levels { dec[k] } else { bottom };
            heads.push(w.head(&format!("aux{k}"), src)?);
        }
    }
    Ok(ForwardOut {
        heads,
        slot_tensors: w.slot_tensors,
    })
}

/// Training-mode forward: batchnorm uses batch statistics and updates the
/// running buffers in place; parameters are bound as gradient targets; all
/// supervision heads are produced.
pub fn forward_train<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut UNetParams<T>,
    x: Tensor,
) -> Result<ForwardOut> {
    let UNetParams {
        cfg,
        slots,
        buffers,
    } = params;
    run_forward(g, cfg, slots, BnMode::Train(buffers), x, true, None)
}

/// Creates one gradient-bearing graph leaf per parameter slot, in slot
/// order. Passing the result to `forward_train_bound` shares a parameter
/// set across several forward passes in one graph, so gradients from every
/// pass accumulate onto the same leaves.
pub fn bind_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &UNetParams<T>,
    needs_grad: bool,
) -> Result<Vec<Tensor>> {
    params
        .slots
        .iter()
        .map(|s| g.leaf(&s.shape, s.data.clone(), needs_grad))
        .collect()
}

/// Training-mode forward over previously bound parameter leaves (see
/// `bind_params`). Batchnorm running buffers update once per call, so a
/// multi-pass step advances them once per pass.
pub fn forward_train_bound<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut UNetParams<T>,
    bound: &[Tensor],
    x: Tensor,
) -> Result<ForwardOut> {
    let UNetParams {
        cfg,
        slots,
        buffers,
    } = params;
    run_forward(g, cfg, slots, BnMode::Train(buffers), x, true, Some(bound))
}

/// Evaluation-mode forward: batchnorm normalizes with the stored running
/// statistics, nothing requires gradients, and only the full-resolution
/// logits are returned.
pub fn forward_eval<T: Scalar>(
    g: &mut Graph<T>,
    params: &UNetParams<T>,
    x: Tensor,
) -> Result<Tensor> {
    let out = run_forward(
        g,
        &params.cfg,
        &params.slots,
        BnMode::Eval(&params.buffers),
        x,
        false,
        None,
    )?;
    Ok(out.heads[0])
}

/// Writes config, parameters, and batchnorm buffers for a standalone
/// network (no name prefix, unlike the fusion model's two subnets).
pub fn save_unet_checkpoint(
    dir: impl AsRef<std::path::Path>,
    params: &UNetParams<f32>,
) -> Result<()> {
    let dir = dir.as_ref();
    checkpoint::save_params(dir, &params.entries(""))?;
    checkpoint::save_config(&dir.join("config.txt"), &params.cfg.to_pairs(""))
}

pub fn load_unet_checkpoint(dir: impl AsRef<std::path::Path>) -> Result<UNetParams<f32>> {
    let dir = dir.as_ref();
    let cfg = UNetConfig::from_pairs(&checkpoint::load_config(&dir.join("config.txt"))?, "")?;
    UNetParams::from_entries(&cfg, &checkpoint::load_params(dir)?, "")
}
