//! Central finite-difference certification harness shared by the gradient
//! suite and the acceptance runner. Everything runs in f64.

use dlf_core::dlf::{
    build_dlf, deep_supervision_loss, dlf_forward_train, DlfBatch, DlfConfig, DlfParams,
};
use dlf_core::gridnet::{Graph, Tensor};
use dlf_core::unet::{build_unet, forward_train, UNetConfig, UNetParams};
use dlf_core::volcore::{coordinate_maps, AtlasBundle, LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub struct OpResult {
    pub name: &'static str,
    pub max_rel: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central-difference check of `grad` against `eval` over `values`,
/// visiting every `stride`-th element. A coordinate that misses the
/// tolerance is retried at smaller steps before it counts: rectifier and
/// pooling kinks stop contaminating the quotient once the step no longer
/// straddles them, and in f64 the roundoff floor at h = 1e-6 is still
/// orders of magnitude below the tolerance.
fn fd_block(
    values: &[f64],
    grad: &[f64],
    stride: usize,
    eval: &mut dyn FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let mut work = values.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut i = 0;
    while i < values.len() {
        let mut best = f64::INFINITY;
        for &h in &[FD_STEP, FD_STEP / 8.0, 1e-5, 1e-6] {
            work[i] = values[i] + h;
            let lp = eval(&work);
            work[i] = values[i] - h;
            let lm = eval(&work);
            work[i] = values[i];
            let num = (lp - lm) / (2.0 * h);
            best = best.min(rel_err(grad[i], num));
            if best < FD_TOL {
                break;
            }
        }
        max_rel = max_rel.max(best);
        checked += 1;
        i += stride;
    }
    (max_rel, checked)
}

/// Checks one op: every element of every leaf input, against a scalar
/// loss sum(c * op(inputs)) with fixed random coefficients.
fn certify_op(
    name: &'static str,
    seed: u64,
    values: &[Vec<f64>],
    shapes: &[Vec<usize>],
    build: &dyn Fn(&mut Graph<f64>, &[Tensor]) -> Tensor,
) -> OpResult {
    // size the coefficient vector off one probe forward
    let out_count = {
        let mut g: Graph<f64> = Graph::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| g.leaf(s, v.clone(), false).unwrap())
            .collect();
        let y = build(&mut g, &leaves);
        g.count(y)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0EF);
    let coeffs: Vec<f64> = (0..out_count).map(|_| rng.gen_range(0.3..1.0)).collect();

    // scalar loss sum(c * y) with fixed coefficients so every output
    // element influences the gradient
    let loss_of = |vals: &[Vec<f64>]| -> (Graph<f64>, Vec<Tensor>, Tensor) {
        let mut g: Graph<f64> = Graph::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| g.leaf(s, v.clone(), true).unwrap())
            .collect();
        let y = build(&mut g, &leaves);
        let yf = g.shape(y).to_vec();
        let cf = g.constant(&yf, coeffs.clone()).unwrap();
        let m = g.mul(y, cf).unwrap();
        let loss = g.sum_all(m);
        (g, leaves, loss)
    };

    let mut g0 = loss_of(values);
    g0.0.backward(g0.2).unwrap();
    let grads: Vec<Vec<f64>> = g0
        .1
        .iter()
        .map(|&t| g0.0.grad(t).expect("leaf gradient").to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for k in 0..values.len() {
        let mut eval = |v: &[f64]| -> f64 {
            let mut vals = values.to_vec();
            vals[k] = v.to_vec();
            let (g, _, loss) = loss_of(&vals);
            g.value(loss)[0]
        };
        let (m, c) = fd_block(&values[k], &grads[k], 1, &mut eval);
        max_rel = max_rel.max(m);
        checked += c;
    }
    OpResult {
        name,
        max_rel,
        checked,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, random sign: safe for relu kinks.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            s * rng.gen_range(0.1..1.0)
        })
        .collect()
}

/// A shuffled ramp with gaps far larger than the FD step: safe for
/// maxpool ties.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    perm.iter()
        .map(|&p| p as f64 * 0.05 + rng.gen_range(0.0..0.01))
        .collect()
}

pub fn op_checks() -> Vec<OpResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    out.push(certify_op(
        "conv3d stride 1",
        1,
        &[
            uniform(&mut rng, 2 * 64, -1.0, 1.0),
            uniform(&mut rng, 3 * 2 * 27, -0.5, 0.5),
            uniform(&mut rng, 3, -0.5, 0.5),
        ],
        &[vec![2, 4, 4, 4], vec![3, 2, 3, 3, 3], vec![3]],
        &|g, l| g.conv3d(l[0], l[1], l[2], 1).unwrap(),
    ));

    out.push(certify_op(
        "conv3d stride 2",
        2,
        &[
            uniform(&mut rng, 2 * 64, -1.0, 1.0),
            uniform(&mut rng, 2 * 2 * 27, -0.5, 0.5),
            uniform(&mut rng, 2, -0.5, 0.5),
        ],
        &[vec![2, 4, 4, 4], vec![2, 2, 3, 3, 3], vec![2]],
        &|g, l| g.conv3d(l[0], l[1], l[2], 2).unwrap(),
    ));

    out.push(certify_op(
        "conv_transpose3d",
        3,
        &[
            uniform(&mut rng, 2 * 8, -1.0, 1.0),
            uniform(&mut rng, 2 * 3 * 27, -0.5, 0.5),
            uniform(&mut rng, 3, -0.5, 0.5),
        ],
        &[vec![2, 2, 2, 2], vec![2, 3, 3, 3, 3], vec![3]],
        &|g, l| g.conv_transpose3d(l[0], l[1], l[2]).unwrap(),
    ));

    out.push(certify_op(
        "batchnorm train",
        4,
        &[
            uniform(&mut rng, 3 * 8, -1.0, 1.0),
            uniform(&mut rng, 3, 0.5, 1.5),
            uniform(&mut rng, 3, -0.5, 0.5),
        ],
        &[vec![3, 2, 2, 2], vec![3], vec![3]],
        &|g, l| {
            let mut rm = vec![0.0f64; 3];
            let mut rv = vec![1.0f64; 3];
            g.batchnorm_train(l[0], l[1], l[2], &mut rm, &mut rv, 0.1, 1e-5)
                .unwrap()
        },
    ));

    out.push(certify_op(
        "batchnorm eval",
        5,
        &[
            uniform(&mut rng, 3 * 8, -1.0, 1.0),
            uniform(&mut rng, 3, 0.5, 1.5),
            uniform(&mut rng, 3, -0.5, 0.5),
        ],
        &[vec![3, 2, 2, 2], vec![3], vec![3]],
        &|g, l| {
            let rm = [0.2f64, -0.1, 0.05];
            let rv = [1.3f64, 0.8, 1.1];
            g.batchnorm_eval(l[0], l[1], l[2], &rm, &rv, 1e-5).unwrap()
        },
    ));

    out.push(certify_op(
        "relu",
        6,
        &[off_kink(&mut rng, 2 * 27)],
        &[vec![2, 3, 3, 3]],
        &|g, l| g.relu(l[0]),
    ));

    out.push(certify_op(
        "maxpool3d",
        7,
        &[distinct(&mut rng, 2 * 64)],
        &[vec![2, 4, 4, 4]],
        &|g, l| g.maxpool3d(l[0]).unwrap(),
    ));

    out.push(certify_op(
        "concat_channels",
        8,
        &[
            uniform(&mut rng, 2 * 8, -1.0, 1.0),
            uniform(&mut rng, 3 * 8, -1.0, 1.0),
        ],
        &[vec![2, 2, 2, 2], vec![3, 2, 2, 2]],
        &|g, l| g.concat_channels(&[l[0], l[1]]).unwrap(),
    ));

    out.push(certify_op(
        "add",
        9,
        &[
            uniform(&mut rng, 2 * 27, -1.0, 1.0),
            uniform(&mut rng, 2 * 27, -1.0, 1.0),
        ],
        &[vec![2, 3, 3, 3], vec![2, 3, 3, 3]],
        &|g, l| g.add(l[0], l[1]).unwrap(),
    ));

    out.push(certify_op(
        "mul",
        10,
        &[
            uniform(&mut rng, 2 * 27, -1.0, 1.0),
            uniform(&mut rng, 2 * 27, -1.0, 1.0),
        ],
        &[vec![2, 3, 3, 3], vec![2, 3, 3, 3]],
        &|g, l| g.mul(l[0], l[1]).unwrap(),
    ));

    out.push(certify_op(
        "scale",
        11,
        &[uniform(&mut rng, 2 * 27, -1.0, 1.0)],
        &[vec![2, 3, 3, 3]],
        &|g, l| g.scale(l[0], 0.7),
    ));

    out.push(certify_op(
        "sum_all",
        12,
        &[uniform(&mut rng, 2 * 27, -1.0, 1.0)],
        &[vec![2, 3, 3, 3]],
        &|g, l| g.sum_all(l[0]),
    ));

    out.push(certify_op(
        "mean_over",
        13,
        &[
            uniform(&mut rng, 2 * 8, -1.0, 1.0),
            uniform(&mut rng, 2 * 8, -1.0, 1.0),
            uniform(&mut rng, 2 * 8, -1.0, 1.0),
        ],
        &[vec![2, 2, 2, 2], vec![2, 2, 2, 2], vec![2, 2, 2, 2]],
        &|g, l| g.mean_over(l).unwrap(),
    ));

    out.push(certify_op(
        "softmax_channels",
        14,
        &[uniform(&mut rng, 3 * 8, -2.0, 2.0)],
        &[vec![3, 2, 2, 2]],
        &|g, l| g.softmax_channels(l[0]).unwrap(),
    ));

    // ground truth enters the dice loss as a constant, matching training
    let gdl_gt: Vec<f64> = {
        let mut gt = vec![0.0f64; 3 * 8];
        let mut r = ChaCha8Rng::seed_from_u64(99);
        for i in 0..8 {
            gt[r.gen_range(0..3usize) * 8 + i] = 1.0;
        }
        gt
    };
    out.push(certify_op(
        "generalized_dice_loss",
        15,
        &[uniform(&mut rng, 3 * 8, 0.05, 1.0)],
        &[vec![3, 2, 2, 2]],
        &{
            let gt = gdl_gt;
            move |g: &mut Graph<f64>, l: &[Tensor]| {
                let gc = g.constant(&[3, 2, 2, 2], gt.clone()).unwrap();
                g.generalized_dice_loss(l[0], gc, 1e-5).unwrap()
            }
        },
    ));

    out
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), l: usize) -> LabelMap {
    let n = dims.0 * dims.1 * dims.2;
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..l as u32)).collect();
    LabelMap::new(dims, l, labels).unwrap()
}

pub fn random_volume(rng: &mut ChaCha8Rng, c: usize, dims: (usize, usize, usize)) -> Volume {
    let n = c * dims.0 * dims.1 * dims.2;
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Volume::new(c, dims, [1.0, 1.0, 1.0], data).unwrap()
}

/// Whole-network check through the segmentation builder: every parameter
/// of a small two-head net against the deep-supervision loss.
pub fn unet_composite_check() -> OpResult {
    let cfg = UNetConfig {
        in_channels: 2,
        out_channels: 2,
        levels: 1,
        base_features: 2,
        deep_supervision: true,
        ds_weights: vec![1.0, 0.5],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let dims = (4, 4, 4);
    let x = random_volume(&mut rng, 2, dims);
    let gt = random_labels(&mut rng, dims, 2);
    let base: UNetParams<f64> = build_unet(&cfg, 17).unwrap();

    let loss_of = |params: &UNetParams<f64>| -> (Graph<f64>, Vec<Tensor>, f64, Tensor) {
        let mut p = params.clone();
        let mut g: Graph<f64> = Graph::new();
        let xt = g
            .constant(&[2, 4, 4, 4], x.data().iter().map(|&v| v as f64).collect())
            .unwrap();
        let out = forward_train(&mut g, &mut p, xt).unwrap();
        let loss = deep_supervision_loss(&mut g, &out.heads, &gt, &cfg.ds_weights).unwrap();
        let v = g.value(loss)[0];
        (g, out.slot_tensors, v, loss)
    };

    let (mut g0, slots0, _, loss0) = loss_of(&base);
    g0.backward(loss0).unwrap();
    let grads: Vec<Vec<f64>> = slots0
        .iter()
        .map(|&t| g0.grad(t).expect("slot gradient").to_vec())
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (si, slot) in base.slots.iter().enumerate() {
        let mut eval = |v: &[f64]| -> f64 {
            let mut p = base.clone();
            p.slots[si].data = v.to_vec();
            loss_of(&p).2
        };
        let (m, c) = fd_block(&slot.data, &grads[si], 1, &mut eval);
        max_rel = max_rel.max(m);
        checked += c;
    }
    OpResult {
        name: "segmentation net end-to-end",
        max_rel,
        checked,
    }
}

/// End-to-end fusion-model check: 8^3 patch, 2 atlases, 3 labels, base
/// features 2, in f64. Every parameter slot is visited, elements strided
/// so each slot contributes at most `per_slot` coordinates.
pub fn dlf_full_check(per_slot: usize) -> OpResult {
    let cfg = DlfConfig::with_shape(3, 2, 2, 2);
    let dims = (8, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let target = random_volume(&mut rng, 2, dims);
    let coords = coordinate_maps(dims);
    let atlases: Vec<AtlasBundle> = (0..2)
        .map(|_| {
            AtlasBundle::new(
                random_volume(&mut rng, 2, dims),
                random_labels(&mut rng, dims, 3),
            )
            .unwrap()
        })
        .collect();
    let gt = random_labels(&mut rng, dims, 3);
    let batch: DlfBatch<f64> = DlfBatch::new(&cfg, &target, &coords, &atlases).unwrap();
    let base: DlfParams<f64> = build_dlf(&cfg, 23).unwrap();
    let weights = cfg.ft_cfg.ds_weights.clone();

    let loss_of = |params: &DlfParams<f64>| -> (Graph<f64>, Vec<Tensor>, Vec<Tensor>, f64, Tensor) {
        let mut p = params.clone();
        let mut g: Graph<f64> = Graph::new();
        let out = dlf_forward_train(&mut g, &cfg, &mut p, &batch).unwrap();
        let loss = deep_supervision_loss(&mut g, &out.heads, &gt, &weights).unwrap();
        let v = g.value(loss)[0];
        (g, out.wv_slots, out.ft_slots, v, loss)
    };

    let (mut g0, wv0, ft0, _, loss0) = loss_of(&base);
    g0.backward(loss0).unwrap();
    let wv_grads: Vec<Vec<f64>> = wv0.iter().map(|&t| g0.grad(t).unwrap().to_vec()).collect();
    let ft_grads: Vec<Vec<f64>> = ft0.iter().map(|&t| g0.grad(t).unwrap().to_vec()).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (is_wv, si, grad) in wv_grads
        .iter()
        .enumerate()
        .map(|(i, g)| (true, i, g))
        .chain(ft_grads.iter().enumerate().map(|(i, g)| (false, i, g)))
    {
        let data = if is_wv {
            &base.wv.slots[si].data
        } else {
            &base.ft.slots[si].data
        };
        let stride = (data.len() / per_slot).max(1);
        let mut eval = |v: &[f64]| -> f64 {
            let mut p = base.clone();
            if is_wv {
                p.wv.slots[si].data = v.to_vec();
            } else {
                p.ft.slots[si].data = v.to_vec();
            }
            loss_of(&p).3
        };
        let (m, c) = fd_block(data, grad, stride, &mut eval);
        max_rel = max_rel.max(m);
        checked += c;
    }
    OpResult {
        name: "fusion model end-to-end",
        max_rel,
        checked,
    }
}

/// The whole certification suite in one list. Consumed by the acceptance
/// runner; the gradient suite calls the three parts directly.
#[allow(dead_code)]
pub fn gradcheck_suite(per_slot: usize) -> Vec<OpResult> {
    let mut all = op_checks();
    all.push(unet_composite_check());
    all.push(dlf_full_check(per_slot));
    all
}
