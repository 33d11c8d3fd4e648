//! Reverse-mode automatic differentiation on dense blocks.
//!
//! A [`Graph`] is a define-by-run tape: every operation evaluates its result
//! immediately and records what it needs for the backward pass. Activations
//! use the layout `[channels, z, y, x]`, matching `volcore` storage, so
//! patches move between volumes and tensors without reshuffling. Weights are
//! rank-5 `[c_out, c_in, k, k, k]` for convolution and `[c_in, c_out, 3, 3, 3]`
//! for transposed convolution.
//!
//! The engine is generic over [`Scalar`] so the same graph code runs in f32
//! for training and in f64 for finite-difference certification, where 32-bit
//! rounding would drown the signal.
//!
//! Accumulation order is fixed everywhere (tape order, then channel-major
//! loops), so forward values and gradients are reproducible bit for bit.

pub mod checkpoint;
mod conv;
pub mod optim;

use crate::error::{Error, Result};
use conv::Sp;

/// Element type of a [`Graph`]: IEEE float with explicit f64 conversions.
pub trait Scalar: num_traits::Float + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: usize,
        w: usize,
        b: usize,
    },
    /// `xhat` and `inv` (1/sqrt(var+eps) per channel) are saved at forward
    /// time; the backward formula needs both.
    BnTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    BnEval {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    Relu {
        x: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    SumAll {
        x: usize,
    },
    Mean {
        xs: Vec<usize>,
    },
    Softmax {
        x: usize,
    },
    /// Per-label weights and the two dice sums are saved in f64.
    Gdl {
        p: usize,
        g: usize,
        ws: Vec<f64>,
        num: f64,
        den: f64,
    },
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// node's inputs sit at lower indices and one reverse sweep visits each
/// node exactly once.
pub struct Graph<T: Scalar> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    ops: Vec<Op<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Neumaier-compensated f64 sum, folded to a hi/lo pair. The pair carries
/// roughly 106 bits, enough that means over any realistic number of vote
/// maps round identically regardless of input order.
pub(crate) fn neumaier(iter: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for v in iter {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    let hi = s + c;
    let lo = (s - hi) + c;
    (hi, lo)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, needs: bool, op: Op<T>) -> Tensor {
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        Tensor(self.ops.len() - 1)
    }

    /// New leaf tensor. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, shape: &[usize], value: Vec<T>, needs_grad: bool) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("leaf shape {shape:?} has a zero dim")));
        }
        let count: usize = shape.iter().product();
        if count != value.len() {
            return Err(Error::Shape(format!(
                "leaf shape {shape:?} wants {count} values, got {}",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, needs_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Tensor> {
        self.leaf(shape, value, false)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.shapes[t.0]
    }

    pub fn value(&self, t: Tensor) -> &[T] {
        &self.values[t.0]
    }

    pub fn count(&self, t: Tensor) -> usize {
        self.values[t.0].len()
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` until then, and
    /// always `None` for tensors that do not need gradients.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.grads[t.0].as_deref()
    }

    fn act4(&self, t: Tensor) -> Result<Sp> {
        let s = &self.shapes[t.0];
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "expected a [c, z, y, x] tensor, got shape {s:?}"
            )));
        }
        Ok(Sp {
            c: s[0],
            z: s[1],
            y: s[2],
            x: s[3],
        })
    }

    fn same_counts(&self, ts: &[Tensor]) -> Result<()> {
        let first = &self.shapes[ts[0].0];
        for t in &ts[1..] {
            if &self.shapes[t.0] != first {
                return Err(Error::Shape(format!(
                    "shape mismatch: {:?} vs {:?}",
                    first, self.shapes[t.0]
                )));
            }
        }
        Ok(())
    }

    /// 3-D convolution. Weight `[c_out, c_in, k, k, k]` with odd `k`; padding
    /// `(k-1)/2` keeps stride-1 output the same size as the input.
    pub fn conv3d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Result<Tensor> {
        let xs = self.act4(x)?;
        let wsh = self.shapes[w.0].clone();
        if wsh.len() != 5 || wsh[2] != wsh[3] || wsh[3] != wsh[4] {
            return Err(Error::Shape(format!(
                "conv3d weight must be [c_out, c_in, k, k, k], got {wsh:?}"
            )));
        }
        let (cout, cin, k) = (wsh[0], wsh[1], wsh[2]);
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv3d kernel size {k} must be odd")));
        }
        if cin != xs.c {
            return Err(Error::Shape(format!(
                "conv3d input has {} channels, weight expects {cin}",
                xs.c
            )));
        }
        if self.shapes[b.0] != [cout] {
            return Err(Error::Shape(format!(
                "conv3d bias must be [{cout}], got {:?}",
                self.shapes[b.0]
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv3d stride {stride} not supported")));
        }
        let pad = (k - 1) / 2;
        let dims = [xs.z, xs.y, xs.x].map(|n| conv::conv_out_len(n, k, stride, pad));
        let (oz, oy, ox) = match dims {
            [Some(z), Some(y), Some(x)] if z > 0 && y > 0 && x > 0 => (z, y, x),
            _ => {
                return Err(Error::Shape(format!(
                    "conv3d input {}x{}x{} too small for k={k} stride={stride}",
                    xs.z, xs.y, xs.x
                )))
            }
        };
        let os = Sp {
            c: cout,
            z: oz,
            y: oy,
            x: ox,
        };
        let mut out = vec![T::zero(); os.count()];
        conv::gather(
            &self.values[x.0],
            xs,
            &self.values[w.0],
            k,
            Some(&self.values[b.0]),
            stride,
            pad,
            &mut out,
            os,
            true,
        );
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(
            vec![os.c, os.z, os.y, os.x],
            out,
            needs,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.0,
                k,
                stride,
                pad,
            },
        ))
    }

    /// Transposed 3-D convolution, fixed to kernel 3, stride 2, padding 1 and
    /// output padding 1, so every spatial dim exactly doubles. Weight layout
    /// is `[c_in, c_out, 3, 3, 3]`.
    pub fn conv_transpose3d(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let xs = self.act4(x)?;
        let wsh = self.shapes[w.0].clone();
        if wsh.len() != 5 || wsh[2] != 3 || wsh[3] != 3 || wsh[4] != 3 {
            return Err(Error::Shape(format!(
                "conv_transpose3d weight must be [c_in, c_out, 3, 3, 3], got {wsh:?}"
            )));
        }
        let (cin, cout) = (wsh[0], wsh[1]);
        if cin != xs.c {
            return Err(Error::Shape(format!(
                "conv_transpose3d input has {} channels, weight expects {cin}",
                xs.c
            )));
        }
        if self.shapes[b.0] != [cout] {
            return Err(Error::Shape(format!(
                "conv_transpose3d bias must be [{cout}], got {:?}",
                self.shapes[b.0]
            )));
        }
        let os = Sp {
            c: cout,
            z: 2 * xs.z,
            y: 2 * xs.y,
            x: 2 * xs.x,
        };
        let mut out = vec![T::zero(); os.count()];
        conv::scatter(
            &self.values[x.0],
            xs,
            &self.values[w.0],
            3,
            Some(&self.values[b.0]),
            2,
            1,
            &mut out,
            os,
            true,
        );
        let needs = self.needs[x.0] || self.needs[w.0] || self.needs[b.0];
        Ok(self.push(
            vec![os.c, os.z, os.y, os.x],
            out,
            needs,
            Op::ConvT {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        ))
    }

    fn bn_check(&self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Sp> {
        let xs = self.act4(x)?;
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.shapes[t.0] != [xs.c] {
                return Err(Error::Shape(format!(
                    "batchnorm {name} must be [{}], got {:?}",
                    xs.c, self.shapes[t.0]
                )));
            }
        }
        Ok(xs)
    }

    /// Batch normalization in training mode for batch size one: statistics are
    /// taken per channel over all spatial positions, using the population
    /// variance. Running stats are caller-owned buffers updated in place with
    /// `new = (1 - momentum) * old + momentum * batch_stat`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor> {
        let xs = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != xs.c || running_var.len() != xs.c {
            return Err(Error::Shape(format!(
                "batchnorm running stats must have {} channels",
                xs.c
            )));
        }
        let n = xs.vox();
        let nf = n as f64;
        let mom = T::from_f64(momentum);
        let keep = T::from_f64(1.0 - momentum);
        let mut xhat = vec![T::zero(); xs.count()];
        let mut inv = vec![T::zero(); xs.c];
        let mut out = vec![T::zero(); xs.count()];
        for c in 0..xs.c {
            let ch = &self.values[x.0][c * n..(c + 1) * n];
            let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
            let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / nf;
            let mu = T::from_f64(mean);
            let iv = T::from_f64(1.0 / (var + eps).sqrt());
            inv[c] = iv;
            let (ga, be) = (self.values[gamma.0][c], self.values[beta.0][c]);
            for i in 0..n {
                let h = (ch[i] - mu) * iv;
                xhat[c * n + i] = h;
                out[c * n + i] = ga * h + be;
            }
            running_mean[c] = keep * running_mean[c] + mom * mu;
            running_var[c] = keep * running_var[c] + mom * T::from_f64(var);
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(
            self.shapes[x.0].clone(),
            out,
            needs,
            Op::BnTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv,
            },
        ))
    }

    /// Batch normalization in evaluation mode: normalizes with the stored
    /// running statistics and leaves them untouched.
    pub fn batchnorm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Tensor> {
        let xs = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != xs.c || running_var.len() != xs.c {
            return Err(Error::Shape(format!(
                "batchnorm running stats must have {} channels",
                xs.c
            )));
        }
        let n = xs.vox();
        let mut xhat = vec![T::zero(); xs.count()];
        let mut inv = vec![T::zero(); xs.c];
        let mut out = vec![T::zero(); xs.count()];
        for c in 0..xs.c {
            let ch = &self.values[x.0][c * n..(c + 1) * n];
            let iv = T::from_f64(1.0 / (running_var[c].as_f64() + eps).sqrt());
            inv[c] = iv;
            let mu = running_mean[c];
            let (ga, be) = (self.values[gamma.0][c], self.values[beta.0][c]);
            for i in 0..n {
                let h = (ch[i] - mu) * iv;
                xhat[c * n + i] = h;
                out[c * n + i] = ga * h + be;
            }
        }
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(
            self.shapes[x.0].clone(),
            out,
            needs,
            Op::BnEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv,
            },
        ))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let out = self.values[x.0]
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.push(
            self.shapes[x.0].clone(),
            out,
            self.needs[x.0],
            Op::Relu { x: x.0 },
        )
    }

    /// 2x2x2 max pooling with stride 2. All spatial dims must be even. Ties
    /// go to the lowest linear index, so the gradient routing is unique.
    pub fn maxpool3d(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.act4(x)?;
        if xs.z % 2 != 0 || xs.y % 2 != 0 || xs.x % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool3d needs even spatial dims, got {}x{}x{}",
                xs.z, xs.y, xs.x
            )));
        }
        let os = Sp {
            c: xs.c,
            z: xs.z / 2,
            y: xs.y / 2,
            x: xs.x / 2,
        };
        let v = &self.values[x.0];
        let mut out = vec![T::zero(); os.count()];
        let mut argmax = vec![0usize; os.count()];
        for c in 0..os.c {
            for oz in 0..os.z {
                for oy in 0..os.y {
                    for ox in 0..os.x {
                        let mut best_i = usize::MAX;
                        let mut best = T::neg_infinity();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((c * xs.z + 2 * oz + dz) * xs.y + 2 * oy + dy) * xs.x
                                        + 2 * ox
                                        + dx;
                                    if v[i] > best {
                                        best = v[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = ((c * os.z + oz) * os.y + oy) * os.x + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        Ok(self.push(
            vec![os.c, os.z, os.y, os.x],
            out,
            self.needs[x.0],
            Op::MaxPool { x: x.0, argmax },
        ))
    }

    /// Concatenates along the channel axis; spatial dims must agree.
    pub fn concat_channels(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_channels of nothing".into()));
        }
        let first = self.act4(xs[0])?;
        let mut c_total = 0usize;
        for &t in xs {
            let s = self.act4(t)?;
            if (s.z, s.y, s.x) != (first.z, first.y, first.x) {
                return Err(Error::Shape(format!(
                    "concat_channels spatial mismatch: {}x{}x{} vs {}x{}x{}",
                    first.z, first.y, first.x, s.z, s.y, s.x
                )));
            }
            c_total += s.c;
        }
        let mut out = Vec::with_capacity(c_total * first.vox());
        for &t in xs {
            out.extend_from_slice(&self.values[t.0]);
        }
        let needs = xs.iter().any(|t| self.needs[t.0]);
        Ok(self.push(
            vec![c_total, first.z, first.y, first.x],
            out,
            needs,
            Op::Concat {
                xs: xs.iter().map(|t| t.0).collect(),
            },
        ))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_counts(&[a, b])?;
        let out = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(self.shapes[a.0].clone(), out, needs, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_counts(&[a, b])?;
        let out = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(self.shapes[a.0].clone(), out, needs, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let cf = T::from_f64(c);
        let out = self.values[x.0].iter().map(|&v| cf * v).collect();
        self.push(
            self.shapes[x.0].clone(),
            out,
            self.needs[x.0],
            Op::Scale { x: x.0, c: cf },
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let (hi, lo) = neumaier(self.values[x.0].iter().map(|v| v.as_f64()));
        let out = vec![T::from_f64(hi + lo)];
        self.push(vec![1], out, self.needs[x.0], Op::SumAll { x: x.0 })
    }

    /// Elementwise mean across same-shaped tensors, accumulated in
    /// compensated f64 per element. For inputs of realistic magnitude the
    /// result is exactly rounded, so it is invariant under permuting the
    /// inputs and under duplicating the whole set.
    pub fn mean_over(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Shape("mean_over of nothing".into()));
        }
        self.same_counts(xs)?;
        let m = xs.len() as f64;
        let count = self.values[xs[0].0].len();
        let mut out = Vec::with_capacity(count);
        for j in 0..count {
            let (hi, lo) = neumaier(xs.iter().map(|t| self.values[t.0][j].as_f64()));
            out.push(T::from_f64(hi / m + lo / m));
        }
        let needs = xs.iter().any(|t| self.needs[t.0]);
        Ok(self.push(
            self.shapes[xs[0].0].clone(),
            out,
            needs,
            Op::Mean {
                xs: xs.iter().map(|t| t.0).collect(),
            },
        ))
    }

    /// Softmax across channels at every spatial position.
    pub fn softmax_channels(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.act4(x)?;
        let n = xs.vox();
        let v = &self.values[x.0];
        let mut out = vec![T::zero(); xs.count()];
        let mut es = vec![0.0f64; xs.c];
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..xs.c {
                mx = mx.max(v[c * n + i].as_f64());
            }
            let mut s = 0.0f64;
            for c in 0..xs.c {
                let e = (v[c * n + i].as_f64() - mx).exp();
                es[c] = e;
                s += e;
            }
            for c in 0..xs.c {
                out[c * n + i] = T::from_f64(es[c] / s);
            }
        }
        Ok(self.push(
            self.shapes[x.0].clone(),
            out,
            self.needs[x.0],
            Op::Softmax { x: x.0 },
        ))
    }

    /// Generalized Dice loss of predictions `p` against a one-hot target `g`
    /// over the channel (label) axis:
    ///
    /// `loss = 1 - 2 * Σ_l w_l Σ_n p g / Σ_l w_l Σ_n (p + g)`
    ///
    /// with `w_l = 1 / (Σ_n g + eps)^2` for labels present in the target and
    /// `w_l = 0` for absent ones, so empty labels influence neither sum. If
    /// every label is absent the loss is defined as 1 with zero gradient.
    /// Gradients flow to `p` only.
    pub fn generalized_dice_loss(&mut self, p: Tensor, g: Tensor, eps: f64) -> Result<Tensor> {
        let ps = self.act4(p)?;
        self.same_counts(&[p, g])?;
        if ps.c < 2 {
            return Err(Error::Shape(format!(
                "dice loss needs at least 2 label channels, got {}",
                ps.c
            )));
        }
        let n = ps.vox();
        let (pv, gv) = (&self.values[p.0], &self.values[g.0]);
        let mut ws = vec![0.0f64; ps.c];
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for l in 0..ps.c {
            let mut gsum = 0.0f64;
            let mut isum = 0.0f64;
            let mut psum = 0.0f64;
            for i in 0..n {
                let (pi, gi) = (pv[l * n + i].as_f64(), gv[l * n + i].as_f64());
                gsum += gi;
                psum += pi;
                isum += pi * gi;
            }
            if gsum > 0.0 {
                let w = 1.0 / ((gsum + eps) * (gsum + eps));
                ws[l] = w;
                num += w * isum;
                den += w * (psum + gsum);
            }
        }
        let loss = if den > 0.0 { 1.0 - 2.0 * num / den } else { 1.0 };
        let out = vec![T::from_f64(loss)];
        Ok(self.push(
            vec![1],
            out,
            self.needs[p.0],
            Op::Gdl {
                p: p.0,
                g: g.0,
                ws,
                num,
                den,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse tape order; afterwards [`Graph::grad`] returns the accumulated
    /// gradient of every tensor that required one. A graph can only be swept
    /// once.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; build a fresh graph per step".into(),
            ));
        }
        if self.count(loss) != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        if !self.needs[loss.0] {
            return Err(Error::Graph(
                "loss does not depend on any tensor requiring gradients".into(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.needs[i] || self.grads[i].is_none() {
                continue;
            }
            let gy = self.grads[i].take().expect("checked above");
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            let out_shape = self.shapes[i].clone();
            self.apply_backward(&op, &gy, &out_shape);
            self.ops[i] = op;
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Takes the gradient buffer of `t` for in-place accumulation, creating
    /// it zeroed on first touch. Returns `None` when `t` needs no gradient.
    fn take_grad(&mut self, t: usize) -> Option<Vec<T>> {
        if !self.needs[t] {
            return None;
        }
        Some(
            self.grads[t]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.values[t].len()]),
        )
    }

    fn put_grad(&mut self, t: usize, g: Vec<T>) {
        self.grads[t] = Some(g);
    }

    fn apply_backward(&mut self, op: &Op<T>, gy: &[T], out_shape: &[usize]) {
        match op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
            } => {
                let xs = sp_of(&self.shapes[*x]);
                let os = sp_of(out_shape);
                if let Some(mut gx) = self.take_grad(*x) {
                    // dx[ci, s q + k - p] += dy[co, q] w[co, ci, k]: the exact
                    // adjoint of the forward gather.
                    conv::scatter(
                        gy,
                        os,
                        &self.values[*w],
                        *k,
                        None,
                        *stride,
                        *pad,
                        &mut gx,
                        xs,
                        false,
                    );
                    self.put_grad(*x, gx);
                }
                if let Some(mut gw) = self.take_grad(*w) {
                    conv::weight_grad(gy, os, &self.values[*x], xs, *k, *stride, *pad, &mut gw);
                    self.put_grad(*w, gw);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    let vox = os.vox();
                    for co in 0..os.c {
                        let (hi, lo) =
                            neumaier(gy[co * vox..(co + 1) * vox].iter().map(|v| v.as_f64()));
                        gb[co] = gb[co] + T::from_f64(hi + lo);
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::ConvT { x, w, b } => {
                let xs = sp_of(&self.shapes[*x]);
                let os = sp_of(out_shape);
                if let Some(mut gx) = self.take_grad(*x) {
                    // dx[c1, q] = Σ_c2 Σ_k w[c1, c2, k] dy[c2, s q + k - p]:
                    // a gather over dy with the [c_in, c_out] weight layout.
                    conv::gather(gy, os, &self.values[*w], 3, None, 2, 1, &mut gx, xs, false);
                    self.put_grad(*x, gx);
                }
                if let Some(mut gw) = self.take_grad(*w) {
                    conv::weight_grad(&self.values[*x], xs, gy, os, 3, 2, 1, &mut gw);
                    self.put_grad(*w, gw);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    let vox = os.vox();
                    for co in 0..os.c {
                        let (hi, lo) =
                            neumaier(gy[co * vox..(co + 1) * vox].iter().map(|v| v.as_f64()));
                        gb[co] = gb[co] + T::from_f64(hi + lo);
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let xs = sp_of(&self.shapes[*x]);
                let n = xs.vox();
                let nf = n as f64;
                for c in 0..xs.c {
                    let gyc = &gy[c * n..(c + 1) * n];
                    let xhc = &xhat[c * n..(c + 1) * n];
                    let sdy: f64 = gyc.iter().map(|v| v.as_f64()).sum();
                    let sdyx: f64 = gyc
                        .iter()
                        .zip(xhc)
                        .map(|(d, h)| d.as_f64() * h.as_f64())
                        .sum();
                    if let Some(mut gb) = self.take_grad(*beta) {
                        gb[c] = gb[c] + T::from_f64(sdy);
                        self.put_grad(*beta, gb);
                    }
                    if let Some(mut gg) = self.take_grad(*gamma) {
                        gg[c] = gg[c] + T::from_f64(sdyx);
                        self.put_grad(*gamma, gg);
                    }
                    if let Some(mut gx) = self.take_grad(*x) {
                        let ga = self.values[*gamma][c];
                        let scale = ga * inv[c];
                        let mdy = T::from_f64(sdy / nf);
                        let mdyx = T::from_f64(sdyx / nf);
                        for i in 0..n {
                            gx[c * n + i] =
                                gx[c * n + i] + scale * (gyc[i] - mdy - xhc[i] * mdyx);
                        }
                        self.put_grad(*x, gx);
                    }
                }
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                xhat,
                inv,
            } => {
                let xs = sp_of(&self.shapes[*x]);
                let n = xs.vox();
                for c in 0..xs.c {
                    let gyc = &gy[c * n..(c + 1) * n];
                    let xhc = &xhat[c * n..(c + 1) * n];
                    if let Some(mut gb) = self.take_grad(*beta) {
                        let sdy: f64 = gyc.iter().map(|v| v.as_f64()).sum();
                        gb[c] = gb[c] + T::from_f64(sdy);
                        self.put_grad(*beta, gb);
                    }
                    if let Some(mut gg) = self.take_grad(*gamma) {
                        let sdyx: f64 = gyc
                            .iter()
                            .zip(xhc)
                            .map(|(d, h)| d.as_f64() * h.as_f64())
                            .sum();
                        gg[c] = gg[c] + T::from_f64(sdyx);
                        self.put_grad(*gamma, gg);
                    }
                    if let Some(mut gx) = self.take_grad(*x) {
                        let scale = self.values[*gamma][c] * inv[c];
                        for i in 0..n {
                            gx[c * n + i] = gx[c * n + i] + scale * gyc[i];
                        }
                        self.put_grad(*x, gx);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    for (i, g) in gx.iter_mut().enumerate() {
                        if self.values[*x][i] > T::zero() {
                            *g = *g + gy[i];
                        }
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] = gx[i] + gy[o];
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::Concat { xs } => {
                let mut off = 0usize;
                for &t in xs {
                    let len = self.values[t].len();
                    if let Some(mut gx) = self.take_grad(t) {
                        for (g, &d) in gx.iter_mut().zip(&gy[off..off + len]) {
                            *g = *g + d;
                        }
                        self.put_grad(t, gx);
                    }
                    off += len;
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if let Some(mut g) = self.take_grad(t) {
                        for (gi, &d) in g.iter_mut().zip(gy) {
                            *gi = *gi + d;
                        }
                        self.put_grad(t, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(mut ga) = self.take_grad(*a) {
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g = *g + gy[i] * self.values[*b][i];
                    }
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    for (i, g) in gb.iter_mut().enumerate() {
                        *g = *g + gy[i] * self.values[*a][i];
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::Scale { x, c } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    for (g, &d) in gx.iter_mut().zip(gy) {
                        *g = *g + *c * d;
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::SumAll { x } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    let d = gy[0];
                    for g in gx.iter_mut() {
                        *g = *g + d;
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::Mean { xs } => {
                let m = T::from_f64(xs.len() as f64);
                for &t in xs {
                    if let Some(mut gx) = self.take_grad(t) {
                        for (g, &d) in gx.iter_mut().zip(gy) {
                            *g = *g + d / m;
                        }
                        self.put_grad(t, gx);
                    }
                }
            }
            Op::Softmax { x } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    // self.values of this node are unavailable here (op was
                    // detached), so recompute from the input, same recipe as
                    // the forward pass.
                    let xs = sp_of(&self.shapes[*x]);
                    let n = xs.vox();
                    let v = &self.values[*x];
                    let mut es = vec![0.0f64; xs.c];
                    for i in 0..n {
                        let mut mx = f64::NEG_INFINITY;
                        for c in 0..xs.c {
                            mx = mx.max(v[c * n + i].as_f64());
                        }
                        let mut s = 0.0f64;
                        for c in 0..xs.c {
                            let e = (v[c * n + i].as_f64() - mx).exp();
                            es[c] = e;
                            s += e;
                        }
                        let mut dot = 0.0f64;
                        for c in 0..xs.c {
                            dot += gy[c * n + i].as_f64() * (es[c] / s);
                        }
                        for c in 0..xs.c {
                            let y = es[c] / s;
                            gx[c * n + i] =
                                gx[c * n + i] + T::from_f64(y * (gy[c * n + i].as_f64() - dot));
                        }
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::Gdl { p, g, ws, num, den } => {
                if let Some(mut gp) = self.take_grad(*p) {
                    // den == 0 means no label is present: loss is the
                    // constant 1 there, so the gradient stays zero.
                    if *den > 0.0 {
                        let xs = sp_of(&self.shapes[*p]);
                        let n = xs.vox();
                        let d0 = gy[0].as_f64();
                        let b2 = den * den;
                        for l in 0..xs.c {
                            if ws[l] == 0.0 {
                                continue;
                            }
                            for i in 0..n {
                                let gv = self.values[*g][l * n + i].as_f64();
                                let d = -2.0 * ws[l] * (gv * den - num) / b2;
                                gp[l * n + i] = gp[l * n + i] + T::from_f64(d0 * d);
                            }
                        }
                    }
                    self.put_grad(*p, gp);
                }
            }
        }
    }
}

fn sp_of(shape: &[usize]) -> Sp {
    Sp {
        c: shape[0],
        z: shape[1],
        y: shape[2],
        x: shape[3],
    }
}
