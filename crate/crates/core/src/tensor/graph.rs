//! Forward operators that record themselves on a tape, and the reverse
//! sweep that turns the tape into gradients.

use super::param::{BufferId, ParamId, ParamStore};
use super::{Scalar, Tensor, TensorError};

/// Probabilities are clipped to `[CE_CLIP, 1 - CE_CLIP]` inside the loss.
pub const CE_CLIP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running estimate per batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        r: Vec<T>,
        d: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u8>,
    },
    Upsample {
        x: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        probs: Var,
        targets: Vec<u8>,
        labeled: usize,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    L2 {
        params: Vec<ParamId>,
        coefficient: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    adjoint_scale: Option<T>,
}

/// Batch statistics produced by a training-mode batch-norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub buffer: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch renormalization limits: training-mode batch-norm rescales batch
/// statistics towards the running ones by `r = σ_B/σ` clipped to
/// `[1/r_max, r_max]` and `d = (μ_B - μ)/σ` clipped to `[-d_max, d_max]`,
/// both held constant in the backward pass. `r_max = 1, d_max = 0` is plain
/// batch-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Renorm {
    pub r_max: f64,
    pub d_max: f64,
}

/// Tape of executed operations. Nodes are stored in execution order, so
/// the backward pass is a reverse walk over the vector.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnUpdate<T>>,
    renorm: Option<Renorm>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: String) -> TensorError {
    TensorError::ShapeMismatch(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_updates: Vec::new(),
            renorm: None,
        }
    }

    /// Turns training-mode batch-norm into batch renormalization for the
    /// operators recorded after this call.
    pub fn set_renorm(&mut self, renorm: Option<Renorm>) {
        self.renorm = renorm;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            adjoint_scale: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::ZERO))
    }

    /// Batch-norm statistics gathered in training mode, in execution order.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Folds the recorded batch statistics into `store`'s running estimates.
    pub fn commit_running_stats(&self, store: &mut ParamStore<T>) {
        self.commit_running_stats_with(store, BN_MOMENTUM);
    }

    /// As [`Graph::commit_running_stats`] with weight `momentum` kept on the
    /// old estimate.
    pub fn commit_running_stats_with(&self, store: &mut ParamStore<T>, momentum: f64) {
        let momentum = T::from_f64(momentum);
        for u in &self.bn_updates {
            store.update_running_stats(u.buffer, &u.mean, &u.var, momentum);
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Scales the adjoint flowing out of `v` during backward. Only meant for
    /// negative controls in gradient checks.
    #[doc(hidden)]
    pub fn perturb_adjoint(&mut self, v: Var, factor: T) {
        self.nodes[v.0].adjoint_scale = Some(factor);
    }

    /// Valid (unpadded) stride-1 convolution; kernel size taken from `w`.
    pub fn conv(
        &mut self,
        x: Var,
        store: &ParamStore<T>,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let wv = store.value(w);
        let bv = store.value(b);
        let [n, c, h, wd] = xv.shape();
        let [f, wc, kh, kw] = wv.shape();
        if wc != c {
            return Err(mismatch(format!(
                "conv weight expects {wc} channels, input has {c}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(mismatch(format!(
                "conv kernel must be odd and square, got {kh}x{kw}"
            )));
        }
        if bv.len() != f {
            return Err(mismatch(format!(
                "conv bias has {} entries for {f} filters",
                bv.len()
            )));
        }
        if h < kh || wd < kw {
            return Err(mismatch(format!(
                "conv input {h}x{wd} smaller than kernel {kh}x{kw}"
            )));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let p = oh * ow;
        let mut out = Tensor::zeros([n, f, oh, ow]);
        let mut scratch = Vec::new();
        for s in 0..n {
            let dst = &mut out.data_mut()[s * f * p..(s + 1) * f * p];
            conv_forward_sample(
                xv.sample(s),
                [c, h, wd],
                wv.data(),
                f,
                kh,
                dst,
                &mut scratch,
                false,
            );
            for (row, &bias) in dst.chunks_mut(p).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(self.push(out, Op::Conv { x, w, b }, true))
    }

    /// Convolution restricted to 3x3 kernels.
    pub fn conv3x3_valid(
        &mut self,
        x: Var,
        store: &ParamStore<T>,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, TensorError> {
        let [_, _, kh, kw] = store.value(w).shape();
        if (kh, kw) != (3, 3) {
            return Err(mismatch(format!("expected a 3x3 kernel, got {kh}x{kw}")));
        }
        self.conv(x, store, w, b)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        store: &ParamStore<T>,
        gamma: ParamId,
        beta: ParamId,
        stats: BufferId,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let g = store.value(gamma).data();
        let bt = store.value(beta).data();
        if g.len() != c || bt.len() != c {
            return Err(mismatch(format!(
                "batch-norm affine parameters sized {} for {c} channels",
                g.len()
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(TensorError::Invalid(
                        "training-mode batch-norm needs at least two values per channel".into(),
                    ));
                }
                let inv = T::ONE / T::from_f64(count as f64);
                let mut mean = vec![T::ZERO; c];
                let mut var = vec![T::ZERO; c];
                for ch in 0..c {
                    let plane = |s: usize| &xv.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let m = (0..n).fold(T::ZERO, |a, s| a + lane_sum(plane(s))) * inv;
                    mean[ch] = m;
                    var[ch] = (0..n).fold(T::ZERO, |a, s| a + lane_sq_dev(plane(s), m)) * inv;
                }
                (mean, var)
            }
            Mode::Infer => {
                let st = store.stats(stats);
                (st.mean.clone(), st.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (r, d) = match (mode, self.renorm) {
            (Mode::Train, Some(lim)) => {
                let st = store.stats(stats);
                let (r_max, d_max) = (T::from_f64(lim.r_max), T::from_f64(lim.d_max));
                let mut r = vec![T::ONE; c];
                let mut d = vec![T::ZERO; c];
                for ch in 0..c {
                    let sigma = (st.var[ch] + eps).sqrt();
                    let ratio = T::ONE / (inv_std[ch] * sigma);
                    r[ch] = ratio.max(T::ONE / r_max).min(r_max);
                    d[ch] = ((mean[ch] - st.mean[ch]) / sigma).max(-d_max).min(d_max);
                }
                (r, d)
            }
            _ => (vec![T::ONE; c], vec![T::ZERO; c]),
        };
        let mut out = Tensor::zeros(xv.shape());
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * hw;
                let scale = g[ch] * inv_std[ch] * r[ch];
                let m = mean[ch];
                let shift = bt[ch] + g[ch] * d[ch];
                let src = &xv.data()[start..start + hw];
                let dst = &mut out.data_mut()[start..start + hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - m) * scale + shift;
                }
            }
        }
        if mode == Mode::Train {
            self.bn_updates.push(BnUpdate {
                buffer: stats,
                mean: mean.clone(),
                var,
            });
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                r,
                d,
                train: mode == Mode::Train,
            },
            true,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0]
            .value
            .map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatialSize { h, w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u8; n * c * oh * ow];
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let i0 = ib + 2 * y * w + 2 * x;
                    let cand = [src[i0], src[i0 + 1], src[i0 + w], src[i0 + w + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    dst[ob + y * ow + x] = cand[best];
                    argmax[ob + y * ow + x] = best as u8;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nn2x2(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..h {
                let srow = &src[plane * h * w + y * w..plane * h * w + (y + 1) * w];
                let d0 = plane * oh * ow + 2 * y * ow;
                for (x, &v) in srow.iter().enumerate() {
                    dst[d0 + 2 * x] = v;
                    dst[d0 + 2 * x + 1] = v;
                }
                let (head, tail) = dst.split_at_mut(d0 + ow);
                tail[..ow].copy_from_slice(&head[d0..d0 + ow]);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    /// Centered spatial crop.
    pub fn center_crop(
        &mut self,
        x: Var,
        target_h: usize,
        target_w: usize,
    ) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let [n, c, h, w] = xv.shape();
        let offset = |from: usize, to: usize| -> Result<usize, TensorError> {
            if to > from || to == 0 {
                return Err(mismatch(format!("cannot crop {from} to {to}")));
            }
            if (from - to) % 2 != 0 {
                return Err(TensorError::OddCropDifference { from, to });
            }
            Ok((from - to) / 2)
        };
        let top = offset(h, target_h)?;
        let left = offset(w, target_w)?;
        let out = xv
            .window(top, left, target_h, target_w)
            .expect("crop window in frame");
        debug_assert_eq!(out.shape(), [n, c, target_h, target_w]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop { x, top, left }, rg))
    }

    /// Channel concatenation, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch(format!(
                "concat of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        let sa = ca * h * w;
        let sb = cb * h * w;
        for s in 0..n {
            let dst = &mut out.data_mut()[s * (sa + sb)..(s + 1) * (sa + sb)];
            dst[..sa].copy_from_slice(av.sample(s));
            dst[sa..].copy_from_slice(bv.sample(s));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_pixelwise(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let [n, k, h, w] = xv.shape();
        if k < 2 {
            return Err(TensorError::Invalid(format!("softmax over {k} classes")));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(xv.shape());
        let src = xv.data();
        let dst = out.data_mut();
        for s in 0..n {
            let base = s * k * hw;
            for p in 0..hw {
                let mut mx = src[base + p];
                for c in 1..k {
                    mx = mx.max(src[base + c * hw + p]);
                }
                let mut sum = T::ZERO;
                for c in 0..k {
                    let e = (src[base + c * hw + p] - mx).exp();
                    dst[base + c * hw + p] = e;
                    sum += e;
                }
                let inv = T::ONE / sum;
                for c in 0..k {
                    dst[base + c * hw + p] *= inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Mean of `-ln p(true class)` over labeled pixels. `targets` has one
    /// entry per pixel (`n x h x w`); 0 is unlabeled and class `c >= 1`
    /// maps to channel `c - 1`. Returns 0 when nothing is labeled.
    pub fn masked_cross_entropy(&mut self, probs: Var, targets: &[u8]) -> Result<Var, TensorError> {
        let pv = &self.nodes[probs.0].value;
        let [n, k, h, w] = pv.shape();
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(mismatch(format!(
                "{} targets for {n}x{h}x{w} pixels",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize > k) {
            return Err(TensorError::Invalid(format!(
                "target class {bad} exceeds {k} classes"
            )));
        }
        let lo = T::from_f64(CE_CLIP);
        let hi = T::from_f64(1.0 - CE_CLIP);
        let mut acc = T::ZERO;
        let mut labeled = 0usize;
        for s in 0..n {
            for p in 0..hw {
                let t = targets[s * hw + p];
                if t == 0 {
                    continue;
                }
                let mut q = pv.data()[(s * k + (t as usize - 1)) * hw + p];
                if q < lo {
                    q = lo;
                } else if q > hi {
                    q = hi;
                }
                acc -= q.ln();
                labeled += 1;
            }
        }
        let loss = if labeled == 0 {
            T::ZERO
        } else {
            acc / T::from_f64(labeled as f64)
        };
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                labeled,
            },
            rg,
        ))
    }

    /// `sum(weight_i * term_i)` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        let mut acc = T::ZERO;
        let mut rg = false;
        for &(v, wt) in terms {
            let t = &self.nodes[v.0].value;
            if t.len() != 1 {
                return Err(mismatch(format!(
                    "weighted_sum term has shape {:?}",
                    t.shape()
                )));
            }
            acc += wt * t.data()[0];
            rg |= self.rg(v);
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// `coefficient * sum(w^2)` over `params`, as a scalar node.
    pub fn l2_penalty(&mut self, store: &ParamStore<T>, params: &[ParamId], coefficient: T) -> Var {
        let value = super::param::l2_penalty(store, params, coefficient);
        self.push(
            Tensor::scalar(value),
            Op::L2 {
                params: params.to_vec(),
                coefficient,
            },
            true,
        )
    }

    /// Hash of every non-differentiable branch decision taken on the tape
    /// (ReLU signs, pooling winners, loss clipping).
    pub fn nonsmooth_signature(&self) -> u64 {
        const PRIME: u64 = 0x100000001b3;
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        mix((v > T::ZERO) as u64);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    for &a in argmax {
                        mix(a as u64);
                    }
                }
                Op::CrossEntropy { probs, targets, .. } => {
                    let pv = &self.nodes[probs.0].value;
                    let [n, k, hh, ww] = pv.shape();
                    let hw = hh * ww;
                    let lo = T::from_f64(CE_CLIP);
                    let hi = T::from_f64(1.0 - CE_CLIP);
                    for s in 0..n {
                        for p in 0..hw {
                            let t = targets[s * hw + p];
                            if t > 0 {
                                let q = pv.data()[(s * k + t as usize - 1) * hw + p];
                                mix(if q < lo {
                                    1
                                } else if q > hi {
                                    2
                                } else {
                                    3
                                });
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from the scalar node `loss`, accumulating parameter
    /// gradients into `store`. Returns the adjoints of all nodes (None where
    /// no gradient flowed) so callers can inspect input gradients.
    pub fn backward(
        &self,
        loss: Var,
        store: &mut ParamStore<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(mismatch("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(f) = node.adjoint_scale {
                g.data_mut().iter_mut().for_each(|v| *v *= f);
            }
            self.backward_node(node, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate_owned(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut Tensor<T>)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut ParamStore<T>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Conv { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let [n, c, h, wd] = xv.shape();
                let [f, _, k, _] = store.value(*w).shape();
                let [_, _, oh, ow] = g.shape();
                let p = oh * ow;
                let need_dx = self.rg(*x);
                let w_flipped = if need_dx {
                    flip_kernel(store.value(*w))
                } else {
                    Vec::new()
                };
                let mut dx = if need_dx {
                    Some(Tensor::zeros(xv.shape()))
                } else {
                    None
                };
                let mut scratch = Vec::new();
                let mut padded = Vec::new();
                for s in 0..n {
                    let gs = &g.data()[s * f * p..(s + 1) * f * p];
                    conv_backward_weights(
                        gs,
                        xv.sample(s),
                        [c, h, wd],
                        f,
                        k,
                        store.get_mut(*w).grad.data_mut(),
                        &mut scratch,
                    );
                    {
                        let pb = store.get_mut(*b);
                        for (gb, row) in pb.grad.data_mut().iter_mut().zip(gs.chunks(p)) {
                            *gb += row.iter().fold(T::ZERO, |a, &v| a + v);
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let per = c * h * wd;
                        let dxs = &mut dx.data_mut()[s * per..(s + 1) * per];
                        conv_backward_input(
                            gs,
                            &w_flipped,
                            [c, h, wd],
                            f,
                            k,
                            dxs,
                            &mut padded,
                            &mut scratch,
                        );
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                r: renorm_r,
                d: renorm_d,
                train,
            } => {
                let xv = &self.nodes[x.0].value;
                let [n, c, h, w] = xv.shape();
                let hw = h * w;
                let train = *train;
                let gam = store.value(*gamma).data();
                let plane = |s: usize, ch: usize| (s * c + ch) * hw..(s * c + ch + 1) * hw;
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    for s in 0..n {
                        let r = plane(s, ch);
                        dbeta[ch] += lane_sum(&g.data()[r.clone()]);
                        dgamma[ch] += lane_dot_dev(&g.data()[r.clone()], &xv.data()[r], mean[ch]);
                    }
                    dgamma[ch] *= inv_std[ch];
                }
                let dx = self.rg(*x).then(|| {
                    let count = T::from_f64((n * hw) as f64);
                    let mut dx = Tensor::zeros(xv.shape());
                    for ch in 0..c {
                        let scale = gam[ch] * inv_std[ch] * renorm_r[ch];
                        let k1 = dbeta[ch] / count;
                        let k2 = dgamma[ch] * inv_std[ch] / count;
                        let m = mean[ch];
                        for s in 0..n {
                            let r = plane(s, ch);
                            let gs = &g.data()[r.clone()];
                            let xs = &xv.data()[r.clone()];
                            let ds = &mut dx.data_mut()[r];
                            if train {
                                for ((d, &gv), &xval) in ds.iter_mut().zip(gs).zip(xs) {
                                    *d = scale * (gv - k1 - (xval - m) * k2);
                                }
                            } else {
                                for (d, &gv) in ds.iter_mut().zip(gs) {
                                    *d = scale * gv;
                                }
                            }
                        }
                    }
                    dx
                });
                for (ch, a) in store.get_mut(*gamma).grad.data_mut().iter_mut().enumerate() {
                    *a += renorm_r[ch] * dgamma[ch] + renorm_d[ch] * dbeta[ch];
                }
                for (a, &d) in store.get_mut(*beta).grad.data_mut().iter_mut().zip(&dbeta) {
                    *a += d;
                }
                if let Some(dx) = dx {
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (d, &o) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if o <= T::ZERO {
                            *d = T::ZERO;
                        }
                    }
                    self.accumulate_owned(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, *x, |dx| {
                    let d = dx.data_mut();
                    for plane in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = plane * oh * ow + y * ow + xx;
                                let a = argmax[o] as usize;
                                let i = plane * h * w + (2 * y + a / 2) * w + 2 * xx + a % 2;
                                d[i] += g.data()[o];
                            }
                        }
                    }
                });
            }
            Op::Upsample { x } => {
                let [n, c, h, w] = self.nodes[x.0].value.shape();
                let ow = 2 * w;
                self.accumulate(grads, *x, |dx| {
                    let d = dx.data_mut();
                    let gd = g.data();
                    for plane in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = plane * 4 * h * w + 2 * y * ow + 2 * xx;
                                d[plane * h * w + y * w + xx] +=
                                    gd[o] + gd[o + 1] + gd[o + ow] + gd[o + ow + 1];
                            }
                        }
                    }
                });
            }
            Op::Crop { x, top, left } => {
                let [n, c, _, _] = self.nodes[x.0].value.shape();
                let [_, _, th, tw] = g.shape();
                self.accumulate(grads, *x, |dx| {
                    for s in 0..n {
                        for ch in 0..c {
                            for y in 0..th {
                                let di = dx.index(s, ch, top + y, *left);
                                let gi = g.index(s, ch, y, 0);
                                for (d, &gv) in dx.data_mut()[di..di + tw]
                                    .iter_mut()
                                    .zip(&g.data()[gi..gi + tw])
                                {
                                    *d += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.shape();
                let cb = self.nodes[b.0].value.c();
                let sa = ca * h * w;
                let sb = cb * h * w;
                self.accumulate(grads, *a, |da| {
                    for s in 0..n {
                        let src = &g.data()[s * (sa + sb)..s * (sa + sb) + sa];
                        for (d, &v) in da.data_mut()[s * sa..(s + 1) * sa].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for s in 0..n {
                        let src = &g.data()[s * (sa + sb) + sa..(s + 1) * (sa + sb)];
                        for (d, &v) in db.data_mut()[s * sb..(s + 1) * sb].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let out = &node.value;
                let [n, k, h, w] = out.shape();
                let hw = h * w;
                self.accumulate(grads, *x, |dx| {
                    let (p, gd) = (out.data(), g.data());
                    let d = dx.data_mut();
                    for s in 0..n {
                        let base = s * k * hw;
                        for px in 0..hw {
                            let mut dot = T::ZERO;
                            for c in 0..k {
                                dot += p[base + c * hw + px] * gd[base + c * hw + px];
                            }
                            for c in 0..k {
                                let i = base + c * hw + px;
                                d[i] += p[i] * (gd[i] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                probs,
                targets,
                labeled,
            } => {
                if *labeled == 0 {
                    return;
                }
                let pv = &self.nodes[probs.0].value;
                let [n, k, h, w] = pv.shape();
                let hw = h * w;
                let lo = T::from_f64(CE_CLIP);
                let hi = T::from_f64(1.0 - CE_CLIP);
                let scale = g.data()[0] / T::from_f64(*labeled as f64);
                self.accumulate(grads, *probs, |dp| {
                    for s in 0..n {
                        for px in 0..hw {
                            let t = targets[s * hw + px];
                            if t == 0 {
                                continue;
                            }
                            let i = (s * k + t as usize - 1) * hw + px;
                            let q = pv.data()[i];
                            if q > lo && q < hi {
                                dp.data_mut()[i] -= scale / q;
                            }
                        }
                    }
                });
            }
            Op::WeightedSum { terms } => {
                for &(v, wt) in terms {
                    let gv = g.data()[0] * wt;
                    self.accumulate(grads, v, |d| d.data_mut()[0] += gv);
                }
            }
            Op::L2 {
                params,
                coefficient,
            } => {
                let two = T::from_f64(2.0) * *coefficient * g.data()[0];
                for &id in params {
                    let p = store.get_mut(id);
                    let crate::tensor::Parameter { value, grad, .. } = p;
                    for (gr, &w) in grad.data_mut().iter_mut().zip(value.data()) {
                        *gr += two * w;
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;

/// Sum with independent partial accumulators so the loop vectorizes.
fn lane_sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            acc[i] += ch[i];
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |s, &v| s + v);
    for &v in tail {
        total += v;
    }
    total
}

/// `sum((a - m)^2)`.
fn lane_sq_dev<T: Scalar>(a: &[T], m: T) -> T {
    let mut acc = [T::ZERO; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder();
    for ch in chunks {
        for i in 0..LANES {
            let d = ch[i] - m;
            acc[i] += d * d;
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |s, &v| s + v);
    for &v in tail {
        total += (v - m) * (v - m);
    }
    total
}

/// `sum(g * (x - m))`.
fn lane_dot_dev<T: Scalar>(g: &[T], x: &[T], m: T) -> T {
    let mut acc = [T::ZERO; LANES];
    let gc = g.chunks_exact(LANES);
    let gt = gc.remainder();
    let xc = x.chunks_exact(LANES);
    let xt = xc.remainder();
    for (a, b) in gc.zip(xc) {
        for i in 0..LANES {
            acc[i] += a[i] * (b[i] - m);
        }
    }
    let mut total = acc.iter().fold(T::ZERO, |s, &v| s + v);
    for (&a, &b) in gt.iter().zip(xt) {
        total += a * (b - m);
    }
    total
}

/// Elements of unfolded columns processed at once; keeps the working set
/// of a chunk inside the L2 cache.
const CHUNK_ELEMS: usize = 1 << 16;

fn chunk_rows(ckk: usize, ow: usize, oh: usize) -> usize {
    (CHUNK_ELEMS / (ckk * ow)).clamp(1, oh)
}

/// `C = A B (+ C)` over strided row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        k > 0
            && last(m, k, rsa, csa) < a.len()
            && last(k, n, rsb, csb) < b.len()
            && last(m, n, rsc, 1) < c.len()
    );
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: extents checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Unfolds output rows `y0..y0 + rows` into `(c*k*k) x (rows*ow)` columns.
fn im2col_rows<T: Scalar>(
    x: &[T],
    [c, h, w]: [usize; 3],
    k: usize,
    y0: usize,
    rows: usize,
    cols: &mut [T],
) {
    let ow = w - k + 1;
    let pc = rows * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * pc;
                for y in 0..rows {
                    let src = ch * h * w + (y0 + y + ky) * w + kx;
                    cols[row + y * ow..row + (y + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

fn conv_forward_sample<T: Scalar>(
    x: &[T],
    dims: [usize; 3],
    w: &[T],
    f: usize,
    k: usize,
    out: &mut [T],
    scratch: &mut Vec<T>,
    accumulate: bool,
) {
    let [c, h, wd] = dims;
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let p = oh * ow;
    let ckk = c * k * k;
    if k == 1 {
        gemm_strided(f, c, p, w, (c, 1), x, (p, 1), out, p, accumulate);
        return;
    }
    let step = chunk_rows(ckk, ow, oh);
    scratch.resize(ckk * step * ow, T::ZERO);
    let mut y0 = 0;
    while y0 < oh {
        let rows = step.min(oh - y0);
        let pc = rows * ow;
        im2col_rows(x, dims, k, y0, rows, scratch);
        gemm_strided(
            f,
            ckk,
            pc,
            w,
            (ckk, 1),
            &scratch[..ckk * pc],
            (pc, 1),
            &mut out[y0 * ow..],
            p,
            accumulate,
        );
        y0 += rows;
    }
}

fn conv_backward_weights<T: Scalar>(
    g: &[T],
    x: &[T],
    dims: [usize; 3],
    f: usize,
    k: usize,
    dw: &mut [T],
    scratch: &mut Vec<T>,
) {
    let [c, h, wd] = dims;
    let (oh, ow) = (h - k + 1, wd - k + 1);
    let p = oh * ow;
    let ckk = c * k * k;
    if k == 1 {
        gemm_strided(f, p, c, g, (p, 1), x, (1, p), dw, c, true);
        return;
    }
    let step = chunk_rows(ckk, ow, oh);
    scratch.resize(ckk * step * ow, T::ZERO);
    let mut y0 = 0;
    while y0 < oh {
        let rows = step.min(oh - y0);
        let pc = rows * ow;
        im2col_rows(x, dims, k, y0, rows, scratch);
        gemm_strided(
            f,
            pc,
            ckk,
            &g[y0 * ow..],
            (p, 1),
            &scratch[..ckk * pc],
            (1, pc),
            dw,
            ckk,
            true,
        );
        y0 += rows;
    }
}

/// Input gradient as a full convolution: the output gradient, zero padded
/// by `k - 1`, convolved with the spatially flipped, channel-transposed
/// kernel.
#[allow(clippy::too_many_arguments)]
fn conv_backward_input<T: Scalar>(
    g: &[T],
    w_flipped: &[T],
    dims: [usize; 3],
    f: usize,
    k: usize,
    dx: &mut [T],
    padded: &mut Vec<T>,
    scratch: &mut Vec<T>,
) {
    let [c, h, wd] = dims;
    let (oh, ow) = (h - k + 1, wd - k + 1);
    if k == 1 {
        conv_forward_sample(g, [f, oh, ow], w_flipped, c, 1, dx, scratch, true);
        return;
    }
    let (ph, pw) = (h + k - 1, wd + k - 1);
    padded.clear();
    padded.resize(f * ph * pw, T::ZERO);
    for fi in 0..f {
        for y in 0..oh {
            let dst = fi * ph * pw + (y + k - 1) * pw + k - 1;
            padded[dst..dst + ow].copy_from_slice(&g[(fi * oh + y) * ow..(fi * oh + y + 1) * ow]);
        }
    }
    conv_forward_sample(padded, [f, ph, pw], w_flipped, c, k, dx, scratch, true);
}

/// `w'[c][f][ky][kx] = w[f][c][k-1-ky][k-1-kx]`.
fn flip_kernel<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    let [f, c, k, _] = w.shape();
    let mut out = vec![T::ZERO; w.len()];
    for fi in 0..f {
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ci * f + fi) * k + ky) * k + kx] = w.at(fi, ci, k - 1 - ky, k - 1 - kx);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn strided_gemm_transposes() {
        // A = [[1,2,3],[4,5,6]], B = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm_strided(2, 3, 2, &a, (3, 1), &b, (2, 1), &mut c, 2, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut d = [1.0f64; 4];
        gemm_strided(2, 3, 2, &at, (1, 2), &bt, (1, 3), &mut d, 2, true);
        assert_eq!(d, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor([2, 3, 3, 3], &mut rng));
        let b = store.add("b", rand_tensor([1, 1, 1, 2], &mut rng));
        let x = rand_tensor([2, 3, 5, 6], &mut rng);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = g.conv3x3_valid(xi, &store, w, b).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), [2, 2, 3, 4]);
        let (wv, bv) = (store.value(w), store.value(b));
        for n in 0..2 {
            for f in 0..2 {
                for oy in 0..3 {
                    for ox in 0..4 {
                        let mut acc = bv.data()[f];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += wv.at(f, c, ky, kx) * x.at(n, c, oy + ky, ox + kx);
                                }
                            }
                        }
                        assert!((out.at(n, f, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_upsample_crop_concat_values() {
        let x =
            Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let xi = g.input(x);
        let p = g.maxpool2x2(xi).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 7.0]);
        let u = g.upsample_nn2x2(p);
        assert_eq!(g.value(u).data(), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);
        let c = g.center_crop(u, 2, 2).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 7.0, 5.0, 7.0]);
        assert!(matches!(
            g.center_crop(u, 1, 1),
            Err(TensorError::OddCropDifference { .. })
        ));
        let cat = g.concat_channels(c, c).unwrap();
        assert_eq!(g.value(cat).shape(), [1, 2, 2, 2]);
        let odd = g.input(Tensor::zeros([1, 1, 3, 4]));
        assert!(matches!(
            g.maxpool2x2(odd),
            Err(TensorError::OddSpatialSize { h: 3, w: 4 })
        ));
    }

    #[test]
    fn softmax_and_cross_entropy_by_hand() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![0.0, 1000.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let xi = g.input(x);
        let p = g.softmax_pixelwise(xi).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 1.0, 0.5, 0.0]);
        let ce = g.masked_cross_entropy(p, &[1, 0]).unwrap();
        assert!((g.scalar(ce) - 2f64.ln()).abs() < 1e-12);
        let clipped = g.masked_cross_entropy(p, &[0, 2]).unwrap();
        assert!((g.scalar(clipped) + CE_CLIP.ln()).abs() < 1e-9);
        let none = g.masked_cross_entropy(p, &[0, 0]).unwrap();
        assert_eq!(g.scalar(none), 0.0);
        assert!(g.masked_cross_entropy(p, &[3, 0]).is_err());
    }

    struct Net {
        store: ParamStore<f64>,
        ids: Vec<ParamId>,
        w1: ParamId,
        b1: ParamId,
        gamma: ParamId,
        beta: ParamId,
        stats: BufferId,
        w2: ParamId,
        b2: ParamId,
        head: ParamId,
        hb: ParamId,
    }

    fn net() -> Net {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_tensor([3, 2, 3, 3], &mut rng));
        let b1 = store.add("b1", rand_tensor([1, 1, 1, 3], &mut rng));
        let gamma = store.add("gamma", Tensor::full([1, 1, 1, 3], 1.3));
        let beta = store.add("beta", rand_tensor([1, 1, 1, 3], &mut rng));
        let stats = store.add_running_stats("bn", 3);
        let w2 = store.add("w2", rand_tensor([2, 3, 3, 3], &mut rng));
        let b2 = store.add("b2", rand_tensor([1, 1, 1, 2], &mut rng));
        let head = store.add("head", rand_tensor([3, 5, 1, 1], &mut rng));
        let hb = store.add("hb", rand_tensor([1, 1, 1, 3], &mut rng));
        let ids = store.ids().collect();
        Net {
            store,
            ids,
            w1,
            b1,
            gamma,
            beta,
            stats,
            w2,
            b2,
            head,
            hb,
        }
    }

    /// conv-bn-relu-pool-conv-upsample, concat with a crop of the first
    /// stage, 1x1 head, softmax, two losses and an L2 term.
    fn forward(
        net: &Net,
        g: &mut Graph<f64>,
        store: &ParamStore<f64>,
        x: &Tensor<f64>,
        targets: &[u8],
        perturb: bool,
    ) -> Result<Var, TensorError> {
        let xi = g.input(x.clone());
        let c1 = g.conv3x3_valid(xi, store, net.w1, net.b1)?;
        let bn = g.batchnorm(c1, store, net.gamma, net.beta, net.stats, Mode::Train)?;
        let r = g.relu(bn);
        let p = g.maxpool2x2(r)?;
        let c2 = g.conv3x3_valid(p, store, net.w2, net.b2)?;
        let u = g.upsample_nn2x2(c2);
        let [_, _, h, w] = g.value(u).shape();
        let skip = g.center_crop(r, h, w)?;
        let cat = g.concat_channels(u, skip)?;
        if perturb {
            g.perturb_adjoint(cat, 1.01);
        }
        let logits = g.conv(cat, store, net.head, net.hb)?;
        let probs = g.softmax_pixelwise(logits)?;
        let a = g.masked_cross_entropy(probs, targets)?;
        let [_, _, oh, ow] = g.value(probs).shape();
        let small = g.center_crop(probs, oh - 2, ow - 2)?;
        let sub: Vec<u8> = (0..2)
            .flat_map(|n| {
                (1..oh - 1)
                    .flat_map(move |y| (1..ow - 1).map(move |xx| targets[(n * oh + y) * ow + xx]))
            })
            .collect();
        let b = g.masked_cross_entropy(small, &sub)?;
        let l2 = g.l2_penalty(store, &net.ids, 1e-2);
        g.weighted_sum(&[(a, 0.75), (b, 0.25), (l2, 1.0)])
    }

    fn setup() -> (Net, Tensor<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = net();
        let x = rand_tensor([2, 2, 10, 10], &mut rng);
        // output is 2x2x4x4 after the first conv (8) -> pool (4) -> conv (2) -> up (4)
        let targets: Vec<u8> = (0..32).map(|i| (i * 7 % 4) as u8).collect();
        (net, x, targets)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let (mut net, x, targets) = setup();
        let mut store = std::mem::take(&mut net.store);
        let ids = net.ids.clone();
        let cfg = GradCheckConfig {
            coords_per_param: 6,
            tolerance: 1e-5,
            ..Default::default()
        };
        let report = grad_check(
            |g, s| forward(&net, g, s, &x, &targets, false),
            &mut store,
            &ids,
            &cfg,
        )
        .unwrap();
        assert!(report.checked >= 30, "{report:?}");
    }

    #[test]
    fn perturbed_adjoint_is_caught() {
        let (mut net, x, targets) = setup();
        let mut store = std::mem::take(&mut net.store);
        let ids = net.ids.clone();
        let cfg = GradCheckConfig {
            coords_per_param: 6,
            tolerance: 1e-5,
            ..Default::default()
        };
        let r = grad_check(
            |g, s| forward(&net, g, s, &x, &targets, true),
            &mut store,
            &ids[..2],
            &cfg,
        );
        assert!(
            matches!(r, Err(TensorError::GradientMismatch { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn inference_bn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor([2, 1, 3, 3], &mut rng));
        let b = store.add("b", rand_tensor([1, 1, 1, 2], &mut rng));
        let gamma = store.add("g", Tensor::full([1, 1, 1, 2], 0.7));
        let beta = store.add("beta", rand_tensor([1, 1, 1, 2], &mut rng));
        let st = store.add_running_stats("s", 2);
        store.stats_mut(st).mean = vec![0.3, -0.2];
        store.stats_mut(st).var = vec![2.0, 0.5];
        let x = rand_tensor([1, 1, 5, 5], &mut rng);
        let targets: Vec<u8> = (0..9).map(|i| (i % 3) as u8).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            |g, s| {
                let xi = g.input(x.clone());
                let c = g.conv3x3_valid(xi, s, w, b)?;
                let n = g.batchnorm(c, s, gamma, beta, st, Mode::Infer)?;
                assert!(g.bn_updates().is_empty());
                let p = g.softmax_pixelwise(n)?;
                g.masked_cross_entropy(p, &targets)
            },
            &mut store,
            &ids,
            &GradCheckConfig {
                coords_per_param: 20,
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked, 9 * 2 + 2 + 2 + 2);
    }

    #[test]
    fn loss_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full([1, 4, 2, 3], 0.3));
        let p = g.softmax_pixelwise(x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let ce = g.masked_cross_entropy(p, &[1, 2, 3, 4, 1, 2]).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);
        let onehot = g.input(Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let ce = g.masked_cross_entropy(onehot, &[1]).unwrap();
        assert!((g.scalar(ce) - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor([2, 5, 3, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let a = g.input(x.clone());
        let pa = g.softmax_pixelwise(a).unwrap();
        let b = g.input(x.map(|v| v + 17.0));
        let pb = g.softmax_pixelwise(b).unwrap();
        for (u, v) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
        let t = g.value(pa);
        for n in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let s: f64 = (0..5).map(|c| t.at(n, c, y, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_relu_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor([3, 3, 3, 3], &mut rng));
        let b = store.add("b", rand_tensor([1, 1, 1, 3], &mut rng));
        let x = rand_tensor([1, 3, 9, 9], &mut rng);
        let targets: Vec<u8> = (0..49).map(|i| (i % 4) as u8).collect();
        let report = grad_check(
            |g, s| {
                let xi = g.input(x.clone());
                let c = g.conv3x3_valid(xi, s, w, b)?;
                let r = g.relu(c);
                let p = g.softmax_pixelwise(r)?;
                g.masked_cross_entropy(p, &targets)
            },
            &mut store,
            &[w, b],
            &GradCheckConfig {
                coords_per_param: 30,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4 && report.checked > 20,
            "{report:?}"
        );
    }

    #[test]
    fn linear_conv_differences_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor([1, 2, 3, 3], &mut rng));
        let b = store.add("b", rand_tensor([1, 1, 1, 1], &mut rng));
        let x = rand_tensor([1, 2, 5, 5], &mut rng);
        let report = grad_check(
            |g, s| {
                let xi = g.input(x.clone());
                let c = g.conv3x3_valid(xi, s, w, b)?;
                let cr = g.center_crop(c, 1, 1)?;
                g.weighted_sum(&[(cr, 1.5)])
            },
            &mut store,
            &[w, b],
            &GradCheckConfig {
                coords_per_param: 19,
                tolerance: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked, 19);
    }

    #[test]
    fn running_stats_follow_batches() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add("g", Tensor::full([1, 1, 1, 1], 1.0));
        let beta = store.add("b", Tensor::zeros([1, 1, 1, 1]));
        let st = store.add_running_stats("s", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = g
            .batchnorm(x, &store, gamma, beta, st, Mode::Train)
            .unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
        g.commit_running_stats(&mut store);
        assert!((store.stats(st).mean[0] - 0.2).abs() < 1e-12);
        assert!((store.stats(st).var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_renorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", rand_tensor([2, 1, 3, 3], &mut rng));
        let b = store.add("b", rand_tensor([1, 1, 1, 2], &mut rng));
        let gamma = store.add("g", Tensor::full([1, 1, 1, 2], 0.7));
        let beta = store.add("beta", rand_tensor([1, 1, 1, 2], &mut rng));
        let st = store.add_running_stats("s", 2);
        // Far-off running statistics pin r and d to their limits.
        store.stats_mut(st).mean = vec![50.0, -50.0];
        store.stats_mut(st).var = vec![400.0, 900.0];
        let x = rand_tensor([2, 1, 6, 6], &mut rng);
        let targets: Vec<u8> = (0..32).map(|i| (i % 3) as u8).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            |g, s| {
                g.set_renorm(Some(Renorm {
                    r_max: 2.0,
                    d_max: 1.0,
                }));
                let xi = g.input(x.clone());
                let c = g.conv3x3_valid(xi, s, w, b)?;
                let n = g.batchnorm(c, s, gamma, beta, st, Mode::Train)?;
                let p = g.softmax_pixelwise(n)?;
                g.masked_cross_entropy(p, &targets)
            },
            &mut store,
            &ids,
            &GradCheckConfig {
                coords_per_param: 20,
                tolerance: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.checked > 0);
    }

    #[test]
    fn unclipped_renorm_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add("g", Tensor::from_vec([1, 2, 1, 1], vec![0.7, 1.3]).unwrap());
        let beta = store.add(
            "b",
            Tensor::from_vec([1, 2, 1, 1], vec![0.1, -0.4]).unwrap(),
        );
        let st = store.add_running_stats("s", 2);
        store.stats_mut(st).mean = vec![0.2, -0.1];
        store.stats_mut(st).var = vec![0.5, 0.2];
        let x = rand_tensor([1, 2, 4, 4], &mut rng);
        let run = |mode, renorm| {
            let mut g = Graph::new();
            g.set_renorm(renorm);
            let xi = g.input(x.clone());
            let y = g.batchnorm(xi, &store, gamma, beta, st, mode).unwrap();
            g.value(y).clone()
        };
        let wide = Some(Renorm {
            r_max: 1e6,
            d_max: 1e6,
        });
        let renormed = run(Mode::Train, wide);
        let infer = run(Mode::Infer, None);
        for (a, b) in renormed.data().iter().zip(infer.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // r_max = 1, d_max = 0 is plain batch-norm.
        let plain = run(Mode::Train, None);
        let tight = run(
            Mode::Train,
            Some(Renorm {
                r_max: 1.0,
                d_max: 0.0,
            }),
        );
        assert_eq!(plain.data(), tight.data());
    }
}
