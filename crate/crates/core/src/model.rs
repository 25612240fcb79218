//! Target and context encoder-decoder branches joined by a resolution
//! matched hook, plus the single-resolution U-Net baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::PatchPair;
use crate::shape::{
    is_valid_input_size, solve_hook_depth, trace_shapes, BranchArchitecture, HookPlan,
    ResolutionPair, ShapeError, ShapeTrace,
};
use crate::tensor::{BufferId, Graph, Mode, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

fn default_arch() -> BranchArchitecture {
    BranchArchitecture::new(4).expect("depth 4 is valid")
}

/// Model hyper-parameters. `context_resolution: None` selects a single
/// U-Net at `target_resolution`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HookNetConfig {
    pub input_size: usize,
    pub target_resolution: f64,
    pub context_resolution: Option<f64>,
    pub arch: BranchArchitecture,
    pub base_filters: usize,
    pub num_classes: usize,
    pub lambda: f64,
    pub l2_coefficient: f64,
    pub learning_rate: f64,
}

impl Default for HookNetConfig {
    fn default() -> Self {
        Self {
            input_size: 284,
            target_resolution: 0.5,
            context_resolution: Some(8.0),
            arch: default_arch(),
            base_filters: 16,
            num_classes: 4,
            lambda: 0.75,
            l2_coefficient: 1e-5,
            learning_rate: 5e-6,
        }
    }
}

impl HookNetConfig {
    pub fn resolution_pair(&self) -> Option<Result<ResolutionPair, ShapeError>> {
        self.context_resolution
            .map(|rc| ResolutionPair::new(self.target_resolution, rc))
    }

    /// Resolution pair used for patch extraction; a single U-Net reads the
    /// same resolution twice.
    pub fn extraction_pair(&self) -> Result<ResolutionPair, ShapeError> {
        let rc = self.context_resolution.unwrap_or(self.target_resolution);
        ResolutionPair::new(self.target_resolution, rc)
    }

    pub fn validate(&self) -> Result<Option<HookPlan>, ModelError> {
        self.arch.validate()?;
        if !is_valid_input_size(self.input_size, &self.arch) {
            // Surface the precise failing stage.
            trace_shapes(self.input_size, &self.arch)?;
        }
        if !(self.target_resolution.is_finite() && self.target_resolution > 0.0) {
            return Err(ShapeError::InvalidResolution(self.target_resolution).into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(ModelError::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return Err(ModelError::Config(format!(
                "l2_coefficient must be >= 0, got {}",
                self.l2_coefficient
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.base_filters == 0 {
            return Err(ModelError::Config("base_filters must be positive".into()));
        }
        match self.resolution_pair() {
            None => Ok(None),
            Some(pair) => Ok(Some(solve_hook_depth(&pair?, &self.arch, self.input_size)?)),
        }
    }

    pub fn filters(&self, depth: usize) -> usize {
        self.base_filters << depth
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
}

fn he_normal<T: Scalar>(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::from_f64(dist.sample(rng))).collect(),
    )
    .expect("nonzero shape")
}

impl ConvBn {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), he_normal([cout, cin, 3, 3], rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros([1, 1, 1, cout])),
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full([1, 1, 1, cout], T::ONE),
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, 1, 1, cout])),
            stats: store.add_running_stats(format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let c = g.conv3x3_valid(x, store, self.w, self.b)?;
        let n = g.batchnorm(c, store, self.gamma, self.beta, self.stats, mode)?;
        Ok(g.relu(n))
    }
}

#[derive(Debug, Clone)]
struct Branch {
    encoder: Vec<Vec<ConvBn>>,
    bottleneck: Vec<ConvBn>,
    /// Indexed by depth.
    decoder: Vec<Vec<ConvBn>>,
    head_w: ParamId,
    head_b: ParamId,
    params: Vec<ParamId>,
}

struct BranchOutput {
    probs: Var,
    tap: Option<Var>,
}

impl Branch {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &HookNetConfig,
        hook_channels: usize,
    ) -> Self {
        let first = store.len();
        let depth = cfg.arch.depth;
        let convs = cfg.arch.convs_per_level;
        let f = |d: usize| cfg.filters(d);
        let mut level =
            |name: String, cin: usize, cout: usize, store: &mut ParamStore<T>| -> Vec<ConvBn> {
                (0..convs)
                    .map(|i| {
                        ConvBn::new(
                            store,
                            rng,
                            &format!("{name}.conv{i}"),
                            if i == 0 { cin } else { cout },
                            cout,
                        )
                    })
                    .collect()
            };
        let mut encoder = Vec::with_capacity(depth);
        for d in 0..depth {
            let cin = if d == 0 { 3 } else { f(d - 1) };
            encoder.push(level(format!("{prefix}.enc{d}"), cin, f(d), store));
        }
        let bottleneck = level(
            format!("{prefix}.bottleneck"),
            f(depth - 1),
            f(depth),
            store,
        );
        let mut decoder: Vec<Vec<ConvBn>> = Vec::with_capacity(depth);
        for d in 0..depth {
            let up = f(d + 1) + if d + 1 == depth { hook_channels } else { 0 };
            decoder.push(level(format!("{prefix}.dec{d}"), up + f(d), f(d), store));
        }
        let head_w = store.add(
            format!("{prefix}.head.w"),
            he_normal([cfg.num_classes, f(0), 1, 1], rng),
        );
        let head_b = store.add(
            format!("{prefix}.head.b"),
            Tensor::zeros([1, 1, 1, cfg.num_classes]),
        );
        let params = (first..store.len()).map(ParamId).collect();
        Self {
            encoder,
            bottleneck,
            decoder,
            head_w,
            head_b,
            params,
        }
    }

    /// Runs the branch. `hook` is concatenated after the bottleneck (after a
    /// center crop to the bottleneck size); `tap_depth` selects the decoder
    /// map to return for hooking into another branch.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        hook: Option<Var>,
        tap_depth: Option<usize>,
    ) -> Result<BranchOutput, TensorError> {
        let depth = self.encoder.len();
        let mut skips = Vec::with_capacity(depth);
        let mut h = x;
        for level in &self.encoder {
            for cb in level {
                h = cb.forward(g, store, h, mode)?;
            }
            skips.push(h);
            h = g.maxpool2x2(h)?;
        }
        for cb in &self.bottleneck {
            h = cb.forward(g, store, h, mode)?;
        }
        let mut tap = None;
        if tap_depth == Some(depth) {
            tap = Some(h);
        }
        if let Some(hv) = hook {
            let [_, _, bh, bw] = g.value(h).shape();
            let cropped = g.center_crop(hv, bh, bw)?;
            h = g.concat_channels(h, cropped)?;
        }
        for d in (0..depth).rev() {
            h = g.upsample_nn2x2(h);
            let [_, _, uh, uw] = g.value(h).shape();
            let skip = g.center_crop(skips[d], uh, uw)?;
            h = g.concat_channels(h, skip)?;
            for cb in &self.decoder[d] {
                h = cb.forward(g, store, h, mode)?;
            }
            if tap_depth == Some(d) {
                tap = Some(h);
            }
        }
        let logits = g.conv(h, store, self.head_w, self.head_b)?;
        let probs = g.softmax_pixelwise(logits)?;
        Ok(BranchOutput { probs, tap })
    }
}

/// Graph handles produced by [`HookNet::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub target_probs: Var,
    pub context_probs: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub target_ce: Var,
    pub context_ce: Option<Var>,
    pub l2: Var,
}

/// Network inputs and output-window labels for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub target: Tensor<T>,
    pub context: Option<Tensor<T>>,
    /// `n x out x out` labels of the target output window.
    pub target_mask: Vec<u8>,
    pub context_mask: Option<Vec<u8>>,
}

/// Maps 8-bit RGB to `[-1, 1]`.
#[inline]
pub fn normalize_pixel<T: Scalar>(v: u8) -> T {
    T::from_f64(v as f64 / 127.5 - 1.0)
}

/// Interleaved `m x m` RGB patches to an `n x 3 x m x m` tensor.
pub fn pixels_to_tensor<T: Scalar>(patches: &[&[u8]], m: usize) -> Result<Tensor<T>, TensorError> {
    let plane = m * m;
    let mut data = vec![T::ZERO; patches.len() * 3 * plane];
    for (s, px) in patches.iter().enumerate() {
        if px.len() != 3 * plane {
            return Err(TensorError::ShapeMismatch(format!(
                "patch of {} bytes for {m}x{m} RGB",
                px.len()
            )));
        }
        let base = s * 3 * plane;
        for i in 0..plane {
            for c in 0..3 {
                data[base + c * plane + i] = normalize_pixel(px[3 * i + c]);
            }
        }
    }
    Tensor::from_vec([patches.len(), 3, m, m], data)
}

/// Central `out x out` window of an `m x m` row-major array.
pub fn center_window<V: Copy>(values: &[V], m: usize, out: usize) -> Vec<V> {
    assert!(out <= m && (m - out) % 2 == 0 && values.len() == m * m);
    let off = (m - out) / 2;
    let mut res = Vec::with_capacity(out * out);
    for y in 0..out {
        res.extend_from_slice(&values[(off + y) * m + off..(off + y) * m + off + out]);
    }
    res
}

/// 1-based class of the largest probability per pixel of `n x K x h x w`
/// probabilities, ties going to the lower class. Samples are concatenated.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> Vec<u8> {
    let [n, k, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        let sample = probs.sample(s);
        for i in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if sample[c * plane + i] > sample[best * plane + i] {
                    best = c;
                }
            }
            out.push(best as u8 + 1);
        }
    }
    out
}

impl<T: Scalar> Batch<T> {
    pub fn from_pairs(pairs: &[PatchPair], hooked: bool, out: usize) -> Result<Self, TensorError> {
        let m = pairs
            .first()
            .map(|p| p.size)
            .ok_or_else(|| TensorError::Invalid("empty batch".into()))?;
        let tp: Vec<&[u8]> = pairs.iter().map(|p| p.target.pixels.as_slice()).collect();
        let target = pixels_to_tensor(&tp, m)?;
        let target_mask = pairs
            .iter()
            .flat_map(|p| center_window(&p.target.mask, m, out))
            .collect();
        let (context, context_mask) = if hooked {
            let cp: Vec<&[u8]> = pairs.iter().map(|p| p.context.pixels.as_slice()).collect();
            (
                Some(pixels_to_tensor(&cp, m)?),
                Some(
                    pairs
                        .iter()
                        .flat_map(|p| center_window(&p.context.mask, m, out))
                        .collect(),
                ),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            target,
            context,
            target_mask,
            context_mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: HookNetConfig,
    pub trace: ShapeTrace,
    pub hook: Option<HookPlan>,
    pub parameter_count: usize,
    pub target_parameter_count: usize,
    pub context_parameter_count: usize,
    pub parameters: Vec<LayerSummary>,
}

/// A HookNet (two branches) or a single U-Net (`context == None`).
#[derive(Debug, Clone)]
pub struct HookNet<T> {
    config: HookNetConfig,
    pub store: ParamStore<T>,
    target: Branch,
    context: Option<Branch>,
    plan: Option<HookPlan>,
    trace: ShapeTrace,
}

impl<T: Scalar> HookNet<T> {
    /// Builds the model the config describes; weights drawn from `seed`.
    pub fn build(config: HookNetConfig, seed: u64) -> Result<Self, ModelError> {
        let plan = config.validate()?;
        let trace = trace_shapes(config.input_size, &config.arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hook_channels = plan.map(|p| config.filters(p.context_depth)).unwrap_or(0);
        let target = Branch::new(&mut store, &mut rng, "target", &config, hook_channels);
        let context = plan.map(|_| Branch::new(&mut store, &mut rng, "context", &config, 0));
        Ok(Self {
            config,
            store,
            target,
            context,
            plan,
            trace,
        })
    }

    /// Single-resolution U-Net with the same branch architecture.
    pub fn build_single_unet(mut config: HookNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.context_resolution = None;
        Self::build(config, seed)
    }

    pub fn config(&self) -> &HookNetConfig {
        &self.config
    }

    pub fn is_hooked(&self) -> bool {
        self.context.is_some()
    }

    pub fn hook_plan(&self) -> Option<&HookPlan> {
        self.plan.as_ref()
    }

    pub fn trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn output_size(&self) -> usize {
        self.trace.output_size
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn target_params(&self) -> &[ParamId] {
        &self.target.params
    }

    pub fn context_params(&self) -> &[ParamId] {
        self.context
            .as_ref()
            .map(|b| b.params.as_slice())
            .unwrap_or(&[])
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.store.value(id).len()).sum()
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            config: self.config.clone(),
            trace: self.trace.clone(),
            hook: self.plan,
            parameter_count: self.parameter_count(),
            target_parameter_count: self.count(self.target_params()),
            context_parameter_count: self.count(self.context_params()),
            parameters: self
                .store
                .params()
                .iter()
                .map(|p| LayerSummary {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                })
                .collect(),
        }
    }

    fn check_input(&self, t: &Tensor<T>, what: &str) -> Result<(), TensorError> {
        let m = self.config.input_size;
        let [_, c, h, w] = t.shape();
        if (c, h, w) != (3, m, m) {
            return Err(TensorError::ShapeMismatch(format!(
                "{what} input {:?}, expected n x 3 x {m} x {m}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Records both branches on `g`. For a hooked model `context` is required.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        target: Tensor<T>,
        context: Option<Tensor<T>>,
        mode: Mode,
    ) -> Result<ForwardOutput, TensorError> {
        self.forward_with(&self.store, g, target, context, mode)
    }

    /// [`Self::forward`] reading weights from `store`, which must share this
    /// model's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        target: Tensor<T>,
        context: Option<Tensor<T>>,
        mode: Mode,
    ) -> Result<ForwardOutput, TensorError> {
        self.check_input(&target, "target")?;
        match (&self.context, context) {
            (Some(branch), Some(ctx)) => {
                self.check_input(&ctx, "context")?;
                if ctx.n() != target.n() {
                    return Err(TensorError::ShapeMismatch(
                        "target and context batch sizes differ".into(),
                    ));
                }
                let plan = self.plan.expect("hooked model has a plan");
                let cx = g.input(ctx);
                let c = branch.forward(g, store, cx, mode, None, Some(plan.context_depth))?;
                let tx = g.input(target);
                let t = self.target.forward(g, store, tx, mode, c.tap, None)?;
                Ok(ForwardOutput {
                    target_probs: t.probs,
                    context_probs: Some(c.probs),
                })
            }
            (Some(_), None) => Err(TensorError::Invalid(
                "HookNet forward needs a context patch".into(),
            )),
            (None, _) => {
                let tx = g.input(target);
                let t = self.target.forward(g, store, tx, mode, None, None)?;
                Ok(ForwardOutput {
                    target_probs: t.probs,
                    context_probs: None,
                })
            }
        }
    }

    /// `lambda * CE_T + (1 - lambda) * CE_C + L2` for a HookNet, `CE + L2`
    /// for a single U-Net. Masks cover the output windows.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        out: &ForwardOutput,
        target_mask: &[u8],
        context_mask: Option<&[u8]>,
    ) -> Result<LossTerms, TensorError> {
        self.loss_with(&self.store, g, out, target_mask, context_mask)
    }

    pub fn loss_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        out: &ForwardOutput,
        target_mask: &[u8],
        context_mask: Option<&[u8]>,
    ) -> Result<LossTerms, TensorError> {
        let target_ce = g.masked_cross_entropy(out.target_probs, target_mask)?;
        let l2 = g.l2_penalty(
            store,
            &self.all_params(),
            T::from_f64(self.config.l2_coefficient),
        );
        match (out.context_probs, context_mask) {
            (Some(cp), Some(cm)) => {
                let context_ce = g.masked_cross_entropy(cp, cm)?;
                let lambda = T::from_f64(self.config.lambda);
                let total = g.weighted_sum(&[
                    (target_ce, lambda),
                    (context_ce, T::ONE - lambda),
                    (l2, T::ONE),
                ])?;
                Ok(LossTerms {
                    total,
                    target_ce,
                    context_ce: Some(context_ce),
                    l2,
                })
            }
            (Some(_), None) => Err(TensorError::Invalid(
                "HookNet loss needs a context mask".into(),
            )),
            (None, _) => {
                let total = g.weighted_sum(&[(target_ce, T::ONE), (l2, T::ONE)])?;
                Ok(LossTerms {
                    total,
                    target_ce,
                    context_ce: None,
                    l2,
                })
            }
        }
    }

    /// Inference-mode probabilities of the target branch and, when hooked,
    /// the context branch.
    pub fn predict(
        &self,
        target: Tensor<T>,
        context: Option<Tensor<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>), TensorError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, target, context, Mode::Infer)?;
        let c = out.context_probs.map(|v| g.take_value(v));
        Ok((g.take_value(out.target_probs), c))
    }
}
