//! Size arithmetic for valid-convolution encoder-decoder branches.
//!
//! Every size here is an exact integer. Resolutions are `f64` values in
//! μm/px, but the only operations applied to them are multiplication by
//! powers of two and ratio tests, which are carried out on the exact
//! binary mantissa/exponent decomposition so no rounding can creep in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("feature map size drops to {size} at {stage} (depth {depth})")]
    NonPositiveFeatureMap {
        stage: &'static str,
        depth: usize,
        size: i64,
    },
    #[error("feature map of size {size} before pooling at depth {depth} is odd")]
    OddPrePoolSize { depth: usize, size: usize },
    #[error("resolution constraint violated: 2^{depth} * {target} < {context}")]
    ResolutionConstraintViolated {
        target: f64,
        context: f64,
        depth: usize,
    },
    #[error("context resolution {context} is finer than target resolution {target}")]
    ContextFinerThanTarget { target: f64, context: f64 },
    #[error("resolution must be a positive finite number, got {0}")]
    InvalidResolution(f64),
    #[error("ratio {context}/{target} is not an integer power of two")]
    NonPowerOfTwoRatio { target: f64, context: f64 },
    #[error("crop from {context} to {target} leaves an odd difference")]
    OddCropDifference { context: usize, target: usize },
    #[error("cannot crop {context} px down to a larger {target} px")]
    NegativeCrop { context: usize, target: usize },
}

/// Geometry of one encoder-decoder branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchArchitecture {
    /// Number of pooling stages.
    pub depth: usize,
    #[serde(default = "default_convs")]
    pub convs_per_level: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_factor")]
    pub pool_factor: usize,
    #[serde(default = "default_factor")]
    pub upsample_factor: usize,
}

fn default_convs() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn default_factor() -> usize {
    2
}

impl BranchArchitecture {
    pub fn new(depth: usize) -> Result<Self, ShapeError> {
        Self::with_convs(depth, 2)
    }

    pub fn with_convs(depth: usize, convs_per_level: usize) -> Result<Self, ShapeError> {
        let arch = Self {
            depth,
            convs_per_level,
            kernel: 3,
            pool_factor: 2,
            upsample_factor: 2,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.depth < 1 {
            return Err(ShapeError::InvalidArchitecture(
                "depth must be at least 1".into(),
            ));
        }
        if self.depth > 16 {
            return Err(ShapeError::InvalidArchitecture(
                "depth above 16 is not supported".into(),
            ));
        }
        if self.convs_per_level < 1 {
            return Err(ShapeError::InvalidArchitecture(
                "at least one convolution per level is required".into(),
            ));
        }
        if self.kernel != 3 {
            return Err(ShapeError::InvalidArchitecture(format!(
                "kernel must be 3, got {}",
                self.kernel
            )));
        }
        if self.pool_factor != 2 || self.upsample_factor != 2 {
            return Err(ShapeError::InvalidArchitecture(
                "pool and upsample factors must both be 2".into(),
            ));
        }
        Ok(())
    }

    /// Pixels lost per convolution stage (`convs_per_level` valid 3x3 convs).
    fn shrink(&self) -> usize {
        self.convs_per_level * (self.kernel - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLevel {
    pub depth: usize,
    pub pre_conv: usize,
    pub post_conv: usize,
    pub post_pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bottleneck {
    pub pre_conv: usize,
    pub post_conv: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLevel {
    pub depth: usize,
    pub post_upsample: usize,
    /// Size the encoder skip map at this depth is center-cropped to.
    pub skip_crop: usize,
    pub post_conv: usize,
}

/// Per-layer spatial sizes of a branch for one input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub input_size: usize,
    /// Ordered from depth 0 down to depth `D - 1`.
    pub encoder_levels: Vec<EncoderLevel>,
    pub bottleneck: Bottleneck,
    /// Ordered from depth `D - 1` up to depth 0 (execution order).
    pub decoder_levels: Vec<DecoderLevel>,
    pub output_size: usize,
}

impl ShapeTrace {
    pub fn depth(&self) -> usize {
        self.encoder_levels.len()
    }

    /// Size of the decoder feature map at `depth`; depth `D` is the bottleneck.
    pub fn decoder_map_size(&self, depth: usize) -> Option<usize> {
        if depth == self.depth() {
            return Some(self.bottleneck.post_conv);
        }
        self.decoder_levels
            .iter()
            .find(|l| l.depth == depth)
            .map(|l| l.post_conv)
    }

    pub fn encoder_post_conv_sizes(&self) -> Vec<usize> {
        self.encoder_levels.iter().map(|l| l.post_conv).collect()
    }
}

fn shrink_checked(
    size: usize,
    by: usize,
    stage: &'static str,
    depth: usize,
) -> Result<usize, ShapeError> {
    let next = size as i64 - by as i64;
    if next < 1 {
        return Err(ShapeError::NonPositiveFeatureMap {
            stage,
            depth,
            size: next,
        });
    }
    Ok(next as usize)
}

/// Follows an input of `input_size` pixels through every layer of `arch`.
pub fn trace_shapes(
    input_size: usize,
    arch: &BranchArchitecture,
) -> Result<ShapeTrace, ShapeError> {
    arch.validate()?;
    if input_size == 0 {
        return Err(ShapeError::NonPositiveFeatureMap {
            stage: "input",
            depth: 0,
            size: 0,
        });
    }
    let shrink = arch.shrink();
    let mut size = input_size;
    let mut encoder_levels = Vec::with_capacity(arch.depth);
    for depth in 0..arch.depth {
        let pre_conv = size;
        let post_conv = shrink_checked(size, shrink, "encoder conv", depth)?;
        if post_conv % arch.pool_factor != 0 {
            return Err(ShapeError::OddPrePoolSize {
                depth,
                size: post_conv,
            });
        }
        let post_pool = post_conv / arch.pool_factor;
        encoder_levels.push(EncoderLevel {
            depth,
            pre_conv,
            post_conv,
            post_pool,
        });
        size = post_pool;
    }
    let bottleneck = Bottleneck {
        pre_conv: size,
        post_conv: shrink_checked(size, shrink, "bottleneck conv", arch.depth)?,
    };
    size = bottleneck.post_conv;
    let mut decoder_levels = Vec::with_capacity(arch.depth);
    for depth in (0..arch.depth).rev() {
        let post_upsample = size * arch.upsample_factor;
        let skip_from = encoder_levels[depth].post_conv;
        if skip_from < post_upsample {
            return Err(ShapeError::NegativeCrop {
                context: skip_from,
                target: post_upsample,
            });
        }
        if (skip_from - post_upsample) % 2 != 0 {
            return Err(ShapeError::OddCropDifference {
                context: skip_from,
                target: post_upsample,
            });
        }
        let post_conv = shrink_checked(post_upsample, shrink, "decoder conv", depth)?;
        decoder_levels.push(DecoderLevel {
            depth,
            post_upsample,
            skip_crop: post_upsample,
            post_conv,
        });
        size = post_conv;
    }
    Ok(ShapeTrace {
        input_size,
        encoder_levels,
        bottleneck,
        decoder_levels,
        output_size: size,
    })
}

pub fn is_valid_input_size(input_size: usize, arch: &BranchArchitecture) -> bool {
    trace_shapes(input_size, arch).is_ok()
}

/// All valid input sizes in `[lo, hi]`, ascending.
pub fn enumerate_valid_input_sizes(lo: usize, hi: usize, arch: &BranchArchitecture) -> Vec<usize> {
    if lo > hi {
        return Vec::new();
    }
    (lo..=hi)
        .filter(|&m| is_valid_input_size(m, arch))
        .collect()
}

/// Spatial resolution of a feature map at `depth` for input resolution `r`.
pub fn srf(depth: u32, r: f64) -> f64 {
    r * pow2(depth as i32)
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

/// Exact `(odd mantissa, exponent)` decomposition of a positive finite f64.
fn dyadic(x: f64) -> Result<(u64, i32), ShapeError> {
    if !(x.is_finite() && x > 0.0) {
        return Err(ShapeError::InvalidResolution(x));
    }
    let bits = x.to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mant, mut exp) = if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    };
    let tz = mant.trailing_zeros();
    mant >>= tz;
    exp += tz as i32;
    Ok((mant, exp))
}

/// Returns `q` when `coarse / fine == 2^q` exactly (q may be negative).
pub fn power_of_two_ratio(fine: f64, coarse: f64) -> Result<i32, ShapeError> {
    let (mf, ef) = dyadic(fine)?;
    let (mc, ec) = dyadic(coarse)?;
    if mf != mc {
        return Err(ShapeError::NonPowerOfTwoRatio {
            target: fine,
            context: coarse,
        });
    }
    Ok(ec - ef)
}

/// Target and context input resolutions in μm/px.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPair {
    pub target: f64,
    pub context: f64,
}

impl ResolutionPair {
    pub fn new(target: f64, context: f64) -> Result<Self, ShapeError> {
        let pair = Self { target, context };
        pair.ratio_exponent()?;
        Ok(pair)
    }

    /// `log2(r_C / r_T)`, checked to be a non-negative integer.
    pub fn ratio_exponent(&self) -> Result<u32, ShapeError> {
        let q = power_of_two_ratio(self.target, self.context)?;
        if q < 0 {
            return Err(ShapeError::ContextFinerThanTarget {
                target: self.target,
                context: self.context,
            });
        }
        Ok(q as u32)
    }
}

/// Where and how the context branch is hooked into the target branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookPlan {
    /// Target depth receiving the hook; always the bottleneck.
    pub target_depth: usize,
    /// Context decoder depth supplying the hook.
    pub context_depth: usize,
    pub context_map_size: usize,
    pub target_map_size: usize,
    pub crop_offset: usize,
}

/// Picks the context decoder depth whose feature maps share the target
/// bottleneck's spatial resolution, and the crop that aligns them.
pub fn solve_hook_depth(
    res: &ResolutionPair,
    arch: &BranchArchitecture,
    input_size: usize,
) -> Result<HookPlan, ShapeError> {
    arch.validate()?;
    let q = res.ratio_exponent()? as usize;
    // 2^D * r_T >= r_C  <=>  q <= D, exact since both sides are dyadic.
    if srf(arch.depth as u32, res.target) < res.context || q > arch.depth {
        return Err(ShapeError::ResolutionConstraintViolated {
            target: res.target,
            context: res.context,
            depth: arch.depth,
        });
    }
    let target_depth = arch.depth;
    let context_depth = target_depth - q;
    debug_assert_eq!(
        srf(context_depth as u32, res.context),
        srf(target_depth as u32, res.target)
    );
    let trace = trace_shapes(input_size, arch)?;
    let target_map_size = trace.bottleneck.post_conv;
    let context_map_size = trace
        .decoder_map_size(context_depth)
        .expect("trace covers every depth");
    let crop_offset = crop_geometry(context_map_size, target_map_size)?;
    Ok(HookPlan {
        target_depth,
        context_depth,
        context_map_size,
        target_map_size,
        crop_offset,
    })
}

/// Offset of a centered crop from `context_size` down to `target_size`.
pub fn crop_geometry(context_size: usize, target_size: usize) -> Result<usize, ShapeError> {
    if context_size < target_size {
        return Err(ShapeError::NegativeCrop {
            context: context_size,
            target: target_size,
        });
    }
    let diff = context_size - target_size;
    if diff % 2 != 0 {
        return Err(ShapeError::OddCropDifference {
            context: context_size,
            target: target_size,
        });
    }
    Ok(diff / 2)
}
