//! Multi-field-of-view, multi-resolution segmentation: shape rules, image
//! pyramids, a small CPU training engine, and the tooling around it.

pub mod eval;
pub mod model;
pub mod pyramid;
pub mod sampling;
pub mod shape;
pub mod synth;
pub mod tensor;
pub mod tiler;
pub mod training;

pub use eval::{
    per_slide_f1, wilcoxon_signed_rank, ConfusionMatrix, EvalError, MetricsReport, WilcoxonResult,
};
pub use model::{HookNet, HookNetConfig, ModelError, ModelSummary};
pub use pyramid::{
    build_pyramid, extract_mfmr_pair, load_pyramid, save_pyramid, LabelMask, PatchPair,
    PyramidError, PyramidImage, RgbImage,
};
pub use sampling::{AnnotationIndex, PixelLedger, SamplingError, SamplingPolicy};
pub use shape::{
    solve_hook_depth, trace_shapes, BranchArchitecture, HookPlan, ResolutionPair, ShapeError,
    ShapeTrace,
};
pub use synth::{generate_world, sparsify_mask, SynthError, WorldSpec};
pub use tensor::{DType, Graph, Mode, Scalar, Tensor, TensorError};
pub use tiler::{
    plan_tiles, read_label_map, run_tiled, write_label_map, Rect, TileError, TilePlan, TiledOutput,
};
pub use training::{augment, fit, FitOptions, FitReport, TrainError, TrainPlan, TrainingData};
