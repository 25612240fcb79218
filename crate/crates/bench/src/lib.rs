//! Fixtures shared by the benchmarks.

use hooknet_core::model::Batch;
use hooknet_core::synth::{generate_world, WorldSpec};
use hooknet_core::{HookNet, HookNetConfig, LabelMask, PyramidImage, Scalar, Tensor};

/// A model at the default geometry, single-branch when `context` is None.
pub fn model<T: Scalar>(context: Option<f64>) -> HookNet<T> {
    let config = HookNetConfig {
        context_resolution: context,
        learning_rate: 1e-3,
        ..HookNetConfig::default()
    };
    HookNet::build(config, 0).expect("default config is valid")
}

/// A constant batch shaped for `model`.
pub fn batch<T: Scalar>(model: &HookNet<T>, n: usize) -> Batch<T> {
    let m = model.input_size();
    let out = model.output_size();
    let input = Tensor::full([n, 3, m, m], T::from_f64(0.1));
    let mask: Vec<u8> = (0..n * out * out).map(|i| (i % 4 + 1) as u8).collect();
    Batch {
        target: input.clone(),
        context: model.is_hooked().then(|| input.clone()),
        target_mask: mask.clone(),
        context_mask: model.is_hooked().then_some(mask),
    }
}

/// A small synthetic world for tiling benchmarks.
pub fn world() -> (PyramidImage, LabelMask) {
    let spec = WorldSpec {
        width_px: 1024,
        height_px: 1024,
        ring_diameter_um: 160.0,
        wall_thickness_um: 12.0,
        field_diameter_um: 160.0,
        gap_um: 8.0,
        seed: 1,
        ..WorldSpec::default()
    };
    generate_world(&spec).expect("bench world is valid")
}
