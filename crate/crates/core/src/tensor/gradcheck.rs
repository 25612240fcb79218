use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Scalar, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose finite-difference stencil crossed a ReLU, pooling or
    /// clipping boundary.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn evaluate<T, F>(build: &mut F, store: &ParamStore<T>) -> Result<(f64, u64), TensorError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    Ok((g.scalar(loss).to_f64(), g.nonsmooth_signature()))
}

/// Compares the tape gradients of the scalar built by `build` with central
/// differences on a random subset of coordinates of `params`.
pub fn grad_check<T, F>(
    mut build: F,
    store: &mut ParamStore<T>,
    params: &[ParamId],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var, TensorError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let base_sig = g.nonsmooth_signature();
    g.backward(loss, store)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.step;
    let mut report = GradCheckReport {
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_error: 0.0,
    };
    for &id in params {
        let len = store.get(id).value.len();
        let picks = sample(&mut rng, len, config.coords_per_param.min(len));
        for i in picks.iter() {
            let analytic = store.get(id).grad.data()[i].to_f64();
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = T::from_f64(orig.to_f64() + h);
            let plus = evaluate(&mut build, store);
            store.get_mut(id).value.data_mut()[i] = T::from_f64(orig.to_f64() - h);
            let minus = evaluate(&mut build, store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > config.tolerance {
                return Err(TensorError::GradientMismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
