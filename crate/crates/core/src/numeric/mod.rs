//! Minimal dense numerics for the lightweight policies.

mod adam;
mod dist;
mod net;

pub use adam::{adam_step, clip_grad_norm, clip_grad_norm_groups, AdamState};
pub use dist::{entropy, masked_softmax, sample, MaskedCategorical};
pub use net::{DenseNet, ForwardCache};

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x - mean) / (std + 1e-8)` with population std.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(xs);
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}
