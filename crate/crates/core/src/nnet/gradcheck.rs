//! Central finite-difference check of the analytic gradients in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ops::voxels;
use super::unet::{init, loss_and_grad, loss_and_signs, Batch, ParamStore, UNetConfig};
use crate::error::Result;

const MIN_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose nominal step crossed an activation kink and were
    /// re-measured with a smaller step.
    pub refined: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked entries.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub config: UNetConfig,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn refined_entries(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }
}

/// Checks every entry of every tensor, or at most `per_tensor` evenly spaced
/// entries when given.
pub fn gradient_check(config: &UNetConfig, seed: u64, step: f64, per_tensor: Option<usize>) -> Result<GradCheckReport> {
    let mut params: ParamStore<f64> = init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // small random biases so no tensor has an identically-zero gradient path
    for t in params.tensors.iter_mut().filter(|t| t.name.ends_with(".bias")) {
        for b in t.data.iter_mut() {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
    let n = voxels(config.patch_size);
    let items = 2;
    let data = (0..items * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Batch::new(items, config.patch_size, data)?;
    let labels: Vec<u16> = (0..items * n).map(|_| rng.gen_range(0..config.num_classes as u16)).collect();

    let (_, grads) = loss_and_grad(&params, &batch, &labels)?;
    let (_, base_signs) = loss_and_signs(&params, &batch, &labels)?;
    let mut tensors = Vec::new();
    for ti in 0..params.tensors.len() {
        let len = params.tensors[ti].data.len();
        let picks: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
        let mut refined = 0;
        for &j in &picks {
            let orig = params.tensors[ti].data[j];
            let mut h = step;
            let numeric = loop {
                params.tensors[ti].data[j] = orig + h;
                let (up, s_up) = loss_and_signs(&params, &batch, &labels)?;
                params.tensors[ti].data[j] = orig - h;
                let (down, s_down) = loss_and_signs(&params, &batch, &labels)?;
                params.tensors[ti].data[j] = orig;
                // a central difference straddling a kink measures a chord, not the derivative
                if (s_up == base_signs && s_down == base_signs) || h < MIN_STEP {
                    break (up.total - down.total) / (2.0 * h);
                }
                if h == step {
                    refined += 1;
                }
                h *= 0.1;
            };
            let analytic = grads.tensors[ti][j];
            diff2 += (analytic - numeric).powi(2);
            a2 += analytic * analytic;
            f2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(f2.sqrt());
        let rel_error = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
        tensors.push(TensorCheck { name: params.tensors[ti].name.clone(), checked: picks.len(), refined, rel_error });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { config: config.clone(), step, tensors, max_rel_error })
}
