//! Gumbel-Softmax relaxation of categorical sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// `softmax((logits + gumbel_noise) / temperature)`.
///
/// Entries are positive and sum to 1; differentiable with respect to
/// `logits`. The noise draw consumes exactly `n` samples from `rng`.
pub fn gumbel_softmax(logits: &Tensor, temperature: f32, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if logits.shape().len() != 1 || logits.numel() == 0 {
        return Err(Error::Dimension(format!(
            "gumbel_softmax expects a non-empty vector, got {:?}",
            logits.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "gumbel_softmax temperature must be positive, got {temperature}"
        )));
    }
    let noise: Vec<f32> = (0..logits.numel())
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            (-(-u.ln()).ln()) as f32
        })
        .collect();
    let noise = Tensor::from_vec(logits.shape(), noise)?;
    logits.add(&noise)?.scale(1.0 / temperature).softmax_vec()
}
