//! Deterministic procedural image dataset: ten geometric pattern classes
//! rendered at 3x16x16 with seeded jitter and color noise, split 8000 train /
//! 2000 validation with exact class balance. Pixel values are standardized to
//! zero mean, unit variance using train-split statistics only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SHAPE: [usize; 3] = [3, 16, 16];
pub const CLASSES: usize = 10;
pub const TRAIN_SIZE: usize = 8000;
pub const VAL_SIZE: usize = 2000;

const SIDE: usize = 16;
const PIXELS: usize = 3 * SIDE * SIDE;

/// A labeled image set stored flat in NCHW order.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Materialize a batch tensor for the given sample indices.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(idx.len() * PIXELS);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images[i * PIXELS..(i + 1) * PIXELS]);
            labels.push(self.labels[i]);
        }
        Ok((
            Tensor::from_vec(&[idx.len(), 3, SIDE, SIDE], data)?,
            labels,
        ))
    }

    /// Sequential batches covering the whole set.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        let mut images = Vec::with_capacity(idx.len() * PIXELS);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            images.extend_from_slice(&self.images[i * PIXELS..(i + 1) * PIXELS]);
            labels.push(self.labels[i]);
        }
        LabeledSet { images, labels }
    }
}

#[derive(Debug, Clone)]
pub struct ProceduralDataset {
    pub seed: u64,
    pub train: LabeledSet,
    pub val: LabeledSet,
    /// Train-split standardization constants applied to every split.
    pub mean: f32,
    pub std: f32,
}

/// Render the full dataset for a seed. Same seed, bit-identical output.
pub fn generate_dataset(seed: u64) -> ProceduralDataset {
    let mut train = render_split(seed, 0, TRAIN_SIZE);
    let mut val = render_split(seed, 1, VAL_SIZE);

    let n = train.images.len() as f64;
    let mean = train.images.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = train
        .images
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-6);
    for v in train.images.iter_mut().chain(val.images.iter_mut()) {
        *v = ((*v as f64 - mean) / std) as f32;
    }

    ProceduralDataset {
        seed,
        train,
        val,
        mean: mean as f32,
        std: std as f32,
    }
}

fn render_split(seed: u64, split: u64, count: usize) -> LabeledSet {
    let mut images = vec![0.0f32; count * PIXELS];
    let labels: Vec<usize> = (0..count).map(|i| i % CLASSES).collect();
    images
        .par_chunks_mut(PIXELS)
        .enumerate()
        .for_each(|(i, out)| {
            let stream = seed
                ^ (split.wrapping_mul(0x9E3779B97F4A7C15))
                ^ (i as u64).wrapping_mul(0xD1B54A32D192ED03);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            render_image(labels[i], &mut rng, out);
        });
    let mut set = LabeledSet { images, labels };
    shuffle_set(&mut set, seed ^ split.wrapping_add(0xA5A5_5A5A));
    set
}

fn shuffle_set(set: &mut LabeledSet, seed: u64) {
    let n = set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    *set = set.subset(&order);
}

fn smooth(d: f32) -> f32 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn render_image(class: usize, rng: &mut ChaCha8Rng, out: &mut [f32]) {
    let bg: [f32; 3] = [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ];
    let mut fg = [0.0f32; 3];
    for _ in 0..24 {
        fg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let contrast: f32 = fg.iter().zip(&bg).map(|(f, b)| (f - b).abs()).sum::<f32>() / 3.0;
        if contrast > 0.3 {
            break;
        }
    }

    let cx = 7.5 + rng.gen_range(-2.5f32..2.5);
    let cy = 7.5 + rng.gen_range(-2.5f32..2.5);
    let size = rng.gen_range(3.2f32..5.2);
    let thick = rng.gen_range(1.1f32..1.9);
    let period = rng.gen_range(3.5f32..5.5);
    let phase = rng.gen_range(0.0f32..period);
    let split_x = rng.gen_range(6.0f32..10.0);
    let split_y = rng.gen_range(6.0f32..10.0);
    let noise_sigma = 0.06f32;

    for y in 0..SIDE {
        for x in 0..SIDE {
            let fx = x as f32;
            let fy = y as f32;
            let dx = fx - cx;
            let dy = fy - cy;
            let alpha = match class {
                // disk
                0 => smooth((dx * dx + dy * dy).sqrt() - size),
                // square
                1 => smooth(dx.abs().max(dy.abs()) - size * 0.85),
                // cross: two crossing bars
                2 => {
                    let horiz = (dy.abs() - thick).max(dx.abs() - size - 0.8);
                    let vert = (dx.abs() - thick).max(dy.abs() - size - 0.8);
                    smooth(horiz.min(vert))
                }
                // ring
                3 => smooth(((dx * dx + dy * dy).sqrt() - size).abs() - thick * 0.8),
                // horizontal stripes
                4 => {
                    let t = ((fy + phase) / period).fract();
                    smooth((t - 0.5).abs() * period - period * 0.25)
                }
                // vertical stripes
                5 => {
                    let t = ((fx + phase) / period).fract();
                    smooth((t - 0.5).abs() * period - period * 0.25)
                }
                // horizontal gradient fill
                6 => fx / (SIDE - 1) as f32,
                // vertical gradient fill
                7 => fy / (SIDE - 1) as f32,
                // top-left corner patch
                8 => smooth((fx - split_x).max(fy - split_y)),
                // bottom-right corner patch
                _ => smooth(((SIDE - 1) as f32 - split_x - fx).max((SIDE - 1) as f32 - split_y - fy)),
            };
            for ch in 0..3 {
                // Triangular noise, cheap and bounded.
                let noise: f32 = (rng.gen_range(-1.0f32..1.0) + rng.gen_range(-1.0f32..1.0))
                    * noise_sigma;
                let v = bg[ch] + alpha * (fg[ch] - bg[ch]) + noise;
                out[ch * SIDE * SIDE + y * SIDE + x] = v;
            }
        }
    }
}

/// Deterministic sample of `count` distinct indices from `0..n`.
fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(count);
    order.sort_unstable();
    order
}

impl ProceduralDataset {
    /// The frozen few-sample subset: drawn once from the train split.
    pub fn few_sample(&self, count: usize, seed: u64) -> LabeledSet {
        let idx = sample_indices(self.train.len(), count.min(self.train.len()), seed ^ 0xFE57);
        self.train.subset(&idx)
    }

    /// The frozen accuracy-proxy subset: drawn once from the validation split.
    pub fn proxy_set(&self, count: usize, seed: u64) -> LabeledSet {
        let idx = sample_indices(self.val.len(), count.min(self.val.len()), seed ^ 0x9807);
        self.val.subset(&idx)
    }
}

/// Validation helper for external artifacts.
pub fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}
