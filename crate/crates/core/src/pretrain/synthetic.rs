//! Toy paired corpus with a shared latent cause.
//!
//! Each sample draws `z ~ N(0, I)` of size `latent_dim`. The image is a
//! `patches x patch_dim` matrix whose row `p` is `A_p z + e`, with fixed
//! random mixing matrices `A_p` (entries `N(0, 1/latent_dim)`) and noise
//! `e ~ N(0, image_noise^2)`. The caption names the quantile bin of every
//! latent coordinate with a word like `d3b2` ("dimension 3, bin 2"; bins are
//! equal-probability slices of the standard normal) and mixes in
//! `filler_words` uninformative words drawn from a small pool, so captions
//! run past twenty tokens. Only the bin words link a caption to its image.

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::seed;

const FILLER: &[&str] = &[
    "the", "a", "street", "view", "of", "with", "some", "near", "and", "scene", "urban", "area", "photo", "showing",
    "there", "is", "block", "corner", "along", "city",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub latent_dim: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub bins: usize,
    pub filler_words: usize,
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            latent_dim: 8,
            patches: 8,
            patch_dim: 16,
            bins: 6,
            filler_words: 16,
            image_noise: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub latents: Array2<f64>,
    pub images: Vec<Array2<f64>>,
    pub captions: Vec<String>,
}

/// Interior edges of `bins` equal-probability slices of the standard normal.
pub fn bin_edges(bins: usize) -> Vec<f64> {
    let std_normal = statrs::distribution::Normal::standard();
    (1..bins)
        .map(|k| std_normal.inverse_cdf(k as f64 / bins as f64))
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "synthetic"));
    let mix_dist = Normal::new(0.0, (1.0 / cfg.latent_dim as f64).sqrt()).expect("positive std");
    let mixing: Vec<Array2<f64>> = (0..cfg.patches)
        .map(|_| Array2::from_shape_simple_fn((cfg.patch_dim, cfg.latent_dim), || mix_dist.sample(&mut rng)))
        .collect();
    let edges = bin_edges(cfg.bins.max(1));
    let latents = Array2::from_shape_simple_fn((cfg.samples, cfg.latent_dim), || StandardNormal.sample(&mut rng));

    let mut images = Vec::with_capacity(cfg.samples);
    let mut captions = Vec::with_capacity(cfg.samples);
    for z in latents.rows() {
        let mut img = Array2::zeros((cfg.patches, cfg.patch_dim));
        for (p, a) in mixing.iter().enumerate() {
            let row = a.dot(&z);
            for (d, v) in row.iter().enumerate() {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.image_noise;
                img[[p, d]] = v + noise;
            }
        }
        images.push(img);

        let mut words: Vec<String> = z
            .iter()
            .enumerate()
            .map(|(j, &v)| format!("d{j}b{}", edges.partition_point(|&e| e <= v)))
            .collect();
        for _ in 0..cfg.filler_words {
            let at = rng.random_range(0..=words.len());
            words.insert(at, FILLER.choose(&mut rng).expect("non-empty pool").to_string());
        }
        captions.push(words.join(" "));
    }
    SyntheticCorpus {
        latents,
        images,
        captions,
    }
}

/// Breaks the pairing of `fraction` of the samples among the first `n`:
/// a seeded random subset has its captions rotated by one within the
/// subset, so every chosen sample ends up with another sample's caption.
/// Returns the affected indices in ascending order.
pub fn mispair(captions: &mut [String], n: usize, fraction: f64, seed_value: u64) -> Vec<usize> {
    let n = n.min(captions.len());
    let count = ((n as f64) * fraction).round() as usize;
    if count < 2 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "synthetic/mispair"));
    idx.shuffle(&mut rng);
    let mut chosen = idx[..count].to_vec();
    chosen.sort_unstable();
    let moved: Vec<String> = chosen.iter().map(|&i| captions[i].clone()).collect();
    for (k, &i) in chosen.iter().enumerate() {
        captions[i] = moved[(k + 1) % count].clone();
    }
    chosen
}
