//! Synthetic workspace: images, stub-client fixtures and a region manifest
//! built on the toy paired corpus, so every stage can run without real
//! models or data.
//!
//! Three captioning agents describe each image. `agent-a` gives the true
//! caption. `agent-b` adds two wrong bin words that the detector rejects
//! and its recorded merge drops them. `agent-c` describes a different
//! image. Regional indicators are `exp(b + w . mean(z) + e) - 1` over the
//! latents of the region's views, so their log transform is linear in the
//! shared latent.

use std::collections::BTreeMap;

use anyhow::Result;
use log::info;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use urban_align::downstream::RegionRecord;
use urban_align::pretrain::synthetic::{generate, mispair, SyntheticConfig};
use urban_align::refinery::{AgentFixture, ImageFixture, MaskRecord, Vocabulary};
use urban_align::seed;

use crate::config::PipelineConfig;
use crate::output::RunDir;

const MASK_SIDE: usize = 12;
const INDICATOR_BASE: f64 = 3.0;

fn image_id(i: usize) -> String {
    format!("img-{i:05}")
}

fn bin_words(caption: &str) -> Vec<&str> {
    caption
        .split_whitespace()
        .filter(|w| w.len() > 3 && w.starts_with('d') && w[1..].contains('b'))
        .collect()
}

/// A filled rectangle with a ragged border row, as text rows.
fn random_mask(rng: &mut ChaCha8Rng) -> Vec<String> {
    let (y0, x0) = (rng.random_range(0..MASK_SIDE / 2), rng.random_range(0..MASK_SIDE / 2));
    let (h, w) = (rng.random_range(2..=MASK_SIDE - y0), rng.random_range(2..=MASK_SIDE - x0));
    (0..MASK_SIDE)
        .map(|y| {
            (0..MASK_SIDE)
                .map(|x| {
                    let inside = (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x);
                    let ragged = y == y0 + h && (x0..x0 + w).contains(&x) && rng.random_bool(0.5);
                    if inside || ragged {
                        '1'
                    } else {
                        '0'
                    }
                })
                .collect()
        })
        .collect()
}

fn wrong_bin(word: &str, bins: usize, rng: &mut ChaCha8Rng) -> String {
    let (dim, bin) = word[1..].split_once('b').expect("bin word");
    let bin: usize = bin.parse().expect("numeric bin");
    let other = (bin + rng.random_range(1..bins)) % bins;
    format!("d{dim}b{other}")
}

pub fn synth(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let s = &cfg.synth;
    let corpus_cfg = SyntheticConfig {
        samples: s.samples,
        patches: cfg.encoder.image_patches,
        patch_dim: cfg.encoder.patch_dim,
        image_noise: s.image_noise,
        seed: seed::derive(cfg.seed, "cli/synth"),
        ..SyntheticConfig::default()
    };
    let corpus = generate(&corpus_cfg);
    let mut captions = corpus.captions.clone();
    let moved = mispair(&mut captions, s.samples, s.mispair_fraction, corpus_cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "cli/synth/fixtures"));

    let vocabulary = Vocabulary {
        objects: (0..corpus_cfg.latent_dim)
            .flat_map(|d| (0..corpus_cfg.bins).map(move |b| format!("d{d}b{b}")))
            .collect(),
        ..Vocabulary::default()
    };
    run.write_json("fixtures/vocabulary.json", &vocabulary)?;

    for (i, img) in corpus.images.iter().enumerate() {
        let id = image_id(i);
        let rows: Vec<Vec<f64>> = img.rows().into_iter().map(|r| r.to_vec()).collect();
        run.write_json(&format!("images/{id}.json"), &rows)?;

        let caption = &captions[i];
        let words = bin_words(caption);
        let wrong: Vec<String> = words
            .choose_multiple(&mut rng, 2)
            .map(|w| wrong_bin(w, corpus_cfg.bins, &mut rng))
            .collect();
        let other = &captions[(i + 1) % captions.len()];
        let half = words[..words.len() / 2].join(" ");
        let mut agents = BTreeMap::new();
        agents.insert(
            "agent-a".to_string(),
            AgentFixture {
                long: Some(caption.clone()),
                local: vec![half.clone()],
                ..AgentFixture::default()
            },
        );
        agents.insert(
            "agent-b".to_string(),
            AgentFixture {
                long: Some(format!("{caption}. also {}", wrong.join(" "))),
                local: vec![half],
                merge: Some(caption.clone()),
                ..AgentFixture::default()
            },
        );
        agents.insert(
            "agent-c".to_string(),
            AgentFixture {
                long: Some(other.clone()),
                local: vec![bin_words(other)[..1].join(" ")],
                ..AgentFixture::default()
            },
        );
        let fixture = ImageFixture {
            image_id: id.clone(),
            masks: vec![MaskRecord {
                segment_id: "s0".into(),
                rows: random_mask(&mut rng),
            }],
            captions: agents,
            detector: words.iter().map(|w| (w.to_string(), 0.6)).collect(),
            parses: BTreeMap::new(),
        };
        run.write_json(&format!("fixtures/{id}.json"), &fixture)?;
    }

    let weights = Normal::new(0.0, 1.0 / (corpus_cfg.latent_dim as f64).sqrt())?;
    let w: Vec<f64> = (0..corpus_cfg.latent_dim).map(|_| weights.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, s.indicator_noise)?;
    let mut regions = Vec::with_capacity(s.regions);
    for r in 0..s.regions {
        let views: Vec<usize> = (0..s.views_per_region).map(|_| rng.random_range(0..s.samples)).collect();
        let signal: f64 = (0..corpus_cfg.latent_dim)
            .map(|d| w[d] * views.iter().map(|&v| corpus.latents[[v, d]]).sum::<f64>() / views.len() as f64)
            .sum();
        let value = (INDICATOR_BASE + signal + noise.sample(&mut rng)).exp() - 1.0;
        regions.push(RegionRecord {
            region_id: format!("region-{r:04}"),
            street_view_ids: views.into_iter().map(image_id).collect(),
            satellite_id: None,
            indicators: [(cfg.downstream.indicator.clone(), value)].into_iter().collect(),
        });
    }
    run.write_jsonl("manifest.jsonl", &regions)?;
    info!(
        "{} images ({} mispaired), {} regions",
        s.samples,
        moved.len(),
        regions.len()
    );
    Ok(())
}
