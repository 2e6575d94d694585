//! Desk-scale dual encoder: two small pre-norm transformers with mean
//! pooling and a linear projection into a shared, L2-normalized space.
//!
//! The text tower's positional table is initialized at the native length and
//! stretched once at construction, so the stretched rows are the trainable
//! parameters.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{Init, ParamSet, StateError};
use super::tape::{stack_rows, SeqLayout, Tape, Var};
use crate::ipsi::{stretch_positions, IpsiConfig, IpsiError, PositionalTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Patches per image.
    pub image_patches: usize,
    pub patch_dim: usize,
    /// Filled from the tokenizer at training time.
    pub vocab_size: usize,
    /// Positional table length before stretching.
    pub native_text_positions: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_dim: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_patches: 8,
            patch_dim: 16,
            vocab_size: 0,
            native_text_positions: 77,
            width: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            embed_dim: 32,
            init_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncoderError {
    #[error("encoder.{0} must be positive")]
    NonPositive(&'static str),
    #[error("encoder.width ({width}) must be divisible by encoder.heads ({heads})")]
    Heads { width: usize, heads: usize },
    #[error(transparent)]
    Ipsi(#[from] IpsiError),
    #[error("image {index} is {got:?}, expected {expected:?}")]
    ImageShape {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameters do not fit the encoder layout: {0}")]
    Layout(#[from] StateError),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("image_patches", self.image_patches),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
            ("width", self.width),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::NonPositive(name));
        }
        if !(self.init_std > 0.0) {
            return Err(EncoderError::NonPositive("init_std"));
        }
        if self.width % self.heads != 0 {
            return Err(EncoderError::Heads {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Tower {
    blocks: Vec<Block>,
    ln_final: (usize, usize),
    proj: usize,
    positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    max_text_tokens: usize,
    patch_proj: (usize, usize),
    token_emb: usize,
    image: Tower,
    text: Tower,
    log_tau: usize,
}

fn linear<R: Rng>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> (usize, usize) {
    let w = ps.add(&format!("{name}.weight"), fan_in, fan_out, Init::Xavier, true, rng);
    let b = ps.add(&format!("{name}.bias"), 1, fan_out, Init::Zeros, false, rng);
    (w, b)
}

fn norm<R: Rng>(ps: &mut ParamSet, name: &str, width: usize, rng: &mut R) -> (usize, usize) {
    let g = ps.add(&format!("{name}.gamma"), 1, width, Init::Ones, false, rng);
    let b = ps.add(&format!("{name}.beta"), 1, width, Init::Zeros, false, rng);
    (g, b)
}

fn tower<R: Rng>(ps: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, positions: usize, rng: &mut R) -> Tower {
    let w = cfg.width;
    let blocks = (0..cfg.depth)
        .map(|l| {
            let p = format!("{prefix}.block{l}");
            Block {
                ln1: norm(ps, &format!("{p}.ln1"), w, rng),
                wq: linear(ps, &format!("{p}.q"), w, w, rng),
                wk: linear(ps, &format!("{p}.k"), w, w, rng),
                wv: linear(ps, &format!("{p}.v"), w, w, rng),
                wo: linear(ps, &format!("{p}.out"), w, w, rng),
                ln2: norm(ps, &format!("{p}.ln2"), w, rng),
                fc1: linear(ps, &format!("{p}.fc1"), w, w * cfg.mlp_ratio, rng),
                fc2: linear(ps, &format!("{p}.fc2"), w * cfg.mlp_ratio, w, rng),
            }
        })
        .collect();
    let ln_final = norm(ps, &format!("{prefix}.ln_final"), w, rng);
    let proj = ps.add(&format!("{prefix}.proj"), w, cfg.embed_dim, Init::Xavier, true, rng);
    Tower {
        blocks,
        ln_final,
        proj,
        positions,
    }
}

impl DualEncoder {
    /// Allocates and initializes a fresh parameter set.
    pub fn init<R: Rng>(cfg: &EncoderConfig, ipsi: &IpsiConfig, tau: f64, rng: &mut R) -> Result<(Self, ParamSet), EncoderError> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let std = cfg.init_std;

        let patch_proj = linear(&mut ps, "image.patch_proj", cfg.patch_dim, cfg.width, rng);
        let image_pos = ps.add("image.positions", cfg.image_patches, cfg.width, Init::Normal(std), false, rng);
        let image = tower(&mut ps, "image", cfg, image_pos, rng);

        let token_emb = ps.add("text.tokens", cfg.vocab_size, cfg.width, Init::Normal(std), false, rng);
        let mut native = ParamSet::new();
        native.add("native", cfg.native_text_positions, cfg.width, Init::Normal(std), false, rng);
        let table = PositionalTable::new(native.get(0).clone())?;
        let stretched = stretch_positions(&table, ipsi)?.into_array();
        let max_text_tokens = stretched.nrows();
        let text_pos = ps.push("text.positions", stretched, false);
        let text = tower(&mut ps, "text", cfg, text_pos, rng);

        let log_tau = ps.push("log_tau", Array2::from_elem((1, 1), tau.ln()), false);
        Ok((
            Self {
                config: cfg.clone(),
                max_text_tokens,
                patch_proj,
                token_emb,
                image,
                text,
                log_tau,
            },
            ps,
        ))
    }

    /// Rebuilds the layout for an existing parameter set (e.g. a checkpoint).
    pub fn layout_for(cfg: &EncoderConfig, ipsi: &IpsiConfig, params: &ParamSet) -> Result<Self, EncoderError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (layout, fresh) = Self::init(cfg, ipsi, 0.07, &mut rng)?;
        fresh.check_same_shape(params)?;
        Ok(layout)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn max_text_tokens(&self) -> usize {
        self.max_text_tokens
    }

    pub fn log_tau_index(&self) -> usize {
        self.log_tau
    }

    pub fn tau(&self, params: &ParamSet) -> f64 {
        params.get(self.log_tau)[[0, 0]].exp()
    }

    fn p(tape: &mut Tape, params: &ParamSet, idx: usize) -> Var {
        tape.param(idx, params.get(idx))
    }

    fn dense(tape: &mut Tape, params: &ParamSet, x: Var, (w, b): (usize, usize)) -> Var {
        let wv = Self::p(tape, params, w);
        let bv = Self::p(tape, params, b);
        let y = tape.matmul(x, wv);
        tape.add_row(y, bv)
    }

    fn layer_norm(tape: &mut Tape, params: &ParamSet, x: Var, (g, b): (usize, usize)) -> Var {
        let gv = Self::p(tape, params, g);
        let bv = Self::p(tape, params, b);
        tape.layer_norm(x, gv, bv)
    }

    fn run_tower(&self, tape: &mut Tape, params: &ParamSet, tower: &Tower, mut x: Var, layout: &SeqLayout) -> Var {
        for blk in &tower.blocks {
            let h = Self::layer_norm(tape, params, x, blk.ln1);
            let q = Self::dense(tape, params, h, blk.wq);
            let k = Self::dense(tape, params, h, blk.wk);
            let v = Self::dense(tape, params, h, blk.wv);
            let a = tape.attention(q, k, v, layout, self.config.heads);
            let o = Self::dense(tape, params, a, blk.wo);
            x = tape.add(x, o);
            let h = Self::layer_norm(tape, params, x, blk.ln2);
            let m = Self::dense(tape, params, h, blk.fc1);
            let m = tape.gelu(m);
            let m = Self::dense(tape, params, m, blk.fc2);
            x = tape.add(x, m);
        }
        let pooled = tape.mean_pool(x, layout);
        let pooled = Self::layer_norm(tape, params, pooled, tower.ln_final);
        let proj = Self::p(tape, params, tower.proj);
        let z = tape.matmul(pooled, proj);
        tape.l2_normalize(z)
    }

    /// Unit-norm embeddings, one row per image.
    pub fn encode_images(&self, tape: &mut Tape, params: &ParamSet, images: &[&Array2<f64>]) -> Result<Var, EncoderError> {
        if images.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let expected = (self.config.image_patches, self.config.patch_dim);
        for (index, img) in images.iter().enumerate() {
            if img.dim() != expected {
                return Err(EncoderError::ImageShape {
                    index,
                    got: img.dim(),
                    expected,
                });
            }
        }
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        let x = tape.constant(stack_rows(&views));
        let x = Self::dense(tape, params, x, self.patch_proj);
        let pos = Self::p(tape, params, self.image.positions);
        let x = tape.add_positions(x, pos, expected.0);
        let layout = SeqLayout {
            seq: expected.0,
            lens: vec![expected.0; images.len()],
        };
        Ok(self.run_tower(tape, params, &self.image, x, &layout))
    }

    /// Unit-norm embeddings, one row per token sequence. Sequences must be
    /// non-empty; longer than `max_text_tokens` ones are truncated with a
    /// warning and shorter ones are padded and masked.
    pub fn encode_texts(&self, tape: &mut Tape, params: &ParamSet, texts: &[Vec<usize>]) -> Result<Var, EncoderError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(EncoderError::EmptyBatch);
        }
        let max = self.max_text_tokens;
        if let Some(long) = texts.iter().map(Vec::len).find(|&l| l > max) {
            log::warn!("token sequence of length {long} truncated to {max}");
        }
        let texts: Vec<&[usize]> = texts.iter().map(|t| &t[..t.len().min(max)]).collect();
        let seq = texts.iter().map(|t| t.len()).max().unwrap_or(1);
        let vocab = self.config.vocab_size;
        let mut ids = Vec::with_capacity(texts.len() * seq);
        for t in &texts {
            if let Some(&id) = t.iter().find(|&&id| id >= vocab) {
                return Err(EncoderError::Token { id, vocab });
            }
            ids.extend_from_slice(t);
            ids.extend(std::iter::repeat_n(0, seq - t.len()));
        }
        let table = Self::p(tape, params, self.token_emb);
        let x = tape.gather(table, &ids);
        let pos = Self::p(tape, params, self.text.positions);
        let x = tape.add_positions(x, pos, seq);
        let layout = SeqLayout {
            seq,
            lens: texts.iter().map(|t| t.len()).collect(),
        };
        Ok(self.run_tower(tape, params, &self.text, x, &layout))
    }
}
