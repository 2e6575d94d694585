use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::encoder::{DualEncoder, EncoderConfig, EncoderError};
use super::objective::{Embeddings, ObjectiveCache, ObjectiveError, QueueView};
use super::optim::{AdamW, AdamWConfig};
use super::params::{ema_update, ParamSet, StateError};
use super::queue::{FeatureQueue, QueueError};
use super::tape::Tape;
use super::tokenizer::Tokenizer;
use crate::ipsi::IpsiConfig;
use crate::seed;

pub const TAU_MIN: f64 = 5e-3;
pub const TAU_MAX: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the distillation term.
    pub mu: f64,
    /// EMA momentum of the teacher.
    pub momentum: f64,
    /// Feature queue capacity K.
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau_init: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 0.5,
            momentum: 0.995,
            queue_size: 4096,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            tau_init: 0.07,
            lr: 1e-3,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{key} ∈ {range} required (got {value})")]
pub struct RangeError {
    pub key: &'static str,
    pub range: &'static str,
    pub value: String,
}

fn check(ok: bool, key: &'static str, range: &'static str, value: impl ToString) -> Result<(), RangeError> {
    if ok {
        Ok(())
    } else {
        Err(RangeError {
            key,
            range,
            value: value.to_string(),
        })
    }
}

impl TrainConfig {
    /// Range checks with `mu` strictly inside (0,1).
    pub fn validate(&self) -> Result<(), RangeError> {
        check(self.mu > 0.0 && self.mu < 1.0, "mu", "(0,1)", self.mu)?;
        self.validate_allowing_endpoints()
    }

    /// As [`validate`](Self::validate) but accepts `mu` of exactly 0 or 1,
    /// which ablations use to isolate one loss term.
    pub fn validate_allowing_endpoints(&self) -> Result<(), RangeError> {
        check((0.0..=1.0).contains(&self.mu), "mu", "[0,1]", self.mu)?;
        check((0.0..=1.0).contains(&self.momentum), "momentum", "[0,1]", self.momentum)?;
        check(self.batch_size >= 1, "batch_size", "[1,inf)", self.batch_size)?;
        check(self.epochs >= 1, "epochs", "[1,inf)", self.epochs)?;
        check(
            (TAU_MIN..=TAU_MAX).contains(&self.tau_init),
            "tau_init",
            "[0.005,0.5]",
            self.tau_init,
        )?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "(0,inf)", self.lr)?;
        check(self.weight_decay >= 0.0, "weight_decay", "[0,inf)", self.weight_decay)?;
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_c: f64,
    pub l_d: f64,
    pub total: f64,
    pub tau: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] RangeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("non-finite loss at step {step}: l_c={l_c} l_d={l_d} tau={tau}; largest grad norms: {grad_norms}")]
    NonFinite {
        step: u64,
        l_c: f64,
        l_d: f64,
        tau: f64,
        grad_norms: String,
    },
    #[error("batch has {images} images but {texts} texts")]
    Mismatch { images: usize, texts: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("writing metrics: {0}")]
    Io(#[from] std::io::Error),
}

/// Tokenized image-text pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedCorpus {
    pub images: Vec<Array2<f64>>,
    pub texts: Vec<Vec<usize>>,
}

impl PairedCorpus {
    pub fn from_captions(images: Vec<Array2<f64>>, captions: &[String], tokenizer: &Tokenizer, max_tokens: usize) -> Self {
        let texts = captions.iter().map(|c| tokenizer.encode(c, max_tokens)).collect();
        Self { images, texts }
    }

    /// Rows `range` as a new corpus.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            images: self.images[range.clone()].to_vec(),
            texts: self.texts[range].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: DualEncoder,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub optimizer: AdamW,
    pub image_queue: FeatureQueue,
    pub text_queue: FeatureQueue,
    pub step: u64,
}

impl TrainState {
    pub fn init(enc: &EncoderConfig, ipsi: &IpsiConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate_allowing_endpoints()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "pretrain/init"));
        let (encoder, student) = DualEncoder::init(enc, ipsi, cfg.tau_init, &mut rng)?;
        let teacher = student.clone();
        let optimizer = AdamW::new(cfg.optimizer(), &student);
        Ok(Self {
            encoder,
            teacher,
            optimizer,
            image_queue: FeatureQueue::new(cfg.queue_size, enc.embed_dim),
            text_queue: FeatureQueue::new(cfg.queue_size, enc.embed_dim),
            student,
            step: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.encoder.tau(&self.student)
    }

    /// Student image-to-text top-1 retrieval over `corpus`.
    pub fn retrieval_top1(&self, corpus: &PairedCorpus) -> Result<f64, TrainError> {
        let images: Vec<&Array2<f64>> = corpus.images.iter().collect();
        let e = self.embed(&self.student, &images, &corpus.texts)?;
        Ok(super::retrieval::top1_accuracy(&e.image, &e.text))
    }

    /// Embeddings under `params` without recording gradients.
    pub fn embed(&self, params: &ParamSet, images: &[&Array2<f64>], texts: &[Vec<usize>]) -> Result<Embeddings, TrainError> {
        let mut tape = Tape::new();
        let iv = self.encoder.encode_images(&mut tape, params, images)?;
        let tv = self.encoder.encode_texts(&mut tape, params, texts)?;
        Ok(Embeddings {
            image: tape.value(iv).clone(),
            text: tape.value(tv).clone(),
        })
    }

    /// Losses and student gradients for a batch, leaving the state untouched.
    pub fn loss_and_grads(
        &self,
        cfg: &TrainConfig,
        images: &[&Array2<f64>],
        texts: &[Vec<usize>],
    ) -> Result<(LossBreakdown, Embeddings, Vec<Option<Array2<f64>>>), TrainError> {
        if images.len() != texts.len() {
            return Err(TrainError::Mismatch {
                images: images.len(),
                texts: texts.len(),
            });
        }
        let teacher = self.embed(&self.teacher, images, texts)?;
        let teacher_tau = self.encoder.tau(&self.teacher);

        let mut tape = Tape::new();
        let iv = self.encoder.encode_images(&mut tape, &self.student, images)?;
        let tv = self.encoder.encode_texts(&mut tape, &self.student, texts)?;
        let tau_idx = self.encoder.log_tau_index();
        let log_tau = tape.param(tau_idx, self.student.get(tau_idx));
        let student = Embeddings {
            image: tape.value(iv).clone(),
            text: tape.value(tv).clone(),
        };
        let qi = self.image_queue.to_array();
        let qt = self.text_queue.to_array();
        let queues = QueueView {
            image: qi.view(),
            text: qt.view(),
        };
        let cache = ObjectiveCache::new(&student, &teacher, queues, self.tau(), teacher_tau, cfg.mu)?;
        let losses = LossBreakdown {
            l_c: cache.contrastive,
            l_d: cache.distillation,
            total: cache.total,
        };
        let root = tape.objective(iv, tv, log_tau, cache);
        let grads = tape.backward(root);
        Ok((losses, teacher, grads))
    }

    /// One optimization step: teacher forward, pseudo-targets, student
    /// forward, losses, AdamW update, EMA, then queue push. On a non-finite
    /// loss the state is left unchanged.
    pub fn train_step(&mut self, cfg: &TrainConfig, images: &[&Array2<f64>], texts: &[Vec<usize>]) -> Result<LossBreakdown, TrainError> {
        let (losses, teacher, grads) = self.loss_and_grads(cfg, images, texts)?;
        let grads_finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !losses.total.is_finite() || !grads_finite {
            return Err(TrainError::NonFinite {
                step: self.step,
                l_c: losses.l_c,
                l_d: losses.l_d,
                tau: self.tau(),
                grad_norms: self.grad_summary(&grads),
            });
        }
        self.optimizer.step(&mut self.student, &grads);
        let tau_idx = self.encoder.log_tau_index();
        let lt = &mut self.student.get_mut(tau_idx)[[0, 0]];
        *lt = lt.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        ema_update(&mut self.teacher, &self.student, cfg.momentum)?;
        self.image_queue.push(teacher.image.view())?;
        self.text_queue.push(teacher.text.view())?;
        self.step += 1;
        Ok(losses)
    }

    fn grad_summary(&self, grads: &[Option<Array2<f64>>]) -> String {
        let mut norms: Vec<(f64, &str)> = self
            .student
            .iter()
            .zip(grads)
            .filter_map(|(p, g)| {
                g.as_ref()
                    .map(|g| (g.iter().map(|v| v * v).sum::<f64>().sqrt(), p.name.as_str()))
            })
            .collect();
        norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Less));
        norms
            .iter()
            .take(5)
            .map(|(n, name)| format!("{name}={n:.3e}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Mini-batches of one epoch. The order depends only on the seed and the
/// epoch index, so a resumed run can recompute it from the step count.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &format!("pretrain/epoch/{epoch}")));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

/// Runs from `state.step` until `max_steps` (or the configured epochs,
/// whichever is smaller), calling `on_step` after every step.
pub fn train<F>(state: &mut TrainState, cfg: &TrainConfig, corpus: &PairedCorpus, max_steps: Option<u64>, mut on_step: F) -> Result<Vec<StepRecord>, TrainError>
where
    F: FnMut(&StepRecord) -> Result<(), TrainError>,
{
    cfg.validate_allowing_endpoints()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let per_epoch = steps_per_epoch(corpus.len(), cfg.batch_size) as u64;
    let mut end = per_epoch * cfg.epochs as u64;
    if let Some(m) = max_steps {
        end = end.min(m);
    }
    let mut log = Vec::new();
    let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
    while state.step < end {
        let epoch = (state.step / per_epoch) as usize;
        let within = (state.step % per_epoch) as usize;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_batches(cfg.seed, epoch, corpus.len(), cfg.batch_size)));
        }
        let batch = &cached.as_ref().expect("just filled").1[within];
        let images: Vec<&Array2<f64>> = batch.iter().map(|&i| &corpus.images[i]).collect();
        let texts: Vec<Vec<usize>> = batch.iter().map(|&i| corpus.texts[i].clone()).collect();
        let step = state.step;
        let losses = state.train_step(cfg, &images, &texts)?;
        let rec = StepRecord {
            step,
            l_c: losses.l_c,
            l_d: losses.l_d,
            total: losses.total,
            tau: state.tau(),
        };
        on_step(&rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// Writes records as line-delimited JSON.
pub fn write_metrics<W: Write>(out: &mut W, records: &[StepRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
