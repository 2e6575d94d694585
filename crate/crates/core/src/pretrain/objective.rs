//! Contrastive and self-distillation objectives.
//!
//! For a batch of `N` pairs, each student image embedding is compared with
//! the teacher's text embeddings of the batch followed by the text queue
//! (and symmetrically for text against images). Scaled cosine similarities
//! go through a row softmax; the positive for row `i` is column `i`. The
//! pseudo-targets apply the same softmax to teacher-only similarities.
//!
//! - contrastive: `-(1/2N) * sum_i [ln p_i2t[i,i] + ln p_t2i[i,i]]`
//! - distillation: `(1/2N) * sum_i [KL(q_i2t_i || p_i2t_i) + KL(q_t2i_i || p_t2i_i)]`
//! - total: `(1 - mu) * contrastive + mu * distillation`

use log::warn;
use ndarray::{concatenate, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

/// Probabilities below this are floored before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    #[error("temperature must be positive (got {0})")]
    NonPositiveTau(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Image and text embeddings of one batch, one row per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

/// Borrowed queue contents, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct QueueView<'a> {
    pub image: ArrayView2<'a, f64>,
    pub text: ArrayView2<'a, f64>,
}

/// Row-stochastic similarity distributions in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPair {
    pub i2t: Array2<f64>,
    pub t2i: Array2<f64>,
}

fn candidates(batch: &Array2<f64>, queue: ArrayView2<'_, f64>) -> Result<Array2<f64>, ObjectiveError> {
    if queue.nrows() > 0 && queue.ncols() != batch.ncols() {
        return Err(ObjectiveError::Shape(format!(
            "queue width {} vs embedding width {}",
            queue.ncols(),
            batch.ncols()
        )));
    }
    if queue.nrows() == 0 {
        return Ok(batch.clone());
    }
    Ok(concatenate(Axis(0), &[batch.view(), queue]).expect("widths checked"))
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    logits
}

/// Cosine similarities (inputs are unit-norm) of `queries` against
/// `[batch; queue]`.
fn cosine(queries: &Array2<f64>, cands: &Array2<f64>) -> Array2<f64> {
    queries.dot(&cands.t())
}

fn check_tau(tau: f64) -> Result<(), ObjectiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::NonPositiveTau(tau))
    }
}

fn check_batch(a: &Embeddings, b: &Embeddings) -> Result<(), ObjectiveError> {
    let shapes = [a.image.dim(), a.text.dim(), b.image.dim(), b.text.dim()];
    if shapes.iter().any(|s| *s != shapes[0]) || shapes[0].0 == 0 {
        return Err(ObjectiveError::Shape(format!("batch embeddings {shapes:?}")));
    }
    Ok(())
}

/// Student-vs-teacher distributions `p`.
pub fn similarity_distributions(
    student: &Embeddings,
    teacher: &Embeddings,
    queues: QueueView<'_>,
    tau: f64,
) -> Result<DistributionPair, ObjectiveError> {
    check_tau(tau)?;
    check_batch(student, teacher)?;
    let ct = candidates(&teacher.text, queues.text)?;
    let cv = candidates(&teacher.image, queues.image)?;
    Ok(DistributionPair {
        i2t: softmax_rows(cosine(&student.image, &ct) / tau),
        t2i: softmax_rows(cosine(&student.text, &cv) / tau),
    })
}

/// Teacher-only distributions `q`.
pub fn pseudo_targets(teacher: &Embeddings, queues: QueueView<'_>, tau: f64) -> Result<DistributionPair, ObjectiveError> {
    similarity_distributions(teacher, teacher, queues, tau)
}

fn floored_ln(p: f64, floored: &mut usize) -> f64 {
    if p < PROB_FLOOR {
        *floored += 1;
        PROB_FLOOR.ln()
    } else {
        p.ln()
    }
}

pub fn contrastive_loss(p: &DistributionPair) -> f64 {
    let n = p.i2t.nrows();
    let mut floored = 0;
    let mut sum = 0.0;
    for i in 0..n {
        sum += floored_ln(p.i2t[[i, i]], &mut floored) + floored_ln(p.t2i[[i, i]], &mut floored);
    }
    if floored > 0 {
        warn!("contrastive loss: {floored} positive probabilities floored at {PROB_FLOOR:e}");
    }
    -sum / (2.0 * n as f64)
}

fn kl_rows(q: &Array2<f64>, p: &Array2<f64>, floored: &mut usize) -> f64 {
    let mut total = 0.0;
    Zip::from(q).and(p).for_each(|&qk, &pk| {
        if qk > 0.0 {
            total += qk * (qk.ln() - floored_ln(pk, floored));
        }
    });
    total
}

/// Batch-mean KL divergence from the pseudo-targets, averaged over both directions.
pub fn distillation_loss(q: &DistributionPair, p: &DistributionPair) -> Result<f64, ObjectiveError> {
    if q.i2t.dim() != p.i2t.dim() || q.t2i.dim() != p.t2i.dim() {
        return Err(ObjectiveError::Shape(format!(
            "targets {:?}/{:?} vs predictions {:?}/{:?}",
            q.i2t.dim(),
            q.t2i.dim(),
            p.i2t.dim(),
            p.t2i.dim()
        )));
    }
    let n = p.i2t.nrows() as f64;
    let mut floored = 0;
    let kl = kl_rows(&q.i2t, &p.i2t, &mut floored) + kl_rows(&q.t2i, &p.t2i, &mut floored);
    if floored > 0 {
        warn!("distillation loss: {floored} probabilities floored at {PROB_FLOOR:e}");
    }
    Ok(0.5 * kl / n)
}

pub fn total_loss(contrastive: f64, distillation: f64, mu: f64) -> f64 {
    (1.0 - mu) * contrastive + mu * distillation
}

/// Forward state of the combined objective, kept for the backward pass.
/// Gradients flow into the student embeddings and the student `ln(tau)`
/// only; the teacher side, including its own temperature and the
/// pseudo-targets, is constant.
#[derive(Debug, Clone)]
pub struct ObjectiveCache {
    text_candidates: Array2<f64>,
    image_candidates: Array2<f64>,
    cos_i2t: Array2<f64>,
    cos_t2i: Array2<f64>,
    pub p: DistributionPair,
    pub q: DistributionPair,
    tau: f64,
    mu: f64,
    pub contrastive: f64,
    pub distillation: f64,
    pub total: f64,
}

impl ObjectiveCache {
    pub fn new(
        student: &Embeddings,
        teacher: &Embeddings,
        queues: QueueView<'_>,
        tau: f64,
        teacher_tau: f64,
        mu: f64,
    ) -> Result<Self, ObjectiveError> {
        let q = pseudo_targets(teacher, queues, teacher_tau)?;
        let p = similarity_distributions(student, teacher, queues, tau)?;
        let text_candidates = candidates(&teacher.text, queues.text)?;
        let image_candidates = candidates(&teacher.image, queues.image)?;
        let cos_i2t = cosine(&student.image, &text_candidates);
        let cos_t2i = cosine(&student.text, &image_candidates);
        let contrastive = contrastive_loss(&p);
        let distillation = distillation_loss(&q, &p)?;
        Ok(Self {
            text_candidates,
            image_candidates,
            cos_i2t,
            cos_t2i,
            total: total_loss(contrastive, distillation, mu),
            p,
            q,
            tau,
            mu,
            contrastive,
            distillation,
        })
    }

    fn logit_grad(&self, p: &Array2<f64>, q: &Array2<f64>) -> Array2<f64> {
        let n = p.nrows();
        let mut g = p - &(q * self.mu);
        for i in 0..n {
            g[[i, i]] -= 1.0 - self.mu;
        }
        g / (2.0 * n as f64)
    }

    /// Gradients wrt student image embeddings, student text embeddings and `ln(tau)`.
    pub fn gradients(&self) -> (Array2<f64>, Array2<f64>, f64) {
        let gz_i2t = self.logit_grad(&self.p.i2t, &self.q.i2t);
        let gz_t2i = self.logit_grad(&self.p.t2i, &self.q.t2i);
        let g_image = gz_i2t.dot(&self.text_candidates) / self.tau;
        let g_text = gz_t2i.dot(&self.image_candidates) / self.tau;
        let g_log_tau = -((&gz_i2t * &self.cos_i2t).sum() + (&gz_t2i * &self.cos_t2i).sum()) / self.tau;
        (g_image, g_text, g_log_tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn empty(d: usize) -> Array2<f64> {
        Array2::zeros((0, d))
    }

    fn view<'a>(img: &'a Array2<f64>, txt: &'a Array2<f64>) -> QueueView<'a> {
        QueueView {
            image: img.view(),
            text: txt.view(),
        }
    }

    #[test]
    fn single_pair_is_certain() {
        let e = Embeddings {
            image: array![[1.0, 0.0]],
            text: array![[0.6, 0.8]],
        };
        let (qi, qt) = (empty(2), empty(2));
        let p = similarity_distributions(&e, &e, view(&qi, &qt), 0.07).unwrap();
        assert_eq!(p.i2t, array![[1.0]]);
        assert_eq!(contrastive_loss(&p), 0.0);
        let q = pseudo_targets(&e, view(&qi, &qt), 0.07).unwrap();
        assert_eq!(q.t2i, array![[1.0]]);
    }

    #[test]
    fn orthogonal_pair_hand_softmax() {
        let e = Embeddings {
            image: array![[1.0, 0.0], [0.0, 1.0]],
            text: array![[1.0, 0.0], [0.0, 1.0]],
        };
        let (qi, qt) = (empty(2), empty(2));
        let p = similarity_distributions(&e, &e, view(&qi, &qt), 1.0).unwrap();
        let diag = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p.i2t[[0, 0]] - diag).abs() < 1e-12);
        assert!((p.t2i[[1, 1]] - diag).abs() < 1e-12);
        assert!((contrastive_loss(&p) + diag.ln()).abs() < 1e-12);
        assert!((contrastive_loss(&p) - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn hand_kl() {
        let q = DistributionPair {
            i2t: array![[1.0, 0.0]],
            t2i: array![[1.0, 0.0]],
        };
        let p = DistributionPair {
            i2t: array![[0.5, 0.5]],
            t2i: array![[0.5, 0.5]],
        };
        let ld = distillation_loss(&q, &p).unwrap();
        assert!((ld - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(distillation_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_mixing() {
        assert_eq!(total_loss(0.4, 0.2, 0.0), 0.4);
        assert_eq!(total_loss(0.4, 0.2, 1.0), 0.2);
        assert!((total_loss(0.4, 0.2, 0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let e = Embeddings {
            image: array![[1.0, 0.0]],
            text: array![[1.0, 0.0]],
        };
        let (qi, qt) = (empty(2), empty(2));
        assert_eq!(
            similarity_distributions(&e, &e, view(&qi, &qt), 0.0),
            Err(ObjectiveError::NonPositiveTau(0.0))
        );
        let wide = array![[1.0, 0.0, 0.0]];
        assert!(similarity_distributions(&e, &e, view(&wide, &wide), 1.0).is_err());
    }

    #[test]
    fn floor_keeps_loss_finite() {
        let p = DistributionPair {
            i2t: array![[0.0, 1.0]],
            t2i: array![[0.0, 1.0]],
        };
        let lc = contrastive_loss(&p);
        assert!((lc + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn queue_extends_candidates() {
        let e = Embeddings {
            image: array![[1.0, 0.0]],
            text: array![[1.0, 0.0]],
        };
        let qi = array![[0.0, 1.0], [1.0, 0.0]];
        let qt = array![[0.0, 1.0], [0.6, 0.8]];
        let p = similarity_distributions(&e, &e, view(&qi, &qt), 0.5).unwrap();
        assert_eq!(p.i2t.dim(), (1, 3));
        for row in p.i2t.rows().into_iter().chain(p.t2i.rows()) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
