use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pretrain::optim::{AdamW, AdamWConfig};
use crate::pretrain::params::{Init, ParamSet};
use crate::pretrain::tape::{Tape, Var};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 500,
            patience: 10,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeadError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("{0} feature rows but {1} targets")]
    Mismatch(usize, usize),
    #[error("feature width {got} does not match the head's {expected}")]
    Width { expected: usize, got: usize },
    #[error("head.{0} must be positive")]
    Config(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch} (max |weight| {max_weight:.3e})")]
    NonFinite { epoch: usize, loss: f64, max_weight: f64 },
}

/// Fitted MLP regressor with its input and target standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    x_mean: Array1<f64>,
    x_scale: Array1<f64>,
    y_mean: f64,
    y_scale: f64,
    /// `(weight, bias)` per layer; hidden layers use GELU.
    layers: Vec<(Array2<f64>, Array2<f64>)>,
    pub epochs_run: usize,
    pub best_monitor_rmse: f64,
}

fn scale_of(std: f64) -> f64 {
    if std > 1e-12 {
        std
    } else {
        1.0
    }
}

fn forward(tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
    let n_layers = params.len() / 2;
    let mut h = x;
    for l in 0..n_layers {
        let w = tape.param(2 * l, params.get(2 * l));
        let b = tape.param(2 * l + 1, params.get(2 * l + 1));
        h = tape.matmul(h, w);
        h = tape.add_row(h, b);
        if l + 1 < n_layers {
            h = tape.gelu(h);
        }
    }
    h
}

fn rmse_std(params: &ParamSet, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = forward(&mut tape, params, xv);
    let pred = tape.value(out).column(0).to_owned();
    ((&pred - y).mapv(|d| d * d).mean().unwrap_or(0.0)).sqrt()
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.hidden.contains(&0) {
            return Err(HeadError::Config("hidden"));
        }
        if !(self.lr > 0.0) {
            return Err(HeadError::Config("lr"));
        }
        if self.batch_size == 0 {
            return Err(HeadError::Config("batch_size"));
        }
        if self.max_epochs == 0 {
            return Err(HeadError::Config("max_epochs"));
        }
        Ok(())
    }
}

/// Mini-batch AdamW on squared error, keeping the parameters with the best
/// validation RMSE (training RMSE when no validation rows are given).
pub fn fit_head(
    train_x: &Array2<f64>,
    train_y: &Array1<f64>,
    val_x: &Array2<f64>,
    val_y: &Array1<f64>,
    cfg: &HeadConfig,
    seed_value: u64,
) -> Result<Head, HeadError> {
    cfg.validate()?;
    let (n, d) = train_x.dim();
    if n == 0 {
        return Err(HeadError::EmptyTrain);
    }
    if train_y.len() != n {
        return Err(HeadError::Mismatch(n, train_y.len()));
    }
    if val_y.len() != val_x.nrows() {
        return Err(HeadError::Mismatch(val_x.nrows(), val_y.len()));
    }
    if val_x.nrows() > 0 && val_x.ncols() != d {
        return Err(HeadError::Width {
            expected: d,
            got: val_x.ncols(),
        });
    }

    let x_mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let x_scale = train_x.std_axis(Axis(0), 0.0).mapv(scale_of);
    let y_mean = train_y.mean().expect("non-empty");
    let y_scale = scale_of(train_y.std(0.0));
    let xs = (train_x - &x_mean) / &x_scale;
    let ys = (train_y - y_mean) / y_scale;
    let (mx, my) = if val_x.nrows() > 0 {
        ((val_x - &x_mean) / &x_scale, (val_y - y_mean) / y_scale)
    } else {
        (xs.clone(), ys.clone())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "downstream/head"));
    let mut params = ParamSet::new();
    let mut width = d;
    for (l, &h) in cfg.hidden.iter().chain(std::iter::once(&1)).enumerate() {
        params.add(&format!("layer{l}.weight"), width, h, Init::Xavier, true, &mut rng);
        params.add(&format!("layer{l}.bias"), 1, h, Init::Zeros, false, &mut rng);
        width = h;
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );

    let mut best = (rmse_std(&params, &mx, &my), params.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = xs.select(Axis(0), chunk);
            let by = ys.select(Axis(0), chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(bx);
            let out = forward(&mut tape, &params, xv);
            let resid = &tape.value(out).column(0) - &by;
            let loss = resid.mapv(|r| r * r).mean().unwrap_or(0.0);
            if !loss.is_finite() {
                let max_weight = params
                    .iter()
                    .flat_map(|p| p.value.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                return Err(HeadError::NonFinite { epoch, loss, max_weight });
            }
            let seed_grad = resid.mapv(|r| 2.0 * r / chunk.len() as f64).insert_axis(Axis(1));
            let grads = tape.backward_seeded(out, seed_grad);
            opt.step(&mut params, &grads);
        }
        let monitor = rmse_std(&params, &mx, &my);
        if monitor < best.0 {
            best = (monitor, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let layers = (0..best.1.len() / 2)
        .map(|l| (best.1.get(2 * l).clone(), best.1.get(2 * l + 1).clone()))
        .collect();
    Ok(Head {
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        layers,
        epochs_run,
        best_monitor_rmse: best.0 * y_scale,
    })
}

impl Head {
    pub fn input_dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>, HeadError> {
        if x.ncols() != self.input_dim() {
            return Err(HeadError::Width {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut params = ParamSet::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            params.push(&format!("layer{i}.weight"), w.clone(), true);
            params.push(&format!("layer{i}.bias"), b.clone(), false);
        }
        let mut tape = Tape::new();
        let xv = tape.constant((x - &self.x_mean) / &self.x_scale);
        let out = forward(&mut tape, &params, xv);
        Ok(tape.value(out).column(0).mapv(|z| z * self.y_scale + self.y_mean))
    }
}
