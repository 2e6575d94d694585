use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pretrain::checkpoint::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n_test: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {truths} truths")]
    Length { predictions: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("writing report: {0}")]
    Write(String),
}

/// R², RMSE and MAE. R² is 0 when the truths have no variance.
pub fn evaluate(predictions: &[f64], truths: &[f64]) -> Result<EvalReport, EvalError> {
    if predictions.len() != truths.len() {
        return Err(EvalError::Length {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if truths.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = truths.len() as f64;
    let mean = truths.iter().sum::<f64>() / n;
    let ss_res: f64 = predictions.iter().zip(truths).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    let abs: f64 = predictions.iter().zip(truths).map(|(p, t)| (t - p).abs()).sum();
    Ok(EvalReport {
        r2: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
        rmse: (ss_res / n).sqrt(),
        mae: abs / n,
        n_test: truths.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub region_id: String,
    pub split: SplitName,
    pub truth: f64,
    pub prediction: f64,
}

/// Prediction-versus-truth pairs with R² on the test split and on all
/// regions. `r2_all` applies the same head, fitted once on the training
/// split, to every region; there is no refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterReport {
    pub r2_test: f64,
    pub r2_all: f64,
    pub r2_all_head: String,
    pub points: Vec<ScatterPoint>,
}

impl ScatterReport {
    pub fn new(points: Vec<ScatterPoint>) -> Result<Self, EvalError> {
        let (tp, tt): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| p.split == SplitName::Test)
            .map(|p| (p.prediction, p.truth))
            .unzip();
        let (ap, at): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p.prediction, p.truth)).unzip();
        Ok(Self {
            r2_test: evaluate(&tp, &tt)?.r2,
            r2_all: evaluate(&ap, &at)?.r2,
            r2_all_head: "train-split head evaluated on all regions".into(),
            points,
        })
    }
}

/// Writes the report as JSON at `path` and, if `svg` is given, a scatter
/// plot with a 45 degree reference line.
pub fn scatter_report(points: Vec<ScatterPoint>, path: &Path, svg: Option<&Path>) -> Result<ScatterReport, EvalError> {
    let report = ScatterReport::new(points)?;
    let json = serde_json::to_vec_pretty(&report).map_err(|e| EvalError::Write(e.to_string()))?;
    write_atomic(path, &json).map_err(|e| EvalError::Write(e.to_string()))?;
    if let Some(svg_path) = svg {
        write_atomic(svg_path, render_svg(&report).as_bytes()).map_err(|e| EvalError::Write(e.to_string()))?;
    }
    Ok(report)
}

fn render_svg(report: &ScatterReport) -> String {
    const SIZE: f64 = 400.0;
    const PAD: f64 = 40.0;
    let values = report.points.iter().flat_map(|p| [p.truth, p.prediction]);
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let px = |v: f64| PAD + (v - lo) / (hi - lo) * (SIZE - 2.0 * PAD);
    let py = |v: f64| SIZE - px(v);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 4"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for p in &report.points {
        let color = if p.split == SplitName::Test { "crimson" } else { "steelblue" };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#,
            px(p.truth),
            py(p.prediction)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="20" font-size="12">R2 test {:.3} / all {:.3}</text>"#,
        report.r2_test, report.r2_all
    );
    s.push_str("</svg>\n");
    s
}
