//! Region-level indicator regression on frozen image features.

mod features;
mod head;
mod metrics;

use std::collections::BTreeMap;
use std::io::BufRead;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub use features::{extract_features, FeatureError, FrozenEncoder, ImageDir, ImageSource, MemoryImages};
pub use head::{fit_head, Head, HeadConfig, HeadError};
pub use metrics::{evaluate, scatter_report, EvalError, EvalReport, ScatterPoint, ScatterReport, SplitName};

/// One line of the region manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub region_id: String,
    #[serde(default)]
    pub street_view_ids: Vec<String>,
    #[serde(default)]
    pub satellite_id: Option<String>,
    /// Raw indicator values, before the log transform.
    #[serde(default)]
    pub indicators: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEmbedding {
    pub region_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("reading manifest: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("indicator value {0} is negative")]
pub struct DomainError(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("need at least 5 records to split, got {0}")]
pub struct SplitError(pub usize);

impl RegionRecord {
    fn check(&self) -> Result<(), String> {
        if self.region_id.is_empty() {
            return Err("empty region_id".into());
        }
        if let Some((k, v)) = self.indicators.iter().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(format!("indicator `{k}` must be a finite non-negative number, got {v}"));
        }
        Ok(())
    }

    /// Images that represent the region: its street views, or the satellite
    /// tile when it has none.
    pub fn image_ids(&self) -> Vec<&str> {
        if self.street_view_ids.is_empty() {
            self.satellite_id.iter().map(String::as_str).collect()
        } else {
            self.street_view_ids.iter().map(String::as_str).collect()
        }
    }
}

/// Parses a line-delimited manifest. Blank lines are ignored.
pub fn read_manifest<R: BufRead>(reader: R) -> Result<Vec<RegionRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RegionRecord = serde_json::from_str(&line).map_err(|e| ManifestError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.check().map_err(|message| ManifestError::Line { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}

/// Coordinate-wise mean; `None` for an empty set.
pub fn pool_region(embeddings: &[Array1<f64>]) -> Option<Array1<f64>> {
    let first = embeddings.first()?;
    let mut sum = Array1::zeros(first.len());
    for e in embeddings {
        sum += e;
    }
    Some(sum / embeddings.len() as f64)
}

/// `ln(y + 1)`.
pub fn log_transform(y: f64) -> Result<f64, DomainError> {
    if y < 0.0 || y.is_nan() {
        return Err(DomainError(y));
    }
    Ok(y.ln_1p())
}

/// Pools per-image features into region embeddings. Regions whose images
/// are all missing are skipped and reported with a reason.
pub fn region_embeddings(
    records: &[RegionRecord],
    features: &BTreeMap<String, Array1<f64>>,
) -> (Vec<RegionEmbedding>, Vec<(String, String)>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        let vecs: Vec<Array1<f64>> = r.image_ids().iter().filter_map(|id| features.get(*id).cloned()).collect();
        match pool_region(&vecs) {
            Some(v) => out.push(RegionEmbedding {
                region_id: r.region_id.clone(),
                vector: v.to_vec(),
            }),
            None => {
                log::warn!("region {} has no usable images; skipped", r.region_id);
                skipped.push((r.region_id.clone(), "no usable images".to_string()));
            }
        }
    }
    (out, skipped)
}

/// Regions that carry `indicator`, paired with its log-transformed value.
pub fn task_targets(records: &[RegionRecord], indicator: &str) -> Result<BTreeMap<String, f64>, DomainError> {
    records
        .iter()
        .filter_map(|r| r.indicators.get(indicator).map(|&v| (r.region_id.clone(), v)))
        .map(|(id, v)| log_transform(v).map(|t| (id, t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `floor(n/5)` items each to validation and test and
/// the rest to training.
pub fn split_dataset<T: Clone>(items: &[T], seed_value: u64) -> Result<Split<T>, SplitError> {
    let n = items.len();
    if n < 5 {
        return Err(SplitError(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, "downstream/split"));
    order.shuffle(&mut rng);
    let fifth = n / 5;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        val: pick(&order[..fifth]),
        test: pick(&order[fifth..2 * fifth]),
        train: pick(&order[2 * fifth..]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pooling_hand_values() {
        assert_eq!(pool_region(&[array![0.0, 2.0], array![2.0, 0.0]]), Some(array![1.0, 1.0]));
        let v = array![0.3, -1.0];
        assert_eq!(pool_region(&[v.clone(), v.clone(), v.clone()]), Some(v.clone()));
        assert_eq!(pool_region(&[v.clone()]), Some(v));
        assert_eq!(pool_region(&[]), None);
    }

    #[test]
    fn log_transform_values() {
        assert_eq!(log_transform(0.0), Ok(0.0));
        assert!((log_transform(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(log_transform(-0.1).is_err());
    }

    #[test]
    fn split_sizes() {
        let ten: Vec<u32> = (0..10).collect();
        let s = split_dataset(&ten, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let eleven: Vec<u32> = (0..11).collect();
        let s = split_dataset(&eleven, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 2));
        assert_eq!(split_dataset(&ten, 3).unwrap(), split_dataset(&ten, 3).unwrap());
        assert_eq!(split_dataset(&ten[..4], 3), Err(SplitError(4)));
    }

    #[test]
    fn manifest_rejects_negative_and_unknown() {
        let good = r#"{"region_id":"r1","street_view_ids":["a","b"],"satellite_id":null,"indicators":{"pop":3.0}}"#;
        let recs = read_manifest(good.as_bytes()).unwrap();
        assert_eq!(recs[0].image_ids(), ["a", "b"]);
        let neg = r#"{"region_id":"r1","indicators":{"pop":-1}}"#;
        assert!(read_manifest(neg.as_bytes()).unwrap_err().to_string().contains("pop"));
        let unknown = r#"{"region_id":"r1","foo":1}"#;
        assert!(read_manifest(unknown.as_bytes()).is_err());
        let sat = r#"{"region_id":"r2","satellite_id":"s"}"#;
        assert_eq!(read_manifest(sat.as_bytes()).unwrap()[0].image_ids(), ["s"]);
    }

    #[test]
    fn missing_indicator_drops_region_for_that_task() {
        let recs = vec![
            RegionRecord {
                region_id: "a".into(),
                street_view_ids: vec![],
                satellite_id: None,
                indicators: [("pop".to_string(), 0.0)].into_iter().collect(),
            },
            RegionRecord {
                region_id: "b".into(),
                street_view_ids: vec![],
                satellite_id: None,
                indicators: BTreeMap::new(),
            },
        ];
        let t = task_targets(&recs, "pop").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t["a"], 0.0);
    }
}
