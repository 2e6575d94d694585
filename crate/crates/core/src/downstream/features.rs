use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::pretrain::tape::Tape;
use crate::pretrain::{DualEncoder, EncoderError, ParamSet};

/// Resolves image references to patch matrices.
pub trait ImageSource: Sync {
    fn image(&self, id: &str) -> Result<Array2<f64>, String>;
}

#[derive(Debug, Clone, Default)]
pub struct MemoryImages(pub BTreeMap<String, Array2<f64>>);

impl ImageSource for MemoryImages {
    fn image(&self, id: &str) -> Result<Array2<f64>, String> {
        self.0.get(id).cloned().ok_or_else(|| format!("unknown image `{id}`"))
    }
}

/// Directory of `<id>.json` files, each a list of equal-length rows.
#[derive(Debug, Clone)]
pub struct ImageDir(pub PathBuf);

impl ImageSource for ImageDir {
    fn image(&self, id: &str) -> Result<Array2<f64>, String> {
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(format!("invalid image id `{id}`"));
        }
        let path = self.0.join(format!("{id}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(format!("{}: expected a non-empty rectangular matrix", path.display()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((flat.len() / cols, cols), flat).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("image `{id}`: {message}")]
pub struct FeatureError {
    pub id: String,
    pub message: String,
}

/// Image tower with read-only parameters.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    encoder: DualEncoder,
    params: ParamSet,
}

impl FrozenEncoder {
    pub fn new(encoder: DualEncoder, params: ParamSet) -> Self {
        Self { encoder, params }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.config().embed_dim
    }

    pub fn embed_image(&self, image: &Array2<f64>) -> Result<Array1<f64>, EncoderError> {
        let mut tape = Tape::new();
        let v = self.encoder.encode_images(&mut tape, &self.params, &[image])?;
        Ok(tape.value(v).row(0).to_owned())
    }
}

/// Embeds each referenced image independently, in parallel. Results keep
/// the input order; a missing or malformed image fails only its own slot.
pub fn extract_features(
    encoder: &FrozenEncoder,
    source: &dyn ImageSource,
    ids: &[String],
) -> Vec<Result<Array1<f64>, FeatureError>> {
    ids.par_iter()
        .map(|id| {
            let fail = |message: String| FeatureError {
                id: id.clone(),
                message,
            };
            let img = source.image(id).map_err(fail)?;
            encoder.embed_image(&img).map_err(|e| fail(e.to_string()))
        })
        .collect()
}
