//! Binary checkpoint archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, the
//! JSON metadata, then every array as little-endian `f64` in the order the
//! metadata lists them, and finally a SHA-256 digest of all preceding bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::encoder::{DualEncoder, EncoderConfig, EncoderError};
use super::optim::{AdamW, AdamWConfig};
use super::params::ParamSet;
use super::queue::FeatureQueue;
use super::tokenizer::Tokenizer;
use super::trainer::{TrainConfig, TrainState};
use crate::ipsi::IpsiConfig;

pub const MAGIC: &[u8; 8] = b"URBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint corrupt: checksum mismatch")]
    Checksum,
    #[error("checkpoint metadata invalid: {0}")]
    Metadata(String),
    #[error("checkpoint field `{field}` invalid: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    #[serde(default)]
    decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    encoder: EncoderConfig,
    ipsi: IpsiConfig,
    train: TrainConfig,
    optimizer: AdamWConfig,
    step: u64,
    optimizer_step: u64,
    queue_capacity: usize,
    tokenizer: Option<Tokenizer>,
    arrays: Vec<ArrayMeta>,
}

/// A full training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
    pub ipsi: IpsiConfig,
    pub tokenizer: Option<Tokenizer>,
}

type Named<'a> = (&'a str, bool, &'a Array2<f64>);

fn named(ps: &ParamSet) -> Vec<Named<'_>> {
    ps.iter().map(|p| (p.name.as_str(), p.decay, &p.value)).collect()
}

fn moments<'a>(state: &'a TrainState, ms: &'a [Array2<f64>]) -> Vec<Named<'a>> {
    state.student.iter().zip(ms).map(|(p, m)| (p.name.as_str(), false, m)).collect()
}

fn param_groups(state: &TrainState) -> Vec<(&'static str, Vec<Named<'_>>)> {
    vec![
        ("student", named(&state.student)),
        ("teacher", named(&state.teacher)),
        ("adam_m", moments(state, &state.optimizer.m)),
        ("adam_v", moments(state, &state.optimizer.v)),
    ]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let image_queue = st.image_queue.to_array();
        let text_queue = st.text_queue.to_array();
        let mut arrays: Vec<(&str, Named<'_>)> = Vec::new();
        for (group, items) in param_groups(st) {
            arrays.extend(items.into_iter().map(|item| (group, item)));
        }
        arrays.push(("queue", ("image", false, &image_queue)));
        arrays.push(("queue", ("text", false, &text_queue)));

        let meta = Metadata {
            encoder: st.encoder.config().clone(),
            ipsi: self.ipsi,
            train: self.train.clone(),
            optimizer: st.optimizer.config,
            step: st.step,
            optimizer_step: st.optimizer.steps_taken(),
            queue_capacity: st.image_queue.capacity(),
            tokenizer: self.tokenizer.clone(),
            arrays: arrays
                .iter()
                .map(|(g, (n, decay, a))| ArrayMeta {
                    group: g.to_string(),
                    name: n.to_string(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                    decay: *decay,
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, (_, _, a)) in &arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER + DIGEST {
            return Err(CheckpointError::Truncated("header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if found != FORMAT_VERSION {
            return Err(CheckpointError::Version { found });
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body_end = bytes.len() - DIGEST;
        if meta_len > body_end - HEADER {
            return Err(CheckpointError::Truncated("metadata"));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::Checksum);
        }
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER..HEADER + meta_len])
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;

        let mut cursor = HEADER + meta_len;
        let mut groups: BTreeMap<String, ParamSet> = BTreeMap::new();
        for a in &meta.arrays {
            let n = a.rows * a.cols;
            let end = cursor + n * 8;
            if end > body_end {
                return Err(CheckpointError::Field {
                    field: format!("{}.{}", a.group, a.name),
                    reason: "data runs past end of archive".into(),
                });
            }
            let data: Vec<f64> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = Array2::from_shape_vec((a.rows, a.cols), data).expect("length checked");
            groups.entry(a.group.clone()).or_default().push(&a.name, arr, a.decay);
            cursor = end;
        }
        if cursor != body_end {
            return Err(CheckpointError::Metadata(format!("{} trailing bytes", body_end - cursor)));
        }

        let mut take = |group: &str| {
            groups.remove(group).ok_or_else(|| CheckpointError::Field {
                field: group.to_string(),
                reason: "missing".into(),
            })
        };
        let student = take("student")?;
        let teacher = take("teacher")?;
        let m_raw = take("adam_m")?;
        let v_raw = take("adam_v")?;
        let queues = take("queue")?;

        let encoder = DualEncoder::layout_for(&meta.encoder, &meta.ipsi, &student)?;
        student.check_same_shape(&teacher).map_err(|e| CheckpointError::Field {
            field: "teacher".into(),
            reason: e.to_string(),
        })?;
        let moments = |ps: ParamSet, field: &str| -> Result<Vec<Array2<f64>>, CheckpointError> {
            ps.check_same_shape(&student).map_err(|e| CheckpointError::Field {
                field: field.into(),
                reason: e.to_string(),
            })?;
            Ok(ps.iter().map(|p| p.value.clone()).collect())
        };
        let optimizer = AdamW {
            config: meta.optimizer,
            step: meta.optimizer_step,
            m: moments(m_raw, "adam_m")?,
            v: moments(v_raw, "adam_v")?,
        };
        let queue = |name: &str| -> Result<FeatureQueue, CheckpointError> {
            let rows = queues
                .index_of(name)
                .map(|i| queues.get(i))
                .ok_or_else(|| CheckpointError::Field {
                    field: format!("queue.{name}"),
                    reason: "missing".into(),
                })?;
            if rows.ncols() != meta.encoder.embed_dim {
                return Err(CheckpointError::Field {
                    field: format!("queue.{name}"),
                    reason: format!("{} columns, expected {}", rows.ncols(), meta.encoder.embed_dim),
                });
            }
            FeatureQueue::from_rows(meta.queue_capacity, rows.view()).map_err(|e| CheckpointError::Field {
                field: format!("queue.{name}"),
                reason: e.to_string(),
            })
        };
        let image_queue = queue("image")?;
        let text_queue = queue("text")?;

        Ok(Self {
            state: TrainState {
                encoder,
                student,
                teacher,
                optimizer,
                image_queue,
                text_queue,
                step: meta.step,
            },
            train: meta.train,
            ipsi: meta.ipsi,
            tokenizer: meta.tokenizer,
        })
    }

    /// Writes atomically: a temp file in the target directory is renamed
    /// over `path` only once fully flushed.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Temp-file-then-rename write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
