//! Information-preserving stretch of a positional-embedding table.
//!
//! Positions are one-indexed. The first 20 rows are copied unchanged; every
//! later position `e` of the stretched table is the convex blend
//! `(1 - w) * P(floor(e / ratio)) + w * P(ceil(e / ratio))` with
//! `w = e / ratio - floor(e / ratio)`. A table of `L` rows stretches to
//! `20 + (L - 20) * ratio` rows, so 77 positions become 248 at ratio 4.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of low positions that are kept verbatim.
pub const PRESERVED_POSITIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IpsiError {
    #[error("positional table needs at least {min} rows of dimension >= 1 (got {rows}x{dim})")]
    TableTooSmall { rows: usize, dim: usize, min: usize },
    #[error("interpolation ratio must be >= 1 (got {0})")]
    RatioTooSmall(usize),
    #[error("interpolation ratio {ratio} maps position {position} to source row 0")]
    RatioTooLarge { ratio: usize, position: usize },
    #[error("preserved prefix is fixed at {PRESERVED_POSITIONS} positions (got {0})")]
    PreserveMismatch(usize),
    #[error("stretched length {target} needs source row {needed} but the table has {rows}")]
    SourceOutOfRange { target: usize, needed: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpsiConfig {
    pub ratio: usize,
    pub preserve: usize,
}

impl Default for IpsiConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            preserve: PRESERVED_POSITIONS,
        }
    }
}

impl IpsiConfig {
    pub fn new(ratio: usize) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }

    pub fn target_len(&self, source_len: usize) -> usize {
        self.preserve + (source_len.saturating_sub(self.preserve)) * self.ratio
    }

    /// Checks every precondition for stretching a table of `source_len` rows.
    pub fn validate(&self, source_len: usize) -> Result<usize, IpsiError> {
        if self.preserve != PRESERVED_POSITIONS {
            return Err(IpsiError::PreserveMismatch(self.preserve));
        }
        if self.ratio < 1 {
            return Err(IpsiError::RatioTooSmall(self.ratio));
        }
        let first = self.preserve + 1;
        if first / self.ratio < 1 {
            return Err(IpsiError::RatioTooLarge {
                ratio: self.ratio,
                position: first,
            });
        }
        let target = self.target_len(source_len);
        let needed = target.div_ceil(self.ratio);
        if needed > source_len {
            return Err(IpsiError::SourceOutOfRange {
                target,
                needed,
                rows: source_len,
            });
        }
        Ok(target)
    }
}

/// Ordered table of position embeddings, addressed from position 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    rows: Array2<f64>,
}

impl PositionalTable {
    pub fn new(rows: Array2<f64>) -> Result<Self, IpsiError> {
        let (l, d) = rows.dim();
        if l <= PRESERVED_POSITIONS || d == 0 {
            return Err(IpsiError::TableTooSmall {
                rows: l,
                dim: d,
                min: PRESERVED_POSITIONS + 1,
            });
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Row at one-indexed `position`.
    pub fn position(&self, position: usize) -> ArrayView1<'_, f64> {
        self.rows.row(position - 1)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_array(self) -> Array2<f64> {
        self.rows
    }
}

pub fn stretch_positions(table: &PositionalTable, cfg: &IpsiConfig) -> Result<PositionalTable, IpsiError> {
    let target = cfg.validate(table.len())?;
    let mut out = Array2::<f64>::zeros((target, table.dim()));
    for (idx, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let e = idx + 1;
        if e <= cfg.preserve {
            row.assign(&table.position(e));
            continue;
        }
        let lo = e / cfg.ratio;
        let hi = e.div_ceil(cfg.ratio);
        let weight = e as f64 / cfg.ratio as f64 - lo as f64;
        if weight == 0.0 {
            row.assign(&table.position(lo));
        } else {
            let (a, b) = (table.position(lo), table.position(hi));
            row.zip_mut_with(&a, |o, &x| *o = (1.0 - weight) * x);
            row.zip_mut_with(&b, |o, &y| *o += weight * y);
        }
    }
    PositionalTable::new(out)
}
