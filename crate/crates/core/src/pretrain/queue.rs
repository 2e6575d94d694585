use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueError {
    #[error("queue holds {expected}-dimensional features, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("restored queue has {rows} rows but capacity {capacity}")]
    Overfull { rows: usize, capacity: usize },
}

/// Fixed-capacity FIFO of feature rows, stored as a ring buffer.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    buf: Array2<f64>,
    head: usize,
    len: usize,
}

/// Queues are equal when they hold the same rows in the same order,
/// regardless of where the ring buffer currently starts.
impl PartialEq for FeatureQueue {
    fn eq(&self, other: &Self) -> bool {
        self.capacity() == other.capacity() && self.dim() == other.dim() && self.to_array() == other.to_array()
    }
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            buf: Array2::zeros((capacity, dim)),
            head: 0,
            len: 0,
        }
    }

    /// Rebuilds a queue from rows listed oldest first.
    pub fn from_rows(capacity: usize, rows: ArrayView2<'_, f64>) -> Result<Self, QueueError> {
        if rows.nrows() > capacity {
            return Err(QueueError::Overfull {
                rows: rows.nrows(),
                capacity,
            });
        }
        let mut q = Self::new(capacity, rows.ncols());
        q.push(rows)?;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.buf.nrows()
    }

    pub fn dim(&self) -> usize {
        self.buf.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends rows in order, evicting the oldest once full. With zero
    /// capacity this is a no-op.
    pub fn push(&mut self, rows: ArrayView2<'_, f64>) -> Result<(), QueueError> {
        if rows.ncols() != self.dim() {
            return Err(QueueError::Dim {
                expected: self.dim(),
                got: rows.ncols(),
            });
        }
        let cap = self.capacity();
        if cap == 0 {
            return Ok(());
        }
        for row in rows.rows() {
            let slot = if self.len < cap {
                self.len += 1;
                (self.head + self.len - 1) % cap
            } else {
                let slot = self.head;
                self.head = (self.head + 1) % cap;
                slot
            };
            self.buf.row_mut(slot).assign(&row);
        }
        Ok(())
    }

    /// Contents, oldest first.
    pub fn to_array(&self) -> Array2<f64> {
        let cap = self.capacity();
        let mut out = Array2::zeros((self.len, self.dim()));
        let first = (cap - self.head).min(self.len);
        if first > 0 {
            out.slice_mut(s![..first, ..])
                .assign(&self.buf.slice(s![self.head..self.head + first, ..]));
        }
        if self.len > first {
            out.slice_mut(s![first.., ..])
                .assign(&self.buf.slice(s![..self.len - first, ..]));
        }
        out
    }
}
