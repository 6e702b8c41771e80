//! Fixed-capacity FIFO of unit-norm embeddings used as the nearest-neighbor
//! search pool.

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::nn::Mat;

pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SupportQueue {
    capacity: usize,
    dim: usize,
    /// Slot-major storage; rows `[0, fill)` are valid.
    slots: Mat,
    fill: usize,
    cursor: usize,
}

pub(crate) fn check_unit(v: ArrayView1<'_, f64>, what: &'static str) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::invalid(what, format!("expected unit L2 norm, got {norm}")));
    }
    Ok(())
}

impl SupportQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("queue", "capacity and dim must be >= 1"));
        }
        Ok(Self {
            capacity,
            dim,
            slots: Mat::zeros((capacity, dim)),
            fill: 0,
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Appends one unit vector, evicting the oldest entry when full.
    pub fn push(&mut self, v: ArrayView1<'_, f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("queue entry", self.dim, v.len()));
        }
        check_unit(v, "queue entry")?;
        self.slots.row_mut(self.cursor).assign(&v);
        self.cursor = (self.cursor + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Appends every row of `batch` in order.
    pub fn update(&mut self, batch: &Mat) -> Result<()> {
        for row in batch.rows() {
            check_unit(row, "queue entry")?;
        }
        for row in batch.rows() {
            self.push(row)?;
        }
        Ok(())
    }

    /// Stored vectors, oldest first.
    pub fn entries(&self) -> Vec<Array1<f64>> {
        let start = if self.fill < self.capacity { 0 } else { self.cursor };
        (0..self.fill)
            .map(|k| self.slots.row((start + k) % self.capacity).to_owned())
            .collect()
    }

    /// Storage slot of the highest dot product with `z`; ties go to the
    /// lowest slot.
    pub fn nearest_slot(&self, z: ArrayView1<'_, f64>) -> Result<usize> {
        if self.fill == 0 {
            return Err(Error::invalid("queue", "nearest-neighbor lookup on an empty queue"));
        }
        if z.len() != self.dim {
            return Err(Error::shape("query", self.dim, z.len()));
        }
        check_unit(z, "query")?;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (slot, row) in self.slots.axis_iter(Axis(0)).take(self.fill).enumerate() {
            let s = row.dot(&z);
            if s > best.1 {
                best = (slot, s);
            }
        }
        Ok(best.0)
    }

    pub fn slot(&self, slot: usize) -> ArrayView1<'_, f64> {
        self.slots.row(slot)
    }

    /// Nearest stored vector for each row of `queries`. The result is a copy:
    /// no gradient is tracked through it.
    pub fn nearest_batch(&self, queries: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(queries.raw_dim());
        for (i, q) in queries.rows().into_iter().enumerate() {
            let slot = self.nearest_slot(q)?;
            out.row_mut(i).assign(&self.slots.row(slot));
        }
        Ok(out)
    }
}

/// `argmax <z, q>` over the queue, equivalently `argmin |z - q|` on the unit
/// sphere.
pub fn nearest_neighbor(z: ArrayView1<'_, f64>, queue: &SupportQueue) -> Result<Array1<f64>> {
    let slot = queue.nearest_slot(z)?;
    Ok(queue.slot(slot).to_owned())
}
