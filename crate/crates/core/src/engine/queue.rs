//! FIFO ring buffer of momentum-encoder keys used as negatives.

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

/// Allowed deviation of a pushed key's norm from 1.
pub const KEY_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Queue<T> {
    /// `[Q, d]`.
    pub data: Grid<T>,
    /// Row the next key is written to.
    pub cursor: usize,
    /// Rows written so far, saturating at Q.
    pub fill: usize,
}

impl<T: Real> Queue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            data: Grid::zeros(&[capacity, dim]),
            cursor: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.data.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.data.dim(1)
    }

    /// Filled rows. Before the first wrap these are rows `0..fill`.
    pub fn filled(&self) -> Grid<T> {
        let d = self.dim();
        Grid::new(
            vec![self.fill, d],
            self.data.data()[..self.fill * d].to_vec(),
        )
        .expect("queue rows")
    }

    pub fn push(&mut self, keys: &Grid<T>) -> Result<()> {
        let (q, d) = (self.capacity(), self.dim());
        let b = match keys.shape() {
            &[b, kd] if kd == d => b,
            s => {
                return Err(Error::shape(
                    "queue_push",
                    format!("keys {s:?}, queue rows have {d} values"),
                ))
            }
        };
        if b == 0 || q % b != 0 {
            return Err(Error::invalid(
                "queue_push",
                format!("batch {b} does not divide queue size {q}"),
            ));
        }
        for (i, row) in keys.data().chunks(d).enumerate() {
            let n = row
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if !((n - 1.0).abs() <= KEY_NORM_TOL) {
                return Err(Error::Contract(format!(
                    "queue key {i} has norm {n}, expected 1"
                )));
            }
        }
        let start = self.cursor * d;
        self.data.data_mut()[start..start + b * d].copy_from_slice(keys.data());
        self.cursor = (self.cursor + b) % q;
        self.fill = (self.fill + b).min(q);
        Ok(())
    }
}
