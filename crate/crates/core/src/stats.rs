//! Streaming moment accumulators with associative merges.

use crate::model::{Matrix, Vector};

/// Mean and variance by Welford's update; `merge` combines two partial
/// accumulators (Chan et al.), so replica results can be folded in order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean, treating samples as independent.
    pub fn stderr(&self) -> f64 {
        if self.count < 2 {
            f64::INFINITY
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// Componentwise running statistics of a fixed-length vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStats {
    parts: Vec<RunningStats>,
}

impl VectorStats {
    pub fn new(dim: usize) -> Self {
        Self {
            parts: vec![RunningStats::new(); dim],
        }
    }

    pub fn push(&mut self, v: &[f64]) {
        debug_assert_eq!(v.len(), self.parts.len());
        for (s, &x) in self.parts.iter_mut().zip(v) {
            s.push(x);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (s, o) in self.parts.iter_mut().zip(&other.parts) {
            s.merge(o);
        }
    }

    pub fn count(&self) -> u64 {
        self.parts.first().map_or(0, |s| s.count())
    }

    pub fn mean(&self) -> Vector {
        Vector::from_iterator(self.parts.len(), self.parts.iter().map(|s| s.mean()))
    }

    pub fn stderr(&self) -> Vector {
        Vector::from_iterator(self.parts.len(), self.parts.iter().map(|s| s.stderr()))
    }

    pub fn component(&self, i: usize) -> &RunningStats {
        &self.parts[i]
    }

    /// Mean reshaped as an `rows × cols` column-major matrix.
    pub fn mean_matrix(&self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_iterator(rows, cols, self.parts.iter().map(|s| s.mean()))
    }
}

/// Mean and naive standard error of a slice.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let s: RunningStats = xs.iter().copied().collect();
    (s.mean(), s.stderr())
}
