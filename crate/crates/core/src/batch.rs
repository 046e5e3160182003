//! Flat row-major sample batches.

use crate::scalar::Real;

/// A `rows × cols` batch of points stored row-major in one allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<R> {
    data: Vec<R>,
    rows: usize,
    cols: usize,
}

impl<R: Real> Batch<R> {
    /// Wraps a flat row-major buffer. Panics if the length is not `rows * cols`.
    pub fn from_flat(data: Vec<R>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "flat buffer length mismatch");
        Self { data, rows, cols }
    }

    /// A batch of `rows` zero points.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![R::zero(); rows * cols],
            rows,
            cols,
        }
    }

    /// Builds a batch from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[R]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            data,
            rows: rows.len(),
            cols,
        }
    }

    /// Single-row batch.
    pub fn from_point(x: &[R]) -> Self {
        Self::from_rows(&[x])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn flat(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn flat_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[R]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Copies the selected rows into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            data,
            rows: indices.len(),
            cols: self.cols,
        }
    }

    /// Rows `[start, end)` as a new batch.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Self {
            data: self.data[start * self.cols..end * self.cols].to_vec(),
            rows: end - start,
            cols: self.cols,
        }
    }

    /// Concatenates rows of `a` and `b` column-wise: `[a_i | b_i]`.
    pub fn hstack(a: &Self, b: &Self) -> Self {
        assert_eq!(a.rows, b.rows, "row count mismatch");
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for i in 0..a.rows {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Self {
            data,
            rows: a.rows,
            cols,
        }
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_rows() {
        let b = Batch::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(b.rows(), 2);
        assert_eq!(b.row(1), &[3.0, 4.0]);
        assert_eq!(b.gather(&[1, 0]).row(0), &[3.0, 4.0]);
        let h = Batch::hstack(&b, &b);
        assert_eq!(h.row(0), &[1.0, 2.0, 1.0, 2.0]);
    }
}
