//! Minimal dense column-major matrix used by the regression kernel and the
//! design builders. Designs here are tall and narrow (a few dozen columns at
//! most), so a flat `Vec<f64>` with contiguous columns is all we need.

/// Dense column-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An `rows x 0` matrix; grow it with [`Matrix::push_col`].
    pub fn empty(rows: usize) -> Self {
        Matrix {
            rows,
            cols: 0,
            data: Vec::new(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for c in 0..cols {
            for r in 0..rows {
                m.data[c * rows + r] = f(r, c);
            }
        }
        m
    }

    /// Build from column vectors. All columns must share the same length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let rows = columns.first().map_or(0, Vec::len);
        assert!(
            columns.iter().all(|c| c.len() == rows),
            "ragged columns: expected length {rows}"
        );
        let mut data = Vec::with_capacity(rows * columns.len());
        for col in columns {
            data.extend_from_slice(col);
        }
        Matrix {
            rows,
            cols: columns.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[col * self.rows + row]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[col * self.rows + row] = value;
    }

    #[inline]
    pub fn col(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn col_mut(&mut self, col: usize) -> &mut [f64] {
        &mut self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn push_col(&mut self, column: &[f64]) {
        assert_eq!(column.len(), self.rows, "column length mismatch");
        self.data.extend_from_slice(column);
        self.cols += 1;
    }

    /// Dot product of row `row` with a full-length coefficient vector
    /// (one entry per column).
    pub fn row_dot(&self, row: usize, coefficients: &[f64]) -> f64 {
        debug_assert_eq!(coefficients.len(), self.cols);
        let mut acc = 0.0;
        for (c, b) in coefficients.iter().enumerate() {
            if *b != 0.0 {
                acc += self.data[c * self.rows + row] * b;
            }
        }
        acc
    }

    /// Copy of the matrix restricted to the given rows (in the given order).
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.cols, |r, c| self.get(rows[r], c))
    }

    /// Copy of the matrix restricted to the given columns (in the given order).
    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut m = Matrix::empty(self.rows);
        for &c in cols {
            m.push_col(self.col(c));
        }
        m
    }

    pub fn col_means(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| self.col(c).iter().sum::<f64>() / self.rows as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_index() {
        let mut m = Matrix::empty(3);
        m.push_col(&[1.0, 2.0, 3.0]);
        m.push_col(&[4.0, 5.0, 6.0]);
        assert_eq!(m.cols(), 2);
        assert_eq!(m.get(1, 1), 5.0);
        assert_eq!(m.col(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn row_dot_skips_zero_coefficients() {
        let m = Matrix::from_columns(&[vec![1.0, 2.0], vec![f64::NAN, f64::NAN]]);
        // A zero coefficient must not touch the (possibly undefined) column.
        assert_eq!(m.row_dot(0, &[2.0, 0.0]), 2.0);
    }

    #[test]
    fn select_rows_and_cols() {
        let m = Matrix::from_fn(4, 3, |r, c| (r * 10 + c) as f64);
        let s = m.select_rows(&[3, 1]);
        assert_eq!(s.get(0, 2), 32.0);
        assert_eq!(s.get(1, 0), 10.0);
        let c = m.select_cols(&[2]);
        assert_eq!(c.cols(), 1);
        assert_eq!(c.get(3, 0), 32.0);
    }
}
