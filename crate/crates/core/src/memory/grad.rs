use std::collections::HashMap;

use crate::la::DenseMatrix;

/// Gradient of the loss with respect to the memory contents at one step.
///
/// Sparse models hold only the rows that received gradient; dense models
/// hold a full buffer.
#[derive(Debug, Clone)]
pub struct MemoryGrad {
    step: u64,
    rows: usize,
    cols: usize,
    repr: Repr,
}

#[derive(Debug, Clone)]
enum Repr {
    Sparse(HashMap<usize, Vec<f64>>),
    Dense(Vec<f64>),
}

impl MemoryGrad {
    pub fn sparse(step: u64, rows: usize, cols: usize) -> Self {
        MemoryGrad {
            step,
            rows,
            cols,
            repr: Repr::Sparse(HashMap::new()),
        }
    }

    pub fn dense(step: u64, rows: usize, cols: usize) -> Self {
        MemoryGrad {
            step,
            rows,
            cols,
            repr: Repr::Dense(vec![0.0; rows * cols]),
        }
    }

    /// The step whose memory contents this is the gradient for.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        match &self.repr {
            Repr::Sparse(m) => m.get(&i).map(|v| v.as_slice()),
            Repr::Dense(d) => Some(&d[i * self.cols..(i + 1) * self.cols]),
        }
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        assert!(i < self.rows, "gradient row {i} out of range");
        let cols = self.cols;
        match &mut self.repr {
            Repr::Sparse(m) => m.entry(i).or_insert_with(|| vec![0.0; cols]),
            Repr::Dense(d) => &mut d[i * cols..(i + 1) * cols],
        }
    }

    pub fn zero_row(&mut self, i: usize) {
        match &mut self.repr {
            Repr::Sparse(m) => {
                m.remove(&i);
            }
            Repr::Dense(d) => d[i * self.cols..(i + 1) * self.cols].fill(0.0),
        }
    }

    /// Rows currently held, ascending.
    pub fn held_rows(&self) -> Vec<usize> {
        match &self.repr {
            Repr::Sparse(m) => {
                let mut r: Vec<usize> = m.keys().copied().collect();
                r.sort_unstable();
                r
            }
            Repr::Dense(_) => (0..self.rows).collect(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in self.held_rows() {
            if let Some(r) = self.row(i) {
                out.row_mut(i).copy_from_slice(r);
            }
        }
        out
    }

    /// Heap bytes held by the gradient rows.
    pub fn bytes(&self) -> usize {
        match &self.repr {
            Repr::Sparse(m) => m.len() * (self.cols * 8 + 2 * std::mem::size_of::<usize>()),
            Repr::Dense(d) => d.len() * 8,
        }
    }
}
