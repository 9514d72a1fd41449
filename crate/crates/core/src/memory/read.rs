use super::{MemoryGrad, MemoryState};
use crate::error::{check_dim, Error, Result};
use crate::la::{axpy, dot, norm, sparse_weighted_sum, SparseVector};

/// Smallest query norm used when normalising; a zero query has no direction.
const MIN_QUERY_NORM: f64 = 1e-12;

/// Content-based addressing for one head at one step.
#[derive(Debug, Clone)]
pub struct ContentWeights {
    pub step: u64,
    pub query: Vec<f64>,
    pub query_norm: f64,
    pub beta: f64,
    /// Retained slots, ascending.
    pub slots: Vec<usize>,
    /// Cosine similarity of the query with each retained slot.
    pub similarities: Vec<f64>,
    pub row_norms: Vec<f64>,
    pub weights: SparseVector,
}

#[derive(Debug, Clone)]
pub struct SparseReadResult {
    pub address: ContentWeights,
    pub word: Vec<f64>,
}

impl SparseReadResult {
    pub fn weights(&self) -> &SparseVector {
        &self.address.weights
    }

    pub fn similarities(&self) -> &[f64] {
        &self.address.similarities
    }
}

#[derive(Debug, Clone)]
pub struct ReadGrads {
    pub d_query: Vec<f64>,
    pub d_beta: f64,
    /// Gradient with respect to the read weights.
    pub d_weights: SparseVector,
}

impl MemoryState {
    /// Softmax of `β·cos(q, M(i))` over the K most similar addressable rows,
    /// or over every addressable row in dense mode. Rows that are entirely
    /// zero are never addressed; with none addressable the weights are empty.
    pub fn content_weights(&self, q: &[f64], beta: f64) -> Result<ContentWeights> {
        check_dim("content_weights query", self.word_size(), q.len())?;
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::Contract(format!("sharpness must be ≥ 0, got {beta}")));
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("content_weights query".into()));
        }
        let mut slots: Vec<usize> = match &self.index {
            Some(ix) if !ix.is_empty() => ix
                .query(q, self.config.k)?
                .into_iter()
                .map(|(s, _)| s)
                .collect(),
            Some(_) => Vec::new(),
            None => (0..self.slots())
                .filter(|&i| self.is_addressable(i))
                .collect(),
        };
        slots.sort_unstable();
        let query_norm = norm(q).max(MIN_QUERY_NORM);
        let mut similarities = Vec::with_capacity(slots.len());
        let mut row_norms = Vec::with_capacity(slots.len());
        for &s in &slots {
            let row = self.memory.row(s);
            let rn = norm(row);
            row_norms.push(rn);
            similarities.push(dot(q, row) / (query_norm * rn));
        }
        let weights = SparseVector::from_pairs(
            self.slots(),
            slots.iter().copied().zip(softmax(&similarities, beta)).collect(),
        )?;
        Ok(ContentWeights {
            step: self.step,
            query: q.to_vec(),
            query_norm,
            beta,
            slots,
            similarities,
            row_norms,
            weights,
        })
    }

    pub fn sparse_read(&self, address: ContentWeights) -> Result<SparseReadResult> {
        let word = self.read_word(&address.weights)?;
        Ok(SparseReadResult { address, word })
    }

    /// Content weights followed by the weighted read.
    pub fn read(&self, q: &[f64], beta: f64) -> Result<SparseReadResult> {
        let address = self.content_weights(q, beta)?;
        self.sparse_read(address)
    }

    pub fn read_word(&self, weights: &SparseVector) -> Result<Vec<f64>> {
        sparse_weighted_sum(weights, &self.memory)
    }

    fn check_grad_step(&self, step: u64, d_mem: &MemoryGrad) -> Result<()> {
        if step != self.step || d_mem.step() != self.step {
            return Err(Error::JournalDesync {
                step: self.step,
                reason: format!(
                    "backward for step {step} with gradient for step {}",
                    d_mem.step()
                ),
            });
        }
        Ok(())
    }

    /// Backward of `r = Σ w(i) M(i)`: accumulates `w(i)·dr` into the memory
    /// gradient and returns `dL/dw(i) = M(i)·dr`.
    pub fn read_word_backward(
        &self,
        weights: &SparseVector,
        d_word: &[f64],
        d_mem: &mut MemoryGrad,
    ) -> Result<SparseVector> {
        check_dim("read_word_backward", self.word_size(), d_word.len())?;
        self.check_grad_step(self.step, d_mem)?;
        let mut dw = Vec::with_capacity(weights.nnz());
        for &(i, w) in weights.entries() {
            dw.push((i, dot(self.memory.row(i), d_word)));
            axpy(w, d_word, d_mem.row_mut(i));
        }
        SparseVector::from_pairs(self.slots(), dw)
    }

    /// Backward of the content softmax and cosine similarity. Entries of
    /// `d_weights` outside the retained slots carry no gradient.
    pub fn content_backward(
        &self,
        address: &ContentWeights,
        d_weights: &SparseVector,
        d_mem: &mut MemoryGrad,
    ) -> Result<(Vec<f64>, f64)> {
        self.check_grad_step(address.step, d_mem)?;
        let n = address.slots.len();
        let m = self.word_size();
        let mut d_query = vec![0.0; m];
        if n == 0 {
            return Ok((d_query, 0.0));
        }
        let mut g = vec![0.0; n];
        let (mut a, mut b) = (0, 0);
        let entries = d_weights.entries();
        while a < n && b < entries.len() {
            match address.slots[a].cmp(&entries[b].0) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    g[a] = entries[b].1;
                    a += 1;
                    b += 1;
                }
            }
        }
        if g.iter().all(|&x| x == 0.0) {
            return Ok((d_query, 0.0));
        }
        let w: Vec<f64> = address
            .slots
            .iter()
            .map(|&s| address.weights.get(s))
            .collect();
        let mean: f64 = w.iter().zip(&g).map(|(w, g)| w * g).sum();
        let q = &address.query;
        let qn = address.query_norm;
        let mut d_beta = 0.0;
        for idx in 0..n {
            let dz = w[idx] * (g[idx] - mean);
            if dz == 0.0 {
                continue;
            }
            let s = address.similarities[idx];
            d_beta += dz * s;
            let ds = address.beta * dz;
            let slot = address.slots[idx];
            let row = self.memory.row(slot);
            let rn = address.row_norms[idx];
            let inv = 1.0 / (qn * rn);
            axpy(ds * inv, row, &mut d_query);
            axpy(-ds * s / (qn * qn), q, &mut d_query);
            let dm = d_mem.row_mut(slot);
            axpy(ds * inv, q, dm);
            axpy(-ds * s / (rn * rn), row, dm);
        }
        Ok((d_query, d_beta))
    }

    /// Full backward of a content read. `extra_dw` carries gradient that
    /// reached the read weights from elsewhere (the next step's write).
    pub fn read_backward(
        &self,
        result: &SparseReadResult,
        d_word: &[f64],
        extra_dw: Option<&SparseVector>,
        d_mem: &mut MemoryGrad,
    ) -> Result<ReadGrads> {
        let mut d_weights = self.read_word_backward(result.weights(), d_word, d_mem)?;
        if let Some(extra) = extra_dw {
            d_weights = d_weights.add_scaled(extra, 1.0)?;
        }
        let (d_query, d_beta) = self.content_backward(&result.address, &d_weights, d_mem)?;
        Ok(ReadGrads {
            d_query,
            d_beta,
            d_weights,
        })
    }
}

/// Numerically stable softmax of `beta · x`.
pub(crate) fn softmax(x: &[f64], beta: f64) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().map(|v| beta * v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (beta * v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
