//! Temporal link matrices for the sparse DNC variant.
//!
//! `N` approximates the DNC link matrix `L` (`L(i,j)`: how strongly slot `i`
//! was written right after slot `j`) and `P` holds its transpose, so both
//! `L·w` and `Lᵀ·w` can be computed from the rows named by a sparse `w`.
//! Every row of either matrix keeps at most `K_L` entries; an entry dropped
//! by truncation on one side is dropped on the other, so `P = Nᵀ` exactly.
//! The diagonal is always zero.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::la::{SparseRowMatrix, SparseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageConfig {
    /// Links kept per row.
    pub k_l: usize,
    /// Read sparsity applied to directional weights.
    pub k: usize,
}

impl Default for LinkageConfig {
    fn default() -> Self {
        LinkageConfig { k_l: 8, k: 4 }
    }
}

impl LinkageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_l == 0 {
            return Err(Error::config("k_l", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Keeps the `k` largest values (ties to the lower index), sorted by index.
fn keep_largest(mut entries: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    entries.retain(|&(_, v)| v != 0.0);
    if entries.len() > k {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(k);
        entries.sort_by_key(|&(j, _)| j);
    }
    entries
}

fn check_write(w: &SparseVector, n: usize) -> Result<()> {
    check_dim("linkage write weights", n, w.dim())?;
    if w.entries().iter().any(|&(_, v)| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("write weights must lie in [0, 1]".into()));
    }
    if w.sum() > 1.0 + 1e-9 {
        return Err(Error::Contract(format!("write weights sum to {}", w.sum())));
    }
    Ok(())
}

/// `p' = (1 − Σ w) p + w`, truncated to the `k_l` largest entries.
pub fn precedence_update(p: &SparseVector, w: &SparseVector, k_l: usize) -> Result<SparseVector> {
    check_dim("precedence", p.dim(), w.dim())?;
    if w.is_empty() {
        return Ok(p.clone());
    }
    let decay = 1.0 - w.sum();
    let mixed = p.scaled(decay).add_scaled(w, 1.0)?;
    let kept = keep_largest(mixed.entries().to_vec(), k_l);
    SparseVector::from_pairs(p.dim(), kept)
}

/// Saved rows and precedence for undoing one [`LinkageState::update`].
#[derive(Debug, Clone)]
pub struct LinkageUndo {
    n_rows: Vec<(usize, Vec<(usize, f64)>)>,
    p_rows: Vec<(usize, Vec<(usize, f64)>)>,
    precedence: SparseVector,
    touched: usize,
}

impl LinkageUndo {
    /// Entries written to `N` and `P` by the update.
    pub fn touched_entries(&self) -> usize {
        self.touched
    }

    pub fn bytes(&self) -> usize {
        let rows = |v: &Vec<(usize, Vec<(usize, f64)>)>| {
            v.iter()
                .map(|(_, r)| 8 + std::mem::size_of::<Vec<(usize, f64)>>() + r.len() * 16)
                .sum::<usize>()
        };
        std::mem::size_of::<LinkageUndo>()
            + rows(&self.n_rows)
            + rows(&self.p_rows)
            + self.precedence.payload_bytes()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkageState {
    config: LinkageConfig,
    n: SparseRowMatrix,
    p: SparseRowMatrix,
    precedence: SparseVector,
}

impl LinkageState {
    pub fn new(slots: usize, config: LinkageConfig) -> Result<Self> {
        config.validate()?;
        let cap = config.k_l.min(slots);
        Ok(LinkageState {
            config,
            n: SparseRowMatrix::new(slots, slots, cap),
            p: SparseRowMatrix::new(slots, slots, cap),
            precedence: SparseVector::new(slots),
        })
    }

    /// Reassembles a state from the rows of `N` and a precedence vector.
    pub fn from_parts(
        slots: usize,
        config: LinkageConfig,
        n_rows: &[Vec<(usize, f64)>],
        precedence: SparseVector,
    ) -> Result<Self> {
        let mut s = Self::new(slots, config)?;
        check_dim("linkage rows", slots, n_rows.len())?;
        check_dim("precedence", slots, precedence.dim())?;
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); slots];
        for (i, row) in n_rows.iter().enumerate() {
            s.n.set_row(i, row)?;
            for &(j, v) in row {
                cols[j].push((i, v));
            }
        }
        for (j, col) in cols.iter().enumerate() {
            s.p.set_row(j, col)?;
        }
        s.precedence = precedence;
        s.check_invariants()?;
        Ok(s)
    }

    pub fn config(&self) -> &LinkageConfig {
        &self.config
    }

    pub fn slots(&self) -> usize {
        self.n.rows()
    }

    pub fn links(&self) -> &SparseRowMatrix {
        &self.n
    }

    pub fn links_transposed(&self) -> &SparseRowMatrix {
        &self.p
    }

    pub fn precedence(&self) -> &SparseVector {
        &self.precedence
    }

    /// Applies
    /// `L(i,j) ← (1 − w(i) − w(j)) L(i,j) + w(i) p(j)` for `i ≠ j`, then
    /// the precedence update. Only rows named by `w`, and rows holding a link
    /// into a column named by `w`, change.
    pub fn update(&mut self, w: &SparseVector) -> Result<LinkageUndo> {
        let slots = self.slots();
        check_write(w, slots)?;
        let cap = self.n.row_capacity();
        let prior_p = self.precedence.clone();
        let mut undo = LinkageUndo {
            n_rows: Vec::new(),
            p_rows: Vec::new(),
            precedence: prior_p.clone(),
            touched: 0,
        };
        if w.is_empty() {
            return Ok(undo);
        }
        let mut rows: Vec<usize> = w.indices().collect();
        for &(j, _) in w.entries() {
            rows.extend_from_slice(self.p.row(j).0);
        }
        rows.sort_unstable();
        rows.dedup();

        let mut new_rows = Vec::with_capacity(rows.len());
        for &i in &rows {
            let wi = w.get(i);
            let old = self.n.row_entries(i);
            let mut entries: Vec<(usize, f64)> = old
                .iter()
                .map(|&(j, v)| (j, (1.0 - wi - w.get(j)) * v))
                .collect();
            if wi != 0.0 {
                for &(j, pj) in prior_p.entries() {
                    if j != i {
                        entries.push((j, wi * pj));
                    }
                }
            }
            entries.sort_by_key(|&(j, _)| j);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (j, v) in entries {
                match merged.last_mut() {
                    Some((k, acc)) if *k == j => *acc += v,
                    _ => merged.push((j, v)),
                }
            }
            new_rows.push((i, keep_largest(merged, cap), old));
        }

        // Columns whose transposed rows change.
        let mut cols: Vec<usize> = Vec::new();
        for (_, new, old) in &new_rows {
            cols.extend(new.iter().map(|&(j, _)| j));
            cols.extend(old.iter().map(|&(j, _)| j));
        }
        cols.sort_unstable();
        cols.dedup();

        let mut n_saved: Vec<usize> = Vec::new();
        for (i, new, old) in new_rows.iter() {
            self.n.set_row(*i, new)?;
            undo.n_rows.push((*i, old.clone()));
            n_saved.push(*i);
            undo.touched += new.len();
        }

        let recomputed = |i: usize| rows.binary_search(&i).is_ok();
        for &j in &cols {
            let old = self.p.row_entries(j);
            let mut col: Vec<(usize, f64)> =
                old.iter().copied().filter(|&(i, _)| !recomputed(i)).collect();
            for (i, new, _) in &new_rows {
                if let Ok(pos) = new.binary_search_by_key(&j, |&(c, _)| c) {
                    col.push((*i, new[pos].1));
                }
            }
            col.sort_by_key(|&(i, _)| i);
            let kept = keep_largest(col.clone(), cap);
            if kept.len() < col.len() {
                for &(i, _) in col.iter().filter(|e| !kept.contains(e)) {
                    let row = self.n.row_entries(i);
                    if !n_saved.contains(&i) {
                        undo.n_rows.push((i, row.clone()));
                        n_saved.push(i);
                    }
                    let trimmed: Vec<(usize, f64)> =
                        row.into_iter().filter(|&(c, _)| c != j).collect();
                    self.n.set_row(i, &trimmed)?;
                }
            }
            self.p.set_row(j, &kept)?;
            undo.p_rows.push((j, old));
            undo.touched += kept.len();
        }

        self.precedence = precedence_update(&prior_p, w, cap)?;
        Ok(undo)
    }

    /// Reverts the most recent update.
    pub fn revert(&mut self, undo: LinkageUndo) -> Result<()> {
        for (j, row) in undo.p_rows.iter().rev() {
            self.p.set_row(*j, row)?;
        }
        for (i, row) in undo.n_rows.iter().rev() {
            self.n.set_row(*i, row)?;
        }
        self.precedence = undo.precedence;
        Ok(())
    }

    /// `L·w`, untruncated: `f(i) = Σ_j w(j) N(i,j)`.
    pub fn forward_raw(&self, w: &SparseVector) -> Result<SparseVector> {
        self.product(&self.p, w)
    }

    /// `Lᵀ·w`, untruncated: `b(j) = Σ_i w(i) N(i,j)`.
    pub fn backward_raw(&self, w: &SparseVector) -> Result<SparseVector> {
        self.product(&self.n, w)
    }

    fn product(&self, rows: &SparseRowMatrix, w: &SparseVector) -> Result<SparseVector> {
        check_dim("directional weights", self.slots(), w.dim())?;
        let mut pairs = Vec::new();
        for &(j, wj) in w.entries() {
            let (c, v) = rows.row(j);
            pairs.extend(c.iter().zip(v).map(|(&i, &x)| (i, wj * x)));
        }
        SparseVector::from_pairs(self.slots(), pairs)
    }

    /// Forward and backward weightings, each truncated to the `k` largest
    /// entries and renormalised when nonzero.
    pub fn directional_weights(&self, w_prev: &SparseVector) -> Result<(SparseVector, SparseVector)> {
        let k = self.config.k;
        let f = truncate_normalize(&self.forward_raw(w_prev)?, k)?;
        let b = truncate_normalize(&self.backward_raw(w_prev)?, k)?;
        Ok((f, b))
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.n.check_invariants()?;
        self.p.check_invariants()?;
        for i in 0..self.slots() {
            let (c, v) = self.n.row(i);
            for (&j, &x) in c.iter().zip(v) {
                if i == j {
                    return Err(Error::Contract(format!("diagonal link at {i}")));
                }
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Contract(format!("link ({i},{j}) = {x}")));
                }
                if self.p.get(j, i) != x {
                    return Err(Error::Contract(format!("P is not Nᵀ at ({i},{j})")));
                }
            }
        }
        if self.n.nnz() != self.p.nnz() {
            return Err(Error::Contract("P has links absent from N".into()));
        }
        if self.precedence.nnz() > self.n.row_capacity() {
            return Err(Error::Contract("precedence exceeds K_L entries".into()));
        }
        Ok(())
    }

    pub fn bytes(&self) -> usize {
        self.n.payload_bytes() + self.p.payload_bytes() + self.precedence.payload_bytes()
    }

    pub fn hash_into<H: std::hash::Hasher>(&self, h: &mut H) {
        for m in [&self.n, &self.p] {
            for i in 0..m.rows() {
                let (c, v) = m.row(i);
                h.write_usize(c.len());
                for (&j, &x) in c.iter().zip(v) {
                    h.write_usize(j);
                    h.write_u64(x.to_bits());
                }
            }
        }
        for &(i, v) in self.precedence.entries() {
            h.write_usize(i);
            h.write_u64(v.to_bits());
        }
    }
}

/// Keeps the `k` largest entries and rescales them to sum to one.
pub fn truncate_normalize(v: &SparseVector, k: usize) -> Result<SparseVector> {
    let kept = keep_largest(v.entries().to_vec(), k);
    let s: f64 = kept.iter().map(|&(_, x)| x).sum();
    if s <= 0.0 {
        return Ok(SparseVector::new(v.dim()));
    }
    SparseVector::from_pairs(v.dim(), kept.into_iter().map(|(i, x)| (i, x / s)).collect())
}

/// Dense DNC link matrix, `N×N`, for the dense comparator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinkage {
    slots: usize,
    l: Vec<f64>,
    precedence: Vec<f64>,
}

impl DenseLinkage {
    pub fn new(slots: usize) -> Self {
        DenseLinkage {
            slots,
            l: vec![0.0; slots * slots],
            precedence: vec![0.0; slots],
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.slots + j]
    }

    pub fn precedence(&self) -> &[f64] {
        &self.precedence
    }

    pub fn update(&mut self, w: &SparseVector) -> Result<()> {
        let n = self.slots;
        check_write(w, n)?;
        let wd = w.densify();
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                self.l[idx] = if i == j {
                    0.0
                } else {
                    (1.0 - wd[i] - wd[j]) * self.l[idx] + wd[i] * self.precedence[j]
                };
            }
        }
        let decay = 1.0 - w.sum();
        for (p, wi) in self.precedence.iter_mut().zip(&wd) {
            *p = decay * *p + wi;
        }
        Ok(())
    }

    pub fn forward(&self, w: &SparseVector) -> Result<SparseVector> {
        check_dim("dense forward weights", self.slots, w.dim())?;
        let n = self.slots;
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            for &(j, wj) in w.entries() {
                *o += self.l[i * n + j] * wj;
            }
        }
        Ok(SparseVector::from_dense(&out))
    }

    pub fn backward(&self, w: &SparseVector) -> Result<SparseVector> {
        check_dim("dense backward weights", self.slots, w.dim())?;
        let n = self.slots;
        let mut out = vec![0.0; n];
        for &(i, wi) in w.entries() {
            crate::la::axpy(wi, &self.l[i * n..(i + 1) * n], &mut out);
        }
        Ok(SparseVector::from_dense(&out))
    }

    pub fn bytes(&self) -> usize {
        (self.l.len() + self.precedence.len()) * 8
    }

    pub fn hash_into<H: std::hash::Hasher>(&self, h: &mut H) {
        self.l.iter().chain(&self.precedence).for_each(|x| h.write_u64(x.to_bits()));
    }
}

/// Read weights blended from content, forward and backward weightings.
#[derive(Debug, Clone)]
pub struct ModeMix {
    pub weights: SparseVector,
    /// Normaliser applied after truncation; 1 when no rescaling happened.
    pub scale: f64,
}

/// `π_c c + π_f f + π_b b`. With `k` set the blend is truncated to its `k`
/// largest entries and rescaled to sum to one whenever truncation removed
/// mass or the blend did not already sum to one.
pub fn read_mode_mix(
    content: &SparseVector,
    f: &SparseVector,
    b: &SparseVector,
    modes: [f64; 3],
    k: Option<usize>,
) -> Result<ModeMix> {
    let blend = content
        .scaled(modes[0])
        .add_scaled(f, modes[1])?
        .add_scaled(b, modes[2])?;
    let Some(k) = k else {
        return Ok(ModeMix {
            weights: blend,
            scale: 1.0,
        });
    };
    let kept = keep_largest(blend.entries().to_vec(), k);
    let s: f64 = kept.iter().map(|&(_, x)| x).sum();
    if kept.len() == blend.nnz() && (s - 1.0).abs() <= 1e-12 || s <= 0.0 {
        return Ok(ModeMix {
            weights: SparseVector::from_pairs(blend.dim(), kept)?,
            scale: 1.0,
        });
    }
    Ok(ModeMix {
        weights: SparseVector::from_pairs(blend.dim(), kept.into_iter().map(|(i, x)| (i, x / s)).collect())?,
        scale: s,
    })
}

/// Backward of [`read_mode_mix`] with `f` and `b` held constant. Returns
/// the gradient for the mode probabilities and for the content weights.
pub fn mix_backward(
    mix: &ModeMix,
    content: &SparseVector,
    f: &SparseVector,
    b: &SparseVector,
    modes: [f64; 3],
    d_weights: &SparseVector,
) -> Result<([f64; 3], SparseVector)> {
    // gradient with respect to the unnormalised blend, on the kept entries
    let du: Vec<(usize, f64)> = if mix.scale == 1.0 {
        mix.weights
            .entries()
            .iter()
            .map(|&(i, _)| (i, d_weights.get(i)))
            .collect()
    } else {
        let mean: f64 = mix
            .weights
            .entries()
            .iter()
            .map(|&(i, w)| w * d_weights.get(i))
            .sum();
        mix.weights
            .entries()
            .iter()
            .map(|&(i, _)| (i, (d_weights.get(i) - mean) / mix.scale))
            .collect()
    };
    let mut d_modes = [0.0; 3];
    let mut d_content = Vec::new();
    for &(i, g) in &du {
        d_modes[0] += g * content.get(i);
        d_modes[1] += g * f.get(i);
        d_modes[2] += g * b.get(i);
        d_content.push((i, modes[0] * g));
    }
    Ok((d_modes, SparseVector::from_pairs(content.dim(), d_content)?))
}
