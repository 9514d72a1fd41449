use super::{Scorer, TopK};

/// Linear scan over every indexed slot.
pub(super) fn query(scorer: &Scorer<'_>, q: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut top = TopK::new(k);
    for slot in scorer.store().live_slots() {
        top.push(slot, scorer.score(q, slot));
    }
    top.into_vec()
}
