use std::collections::BTreeMap;

use crate::ids::WordId;

/// Bag-of-words signature: a multiset of word ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Signature {
    counts: BTreeMap<WordId, u32>,
    total: u32,
}

impl Signature {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (WordId, u32)>) -> Self {
        let mut sig = Signature::new();
        for (id, n) in counts {
            sig.add_n(id, n);
        }
        sig
    }

    pub fn add(&mut self, id: WordId) {
        self.add_n(id, 1);
    }

    pub fn add_n(&mut self, id: WordId, n: u32) {
        if n == 0 {
            return;
        }
        *self.counts.entry(id).or_insert(0) += n;
        self.total += n;
    }

    /// N_z: number of words counting repetitions.
    pub fn word_count(&self) -> u32 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, id: WordId) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    pub fn contains(&self, id: WordId) -> bool {
        self.counts.contains_key(&id)
    }

    /// Distinct word ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = WordId> + '_ {
        self.counts.keys().copied()
    }

    pub fn counts(&self) -> impl Iterator<Item = (WordId, u32)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn distinct_len(&self) -> usize {
        self.counts.len()
    }

    /// Replaces every occurrence of `old` with `new`, merging counts.
    pub fn rename(&mut self, old: WordId, new: WordId) {
        if old == new {
            return;
        }
        if let Some(n) = self.counts.remove(&old) {
            *self.counts.entry(new).or_insert(0) += n;
        }
    }
}

/// Matched word pairs: each occurrence pairs at most once.
pub fn matched_pairs(a: &Signature, b: &Signature) -> u32 {
    let (small, large) = if a.counts.len() <= b.counts.len() { (a, b) } else { (b, a) };
    small
        .counts
        .iter()
        .map(|(id, &n)| n.min(large.count(*id)))
        .sum()
}

/// Pair count over the larger word count; 0 when both are empty.
pub fn similarity(a: &Signature, b: &Signature) -> f64 {
    let denom = a.word_count().max(b.word_count());
    if denom == 0 {
        return 0.0;
    }
    matched_pairs(a, b) as f64 / denom as f64
}
