//! Incremental visual vocabulary.
//!
//! Every word is a single stored descriptor. Words created during the current
//! iteration live in an unindexed pool that is scanned linearly; everything
//! else is served by a forest rebuilt from scratch at the start of each frame.

mod forest;

use std::collections::{BTreeSet, HashMap};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use forest::{squared_distance, BestTwo, Neighbor, NnForest};

use crate::config::Checks;
use crate::error::{Error, Result};
use crate::ids::{LocationId, WordId};

/// A feature descriptor together with its response strength.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
    response: f32,
}

impl Descriptor {
    pub fn new(values: Vec<f32>, response: f32) -> Result<Self> {
        if !(response >= 0.0) || !response.is_finite() {
            return Err(Error::InvalidDescriptor(format!(
                "response must be finite and non-negative, got {response}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidDescriptor(format!("non-finite value {bad}")));
        }
        Ok(Self { values, response })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn response(&self) -> f32 {
        self.response
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub id: WordId,
    pub descriptor: Vec<f32>,
    /// Locations of STM/WM whose signature contains this word.
    pub refs: BTreeSet<LocationId>,
    /// A copy of this word already exists in long-term memory.
    pub persisted: bool,
}

/// Outcome of quantizing one descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantized {
    Matched(WordId),
    Created(WordId),
}

impl Quantized {
    pub fn id(self) -> WordId {
        match self {
            Quantized::Matched(id) | Quantized::Created(id) => id,
        }
    }
}

/// Nearest-neighbor distance ratio test: strict, so equal distances fail.
pub fn nndr_accepts(best: &BestTwo, t_nndr: f64) -> Option<WordId> {
    match (best.first, best.second) {
        (Some(first), Some(second)) if first.distance() < t_nndr * second.distance() => {
            Some(first.id)
        }
        _ => None,
    }
}

#[derive(Debug)]
pub struct Vocabulary {
    dim: usize,
    words: HashMap<WordId, Word>,
    indexed: BTreeSet<WordId>,
    unindexed: Vec<WordId>,
    next_id: u64,
    forest: NnForest,
    tree_count: usize,
    rng: ChaCha8Rng,
}

impl Vocabulary {
    pub fn new(dim: usize, checks: Checks, tree_count: usize, seed: u64) -> Self {
        Self {
            dim,
            words: HashMap::new(),
            indexed: BTreeSet::new(),
            unindexed: Vec::new(),
            next_id: 1,
            forest: NnForest::empty(dim, checks),
            tree_count,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of active words (w_w).
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, id: WordId) -> bool {
        self.words.contains_key(&id)
    }

    pub fn get(&self, id: WordId) -> Option<&Word> {
        self.words.get(&id)
    }

    pub fn words(&self) -> impl Iterator<Item = &Word> {
        self.words.values()
    }

    pub fn indexed_ids(&self) -> &BTreeSet<WordId> {
        &self.indexed
    }

    pub fn unindexed_ids(&self) -> &[WordId] {
        &self.unindexed
    }

    /// The id the next created word will receive.
    pub fn next_id(&self) -> WordId {
        WordId(self.next_id)
    }

    pub fn forest(&self) -> &NnForest {
        &self.forest
    }

    /// Rebuilds the forest from every active word and empties the unindexed pool.
    pub fn build_index(&mut self) {
        self.indexed.extend(self.unindexed.drain(..));
        let ids: Vec<WordId> = self.indexed.iter().copied().collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in &ids {
            data.extend_from_slice(&self.words[id].descriptor);
        }
        let seed = self.rng.random::<u64>();
        self.forest = NnForest::build(
            self.dim,
            ids,
            data,
            self.tree_count,
            self.forest.checks(),
            seed,
        );
    }

    fn check_dim(&self, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        Ok(())
    }

    /// Two nearest active words over the forest and the unindexed pool.
    pub fn nearest_two(&self, values: &[f32]) -> Result<BestTwo> {
        self.check_dim(values)?;
        let mut best = self.forest.nearest_two(values);
        for id in &self.unindexed {
            let word = &self.words[id];
            best.offer(Neighbor {
                id: *id,
                dist2: squared_distance(&word.descriptor, values),
            });
        }
        Ok(best)
    }

    /// The word `values` matches under the NNDR test, if any.
    pub fn match_word(&self, values: &[f32], t_nndr: f64) -> Result<Option<WordId>> {
        Ok(nndr_accepts(&self.nearest_two(values)?, t_nndr))
    }

    /// Matches `values` to an existing word, or creates a new unindexed one.
    pub fn quantize(&mut self, values: &[f32], t_nndr: f64) -> Result<Quantized> {
        if let Some(id) = self.match_word(values, t_nndr)? {
            return Ok(Quantized::Matched(id));
        }
        let id = WordId(self.next_id);
        self.next_id += 1;
        self.words.insert(
            id,
            Word {
                id,
                descriptor: values.to_vec(),
                refs: BTreeSet::new(),
                persisted: false,
            },
        );
        self.unindexed.push(id);
        Ok(Quantized::Created(id))
    }

    /// Re-activates a word loaded back from long-term memory under its own id.
    pub fn reinsert(&mut self, id: WordId, descriptor: Vec<f32>) -> Result<()> {
        self.check_dim(&descriptor)?;
        if self.words.contains_key(&id) {
            return Err(Error::Consistency(format!("{id} is already active")));
        }
        if id.0 >= self.next_id {
            return Err(Error::Consistency(format!("{id} was never issued")));
        }
        self.words.insert(
            id,
            Word {
                id,
                descriptor,
                refs: BTreeSet::new(),
                persisted: true,
            },
        );
        self.unindexed.push(id);
        Ok(())
    }

    /// Raises the id counter so ids found in long-term memory are never reissued.
    pub fn reserve_ids_through(&mut self, id: WordId) {
        self.next_id = self.next_id.max(id.0 + 1);
    }

    pub fn add_reference(&mut self, word: WordId, location: LocationId) -> Result<()> {
        let w = self
            .words
            .get_mut(&word)
            .ok_or_else(|| Error::Consistency(format!("reference to inactive {word}")))?;
        w.refs.insert(location);
        Ok(())
    }

    /// Drops one reference. The word stays active even when none remain.
    pub fn remove_reference(&mut self, word: WordId, location: LocationId) -> Result<()> {
        let w = self
            .words
            .get_mut(&word)
            .ok_or_else(|| Error::Consistency(format!("dereference of inactive {word}")))?;
        if !w.refs.remove(&location) {
            return Err(Error::Consistency(format!(
                "{word} has no reference from {location}"
            )));
        }
        Ok(())
    }

    /// Deletes words created during this iteration. Their ids are retired.
    pub fn remove_new_words(&mut self, ids: &[WordId]) -> Result<()> {
        for id in ids {
            if self.indexed.contains(id) {
                return Err(Error::Consistency(format!("{id} is already indexed")));
            }
            let pos = self
                .unindexed
                .iter()
                .position(|u| u == id)
                .ok_or(Error::UnknownWord(*id))?;
            self.unindexed.remove(pos);
            self.words.remove(id);
        }
        Ok(())
    }

    /// Removes an active word and hands it back, e.g. to move it to the trash.
    pub fn deactivate(&mut self, id: WordId) -> Result<Word> {
        let word = self
            .words
            .remove(&id)
            .ok_or_else(|| Error::Consistency(format!("deactivating inactive {id}")))?;
        if self.indexed.remove(&id) {
            self.forest.remove(id);
        } else {
            self.unindexed.retain(|u| *u != id);
        }
        Ok(word)
    }
}
