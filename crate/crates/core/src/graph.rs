//! Locations and the short-term/working memory graph.
//!
//! `Memory` owns the vocabulary together with every location that lives in
//! STM or WM. Locations in long-term memory are only known by id here; links
//! from in-memory locations to them are kept, so link sets stay bidirectional
//! across zones. Link changes that touch an LTM-resident endpoint are queued
//! as [`LinkOp`]s and written to the store at the next flush join.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use log::debug;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::ids::{LocationId, WordId};
use crate::signature::{similarity, Signature};
use crate::vocabulary::{Descriptor, Quantized, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinkKind {
    Neighbor,
    Loop,
}

impl LinkKind {
    pub fn code(self) -> i64 {
        match self {
            LinkKind::Neighbor => 0,
            LinkKind::Loop => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(LinkKind::Neighbor),
            1 => Some(LinkKind::Loop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Stm,
    Wm,
    /// Long-term memory, or in the trash waiting for the flush to land.
    Ltm,
}

/// A change to a link whose other endpoint is LTM-resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkOp {
    Add(LocationId, LocationId, LinkKind),
    Remove(LocationId, LocationId, LinkKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Location {
    pub id: LocationId,
    pub weight: u32,
    pub signature: Signature,
    pub neighbors: BTreeSet<LocationId>,
    pub loops: BTreeSet<LocationId>,
}

impl Location {
    pub fn new(id: LocationId, signature: Signature) -> Self {
        Self {
            id,
            weight: 0,
            signature,
            neighbors: BTreeSet::new(),
            loops: BTreeSet::new(),
        }
    }

    pub fn links(&self) -> impl Iterator<Item = (LocationId, LinkKind)> + '_ {
        self.neighbors
            .iter()
            .map(|&n| (n, LinkKind::Neighbor))
            .chain(self.loops.iter().map(|&n| (n, LinkKind::Loop)))
    }

    pub fn link_set_mut(&mut self, kind: LinkKind) -> &mut BTreeSet<LocationId> {
        match kind {
            LinkKind::Neighbor => &mut self.neighbors,
            LinkKind::Loop => &mut self.loops,
        }
    }

    pub fn has_link(&self, other: LocationId, kind: LinkKind) -> bool {
        match kind {
            LinkKind::Neighbor => self.neighbors.contains(&other),
            LinkKind::Loop => self.loops.contains(&other),
        }
    }
}

/// Running statistics of the memory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    accepted_images: u64,
    accepted_features: u64,
}

impl RunningStats {
    /// Mean kept-feature count over accepted images; `None` before the first.
    pub fn avg_features_per_image(&self) -> Option<f64> {
        (self.accepted_images > 0)
            .then(|| self.accepted_features as f64 / self.accepted_images as f64)
    }

    pub fn record(&mut self, kept: usize) {
        self.accepted_images += 1;
        self.accepted_features += kept as u64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Creation {
    Bad {
        kept: usize,
        threshold: f64,
        rejected: usize,
    },
    Created {
        id: LocationId,
        new_words: Vec<WordId>,
        rejected: usize,
    },
}

pub struct Memory {
    pub(crate) vocab: Vocabulary,
    pub(crate) locations: BTreeMap<LocationId, Location>,
    pub(crate) stm: VecDeque<LocationId>,
    pub(crate) wm: BTreeSet<LocationId>,
    pub(crate) ltm: BTreeSet<LocationId>,
    pub(crate) next_location: u64,
    pub(crate) previous: Option<LocationId>,
    pub(crate) stats: RunningStats,
    pub(crate) pending_links: Vec<LinkOp>,
    /// Remaps recorded by retrieval, not yet written to the store.
    pub(crate) pending_remaps: BTreeMap<WordId, WordId>,
    /// Location that closed the last accepted loop.
    pub(crate) last_loop_closure: Option<LocationId>,
}

impl Memory {
    pub fn new(cfg: &EngineConfig) -> Self {
        Self {
            vocab: Vocabulary::new(cfg.descriptor_dim, cfg.nn_checks, cfg.tree_count, cfg.rng_seed),
            locations: BTreeMap::new(),
            stm: VecDeque::new(),
            wm: BTreeSet::new(),
            ltm: BTreeSet::new(),
            next_location: 1,
            previous: None,
            stats: RunningStats::default(),
            pending_links: Vec::new(),
            pending_remaps: BTreeMap::new(),
            last_loop_closure: None,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocabulary_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocab
    }

    pub fn location(&self, id: LocationId) -> Option<&Location> {
        self.locations.get(&id)
    }

    pub fn locations(&self) -> impl Iterator<Item = &Location> {
        self.locations.values()
    }

    pub fn stm(&self) -> &VecDeque<LocationId> {
        &self.stm
    }

    pub fn wm(&self) -> &BTreeSet<LocationId> {
        &self.wm
    }

    pub fn ltm_ids(&self) -> &BTreeSet<LocationId> {
        &self.ltm
    }

    pub fn stats(&self) -> RunningStats {
        self.stats
    }

    pub fn last_loop_closure(&self) -> Option<LocationId> {
        self.last_loop_closure
    }

    pub fn pending_remaps(&self) -> &BTreeMap<WordId, WordId> {
        &self.pending_remaps
    }

    pub fn zone(&self, id: LocationId) -> Option<Zone> {
        if self.wm.contains(&id) {
            Some(Zone::Wm)
        } else if self.ltm.contains(&id) {
            Some(Zone::Ltm)
        } else if self.locations.contains_key(&id) {
            Some(Zone::Stm)
        } else {
            None
        }
    }

    pub fn is_in_memory(&self, id: LocationId) -> bool {
        self.locations.contains_key(&id)
    }

    /// Ids up to `max` are taken (e.g. by an existing long-term memory).
    pub fn reserve_location_ids_through(&mut self, max: LocationId) {
        self.next_location = self.next_location.max(max.0 + 1);
    }

    pub fn take_pending_links(&mut self) -> Vec<LinkOp> {
        std::mem::take(&mut self.pending_links)
    }

    pub fn set_weight(&mut self, id: LocationId, weight: u32) -> Result<()> {
        self.location_mut(id)?.weight = weight;
        Ok(())
    }

    pub(crate) fn location_mut(&mut self, id: LocationId) -> Result<&mut Location> {
        self.locations.get_mut(&id).ok_or(Error::UnknownLocation(id))
    }

    /// Adds `a -- b` on both sides. Sides not in memory are queued for the store.
    pub(crate) fn link(&mut self, a: LocationId, b: LocationId, kind: LinkKind) {
        let mut queued = false;
        for (x, y) in [(a, b), (b, a)] {
            match self.locations.get_mut(&x) {
                Some(loc) => {
                    loc.link_set_mut(kind).insert(y);
                }
                None if !queued => {
                    self.pending_links.push(LinkOp::Add(a, b, kind));
                    queued = true;
                }
                None => {}
            }
        }
    }

    /// Builds a location from pre-filtered features and enqueues it in STM.
    pub fn create_location(
        &mut self,
        features: Vec<Descriptor>,
        cfg: &EngineConfig,
    ) -> Result<Creation> {
        let dim = self.vocab.dim();
        let total = features.len();
        let mut kept: Vec<Descriptor> = features.into_iter().filter(|d| d.dim() == dim).collect();
        let rejected = total - kept.len();
        if rejected > 0 {
            debug!("{rejected} descriptors rejected for dimension mismatch");
        }
        // stable: equal responses keep input order
        kept.sort_by(|a, b| b.response().total_cmp(&a.response()));
        kept.truncate(cfg.t_max_features);

        if let Some(avg) = self.stats.avg_features_per_image() {
            let threshold = cfg.t_bad * avg;
            if (kept.len() as f64) < threshold {
                return Ok(Creation::Bad {
                    kept: kept.len(),
                    threshold,
                    rejected,
                });
            }
        }

        self.vocab.build_index();
        let mut signature = Signature::new();
        let mut new_words = Vec::new();
        for d in &kept {
            match self.vocab.quantize(d.values(), cfg.t_nndr)? {
                Quantized::Matched(id) => signature.add(id),
                Quantized::Created(id) => {
                    new_words.push(id);
                    signature.add(id);
                }
            }
        }

        let id = LocationId(self.next_location);
        self.next_location += 1;
        for w in signature.ids() {
            self.vocab.add_reference(w, id)?;
        }
        self.locations.insert(id, Location::new(id, signature));
        if let Some(prev) = self.previous {
            self.link(id, prev, LinkKind::Neighbor);
        }
        self.previous = Some(id);
        self.stats.record(kept.len());
        self.stm.push_back(id);
        Ok(Creation::Created {
            id,
            new_words,
            rejected,
        })
    }

    /// Compares the newest STM location with the one before it and merges
    /// the older into the newer when they are similar enough. Returns the id
    /// of the merged (deleted) location.
    pub fn weight_update(
        &mut self,
        new: LocationId,
        new_words: &[WordId],
        cfg: &EngineConfig,
    ) -> Result<Option<LocationId>> {
        let n = self.stm.len();
        if n < 2 || self.stm[n - 1] != new {
            return Ok(None);
        }
        let compared = self.stm[n - 2];
        let sim = similarity(
            &self.locations[&new].signature,
            &self.locations[&compared].signature,
        );
        if sim < cfg.t_similarity {
            return Ok(None);
        }
        self.merge(compared, new, new_words)?;
        Ok(Some(compared))
    }

    /// Merges `old` into `new`: `new` takes `old`'s signature and links.
    pub(crate) fn merge(
        &mut self,
        old: LocationId,
        new: LocationId,
        new_words: &[WordId],
    ) -> Result<()> {
        let dropped = self.locations.remove(&old).ok_or(Error::UnknownLocation(old))?;
        let current_words: Vec<WordId> = self.locations[&new].signature.ids().collect();
        for w in current_words {
            self.vocab.remove_reference(w, new)?;
        }
        self.vocab.remove_new_words(new_words)?;
        for w in dropped.signature.ids() {
            self.vocab.remove_reference(w, old)?;
            self.vocab.add_reference(w, new)?;
        }
        {
            let loc = self.location_mut(new)?;
            loc.signature = dropped.signature.clone();
            loc.weight += dropped.weight + 1;
            loc.neighbors.remove(&old);
            loc.loops.remove(&old);
        }
        for (other, kind) in dropped.links() {
            if other == new {
                continue;
            }
            match self.locations.get_mut(&other) {
                Some(loc) => {
                    loc.link_set_mut(kind).remove(&old);
                }
                None => self.pending_links.push(LinkOp::Remove(old, other, kind)),
            }
            self.link(new, other, kind);
        }
        self.stm.retain(|&id| id != old);
        Ok(())
    }

    /// Promotes the oldest STM location to WM once STM exceeds its capacity.
    pub fn age_stm(&mut self, cfg: &EngineConfig) -> Option<LocationId> {
        if self.stm.len() <= cfg.t_stm {
            return None;
        }
        let oldest = self.stm.pop_front()?;
        self.wm.insert(oldest);
        Some(oldest)
    }

    /// Records an accepted loop closure between `current` and `old`.
    pub fn add_loop_link(&mut self, current: LocationId, old: LocationId) -> Result<()> {
        if current == old {
            return Err(Error::Consistency(format!("loop closure of {current} on itself")));
        }
        if !self.wm.contains(&old) {
            return Err(Error::Consistency(format!("loop closure target {old} is not in WM")));
        }
        let old_weight = {
            let loc = self.location_mut(old)?;
            std::mem::take(&mut loc.weight)
        };
        self.location_mut(current)?.weight += old_weight;
        self.link(current, old, LinkKind::Loop);
        self.last_loop_closure = Some(current);
        Ok(())
    }

    /// Locations reachable from `from` over neighbor links only, in memory,
    /// up to `max_hops` away and at most `max_count` of them, nearest first.
    pub fn time_neighbors(
        &self,
        from: LocationId,
        max_hops: usize,
        max_count: usize,
    ) -> Vec<LocationId> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::from([from]);
        let mut ring = vec![from];
        for _ in 0..max_hops {
            let mut next = Vec::new();
            for id in &ring {
                let Some(loc) = self.locations.get(id) else { continue };
                for &n in &loc.neighbors {
                    if self.locations.contains_key(&n) && seen.insert(n) {
                        next.push(n);
                    }
                }
            }
            for &n in &next {
                if out.len() == max_count {
                    return out;
                }
                out.push(n);
            }
            if next.is_empty() {
                break;
            }
            ring = next;
        }
        out
    }

    /// Full-scan check of word/location reference symmetry and link symmetry
    /// among in-memory locations.
    pub fn check_consistency(&self) -> Result<()> {
        for loc in self.locations.values() {
            for w in loc.signature.ids() {
                let word = self
                    .vocab
                    .get(w)
                    .ok_or_else(|| Error::Consistency(format!("{} uses inactive {w}", loc.id)))?;
                if !word.refs.contains(&loc.id) {
                    return Err(Error::Consistency(format!("{w} lacks reference to {}", loc.id)));
                }
            }
            for (other, kind) in loc.links() {
                if let Some(o) = self.locations.get(&other) {
                    if !o.has_link(loc.id, kind) {
                        return Err(Error::Consistency(format!(
                            "link {} -> {other} is one-sided",
                            loc.id
                        )));
                    }
                } else if !self.ltm.contains(&other) {
                    return Err(Error::Consistency(format!(
                        "{} links to unknown {other}",
                        loc.id
                    )));
                }
            }
        }
        for word in self.vocab.words() {
            for l in &word.refs {
                let ok = self
                    .locations
                    .get(l)
                    .is_some_and(|loc| loc.signature.contains(word.id));
                if !ok {
                    return Err(Error::Consistency(format!("{} has stale reference {l}", word.id)));
                }
            }
        }
        let stm: BTreeSet<LocationId> = self.stm.iter().copied().collect();
        if stm.len() + self.wm.len() != self.locations.len()
            || stm.iter().any(|id| self.wm.contains(id))
        {
            return Err(Error::Consistency("zone partition broken".into()));
        }
        Ok(())
    }
}
