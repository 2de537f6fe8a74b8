//! Moving locations between working memory and long-term memory.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, warn};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::graph::{Location, Memory};
use crate::ids::{LocationId, WordId};
use crate::ltm::{LtmStore, StoredLocation, TrashBuffer};
use crate::signature::Signature;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieval {
    pub retrieved: Vec<LocationId>,
    /// Inactive words brought back under their original ids.
    pub reactivated: Vec<WordId>,
    /// Inactive words that matched a current word instead.
    pub remapped: Vec<(WordId, WordId)>,
}

fn resolve(remaps: &BTreeMap<WordId, WordId>, mut id: WordId) -> WordId {
    let mut steps = 0;
    while let Some(&next) = remaps.get(&id) {
        id = next;
        steps += 1;
        if steps > remaps.len() {
            break;
        }
    }
    id
}

/// Brings up to `retrieval_max` LTM locations around `hypothesis` back into WM.
pub fn retrieve(
    memory: &mut Memory,
    store: &mut LtmStore,
    hypothesis: LocationId,
    cfg: &EngineConfig,
) -> Result<Retrieval> {
    if cfg.retrieval_max == 0 || memory.ltm.is_empty() {
        return Ok(Retrieval::default());
    }
    let read = (|| {
        let ids: Vec<LocationId> = store
            .get_neighborhood(
                memory,
                hypothesis,
                cfg.neighborhood_range,
                true,
                Some(cfg.retrieval_max),
            )?
            .into_iter()
            .map(|e| e.id)
            .collect();
        let records = store.get_locations(&ids)?;
        let mut missing = BTreeSet::new();
        for rec in &records {
            for w in rec.signature.ids() {
                let r = resolve(&memory.pending_remaps, w);
                if !memory.vocab.contains(r) {
                    missing.insert(r);
                }
            }
        }
        let missing: Vec<WordId> = missing.into_iter().collect();
        let words: BTreeMap<WordId, Vec<f32>> = store.get_words(&missing)?.into_iter().collect();
        Ok::<_, Error>((ids, records, words))
    })();
    let (ids, records, mut words) = match read {
        Ok(v) => v,
        Err(e) => {
            warn!("retrieval skipped: {e}");
            return Ok(Retrieval::default());
        }
    };
    if ids.is_empty() {
        return Ok(Retrieval::default());
    }
    store.remove_locations(&ids)?;

    let mut out = Retrieval::default();
    for rec in records {
        let mut signature = Signature::new();
        for (w, n) in rec.signature.counts() {
            let r = resolve(&memory.pending_remaps, w);
            if memory.vocab.contains(r) {
                signature.add_n(r, n);
                continue;
            }
            let desc = words
                .remove(&r)
                .ok_or_else(|| Error::Consistency(format!("descriptor of {r} not loaded")))?;
            match memory.vocab.match_word(&desc, cfg.t_nndr)? {
                Some(m) => {
                    memory.pending_remaps.insert(r, m);
                    out.remapped.push((r, m));
                    signature.add_n(m, n);
                }
                None => {
                    memory.vocab.reinsert(r, desc)?;
                    out.reactivated.push(r);
                    signature.add_n(r, n);
                }
            }
        }
        let mut loc = Location::new(rec.id, signature);
        loc.weight = rec.weight;
        for (other, kind) in rec.links {
            loc.link_set_mut(kind).insert(other);
        }
        for w in loc.signature.ids() {
            memory.vocab.add_reference(w, rec.id)?;
        }
        memory.locations.insert(rec.id, loc);
        memory.wm.insert(rec.id);
        memory.ltm.remove(&rec.id);
        out.retrieved.push(rec.id);
    }
    Ok(out)
}

/// WM locations of the recent window that may not be transferred: those
/// created after the last loop closure, up to `ceil(t_recent * |WM|)` of
/// them, heaviest and then newest first.
pub fn recent_protected(memory: &Memory, t_recent: f64) -> BTreeSet<LocationId> {
    let cap = (t_recent * memory.wm.len() as f64).ceil() as usize;
    let after = memory.last_loop_closure.unwrap_or(LocationId(0));
    let mut window: Vec<(u32, LocationId)> = memory
        .wm
        .range(LocationId(after.0 + 1)..)
        .map(|id| (memory.locations[id].weight, *id))
        .collect();
    window.sort_by(|a, b| b.cmp(a));
    window.into_iter().take(cap).map(|(_, id)| id).collect()
}

/// Every WM location excluded from transfer this iteration.
pub fn protected_set(
    memory: &Memory,
    cfg: &EngineConfig,
    highest: Option<LocationId>,
    retrieved: &[LocationId],
) -> BTreeSet<LocationId> {
    let mut protected = recent_protected(memory, cfg.t_recent);
    protected.extend(retrieved.iter().copied());
    if let Some(h) = highest.filter(|h| memory.is_in_memory(*h)) {
        protected.insert(h);
        let range = cfg.neighborhood_range;
        protected.extend(memory.time_neighbors(h, range, 2 * range));
    }
    protected
}

/// Transfer order: lightest first, then oldest.
pub fn transfer_candidates(
    memory: &Memory,
    protected: &BTreeSet<LocationId>,
) -> Vec<LocationId> {
    let mut c: Vec<(u32, LocationId)> = memory
        .wm
        .iter()
        .filter(|id| !protected.contains(id))
        .map(|id| (memory.locations[id].weight, *id))
        .collect();
    c.sort();
    c.into_iter().map(|(_, id)| id).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transfer {
    pub transferred: Vec<LocationId>,
    /// Words deactivated by the transfers.
    pub nwt: usize,
    pub trash: TrashBuffer,
    /// Ran out of transferable locations before enough words were removed.
    pub saturated: bool,
}

/// Moves one WM location to the trash together with the words it orphans.
/// Returns the number of words deactivated.
pub fn transfer_location(
    memory: &mut Memory,
    id: LocationId,
    trash: &mut TrashBuffer,
) -> Result<usize> {
    if !memory.wm.remove(&id) {
        return Err(Error::Consistency(format!("{id} is not in WM")));
    }
    let loc = memory.locations.remove(&id).ok_or(Error::UnknownLocation(id))?;
    let mut orphaned = 0;
    for w in loc.signature.ids() {
        memory.vocab.remove_reference(w, id)?;
        if memory.vocab.get(w).is_some_and(|word| word.refs.is_empty()) {
            let word = memory.vocab.deactivate(w)?;
            if !word.persisted {
                trash.words.push((w, word.descriptor));
            }
            orphaned += 1;
        }
    }
    memory.ltm.insert(id);
    trash.locations.push(StoredLocation {
        id,
        weight: loc.weight,
        links: loc.links().collect(),
        signature: loc.signature,
    });
    Ok(orphaned)
}

/// Transfers locations until more words were removed than were added this
/// iteration (`nwa`), or nothing transferable remains.
pub fn transfer(
    memory: &mut Memory,
    cfg: &EngineConfig,
    highest: Option<LocationId>,
    retrieved: &[LocationId],
    nwa: usize,
) -> Result<Transfer> {
    let mut out = Transfer::default();
    if nwa > 0 {
        let protected = protected_set(memory, cfg, highest, retrieved);
        let mut candidates = transfer_candidates(memory, &protected).into_iter();
        while out.nwt <= nwa {
            let Some(id) = candidates.next() else {
                out.saturated = true;
                debug!(
                    "no transferable location left ({} of {nwa} words removed)",
                    out.nwt
                );
                break;
            };
            out.nwt += transfer_location(memory, id, &mut out.trash)?;
            out.transferred.push(id);
        }
    }
    out.trash.remaps = std::mem::take(&mut memory.pending_remaps).into_iter().collect();
    Ok(out)
}

/// Background write of a trash buffer.
pub struct FlushHandle(JoinHandle<Result<()>>);

impl FlushHandle {
    pub fn join(self) -> Result<()> {
        self.0
            .join()
            .unwrap_or_else(|_| Err(Error::Persistence("flush thread panicked".into())))
    }
}

/// Writes `trash` on a separate thread, retrying once.
pub fn spawn_flush(store: Arc<Mutex<LtmStore>>, trash: TrashBuffer) -> FlushHandle {
    FlushHandle(thread::spawn(move || {
        let mut store = store
            .lock()
            .map_err(|_| Error::Persistence("store lock poisoned".into()))?;
        match store.write_trash(&trash) {
            Ok(()) => Ok(()),
            Err(first) => {
                warn!("trash flush failed, retrying: {first}");
                store
                    .write_trash(&trash)
                    .map_err(|e| Error::Persistence(format!("trash flush failed twice: {e}")))
            }
        }
    }))
}
