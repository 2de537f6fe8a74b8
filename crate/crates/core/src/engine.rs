//! The per-frame pipeline.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::bayes::{likelihood, select, similarity_scores, update, Posterior};
use crate::config::{EngineConfig, TimeSource};
use crate::error::{Error, Result};
use crate::graph::{Creation, Memory};
use crate::ids::LocationId;
use crate::ingest::FrameRecord;
use crate::ltm::{CompactStats, LtmStore, TrashBuffer};
use crate::management::{retrieve, spawn_flush, transfer, FlushHandle, Retrieval};

/// Everything decided for one processed frame. Free of wall-clock values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub frame_id: u64,
    pub location: LocationId,
    /// STM location merged into `location`.
    pub merged: Option<LocationId>,
    /// Location moved from STM to WM.
    pub promoted: Option<LocationId>,
    pub highest: Option<LocationId>,
    pub highest_prob: f64,
    pub accepted: Option<LocationId>,
    pub p_new: f64,
    pub top3: Vec<(LocationId, f64)>,
    pub retrieved: Vec<LocationId>,
    pub transferred: Vec<LocationId>,
    pub new_words: usize,
    pub reactivated: usize,
    pub remapped: usize,
    pub nwa: usize,
    pub nwt: usize,
    pub vocab_before: usize,
    pub vocab_pre_transfer: usize,
    pub vocab_after: usize,
    pub wm_size: usize,
    pub stm_size: usize,
    pub ltm_size: usize,
    pub rejected_features: usize,
    pub uniform_fallback: bool,
    pub posterior_reset: bool,
    pub saturated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FrameTiming {
    /// Processing time compared with the budget.
    pub ptime: f64,
    /// Processing time including the transfer step.
    pub ptime_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadFrame {
    pub frame_id: u64,
    pub kept: usize,
    pub threshold: f64,
    pub rejected_features: usize,
}

impl BadFrame {
    pub fn reason(&self) -> String {
        format!(
            "{} features kept, below {:.2} required",
            self.kept, self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    Processed {
        decision: FrameDecision,
        timing: FrameTiming,
    },
    Bad(BadFrame),
}

impl FrameOutcome {
    pub fn decision(&self) -> Option<&FrameDecision> {
        match self {
            FrameOutcome::Processed { decision, .. } => Some(decision),
            FrameOutcome::Bad(_) => None,
        }
    }
}

struct Clock {
    start: Instant,
    source: TimeSource,
    word_cost: f64,
}

impl Clock {
    fn start(cfg: &EngineConfig) -> Self {
        Self {
            start: Instant::now(),
            source: cfg.time_source,
            word_cost: cfg.virtual_word_cost,
        }
    }

    fn elapsed(&self, vocab_size: usize) -> f64 {
        match self.source {
            TimeSource::Wall => self.start.elapsed().as_secs_f64(),
            TimeSource::Virtual => self.word_cost * vocab_size as f64,
        }
    }
}

pub struct Engine {
    cfg: EngineConfig,
    memory: Memory,
    posterior: Posterior,
    store: Arc<Mutex<LtmStore>>,
    flush: Option<FlushHandle>,
    halted: Option<String>,
}

impl Engine {
    /// Opens the store named by `ltm_path`, or an in-memory one.
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        let store = match &cfg.ltm_path {
            Some(p) => LtmStore::open(p, cfg.descriptor_dim)?,
            None => LtmStore::open_in_memory(cfg.descriptor_dim)?,
        };
        Self::with_store(cfg, store)
    }

    pub fn with_store(cfg: EngineConfig, store: LtmStore) -> Result<Self> {
        cfg.validate()?;
        if store.dim() != cfg.descriptor_dim {
            return Err(Error::Config(format!(
                "store dimension {} differs from descriptor_dim {}",
                store.dim(),
                cfg.descriptor_dim
            )));
        }
        let mut memory = Memory::new(&cfg);
        if let Some(max) = store.max_location_id()? {
            warn!("long-term memory already holds locations up to {max}");
            memory.reserve_location_ids_through(max);
            memory.ltm.extend(store.location_ids()?);
        }
        if let Some(max) = store.max_word_id()? {
            memory.vocab.reserve_ids_through(max);
        }
        Ok(Self {
            cfg,
            memory,
            posterior: Posterior::default(),
            store: Arc::new(Mutex::new(store)),
            flush: None,
            halted: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    fn lock_store(&self) -> Result<MutexGuard<'_, LtmStore>> {
        self.store
            .lock()
            .map_err(|_| Error::Persistence("store lock poisoned".into()))
    }

    /// Waits for the pending flush and writes queued link changes.
    pub fn sync(&mut self) -> Result<()> {
        if let Some(h) = self.flush.take() {
            h.join()?;
        }
        let ops = self.memory.take_pending_links();
        self.lock_store()?.apply_link_ops(&ops)
    }

    /// Runs `f` on the store once it is quiescent.
    pub fn with_store_ref<R>(&mut self, f: impl FnOnce(&mut LtmStore) -> R) -> Result<R> {
        self.sync()?;
        let mut store = self.lock_store()?;
        Ok(f(&mut store))
    }

    fn halt(&mut self, e: Error) -> Error {
        if e.is_persistence() {
            self.halted = Some(e.to_string());
        }
        e
    }

    pub fn process(&mut self, frame: FrameRecord) -> Result<FrameOutcome> {
        if let Some(why) = &self.halted {
            return Err(Error::Persistence(format!("engine halted: {why}")));
        }
        let t_response = self.cfg.t_response;
        let features = frame
            .features
            .into_iter()
            .filter(|d| f64::from(d.response()) >= t_response)
            .collect();
        self.step(frame.image_id, features).map_err(|e| self.halt(e))
    }

    fn step(
        &mut self,
        frame_id: u64,
        features: Vec<crate::vocabulary::Descriptor>,
    ) -> Result<FrameOutcome> {
        let clock = Clock::start(&self.cfg);
        let cfg = &self.cfg;
        let vocab_before = self.memory.vocab.len();
        let (id, new_words, rejected) = match self.memory.create_location(features, cfg)? {
            Creation::Bad {
                kept,
                threshold,
                rejected,
            } => {
                debug!("frame {frame_id} rejected: {kept} features");
                return Ok(FrameOutcome::Bad(BadFrame {
                    frame_id,
                    kept,
                    threshold,
                    rejected_features: rejected,
                }));
            }
            Creation::Created {
                id,
                new_words,
                rejected,
            } => (id, new_words, rejected),
        };
        let merged = self.memory.weight_update(id, &new_words, cfg)?;
        let new_count = if merged.is_some() { 0 } else { new_words.len() };
        let promoted = self.memory.age_stm(cfg);

        let posterior_reset = self.posterior.reconcile(self.memory.wm());
        let scores = similarity_scores(&self.memory, id);
        let lik = likelihood(&scores);
        let up = update(
            &self.posterior,
            &lik,
            &self.memory,
            cfg.neighborhood_range,
            cfg.gaussian_sigma,
        );
        self.posterior = up.posterior;
        let sel = select(&self.posterior, cfg.t_loop);
        if let Some(old) = sel.accepted {
            self.memory.add_loop_link(id, old)?;
        }

        self.sync()?;
        let retrieval = match sel.highest {
            Some((h, _)) => {
                let mut store = self
                    .store
                    .lock()
                    .map_err(|_| Error::Persistence("store lock poisoned".into()))?;
                retrieve(&mut self.memory, &mut store, h, &self.cfg)?
            }
            None => Retrieval::default(),
        };
        let cfg = &self.cfg;
        let nwa = new_count + retrieval.reactivated.len();

        let vocab_pre_transfer = self.memory.vocab.len();
        let ptime = clock.elapsed(vocab_pre_transfer);
        let mut moved = None;
        if ptime > cfg.t_time {
            let t = transfer(
                &mut self.memory,
                cfg,
                sel.highest.map(|h| h.0),
                &retrieval.retrieved,
                nwa,
            )?;
            moved = Some(t);
        }
        let (transferred, nwt, saturated, trash) = match moved {
            Some(t) => (t.transferred, t.nwt, t.saturated, t.trash),
            None => (Vec::new(), 0, false, TrashBuffer::default()),
        };
        if !trash.is_empty() {
            self.flush = Some(spawn_flush(self.store.clone(), trash));
        }
        let vocab_after = self.memory.vocab.len();
        let ptime_total = match self.cfg.time_source {
            TimeSource::Wall => clock.elapsed(vocab_after),
            TimeSource::Virtual => ptime,
        };

        let decision = FrameDecision {
            frame_id,
            location: id,
            merged,
            promoted,
            highest: sel.highest.map(|h| h.0),
            highest_prob: sel.highest.map_or(0.0, |h| h.1),
            accepted: sel.accepted,
            p_new: sel.p_new,
            top3: self.posterior.top(3),
            retrieved: retrieval.retrieved,
            transferred,
            new_words: new_count,
            reactivated: retrieval.reactivated.len(),
            remapped: retrieval.remapped.len(),
            nwa,
            nwt,
            vocab_before,
            vocab_pre_transfer,
            vocab_after,
            wm_size: self.memory.wm().len(),
            stm_size: self.memory.stm().len(),
            ltm_size: self.memory.ltm_ids().len(),
            rejected_features: rejected,
            uniform_fallback: up.uniform_fallback,
            posterior_reset,
            saturated,
        };
        Ok(FrameOutcome::Processed {
            decision,
            timing: FrameTiming { ptime, ptime_total },
        })
    }

    /// Flushes everything still pending and compacts the long-term memory.
    /// Working memory is not written out.
    pub fn shutdown(mut self) -> Result<CompactStats> {
        self.sync()?;
        let remaps: Vec<_> = std::mem::take(&mut self.memory.pending_remaps).into_iter().collect();
        let mut store = self.lock_store()?;
        if !remaps.is_empty() {
            store.put_remaps(&remaps)?;
        }
        store.shutdown_compact()
    }
}
