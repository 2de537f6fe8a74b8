//! Long-term memory on SQLite.
//!
//! Tables:
//! - `signature(location_id, weight, created_index, words)`
//! - `word(word_id, descriptor)`
//! - `link(from_id, to_id, link_type)` with `from_id < to_id`
//! - `remap(old_word_id, new_word_id)`
//!
//! A link row exists while at least one endpoint lives in LTM. Remaps record
//! stale word ids of stored signatures; they are resolved lazily when a
//! signature is read and applied wholesale by [`LtmStore::shutdown_compact`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rusqlite::{params, Connection, OptionalExtension, Transaction};

use crate::error::{Error, Result};
use crate::graph::{LinkKind, LinkOp, Memory};
use crate::ids::{LocationId, WordId};
use crate::signature::Signature;

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS signature (
    location_id INTEGER PRIMARY KEY,
    weight INTEGER NOT NULL,
    created_index INTEGER NOT NULL,
    words BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS word (word_id INTEGER PRIMARY KEY, descriptor BLOB NOT NULL);
CREATE TABLE IF NOT EXISTS link (
    from_id INTEGER NOT NULL,
    to_id INTEGER NOT NULL,
    link_type INTEGER NOT NULL,
    PRIMARY KEY (from_id, to_id, link_type)
) WITHOUT ROWID;
CREATE INDEX IF NOT EXISTS link_to ON link(to_id);
CREATE TABLE IF NOT EXISTS remap (old_word_id INTEGER PRIMARY KEY, new_word_id INTEGER NOT NULL);
";

/// A location as held in long-term memory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLocation {
    pub id: LocationId,
    pub weight: u32,
    pub signature: Signature,
    pub links: Vec<(LocationId, LinkKind)>,
}

/// Everything a transfer hands to the store in one write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrashBuffer {
    pub locations: Vec<StoredLocation>,
    pub words: Vec<(WordId, Vec<f32>)>,
    pub remaps: Vec<(WordId, WordId)>,
}

impl TrashBuffer {
    pub fn is_empty(&self) -> bool {
        self.locations.is_empty() && self.words.is_empty() && self.remaps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CompactStats {
    pub rewritten_signatures: usize,
    pub deleted_words: usize,
    pub cleared_remaps: usize,
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(data: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *data
            .get(*pos)
            .ok_or_else(|| Error::Persistence("truncated signature blob".into()))?;
        *pos += 1;
        v |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Persistence("overlong varint in signature blob".into()))
}

/// LEB128 distinct-word count, then per word in ascending id order the id
/// delta from the previous id (from 0) and the count.
pub fn encode_signature(sig: &Signature) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + sig.distinct_len() * 3);
    write_varint(&mut out, sig.distinct_len() as u64);
    let mut prev = 0;
    for (id, n) in sig.counts() {
        write_varint(&mut out, id.0 - prev);
        write_varint(&mut out, u64::from(n));
        prev = id.0;
    }
    out
}

pub fn decode_signature(data: &[u8]) -> Result<Signature> {
    let mut pos = 0;
    let n = read_varint(data, &mut pos)?;
    let mut sig = Signature::new();
    let mut prev = 0u64;
    for i in 0..n {
        let delta = read_varint(data, &mut pos)?;
        if i > 0 && delta == 0 {
            return Err(Error::Persistence("unsorted signature blob".into()));
        }
        prev += delta;
        let count = u32::try_from(read_varint(data, &mut pos)?)
            .map_err(|_| Error::Persistence("word count overflow".into()))?;
        sig.add_n(WordId(prev), count);
    }
    if pos != data.len() {
        return Err(Error::Persistence("trailing bytes in signature blob".into()));
    }
    Ok(sig)
}

/// Little-endian f32 values, no header.
pub fn encode_descriptor(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_descriptor(data: &[u8], dim: usize) -> Result<Vec<f32>> {
    if data.len() != dim * 4 {
        return Err(Error::Persistence(format!(
            "descriptor blob of {} bytes, expected {}",
            data.len(),
            dim * 4
        )));
    }
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn ordered(a: LocationId, b: LocationId) -> (i64, i64) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (lo.0 as i64, hi.0 as i64)
}

fn to_u64(v: i64) -> u64 {
    v as u64
}

pub struct LtmStore {
    conn: Connection,
    dim: usize,
    failing_writes: u32,
}

impl LtmStore {
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        let conn = Connection::open(path)
            .map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
        Self::init(conn, dim)
    }

    pub fn open_in_memory(dim: usize) -> Result<Self> {
        Self::init(Connection::open_in_memory()?, dim)
    }

    fn init(conn: Connection, dim: usize) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        let stored: Option<i64> = conn
            .query_row("SELECT value FROM meta WHERE key = 'descriptor_dim'", [], |r| r.get(0))
            .optional()?;
        match stored {
            Some(d) if d as usize != dim => {
                return Err(Error::Persistence(format!(
                    "store holds {d}-dimensional descriptors, engine uses {dim}"
                )))
            }
            Some(_) => {}
            None => {
                conn.execute(
                    "INSERT INTO meta (key, value) VALUES ('descriptor_dim', ?1)",
                    [dim as i64],
                )?;
            }
        }
        Ok(Self {
            conn,
            dim,
            failing_writes: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Makes the next `n` write operations fail, for exercising fault paths.
    pub fn fail_next_writes(&mut self, n: u32) {
        self.failing_writes = n;
    }

    fn check_write(&mut self) -> Result<()> {
        if self.failing_writes > 0 {
            self.failing_writes -= 1;
            return Err(Error::Persistence("injected write failure".into()));
        }
        Ok(())
    }

    fn count(&self, table: &str) -> Result<usize> {
        let n: i64 = self
            .conn
            .query_row(&format!("SELECT COUNT(*) FROM {table}"), [], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn location_count(&self) -> Result<usize> {
        self.count("signature")
    }

    pub fn word_count(&self) -> Result<usize> {
        self.count("word")
    }

    pub fn remap_count(&self) -> Result<usize> {
        self.count("remap")
    }

    pub fn link_count(&self) -> Result<usize> {
        self.count("link")
    }

    pub fn max_location_id(&self) -> Result<Option<LocationId>> {
        let v: Option<i64> = self
            .conn
            .query_row("SELECT MAX(location_id) FROM signature", [], |r| r.get(0))?;
        Ok(v.map(|v| LocationId(to_u64(v))))
    }

    /// Highest word id mentioned anywhere in the store.
    pub fn max_word_id(&self) -> Result<Option<WordId>> {
        let mut best: Option<i64> = None;
        for sql in [
            "SELECT MAX(word_id) FROM word",
            "SELECT MAX(old_word_id) FROM remap",
            "SELECT MAX(new_word_id) FROM remap",
        ] {
            let v: Option<i64> = self.conn.query_row(sql, [], |r| r.get(0))?;
            best = best.max(v);
        }
        for id in self.location_ids()? {
            if let Some(loc) = self.read_location(id)? {
                best = best.max(loc.signature.ids().last().map(|w| w.0 as i64));
            }
        }
        Ok(best.map(|v| WordId(to_u64(v))))
    }

    pub fn location_ids(&self) -> Result<Vec<LocationId>> {
        let mut stmt = self
            .conn
            .prepare("SELECT location_id FROM signature ORDER BY location_id")?;
        let ids = stmt
            .query_map([], |r| r.get::<_, i64>(0))?
            .map(|r| r.map(|v| LocationId(to_u64(v))))
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(ids)
    }

    pub fn word_ids(&self) -> Result<Vec<WordId>> {
        let mut stmt = self.conn.prepare("SELECT word_id FROM word ORDER BY word_id")?;
        let ids = stmt
            .query_map([], |r| r.get::<_, i64>(0))?
            .map(|r| r.map(|v| WordId(to_u64(v))))
            .collect::<rusqlite::Result<Vec<_>>>()?;
        Ok(ids)
    }

    pub fn contains_location(&self, id: LocationId) -> Result<bool> {
        let v: Option<i64> = self
            .conn
            .query_row(
                "SELECT 1 FROM signature WHERE location_id = ?1",
                [id.0 as i64],
                |r| r.get(0),
            )
            .optional()?;
        Ok(v.is_some())
    }

    pub fn remaps(&self) -> Result<BTreeMap<WordId, WordId>> {
        let mut stmt = self.conn.prepare("SELECT old_word_id, new_word_id FROM remap")?;
        let rows = stmt
            .query_map([], |r| Ok((r.get::<_, i64>(0)?, r.get::<_, i64>(1)?)))?
            .map(|r| r.map(|(a, b)| (WordId(to_u64(a)), WordId(to_u64(b)))))
            .collect::<rusqlite::Result<BTreeMap<_, _>>>()?;
        Ok(rows)
    }

    /// Links of `id` stored in the link table, sorted.
    pub fn links_of(&self, id: LocationId) -> Result<Vec<(LocationId, LinkKind)>> {
        let mut stmt = self.conn.prepare_cached(
            "SELECT to_id, link_type FROM link WHERE from_id = ?1
             UNION ALL SELECT from_id, link_type FROM link WHERE to_id = ?1",
        )?;
        let mut out = Vec::new();
        let mut rows = stmt.query([id.0 as i64])?;
        while let Some(row) = rows.next()? {
            let other: i64 = row.get(0)?;
            let code: i64 = row.get(1)?;
            let kind = LinkKind::from_code(code)
                .ok_or_else(|| Error::Persistence(format!("unknown link type {code}")))?;
            out.push((LocationId(to_u64(other)), kind));
        }
        out.sort();
        Ok(out)
    }

    fn read_location(&self, id: LocationId) -> Result<Option<StoredLocation>> {
        let row: Option<(i64, Vec<u8>)> = self
            .conn
            .prepare_cached("SELECT weight, words FROM signature WHERE location_id = ?1")?
            .query_row([id.0 as i64], |r| Ok((r.get(0)?, r.get(1)?)))
            .optional()?;
        let Some((weight, blob)) = row else { return Ok(None) };
        Ok(Some(StoredLocation {
            id,
            weight: weight as u32,
            signature: decode_signature(&blob)?,
            links: self.links_of(id)?,
        }))
    }

    /// Follows the remap chain of `id` to its current id.
    pub fn resolve_word(&self, id: WordId) -> Result<WordId> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT new_word_id FROM remap WHERE old_word_id = ?1")?;
        let mut cur = id;
        let mut steps = 0;
        while let Some(next) = stmt
            .query_row([cur.0 as i64], |r| r.get::<_, i64>(0))
            .optional()?
        {
            cur = WordId(to_u64(next));
            steps += 1;
            if steps > 1_000_000 {
                return Err(Error::Persistence(format!("remap cycle through {id}")));
            }
        }
        Ok(cur)
    }

    /// Reads locations, resolving stale word ids and rewriting the stored
    /// signatures that had any.
    pub fn get_locations(&mut self, ids: &[LocationId]) -> Result<Vec<StoredLocation>> {
        let mut out = Vec::with_capacity(ids.len());
        let mut rewrites = Vec::new();
        for &id in ids {
            let mut loc = self.read_location(id)?.ok_or(Error::UnknownLocation(id))?;
            let mut resolved = Signature::new();
            let mut changed = false;
            for (w, n) in loc.signature.counts() {
                let r = self.resolve_word(w)?;
                changed |= r != w;
                resolved.add_n(r, n);
            }
            if changed {
                loc.signature = resolved;
                rewrites.push((id, encode_signature(&loc.signature)));
            }
            out.push(loc);
        }
        if !rewrites.is_empty() {
            self.check_write()?;
            let tx = self.conn.transaction()?;
            for (id, blob) in rewrites {
                tx.execute(
                    "UPDATE signature SET words = ?2 WHERE location_id = ?1",
                    params![id.0 as i64, blob],
                )?;
            }
            tx.commit()?;
        }
        Ok(out)
    }

    /// Takes locations out of LTM: their rows go, and so do link rows that no
    /// longer touch an LTM-resident location.
    pub fn remove_locations(&mut self, ids: &[LocationId]) -> Result<()> {
        self.check_write()?;
        let tx = self.conn.transaction()?;
        for id in ids {
            let n = tx.execute("DELETE FROM signature WHERE location_id = ?1", [id.0 as i64])?;
            if n == 0 {
                return Err(Error::UnknownLocation(*id));
            }
        }
        for id in ids {
            tx.execute(
                "DELETE FROM link WHERE
                   (from_id = ?1 AND to_id NOT IN (SELECT location_id FROM signature))
                   OR (to_id = ?1 AND from_id NOT IN (SELECT location_id FROM signature))",
                [id.0 as i64],
            )?;
        }
        tx.commit()?;
        Ok(())
    }

    pub fn get_words(&self, ids: &[WordId]) -> Result<Vec<(WordId, Vec<f32>)>> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT descriptor FROM word WHERE word_id = ?1")?;
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let blob: Vec<u8> = stmt
                .query_row([id.0 as i64], |r| r.get(0))
                .optional()?
                .ok_or_else(|| Error::Persistence(format!("{id} missing from word table")))?;
            out.push((id, decode_descriptor(&blob, self.dim)?));
        }
        Ok(out)
    }

    fn insert_locations(tx: &Transaction, locations: &[StoredLocation]) -> Result<()> {
        for loc in locations {
            tx.execute(
                "INSERT INTO signature (location_id, weight, created_index, words)
                 VALUES (?1, ?2, ?1, ?3)",
                params![loc.id.0 as i64, loc.weight, encode_signature(&loc.signature)],
            )
            .map_err(|e| Error::Persistence(format!("writing {}: {e}", loc.id)))?;
            for &(other, kind) in &loc.links {
                let (a, b) = ordered(loc.id, other);
                tx.execute(
                    "INSERT OR IGNORE INTO link (from_id, to_id, link_type) VALUES (?1, ?2, ?3)",
                    params![a, b, kind.code()],
                )?;
            }
        }
        Ok(())
    }

    fn insert_words(tx: &Transaction, dim: usize, words: &[(WordId, Vec<f32>)]) -> Result<()> {
        for (id, values) in words {
            if values.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: values.len(),
                });
            }
            tx.execute(
                "INSERT INTO word (word_id, descriptor) VALUES (?1, ?2)",
                params![id.0 as i64, encode_descriptor(values)],
            )
            .map_err(|e| Error::Persistence(format!("writing {id}: {e}")))?;
        }
        Ok(())
    }

    fn insert_remaps(tx: &Transaction, remaps: &[(WordId, WordId)]) -> Result<()> {
        for (old, new) in remaps {
            tx.execute(
                "INSERT OR REPLACE INTO remap (old_word_id, new_word_id) VALUES (?1, ?2)",
                params![old.0 as i64, new.0 as i64],
            )?;
        }
        Ok(())
    }

    pub fn put_locations(&mut self, locations: &[StoredLocation]) -> Result<()> {
        self.write_trash(&TrashBuffer {
            locations: locations.to_vec(),
            ..TrashBuffer::default()
        })
    }

    pub fn put_words(&mut self, words: &[(WordId, Vec<f32>)]) -> Result<()> {
        self.write_trash(&TrashBuffer {
            words: words.to_vec(),
            ..TrashBuffer::default()
        })
    }

    pub fn put_remaps(&mut self, remaps: &[(WordId, WordId)]) -> Result<()> {
        self.write_trash(&TrashBuffer {
            remaps: remaps.to_vec(),
            ..TrashBuffer::default()
        })
    }

    /// Writes a whole trash buffer atomically.
    pub fn write_trash(&mut self, trash: &TrashBuffer) -> Result<()> {
        self.check_write()?;
        let dim = self.dim;
        let tx = self.conn.transaction()?;
        Self::insert_locations(&tx, &trash.locations)?;
        Self::insert_words(&tx, dim, &trash.words)?;
        Self::insert_remaps(&tx, &trash.remaps)?;
        tx.commit()?;
        Ok(())
    }

    pub fn apply_link_ops(&mut self, ops: &[LinkOp]) -> Result<()> {
        if ops.is_empty() {
            return Ok(());
        }
        self.check_write()?;
        let tx = self.conn.transaction()?;
        for op in ops {
            match *op {
                LinkOp::Add(a, b, kind) => {
                    let (a, b) = ordered(a, b);
                    tx.execute(
                        "INSERT OR IGNORE INTO link (from_id, to_id, link_type) VALUES (?1, ?2, ?3)",
                        params![a, b, kind.code()],
                    )?;
                }
                LinkOp::Remove(a, b, kind) => {
                    let (a, b) = ordered(a, b);
                    tx.execute(
                        "DELETE FROM link WHERE from_id = ?1 AND to_id = ?2 AND link_type = ?3",
                        params![a, b, kind.code()],
                    )?;
                }
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Applies every remap to the stored signatures, deletes the remapped
    /// words and empties the remap table. Running it twice changes nothing.
    pub fn shutdown_compact(&mut self) -> Result<CompactStats> {
        let remaps = self.remaps()?;
        let mut stats = CompactStats::default();
        if remaps.is_empty() {
            return Ok(stats);
        }
        let resolve = |mut w: WordId| {
            let mut steps = 0;
            while let Some(&n) = remaps.get(&w) {
                w = n;
                steps += 1;
                if steps > remaps.len() {
                    return Err(Error::Persistence("remap cycle".into()));
                }
            }
            Ok(w)
        };
        let mut rewrites = Vec::new();
        {
            let mut stmt = self.conn.prepare("SELECT location_id, words FROM signature")?;
            let mut rows = stmt.query([])?;
            while let Some(row) = rows.next()? {
                let id: i64 = row.get(0)?;
                let blob: Vec<u8> = row.get(1)?;
                let sig = decode_signature(&blob)?;
                if sig.ids().any(|w| remaps.contains_key(&w)) {
                    let mut fixed = Signature::new();
                    for (w, n) in sig.counts() {
                        fixed.add_n(resolve(w)?, n);
                    }
                    rewrites.push((id, encode_signature(&fixed)));
                }
            }
        }
        self.check_write()?;
        let tx = self.conn.transaction()?;
        for (id, blob) in &rewrites {
            tx.execute(
                "UPDATE signature SET words = ?2 WHERE location_id = ?1",
                params![id, blob],
            )?;
        }
        for old in remaps.keys() {
            stats.deleted_words += tx.execute("DELETE FROM word WHERE word_id = ?1", [old.0 as i64])?;
        }
        stats.cleared_remaps = tx.execute("DELETE FROM remap", [])?;
        tx.commit()?;
        stats.rewritten_signatures = rewrites.len();
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkClass {
    /// Reached over neighbor links only.
    Time,
    Space,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodEntry {
    pub id: LocationId,
    pub hops: usize,
    pub class: LinkClass,
}

/// Links of `parent` in visiting order: neighbor links before loop links,
/// forward in time (ascending) before backward (descending).
fn visit_order(
    parent: LocationId,
    mut links: Vec<(LocationId, LinkKind)>,
    kinds: &[LinkKind],
) -> Vec<LocationId> {
    links.retain(|(_, k)| kinds.contains(k));
    links.sort_by(|a, b| {
        let key = |&(id, kind): &(LocationId, LinkKind)| {
            let backward = id < parent;
            let tie = if backward { u64::MAX - id.0 } else { id.0 };
            (kind, backward, tie)
        };
        key(a).cmp(&key(b))
    });
    links.dedup_by_key(|(id, _)| *id);
    let mut seen = BTreeSet::new();
    links.into_iter().map(|(id, _)| id).filter(|id| seen.insert(*id)).collect()
}

/// Locations around `center` within `max_hops`: first those reached over
/// neighbor links only, then the rest over all links, each ring by ring.
/// Only ids passing `accept` are returned, at most `limit` of them.
pub fn neighborhood(
    center: LocationId,
    max_hops: usize,
    limit: Option<usize>,
    mut links_of: impl FnMut(LocationId) -> Result<Vec<(LocationId, LinkKind)>>,
    accept: impl Fn(LocationId) -> bool,
) -> Result<Vec<NeighborhoodEntry>> {
    let limit = limit.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    let mut emitted = BTreeSet::new();
    let classes = [
        (LinkClass::Time, &[LinkKind::Neighbor][..]),
        (LinkClass::Space, &[LinkKind::Neighbor, LinkKind::Loop][..]),
    ];
    let mut cache: BTreeMap<LocationId, Vec<(LocationId, LinkKind)>> = BTreeMap::new();
    for (class, kinds) in classes {
        let mut seen = BTreeSet::from([center]);
        let mut queue = VecDeque::from([(center, 0usize)]);
        while let Some((id, hops)) = queue.pop_front() {
            if hops == max_hops {
                continue;
            }
            let links = match cache.entry(id) {
                std::collections::btree_map::Entry::Occupied(e) => e.get().clone(),
                std::collections::btree_map::Entry::Vacant(e) => e.insert(links_of(id)?).clone(),
            };
            for next in visit_order(id, links, kinds) {
                if !seen.insert(next) {
                    continue;
                }
                queue.push_back((next, hops + 1));
                if accept(next) && emitted.insert(next) {
                    out.push(NeighborhoodEntry {
                        id: next,
                        hops: hops + 1,
                        class,
                    });
                    if out.len() == limit {
                        return Ok(out);
                    }
                }
            }
        }
    }
    Ok(out)
}

impl LtmStore {
    /// Neighborhood of `center` over in-memory links and the link table.
    pub fn get_neighborhood(
        &self,
        memory: &Memory,
        center: LocationId,
        max_hops: usize,
        only_ltm_resident: bool,
        limit: Option<usize>,
    ) -> Result<Vec<NeighborhoodEntry>> {
        neighborhood(
            center,
            max_hops,
            limit,
            |id| match memory.location(id) {
                Some(loc) => Ok(loc.links().collect()),
                None => self.links_of(id),
            },
            |id| !only_ltm_resident || memory.ltm_ids().contains(&id),
        )
    }
}
