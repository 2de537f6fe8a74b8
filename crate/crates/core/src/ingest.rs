//! Descriptor stream files.
//!
//! Text streams hold one JSON object per line:
//! `{"image_id": 3, "features": [{"r": 0.7, "d": [0.1, ...]}, ...]}`.
//! Files ending in `.lcb` use the binary layout: magic `LCB1`, u32 descriptor
//! dimension, then per record u64 image id, u32 feature count and per feature
//! an f32 response followed by the descriptor, all little-endian.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Read, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::{self, JoinHandle};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltm::{decode_descriptor, encode_descriptor};
use crate::vocabulary::Descriptor;

pub const BINARY_MAGIC: &[u8; 4] = b"LCB1";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image_id: u64,
    pub features: Vec<Descriptor>,
}

#[derive(Serialize, Deserialize)]
struct RawFeature {
    r: f32,
    d: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    image_id: u64,
    features: Vec<RawFeature>,
}

pub fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "lcb")
}

enum Source {
    Text(Lines<BufReader<File>>),
    Binary(BufReader<File>),
}

/// Reads frames in order, skipping malformed records.
pub struct StreamReader {
    source: Source,
    dim: usize,
    last_id: Option<u64>,
    skipped: usize,
    done: bool,
}

impl StreamReader {
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let source = if is_binary(path) {
            let mut header = [0u8; 8];
            reader.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
            if &header[..4] != BINARY_MAGIC {
                return Err(Error::io(
                    path,
                    io::Error::new(io::ErrorKind::InvalidData, "not a binary descriptor stream"),
                ));
            }
            let file_dim = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
            if file_dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: file_dim,
                });
            }
            Source::Binary(reader)
        } else {
            Source::Text(reader.lines())
        };
        Ok(Self {
            source,
            dim,
            last_id: None,
            skipped: 0,
            done: false,
        })
    }

    /// Malformed records skipped so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn skip(&mut self, why: &str) {
        self.skipped += 1;
        warn!("skipping stream record: {why}");
    }

    fn accept(&mut self, raw: RawRecord) -> Option<FrameRecord> {
        if self.last_id.is_some_and(|last| raw.image_id <= last) {
            self.skip(&format!("image id {} is not increasing", raw.image_id));
            return None;
        }
        let mut features = Vec::with_capacity(raw.features.len());
        for f in raw.features {
            if f.d.len() != self.dim {
                self.skip(&format!(
                    "image {}: descriptor of {} values, expected {}",
                    raw.image_id,
                    f.d.len(),
                    self.dim
                ));
                return None;
            }
            match Descriptor::new(f.d, f.r) {
                Ok(d) => features.push(d),
                Err(e) => {
                    self.skip(&format!("image {}: {e}", raw.image_id));
                    return None;
                }
            }
        }
        self.last_id = Some(raw.image_id);
        Some(FrameRecord {
            image_id: raw.image_id,
            features,
        })
    }

    fn next_raw(&mut self) -> Option<io::Result<Option<RawRecord>>> {
        match &mut self.source {
            Source::Text(lines) => {
                let line = match lines.next()? {
                    Ok(l) => l,
                    Err(e) => return Some(Err(e)),
                };
                if line.trim().is_empty() {
                    return Some(Ok(None));
                }
                match serde_json::from_str::<RawRecord>(&line) {
                    Ok(r) => Some(Ok(Some(r))),
                    Err(e) => {
                        self.skip(&e.to_string());
                        Some(Ok(None))
                    }
                }
            }
            Source::Binary(reader) => {
                let mut head = [0u8; 12];
                match read_full(reader, &mut head) {
                    Ok(0) => return None,
                    Ok(12) => {}
                    Ok(_) => {
                        self.skip("truncated record header");
                        return None;
                    }
                    Err(e) => return Some(Err(e)),
                }
                let image_id = u64::from_le_bytes(head[..8].try_into().unwrap());
                let n = u32::from_le_bytes(head[8..].try_into().unwrap()) as usize;
                let width = 4 * (1 + self.dim);
                let mut body = vec![0u8; n * width];
                match read_full(reader, &mut body) {
                    Ok(len) if len == body.len() => {}
                    Ok(_) => {
                        self.skip("truncated record body");
                        return None;
                    }
                    Err(e) => return Some(Err(e)),
                }
                let features = body
                    .chunks_exact(width)
                    .map(|c| RawFeature {
                        r: f32::from_le_bytes(c[..4].try_into().unwrap()),
                        d: decode_descriptor(&c[4..], self.dim).unwrap_or_default(),
                    })
                    .collect();
                Some(Ok(Some(RawRecord { image_id, features })))
            }
        }
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl Iterator for StreamReader {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            match self.next_raw() {
                None => self.done = true,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(Error::Io {
                        path: "<stream>".into(),
                        source: e,
                    }));
                }
                Some(Ok(None)) => {}
                Some(Ok(Some(raw))) => {
                    if let Some(rec) = self.accept(raw) {
                        return Some(Ok(rec));
                    }
                }
            }
        }
        None
    }
}

/// Reads the whole stream, returning the frames and the skip count.
pub fn read_stream(path: &Path, dim: usize) -> Result<(Vec<FrameRecord>, usize)> {
    let mut reader = StreamReader::open(path, dim)?;
    let frames = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((frames, reader.skipped()))
}

/// Reads ahead on a separate thread through a queue of two frames. The
/// handle yields the skip count once the stream is exhausted.
pub fn spawn_reader(
    mut reader: StreamReader,
) -> (Receiver<Result<FrameRecord>>, JoinHandle<usize>) {
    let (tx, rx) = sync_channel(2);
    let handle = thread::spawn(move || {
        for item in reader.by_ref() {
            if tx.send(item).is_err() {
                break;
            }
        }
        reader.skipped()
    });
    (rx, handle)
}

pub fn write_stream(path: &Path, frames: &[FrameRecord], dim: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let result = if is_binary(path) {
        write_binary(&mut w, frames, dim)
    } else {
        write_text(&mut w, frames)
    };
    result.and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_text(w: &mut impl Write, frames: &[FrameRecord]) -> io::Result<()> {
    for f in frames {
        let raw = RawRecord {
            image_id: f.image_id,
            features: f
                .features
                .iter()
                .map(|d| RawFeature {
                    r: d.response(),
                    d: d.values().to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn write_binary(w: &mut impl Write, frames: &[FrameRecord], dim: usize) -> io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for f in frames {
        w.write_all(&f.image_id.to_le_bytes())?;
        w.write_all(&(f.features.len() as u32).to_le_bytes())?;
        for d in &f.features {
            if d.dim() != dim {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("descriptor of {} values in a {dim}-dimensional stream", d.dim()),
                ));
            }
            w.write_all(&d.response().to_le_bytes())?;
            w.write_all(&encode_descriptor(d.values()))?;
        }
    }
    Ok(())
}
