//! Synthetic descriptor worlds with exact ground truth.
//!
//! Each place owns a set of discriminative unit vectors; a shared pool of
//! common vectors is sampled by every frame to create perceptual aliasing.
//! Frames also see a leading part of the next place's vectors, so
//! consecutive places overlap. The path walks all places in order once per
//! traversal. Dwell segments
//! repeat a place for several consecutive frames during the first traversal,
//! and drift swaps a fraction of a place's vectors for fresh ones at every
//! revisit.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::ingest::FrameRecord;
use crate::metrics::GroundTruth;
use crate::vocabulary::Descriptor;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub place_count: usize,
    pub traversals: usize,
    pub features_per_place: usize,
    pub common_pool: usize,
    pub common_per_frame: usize,
    /// Fraction of the next place's vectors visible from a place.
    pub overlap: f64,
    pub dwell_segments: usize,
    pub dwell_min: usize,
    pub dwell_max: usize,
    /// Noise norm relative to the unit latent vectors.
    pub noise: f64,
    /// Fraction of a place's vectors replaced at each revisit.
    pub drift: f64,
    pub descriptor_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            place_count: 200,
            traversals: 2,
            features_per_place: 60,
            common_pool: 200,
            common_per_frame: 10,
            overlap: 0.15,
            dwell_segments: 0,
            dwell_min: 20,
            dwell_max: 60,
            noise: 0.05,
            drift: 0.0,
            descriptor_dim: 64,
        }
    }
}

impl WorldSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = WorldSpec::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            spec.set(key.trim(), value.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value for '{key}': {v}")))
        }
        match key {
            "place_count" => self.place_count = num(key, value)?,
            "traversals" => self.traversals = num(key, value)?,
            "features_per_place" => self.features_per_place = num(key, value)?,
            "common_pool" => self.common_pool = num(key, value)?,
            "common_per_frame" => self.common_per_frame = num(key, value)?,
            "overlap" => self.overlap = num(key, value)?,
            "dwell_segments" => self.dwell_segments = num(key, value)?,
            "dwell_min" => self.dwell_min = num(key, value)?,
            "dwell_max" => self.dwell_max = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "drift" => self.drift = num(key, value)?,
            "descriptor_dim" => self.descriptor_dim = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown world key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.place_count == 0 || self.traversals == 0 || self.descriptor_dim == 0 {
            return fail("place_count, traversals and descriptor_dim must be positive");
        }
        if [self.noise, self.drift, self.overlap]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return fail("noise, drift and overlap must lie in [0, 1]");
        }
        if self.common_per_frame > self.common_pool {
            return fail("common_per_frame exceeds common_pool");
        }
        if self.dwell_segments > self.place_count {
            return fail("more dwell segments than places");
        }
        if self.dwell_segments > 0 && (self.dwell_min == 0 || self.dwell_min > self.dwell_max) {
            return fail("need 0 < dwell_min <= dwell_max");
        }
        Ok(())
    }
}

impl fmt::Display for WorldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "place_count = {}", self.place_count)?;
        writeln!(f, "traversals = {}", self.traversals)?;
        writeln!(f, "features_per_place = {}", self.features_per_place)?;
        writeln!(f, "common_pool = {}", self.common_pool)?;
        writeln!(f, "common_per_frame = {}", self.common_per_frame)?;
        writeln!(f, "overlap = {}", self.overlap)?;
        writeln!(f, "dwell_segments = {}", self.dwell_segments)?;
        writeln!(f, "dwell_min = {}", self.dwell_min)?;
        writeln!(f, "dwell_max = {}", self.dwell_max)?;
        writeln!(f, "noise = {}", self.noise)?;
        writeln!(f, "drift = {}", self.drift)?;
        writeln!(f, "descriptor_dim = {}", self.descriptor_dim)
    }
}

/// One step of the path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub place: usize,
    /// How many earlier distinct visits of this place there were.
    pub visit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub frames: Vec<FrameRecord>,
    pub ground_truth: GroundTruth,
    pub path: Vec<PathStep>,
}

/// Where the ground truth of a synthesized stream is kept: the stream path
/// with `.gt` appended.
pub fn ground_truth_path(stream: &Path) -> PathBuf {
    let mut name = stream.as_os_str().to_owned();
    name.push(".gt");
    PathBuf::from(name)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Builds the frame path: one pass over the places per traversal, with
/// dwell places repeated during the first pass.
pub fn build_path(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<PathStep> {
    let dwell: BTreeSet<usize> = sample(rng, spec.place_count, spec.dwell_segments)
        .into_iter()
        .collect();
    let mut path = Vec::new();
    for t in 0..spec.traversals {
        for place in 0..spec.place_count {
            let repeats = if t == 0 && dwell.contains(&place) {
                rng.random_range(spec.dwell_min..=spec.dwell_max)
            } else {
                1
            };
            for _ in 0..repeats {
                path.push(PathStep { place, visit: t });
            }
        }
    }
    path
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = spec.descriptor_dim;
    let mut places: Vec<Vec<Vec<f32>>> = (0..spec.place_count)
        .map(|_| (0..spec.features_per_place).map(|_| unit_vector(&mut rng, dim)).collect())
        .collect();
    let common: Vec<Vec<f32>> = (0..spec.common_pool).map(|_| unit_vector(&mut rng, dim)).collect();
    let path = build_path(spec, &mut rng);
    let sigma = spec.noise / (dim as f64).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let drifted = (spec.drift * spec.features_per_place as f64).round() as usize;
    let shared = (spec.overlap * spec.features_per_place as f64).round() as usize;

    let mut frames = Vec::with_capacity(path.len());
    let mut gt = GroundTruth::default();
    let mut visits: Vec<Vec<Vec<u64>>> = vec![Vec::new(); spec.place_count];
    for (i, step) in path.iter().enumerate() {
        let id = i as u64;
        let seen = &mut visits[step.place];
        if seen.len() <= step.visit {
            if step.visit > 0 && drifted > 0 {
                for k in sample(&mut rng, spec.features_per_place, drifted) {
                    places[step.place][k] = unit_vector(&mut rng, dim);
                }
            }
            seen.resize(step.visit + 1, Vec::new());
        }
        let earlier: BTreeSet<u64> = seen[..step.visit].iter().flatten().copied().collect();
        if !earlier.is_empty() {
            gt.insert(id, earlier);
        }
        seen[step.visit].push(id);

        let picks = sample(&mut rng, spec.common_pool, spec.common_per_frame);
        let ahead = places.get(step.place + 1).map_or(&[][..], |p| &p[..shared]);
        let latents = places[step.place]
            .iter()
            .chain(ahead)
            .chain(picks.iter().map(|k| &common[k]));
        let mut features = Vec::new();
        for v in latents {
            let values: Vec<f32> = v
                .iter()
                .map(|x| {
                    if sigma > 0.0 {
                        (*x as f64 + noise.sample(&mut rng)) as f32
                    } else {
                        *x
                    }
                })
                .collect();
            let response = rng.random::<f32>();
            features.push(Descriptor::new(values, response)?);
        }
        frames.push(FrameRecord {
            image_id: id,
            features,
        });
    }
    Ok(World {
        frames,
        ground_truth: gt,
        path,
    })
}
