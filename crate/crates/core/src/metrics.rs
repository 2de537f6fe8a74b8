//! Ground truth, precision/recall and timing summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::engine::FrameDecision;
use crate::error::{Error, Result};
use crate::ids::LocationId;

pub const DEFAULT_MARGIN: u64 = 10;

/// Printed next to every precision figure.
pub const PRECISION_CONVENTION: &str = "precision is 1.0 when there are no detections";

/// For each frame, the earlier frames it truly closes a loop with.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    matches: BTreeMap<u64, BTreeSet<u64>>,
    /// Tolerance in frames around a true match.
    pub margin: u64,
}

impl Default for GroundTruth {
    fn default() -> Self {
        Self {
            matches: BTreeMap::new(),
            margin: DEFAULT_MARGIN,
        }
    }
}

impl GroundTruth {
    pub fn with_margin(mut self, margin: u64) -> Self {
        self.margin = margin;
        self
    }

    pub fn insert(&mut self, frame: u64, earlier: impl IntoIterator<Item = u64>) {
        let set = self.matches.entry(frame).or_default();
        set.extend(earlier.into_iter().filter(|e| *e < frame));
        if set.is_empty() {
            self.matches.remove(&frame);
        }
    }

    pub fn matches(&self, frame: u64) -> Option<&BTreeSet<u64>> {
        self.matches.get(&frame)
    }

    /// Frames that have at least one true loop closure.
    pub fn loop_count(&self) -> usize {
        self.matches.len()
    }

    pub fn frames(&self) -> impl Iterator<Item = (u64, &BTreeSet<u64>)> {
        self.matches.iter().map(|(k, v)| (*k, v))
    }

    /// Parses `frame_id: id,id,...` lines.
    pub fn parse(text: &str, margin: u64) -> Result<Self> {
        let mut gt = GroundTruth::default().with_margin(margin);
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("ground truth line {}: '{line}'", n + 1));
            let (frame, rest) = line.split_once(':').ok_or_else(bad)?;
            let frame: u64 = frame.trim().parse().map_err(|_| bad())?;
            let mut ids = Vec::new();
            for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let id: u64 = part.parse().map_err(|_| bad())?;
                if id >= frame {
                    return Err(bad());
                }
                ids.push(id);
            }
            gt.insert(frame, ids);
        }
        Ok(gt)
    }

    pub fn load(path: &Path, margin: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, margin)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (frame, ids) in &self.matches {
            let list: Vec<String> = ids.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{frame}: {}", list.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Frames that make up each location, following STM merges.
pub fn location_frames(decisions: &[FrameDecision]) -> BTreeMap<LocationId, Vec<u64>> {
    let mut map: BTreeMap<LocationId, Vec<u64>> = BTreeMap::new();
    for d in decisions {
        let mut frames = d.merged.and_then(|m| map.remove(&m)).unwrap_or_default();
        frames.push(d.frame_id);
        map.entry(d.location).or_default().extend(frames);
    }
    map
}

pub fn is_true_positive(
    frame: u64,
    location: LocationId,
    frames: &BTreeMap<LocationId, Vec<u64>>,
    gt: &GroundTruth,
) -> bool {
    let (Some(truth), Some(members)) = (gt.matches(frame), frames.get(&location)) else {
        return false;
    };
    members.iter().any(|&m| {
        truth
            .range(m.saturating_sub(gt.margin)..=m.saturating_add(gt.margin))
            .next()
            .is_some()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub detections: usize,
    pub true_positives: usize,
    pub ground_truth_loops: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Scores `(frame, location)` detections. Each is judged on its own.
pub fn score(
    detections: &[(u64, LocationId)],
    frames: &BTreeMap<LocationId, Vec<u64>>,
    gt: &GroundTruth,
) -> Score {
    let mut recalled = BTreeSet::new();
    let mut tp = 0;
    for &(f, loc) in detections {
        if is_true_positive(f, loc, frames, gt) {
            tp += 1;
            recalled.insert(f);
        }
    }
    let precision = if detections.is_empty() {
        1.0
    } else {
        tp as f64 / detections.len() as f64
    };
    let recall = if gt.loop_count() == 0 {
        0.0
    } else {
        recalled.len() as f64 / gt.loop_count() as f64
    };
    Score {
        detections: detections.len(),
        true_positives: tp,
        ground_truth_loops: gt.loop_count(),
        precision,
        recall,
    }
}

pub fn accepted_detections(decisions: &[FrameDecision]) -> Vec<(u64, LocationId)> {
    decisions
        .iter()
        .filter_map(|d| d.accepted.map(|a| (d.frame_id, a)))
        .collect()
}

/// Detections had the run used `t_loop`: the best hypothesis of every frame
/// whose new-place probability falls under it.
pub fn detections_at(decisions: &[FrameDecision], t_loop: f64) -> Vec<(u64, LocationId)> {
    decisions
        .iter()
        .filter(|d| d.p_new < t_loop)
        .filter_map(|d| d.highest.map(|h| (d.frame_id, h)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub t_loop: f64,
    pub score: Score,
    /// The re-thresholded detections equal the ones the run accepted.
    pub matches_run: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub points: Vec<CurvePoint>,
    /// Some threshold would have changed acceptance decisions, so a full
    /// re-run could differ from the re-thresholded curve.
    pub approximate: bool,
    /// Smallest threshold reaching the highest recall at full precision.
    pub best: Option<CurvePoint>,
}

pub fn thresholds(from: f64, to: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !from.is_finite() || !to.is_finite() || to < from {
        return Err(Error::Config(format!("bad sweep range {from}..{to} by {step}")));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    // Rounded so that 0.1-style steps print cleanly.
    Ok((0..=n)
        .map(|i| ((from + step * i as f64) * 1e12).round() / 1e12)
        .collect())
}

pub fn sweep(decisions: &[FrameDecision], gt: &GroundTruth, thresholds: &[f64]) -> Sweep {
    let frames = location_frames(decisions);
    let run: BTreeSet<(u64, LocationId)> = accepted_detections(decisions).into_iter().collect();
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let det = detections_at(decisions, t);
        let matches_run = det.iter().copied().collect::<BTreeSet<_>>() == run;
        points.push(CurvePoint {
            t_loop: t,
            score: score(&det, &frames, gt),
            matches_run,
        });
    }
    let approximate = points.iter().any(|p| !p.matches_run);
    let mut best: Option<CurvePoint> = None;
    for p in points.iter().filter(|p| p.score.precision == 1.0) {
        if best.as_ref().is_none_or(|b| p.score.recall > b.score.recall) {
            best = Some(p.clone());
        }
    }
    Sweep {
        points,
        approximate,
        best,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingReport {
    pub ptime: Vec<f64>,
    pub wm_size: Vec<usize>,
    pub vocab_size: Vec<usize>,
    pub transfers: Vec<usize>,
    pub retrievals: Vec<usize>,
    /// Index into the series of the first frame that transferred.
    pub first_transfer: Option<usize>,
    pub transfer_events: usize,
    pub max_ptime: f64,
    pub mean_ptime: f64,
    /// Largest pTime over the budget; `None` for an unbounded budget.
    pub max_over_budget: Option<f64>,
    pub p99_after_first_transfer: Option<f64>,
    pub mean_after_first_transfer: Option<f64>,
}

/// Nearest-rank percentile of `values`, `q` in (0, 1].
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub fn timing_report(decisions: &[FrameDecision], ptime: &[f64], t_time: f64) -> TimingReport {
    let first_transfer = decisions.iter().position(|d| !d.transferred.is_empty());
    let max_ptime = ptime.iter().copied().fold(0.0, f64::max);
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let after: &[f64] = first_transfer.map_or(&[], |i| &ptime[(i + 1).min(ptime.len())..]);
    TimingReport {
        ptime: ptime.to_vec(),
        wm_size: decisions.iter().map(|d| d.wm_size).collect(),
        vocab_size: decisions.iter().map(|d| d.vocab_after).collect(),
        transfers: decisions.iter().map(|d| d.transferred.len()).collect(),
        retrievals: decisions.iter().map(|d| d.retrieved.len()).collect(),
        first_transfer,
        transfer_events: decisions.iter().filter(|d| !d.transferred.is_empty()).count(),
        max_ptime,
        mean_ptime: mean(ptime).unwrap_or(0.0),
        max_over_budget: t_time.is_finite().then(|| max_ptime / t_time),
        p99_after_first_transfer: percentile(after, 0.99),
        mean_after_first_transfer: mean(after),
    }
}
