//! Running a whole stream and writing the report directory.
//!
//! A report directory holds:
//!
//! - `decisions.jsonl`: one row per processed frame
//! - `bad_frames.jsonl`: rejected frames with the reason
//! - `metrics.txt`: `key = value` summary
//! - `ptime.txt`, `wm_size.txt`, `vocab_size.txt`: one value per line
//! - `config.txt`: the configuration used
//! - `ground_truth.txt`: copy of the ground truth, when one was given
//! - `sweep.txt`: written by [`write_sweep`]

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::engine::{BadFrame, Engine, FrameDecision, FrameOutcome, FrameTiming};
use crate::error::{Error, Result};
use crate::ingest::{spawn_reader, StreamReader};
use crate::ltm::CompactStats;
use crate::metrics::{
    self, location_frames, score, GroundTruth, Score, Sweep, TimingReport, PRECISION_CONVENTION,
};

/// A decision row as written to `decisions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    #[serde(flatten)]
    pub decision: FrameDecision,
    pub ptime: f64,
    pub ptime_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BadRow {
    #[serde(flatten)]
    frame: BadFrame,
    reason: String,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: EngineConfig,
    pub decisions: Vec<FrameDecision>,
    pub timings: Vec<FrameTiming>,
    pub bad_frames: Vec<BadFrame>,
    pub skipped_records: usize,
    /// Set when the run stopped early on a persistence fault.
    pub halted: Option<String>,
    pub compaction: Option<CompactStats>,
    pub ground_truth: Option<GroundTruth>,
}

impl RunReport {
    pub fn is_halted(&self) -> bool {
        self.halted.is_some()
    }

    pub fn accepted(&self) -> usize {
        self.decisions.iter().filter(|d| d.accepted.is_some()).count()
    }

    pub fn ptime(&self) -> Vec<f64> {
        self.timings.iter().map(|t| t.ptime).collect()
    }

    pub fn timing(&self) -> TimingReport {
        metrics::timing_report(&self.decisions, &self.ptime(), self.config.t_time)
    }

    pub fn score(&self) -> Option<Score> {
        let gt = self.ground_truth.as_ref()?;
        let frames = location_frames(&self.decisions);
        Some(score(&metrics::accepted_detections(&self.decisions), &frames, gt))
    }

    pub fn metrics_text(&self) -> String {
        let t = self.timing();
        let last = self.decisions.last();
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("frames", &(self.decisions.len() + self.bad_frames.len()));
        kv("processed_frames", &self.decisions.len());
        kv("bad_frames", &self.bad_frames.len());
        kv("skipped_records", &self.skipped_records);
        kv("seed", &self.config.rng_seed);
        kv("loop_closures", &self.accepted());
        kv("merged_frames", &self.decisions.iter().filter(|d| d.merged.is_some()).count());
        kv("wm_size", &last.map_or(0, |d| d.wm_size));
        kv("stm_size", &last.map_or(0, |d| d.stm_size));
        kv("ltm_size", &last.map_or(0, |d| d.ltm_size));
        kv("vocab_size", &last.map_or(0, |d| d.vocab_after));
        kv("transfer_events", &t.transfer_events);
        kv("transferred", &t.transfers.iter().sum::<usize>());
        kv("retrieved", &t.retrievals.iter().sum::<usize>());
        kv(
            "first_transfer_frame",
            &t.first_transfer.map_or("none".to_string(), |i| self.decisions[i].frame_id.to_string()),
        );
        kv("t_time", &self.config.t_time);
        kv("max_ptime", &t.max_ptime);
        kv("mean_ptime", &t.mean_ptime);
        kv("max_ptime_over_t_time", &opt(t.max_over_budget));
        kv("p99_ptime_after_first_transfer", &opt(t.p99_after_first_transfer));
        kv("mean_ptime_after_first_transfer", &opt(t.mean_after_first_transfer));
        if let Some(gt) = &self.ground_truth {
            let s = self.score().unwrap_or_else(|| unreachable!());
            kv("gt_margin", &gt.margin);
            kv("gt_loops", &s.ground_truth_loops);
            kv("detections", &s.detections);
            kv("true_positives", &s.true_positives);
            kv("precision", &s.precision);
            kv("recall", &s.recall);
            kv("precision_convention", &PRECISION_CONVENTION);
        }
        if let Some(c) = &self.compaction {
            kv("compact_rewritten_signatures", &c.rewritten_signatures);
            kv("compact_deleted_words", &c.deleted_words);
            kv("compact_cleared_remaps", &c.cleared_remaps);
        }
        kv("halted", &self.halted.as_deref().unwrap_or("no"));
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = self.decisions.iter().zip(&self.timings).map(|(d, t)| LogRow {
            decision: d.clone(),
            ptime: t.ptime,
            ptime_total: t.ptime_total,
        });
        write_jsonl(&dir.join("decisions.jsonl"), rows)?;
        let bad = self.bad_frames.iter().map(|b| BadRow {
            frame: b.clone(),
            reason: b.reason(),
        });
        write_jsonl(&dir.join("bad_frames.jsonl"), bad)?;
        let t = self.timing();
        write_series(&dir.join("ptime.txt"), &t.ptime)?;
        write_series(&dir.join("wm_size.txt"), &t.wm_size)?;
        write_series(&dir.join("vocab_size.txt"), &t.vocab_size)?;
        write_file(&dir.join("config.txt"), &self.config.to_string())?;
        write_file(&dir.join("metrics.txt"), &self.metrics_text())?;
        if let Some(gt) = &self.ground_truth {
            gt.save(&dir.join("ground_truth.txt"))?;
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".to_string(), |x| x.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_series<T: std::fmt::Display>(path: &Path, values: &[T]) -> Result<()> {
    let mut text = String::new();
    for v in values {
        let _ = writeln!(text, "{v}");
    }
    write_file(path, &text)
}

/// Feeds `frames` through `engine`. Stops at the first persistence fault
/// and returns what was produced until then.
pub fn run_frames(
    mut engine: Engine,
    frames: impl IntoIterator<Item = Result<crate::ingest::FrameRecord>>,
    ground_truth: Option<GroundTruth>,
) -> Result<RunReport> {
    let mut report = RunReport {
        config: engine.config().clone(),
        decisions: Vec::new(),
        timings: Vec::new(),
        bad_frames: Vec::new(),
        skipped_records: 0,
        halted: None,
        compaction: None,
        ground_truth,
    };
    for frame in frames {
        match engine.process(frame?) {
            Ok(FrameOutcome::Processed { decision, timing }) => {
                report.decisions.push(decision);
                report.timings.push(timing);
            }
            Ok(FrameOutcome::Bad(bad)) => report.bad_frames.push(bad),
            Err(e) if e.is_persistence() => {
                error!("halting: {e}");
                report.halted = Some(e.to_string());
                return Ok(report);
            }
            Err(e) => return Err(e),
        }
    }
    match engine.shutdown() {
        Ok(stats) => report.compaction = Some(stats),
        Err(e) if e.is_persistence() => report.halted = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(report)
}

/// Runs a stream file with a read-ahead thread.
pub fn run_stream(
    cfg: EngineConfig,
    stream: &Path,
    ground_truth: Option<GroundTruth>,
) -> Result<RunReport> {
    cfg.validate()?;
    let reader = StreamReader::open(stream, cfg.descriptor_dim)?;
    let engine = Engine::new(cfg)?;
    let (rx, handle) = spawn_reader(reader);
    let mut report = run_frames(engine, rx.iter(), ground_truth)?;
    drop(rx);
    report.skipped_records = handle.join().unwrap_or(0);
    info!(
        "{} frames, {} loop closures, {} skipped records",
        report.decisions.len(),
        report.accepted(),
        report.skipped_records
    );
    Ok(report)
}

/// Everything `sweep` needs from a written report.
#[derive(Debug, Clone)]
pub struct SavedRun {
    pub decisions: Vec<FrameDecision>,
    pub ground_truth: GroundTruth,
}

pub fn read_decisions(path: &Path) -> Result<Vec<FrameDecision>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: LogRow = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(row.decision);
    }
    Ok(out)
}

fn metrics_value(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

pub fn load_run(dir: &Path) -> Result<SavedRun> {
    let decisions = read_decisions(&dir.join("decisions.jsonl"))?;
    let metrics_path = dir.join("metrics.txt");
    let metrics = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let margin = match metrics_value(&metrics, "gt_margin") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("bad gt_margin '{v}'")))?,
        None => return Err(Error::Config("report has no ground truth".into())),
    };
    let ground_truth = GroundTruth::load(&dir.join("ground_truth.txt"), margin)?;
    Ok(SavedRun {
        decisions,
        ground_truth,
    })
}

pub fn sweep_text(sweep: &Sweep) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {PRECISION_CONVENTION}");
    let _ = writeln!(out, "approximate = {}", sweep.approximate);
    match &sweep.best {
        Some(b) => {
            let _ = writeln!(out, "best_t_loop = {}", b.t_loop);
            let _ = writeln!(out, "best_recall = {}", b.score.recall);
        }
        None => {
            let _ = writeln!(out, "best_t_loop = none");
        }
    }
    let _ = writeln!(out, "# t_loop precision recall detections true_positives matches_run");
    for p in &sweep.points {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            p.t_loop,
            p.score.precision,
            p.score.recall,
            p.score.detections,
            p.score.true_positives,
            p.matches_run
        );
    }
    out
}

/// Re-thresholds a written report and stores `sweep.txt` next to it.
pub fn write_sweep(dir: &Path, from: f64, to: f64, step: f64) -> Result<Sweep> {
    let run = load_run(dir)?;
    let ts = metrics::thresholds(from, to, step)?;
    let sweep = metrics::sweep(&run.decisions, &run.ground_truth, &ts);
    write_file(&dir.join("sweep.txt"), &sweep_text(&sweep))?;
    Ok(sweep)
}
