//! Concurrent dual-detector inference pipeline and log replay.
//!
//! One ingestion context feeds two detector threads over bounded queues
//! (backpressure blocks ingestion, frames are never dropped); a collector
//! thread reorders completions by ticket so verdicts always come back in
//! submission order carrying both detector scores. Features and models are
//! immutable across the hand-offs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canlog::LabeledFrame;
use crate::quant::QuantModel;
use crate::window::{FrameWindow, WindowConfig, WindowFeature};

/// Worst-case bits on the wire for a max-size CAN 2.0A data frame
/// including stuffing; used to express throughput as a line rate.
pub const BITS_PER_FRAME: u32 = 135;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("detectors accept different widths ({0} vs {1})")]
    DetectorWidthMismatch(usize, usize),
    #[error("feature width {found}, detectors expect {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("pipeline is shut down")]
    ShutDown,
    #[error("detector worker failed: {0}")]
    WorkerFailed(String),
    #[error("empty log")]
    EmptyLog,
    #[error("verdict stream lost messages: submitted {submitted}, collected {collected}")]
    VerdictLoss { submitted: usize, collected: usize },
    #[error("verdict csv: {0}")]
    VerdictCsv(String),
}

/// The two quantized detectors evaluated on every message: detector 1
/// covers DoS and fuzzing, detector 2 the spoofing modes.
#[derive(Debug, Clone)]
pub struct DetectorPair {
    pub detector_1: QuantModel,
    pub detector_2: QuantModel,
}

impl DetectorPair {
    pub fn new(detector_1: QuantModel, detector_2: QuantModel) -> Result<Self, EngineError> {
        if detector_1.input_width() != detector_2.input_width() {
            return Err(EngineError::DetectorWidthMismatch(
                detector_1.input_width(),
                detector_2.input_width(),
            ));
        }
        Ok(Self { detector_1, detector_2 })
    }

    pub fn input_width(&self) -> usize {
        self.detector_1.input_width()
    }
}

/// Per-message pipeline output, delivered in submission order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub message_index: u64,
    /// Log timestamp of the newest frame in the window.
    pub timestamp: f64,
    pub score_1: f64,
    pub score_2: f64,
    pub attack_1: bool,
    pub attack_2: bool,
    /// Seconds from feature hand-off until both detector results were ready.
    pub latency_seconds: f64,
}

/// Artificial per-detector delay hook for fault-injection tests;
/// `(detector_index, ticket)` with detector index 1 or 2.
pub type DelayFn = Arc<dyn Fn(usize, u64) -> Option<Duration> + Send + Sync>;

#[derive(Clone)]
pub struct PipelineOptions {
    pub queue_depth: usize,
    pub threshold: f64,
    pub delay: Option<DelayFn>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { queue_depth: 64, threshold: 0.5, delay: None }
    }
}

impl std::fmt::Debug for PipelineOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PipelineOptions")
            .field("queue_depth", &self.queue_depth)
            .field("threshold", &self.threshold)
            .field("delay", &self.delay.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

struct Job {
    ticket: u64,
    feature: Arc<WindowFeature>,
    t0: Instant,
}

struct Completion {
    ticket: u64,
    detector: usize,
    timestamp: f64,
    t0: Instant,
    score: f64,
    done: Instant,
}

#[derive(Default)]
struct Partial {
    timestamp: f64,
    t0: Option<Instant>,
    first: Option<(f64, Instant)>,
    second: Option<(f64, Instant)>,
}

/// Running pipeline handle; submission side.
pub struct Pipeline {
    tx1: Option<SyncSender<Job>>,
    tx2: Option<SyncSender<Job>>,
    handles: Vec<JoinHandle<()>>,
    next_ticket: u64,
    width: usize,
}

/// Ordered verdict consumer; iteration ends once the pipeline is shut down
/// and drained.
pub struct VerdictStream {
    rx: Receiver<Verdict>,
}

impl VerdictStream {
    /// Blocks for the next in-order verdict; `None` after shutdown drain.
    pub fn recv(&self) -> Option<Verdict> {
        self.rx.recv().ok()
    }

    pub fn try_recv(&self) -> Option<Verdict> {
        self.rx.try_recv().ok()
    }
}

impl Iterator for VerdictStream {
    type Item = Verdict;

    fn next(&mut self) -> Option<Verdict> {
        self.recv()
    }
}

impl Pipeline {
    /// Spawns the two detector threads and the reordering collector.
    pub fn start(pair: Arc<DetectorPair>, opts: PipelineOptions) -> (Pipeline, VerdictStream) {
        let (tx1, rx1) = mpsc::sync_channel::<Job>(opts.queue_depth.max(1));
        let (tx2, rx2) = mpsc::sync_channel::<Job>(opts.queue_depth.max(1));
        let (done_tx, done_rx) = mpsc::channel::<Completion>();
        let (verdict_tx, verdict_rx) = mpsc::channel::<Verdict>();

        let mut handles = Vec::with_capacity(3);
        for (detector, rx) in [(1usize, rx1), (2usize, rx2)] {
            let pair = Arc::clone(&pair);
            let done_tx = done_tx.clone();
            let delay = opts.delay.clone();
            handles.push(
                thread::Builder::new()
                    .name(format!("canids-detector-{detector}"))
                    .spawn(move || {
                        let model = match detector {
                            1 => &pair.detector_1,
                            _ => &pair.detector_2,
                        };
                        while let Ok(job) = rx.recv() {
                            if let Some(delay) = delay.as_ref().and_then(|f| f(detector, job.ticket))
                            {
                                thread::sleep(delay);
                            }
                            let score = model
                                .qforward(&job.feature.values)
                                .expect("feature width validated at submit");
                            let completion = Completion {
                                ticket: job.ticket,
                                detector,
                                timestamp: job.feature.newest_timestamp,
                                t0: job.t0,
                                score,
                                done: Instant::now(),
                            };
                            if done_tx.send(completion).is_err() {
                                break;
                            }
                        }
                    })
                    .expect("spawn detector thread"),
            );
        }
        drop(done_tx);

        let threshold = opts.threshold;
        handles.push(
            thread::Builder::new()
                .name("canids-collector".to_string())
                .spawn(move || {
                    let mut pending: BTreeMap<u64, Partial> = BTreeMap::new();
                    let mut next_ticket = 0u64;
                    while let Ok(c) = done_rx.recv() {
                        let slot = pending.entry(c.ticket).or_default();
                        slot.timestamp = c.timestamp;
                        slot.t0 = Some(c.t0);
                        if c.detector == 1 {
                            slot.first = Some((c.score, c.done));
                        } else {
                            slot.second = Some((c.score, c.done));
                        }
                        // Flush the in-order run of fully scored tickets.
                        while let Some(entry) = pending.get(&next_ticket) {
                            let (Some((s1, d1)), Some((s2, d2))) = (entry.first, entry.second)
                            else {
                                break;
                            };
                            let entry = pending.remove(&next_ticket).unwrap();
                            let done = if d1 >= d2 { d1 } else { d2 };
                            let latency =
                                done.duration_since(entry.t0.expect("set")).as_secs_f64();
                            let verdict = Verdict {
                                message_index: next_ticket,
                                timestamp: entry.timestamp,
                                score_1: s1,
                                score_2: s2,
                                attack_1: s1 >= threshold,
                                attack_2: s2 >= threshold,
                                latency_seconds: latency,
                            };
                            next_ticket += 1;
                            if verdict_tx.send(verdict).is_err() {
                                return;
                            }
                        }
                    }
                })
                .expect("spawn collector thread"),
        );

        let pipeline = Pipeline {
            tx1: Some(tx1),
            tx2: Some(tx2),
            handles,
            next_ticket: 0,
            width: pair.input_width(),
        };
        (pipeline, VerdictStream { rx: verdict_rx })
    }

    /// Non-blocking with respect to inference: hands the feature to both
    /// detectors and returns the ticket immediately. Blocks only on queue
    /// backpressure; never drops a message.
    pub fn submit(&mut self, feature: WindowFeature) -> Result<u64, EngineError> {
        self.submit_at(feature, Instant::now())
    }

    /// [`Pipeline::submit`] with an externally measured ingestion instant,
    /// so latency covers the full path from frame arrival.
    pub fn submit_at(&mut self, feature: WindowFeature, t0: Instant) -> Result<u64, EngineError> {
        let (Some(tx1), Some(tx2)) = (self.tx1.as_ref(), self.tx2.as_ref()) else {
            return Err(EngineError::ShutDown);
        };
        if feature.values.len() != self.width {
            return Err(EngineError::WidthMismatch {
                expected: self.width,
                found: feature.values.len(),
            });
        }
        let ticket = self.next_ticket;
        let feature = Arc::new(feature);
        let job = |ticket| Job { ticket, feature: Arc::clone(&feature), t0 };
        tx1.send(job(ticket)).map_err(|_| worker_failed("detector 1 queue closed"))?;
        tx2.send(job(ticket)).map_err(|_| worker_failed("detector 2 queue closed"))?;
        self.next_ticket += 1;
        Ok(ticket)
    }

    pub fn submitted(&self) -> u64 {
        self.next_ticket
    }

    /// Stops accepting submissions, waits for in-flight work to drain and
    /// joins the worker threads. Further `submit` calls error.
    pub fn shutdown(&mut self) -> Result<(), EngineError> {
        self.tx1 = None;
        self.tx2 = None;
        let mut failure = None;
        for handle in self.handles.drain(..) {
            if let Err(panic) = handle.join() {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "worker panicked".to_string());
                failure = Some(EngineError::WorkerFailed(msg));
            }
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn worker_failed(msg: &str) -> EngineError {
    EngineError::WorkerFailed(msg.to_string())
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Feed frames back to back as fast as the pipeline accepts them.
    MaxRate,
    /// Pace frames according to the log timestamps.
    Timestamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

/// End-to-end replay summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub mode: ReplayMode,
    pub total_messages: usize,
    /// Messages consumed during FIFO warm-up, before the first verdict.
    pub warmup_skipped: usize,
    pub verdicts: usize,
    pub wall_seconds: f64,
    pub throughput_msgs_per_sec: f64,
    /// Bit cost per message used for the line-rate figure.
    pub bits_per_frame: u32,
    pub line_rate_kbps: f64,
    pub latency: Option<LatencyStats>,
    /// File the verdict stream was exported to, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict_stream: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub window: WindowConfig,
    pub pipeline: PipelineOptions,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { window: WindowConfig::default(), pipeline: PipelineOptions::default() }
    }
}

fn percentile_us(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Drives window building, submission and ordered collection over a whole
/// log, measuring per-message latency from frame ingestion to both
/// verdicts ready.
pub fn replay(
    log: &[LabeledFrame],
    pair: Arc<DetectorPair>,
    mode: ReplayMode,
    opts: &ReplayOptions,
) -> Result<(ReplayReport, Vec<Verdict>), EngineError> {
    if log.is_empty() {
        return Err(EngineError::EmptyLog);
    }
    let mut window = FrameWindow::new(opts.window);
    let (mut pipeline, stream) = Pipeline::start(pair, opts.pipeline.clone());

    let wall_start = Instant::now();
    let log_start = log[0].timestamp;
    for frame in log {
        if mode == ReplayMode::Timestamped {
            let target = Duration::from_secs_f64((frame.timestamp - log_start).max(0.0));
            let elapsed = wall_start.elapsed();
            if target > elapsed {
                thread::sleep(target - elapsed);
            }
        }
        let t0 = Instant::now();
        if let Some(feature) = window.push(frame) {
            pipeline.submit_at(feature, t0)?;
        }
    }
    let submitted = pipeline.submitted() as usize;
    pipeline.shutdown()?;

    let verdicts: Vec<Verdict> = stream.collect();
    let wall_seconds = wall_start.elapsed().as_secs_f64();
    if verdicts.len() != submitted {
        return Err(EngineError::VerdictLoss { submitted, collected: verdicts.len() });
    }

    let latency = if verdicts.is_empty() {
        None
    } else {
        let mut us: Vec<f64> = verdicts.iter().map(|v| v.latency_seconds * 1e6).collect();
        us.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        Some(LatencyStats {
            mean_us: us.iter().sum::<f64>() / us.len() as f64,
            p50_us: percentile_us(&us, 0.50),
            p99_us: percentile_us(&us, 0.99),
            min_us: us[0],
            max_us: *us.last().unwrap(),
        })
    };
    let throughput = verdicts.len() as f64 / wall_seconds;
    let report = ReplayReport {
        mode,
        total_messages: log.len(),
        warmup_skipped: log.len() - submitted,
        verdicts: verdicts.len(),
        wall_seconds,
        throughput_msgs_per_sec: throughput,
        bits_per_frame: BITS_PER_FRAME,
        line_rate_kbps: throughput * BITS_PER_FRAME as f64 / 1000.0,
        latency,
        verdict_stream: None,
    };
    Ok((report, verdicts))
}

/// Writes the verdict stream as CSV with a header row.
pub fn write_verdicts_csv<W: Write>(mut w: W, verdicts: &[Verdict]) -> std::io::Result<()> {
    writeln!(w, "message_index,timestamp,score_1,score_2,attack_1,attack_2,latency_us")?;
    for v in verdicts {
        writeln!(
            w,
            "{},{:.6},{},{},{},{},{:.3}",
            v.message_index,
            v.timestamp,
            v.score_1,
            v.score_2,
            v.attack_1 as u8,
            v.attack_2 as u8,
            v.latency_seconds * 1e6
        )?;
    }
    Ok(())
}

pub fn write_verdicts_csv_file(path: &Path, verdicts: &[Verdict]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_verdicts_csv(&mut w, verdicts)?;
    w.flush()
}

/// Reads back a verdict CSV produced by [`write_verdicts_csv`].
pub fn read_verdicts_csv_file(path: &Path) -> Result<Vec<Verdict>, EngineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EngineError::VerdictCsv(format!("read {}: {e}", path.display())))?;
    let bad = |line: usize, what: &str| {
        EngineError::VerdictCsv(format!("{}:{line}: malformed ({what})", path.display()))
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(idx + 1, "field count"));
        }
        let parse_f = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(idx + 1, "number"));
        out.push(Verdict {
            message_index: fields[0]
                .trim()
                .parse()
                .map_err(|_| bad(idx + 1, "message index"))?,
            timestamp: parse_f(fields[1])?,
            score_1: parse_f(fields[2])?,
            score_2: parse_f(fields[3])?,
            attack_1: fields[4].trim() == "1",
            attack_2: fields[5].trim() == "1",
            latency_seconds: parse_f(fields[6])? / 1e6,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canlog::{generate_synthetic_log, AttackKind, Label, SyntheticConfig};
    use crate::nn::{ModelSpec, MlpModel};
    use crate::quant::{calibrate, quantize, CalibrationSet};
    use crate::window::windows_of;

    fn tiny_detector(width: usize, seed: u64) -> QuantModel {
        let mut spec = ModelSpec::with_units(vec![width, 6, 1]);
        spec.batchnorm = false;
        spec.dropout_rate = 0.0;
        let model = MlpModel::init(spec, seed).unwrap();
        let windows = fake_features(64, width, seed ^ 1);
        let calib = CalibrationSet::from_windows(&windows, 64).unwrap();
        let scales = calibrate(&model, &calib).unwrap();
        quantize(&model, &scales, None).unwrap()
    }

    fn fake_features(n: usize, width: usize, seed: u64) -> Vec<WindowFeature> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| WindowFeature {
                values: (0..width).map(|_| rng.gen::<i8>()).collect(),
                label: Label::Normal,
                newest_timestamp: i as f64,
            })
            .collect()
    }

    fn pair(width: usize) -> Arc<DetectorPair> {
        Arc::new(DetectorPair::new(tiny_detector(width, 3), tiny_detector(width, 4)).unwrap())
    }

    #[test]
    fn tickets_are_sequential_from_zero() {
        let (mut pipeline, stream) = Pipeline::start(pair(8), PipelineOptions::default());
        let features = fake_features(100, 8, 9);
        for (i, f) in features.into_iter().enumerate() {
            assert_eq!(pipeline.submit(f).unwrap(), i as u64);
        }
        pipeline.shutdown().unwrap();
        assert_eq!(stream.count(), 100);
    }

    #[test]
    fn submit_after_shutdown_errors() {
        let (mut pipeline, _stream) = Pipeline::start(pair(8), PipelineOptions::default());
        pipeline.shutdown().unwrap();
        let f = fake_features(1, 8, 0).pop().unwrap();
        assert!(matches!(pipeline.submit(f), Err(EngineError::ShutDown)));
    }

    #[test]
    fn single_submission_yields_index_zero() {
        let (mut pipeline, stream) = Pipeline::start(pair(8), PipelineOptions::default());
        pipeline.submit(fake_features(1, 8, 1).pop().unwrap()).unwrap();
        pipeline.shutdown().unwrap();
        let verdicts: Vec<Verdict> = stream.collect();
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].message_index, 0);
    }

    #[test]
    fn submit_rejects_wrong_width() {
        let (mut pipeline, _stream) = Pipeline::start(pair(8), PipelineOptions::default());
        let f = fake_features(1, 5, 1).pop().unwrap();
        assert!(matches!(pipeline.submit(f), Err(EngineError::WidthMismatch { .. })));
    }

    #[test]
    fn scores_match_sequential_oracle() {
        let detectors = pair(8);
        let features = fake_features(64, 8, 5);
        let (mut pipeline, stream) = Pipeline::start(Arc::clone(&detectors), PipelineOptions::default());
        for f in features.clone() {
            pipeline.submit(f).unwrap();
        }
        pipeline.shutdown().unwrap();
        for (v, f) in stream.zip(&features) {
            assert_eq!(v.score_1.to_bits(), detectors.detector_1.qforward(&f.values).unwrap().to_bits());
            assert_eq!(v.score_2.to_bits(), detectors.detector_2.qforward(&f.values).unwrap().to_bits());
            assert!((0.0..=1.0).contains(&v.score_1));
            assert!(v.latency_seconds >= 0.0);
        }
    }

    #[test]
    fn delayed_detector_preserves_order() {
        use rand::{Rng, SeedableRng};
        let delay: DelayFn = Arc::new(|detector, ticket| {
            if detector == 2 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ticket);
                Some(Duration::from_micros(rng.gen_range(0..400)))
            } else {
                None
            }
        });
        let opts = PipelineOptions { delay: Some(delay), ..PipelineOptions::default() };
        let (mut pipeline, stream) = Pipeline::start(pair(8), opts);
        for f in fake_features(300, 8, 6) {
            pipeline.submit(f).unwrap();
        }
        pipeline.shutdown().unwrap();
        let indices: Vec<u64> = stream.map(|v| v.message_index).collect();
        assert_eq!(indices, (0..300).collect::<Vec<u64>>());
    }

    #[test]
    fn detector_pair_rejects_width_mismatch() {
        assert!(matches!(
            DetectorPair::new(tiny_detector(8, 0), tiny_detector(10, 0)),
            Err(EngineError::DetectorWidthMismatch(8, 10))
        ));
    }

    fn synth_log(frames: usize) -> Vec<LabeledFrame> {
        // Generous duration, then truncate to the requested frame count.
        let cfg = SyntheticConfig::new(AttackKind::DoS, frames as f64 / 500.0 + 0.5, 0.25, 42);
        let log = generate_synthetic_log(&cfg).unwrap();
        assert!(log.len() >= frames);
        log.into_iter().take(frames).collect()
    }

    #[test]
    fn replay_empty_log_errors() {
        assert!(matches!(
            replay(&[], pair(40), ReplayMode::MaxRate, &ReplayOptions::default()),
            Err(EngineError::EmptyLog)
        ));
    }

    #[test]
    fn replay_all_warmup_yields_report_without_verdicts() {
        let log = synth_log(3);
        let (report, verdicts) =
            replay(&log, pair(40), ReplayMode::MaxRate, &ReplayOptions::default()).unwrap();
        assert_eq!(verdicts.len(), 0);
        assert_eq!(report.warmup_skipped, 3);
        assert_eq!(report.verdicts, 0);
        assert!(report.latency.is_none());
    }

    #[test]
    fn replay_is_deterministic_in_scores() {
        let log = synth_log(200);
        let detectors = pair(40);
        let run = || {
            let (_, v) = replay(
                &log,
                Arc::clone(&detectors),
                ReplayMode::MaxRate,
                &ReplayOptions::default(),
            )
            .unwrap();
            v.into_iter().map(|v| (v.message_index, v.score_1.to_bits(), v.score_2.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn replay_report_is_consistent() {
        let log = synth_log(500);
        let (report, verdicts) =
            replay(&log, pair(40), ReplayMode::MaxRate, &ReplayOptions::default()).unwrap();
        assert_eq!(report.total_messages, 500);
        assert_eq!(report.warmup_skipped, 3);
        assert_eq!(report.verdicts, 497);
        assert_eq!(verdicts.len(), 497);
        assert!(report.throughput_msgs_per_sec > 0.0);
        let lat = report.latency.unwrap();
        assert!(lat.min_us <= lat.mean_us && lat.mean_us <= lat.max_us);
        assert!(lat.p50_us <= lat.p99_us);
        assert!((report.line_rate_kbps
            - report.throughput_msgs_per_sec * BITS_PER_FRAME as f64 / 1000.0)
            .abs()
            < 1e-9);
    }

    #[test]
    fn verdict_csv_has_expected_layout() {
        let log = synth_log(10);
        let (_, verdicts) =
            replay(&log, pair(40), ReplayMode::MaxRate, &ReplayOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_verdicts_csv(&mut buf, &verdicts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "message_index,timestamp,score_1,score_2,attack_1,attack_2,latency_us"
        );
        assert_eq!(lines.count(), verdicts.len());
    }

    #[test]
    fn timestamped_replay_matches_maxrate_scores() {
        // Short log so the paced run stays fast.
        let mut log = synth_log(40);
        let start = log[0].timestamp;
        for (i, f) in log.iter_mut().enumerate() {
            f.timestamp = start + i as f64 * 1e-4;
        }
        let detectors = pair(40);
        let (_, fast) = replay(
            &log,
            Arc::clone(&detectors),
            ReplayMode::MaxRate,
            &ReplayOptions::default(),
        )
        .unwrap();
        let (_, paced) = replay(
            &log,
            Arc::clone(&detectors),
            ReplayMode::Timestamped,
            &ReplayOptions::default(),
        )
        .unwrap();
        let scores = |v: &[Verdict]| {
            v.iter().map(|v| (v.score_1.to_bits(), v.score_2.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(scores(&fast), scores(&paced));
    }

    #[test]
    fn windows_of_then_submit_equals_replay_scores() {
        let log = synth_log(120);
        let detectors = pair(40);
        let (_, verdicts) = replay(
            &log,
            Arc::clone(&detectors),
            ReplayMode::MaxRate,
            &ReplayOptions::default(),
        )
        .unwrap();
        let windows = windows_of(&log, WindowConfig::default());
        assert_eq!(windows.len(), verdicts.len());
        for (w, v) in windows.iter().zip(&verdicts) {
            assert_eq!(
                detectors.detector_1.qforward(&w.values).unwrap().to_bits(),
                v.score_1.to_bits()
            );
        }
    }
}
