//! Stage pipeline: frame source, one detection stage per door, a featurize
//! stage and the matcher, joined by bounded FIFO channels.
//!
//! ```text
//! source ─┬─> detect(front) ─┐
//!         └─> detect(rear)  ─┴─> featurize ──> match ──> [viz sink]
//! ```
//!
//! Sends block when a channel is full; nothing is dropped. Stop boundaries
//! are explicit messages. The featurize stage forwards `StopBoundary(s)` once
//! both doors have delivered theirs, and the match stage only then processes
//! stop `s`: boardings first, then alightings, each in passenger-id order so
//! the ledger does not depend on how the two doors interleave. The match
//! stage is the only owner of the gallery index.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::Serialize;
use transit_reid_core::behavior::{classify, Behavior, Roi, Trajectory};
use transit_reid_core::hsdm::{MatchLedger, Matcher, QueryRecord};
use transit_reid_core::sqfa::aggregate_tracklet;
use transit_reid_core::vindex::{EntryMeta, FlatIndex};
use transit_reid_core::{Door, EngineConfig, FeatureVector, PassengerId, Tracklet};

use crate::error::{AppError, Result};
use crate::scenario::{list_dir, read_stop_file, StopFile, Track};

const DOORS: [Door; 2] = [Door::Front, Door::Rear];

#[derive(Debug, Clone)]
pub enum StageMessage {
    Frame {
        door: Door,
        index: u64,
        stop: u32,
        track: Track,
    },
    Detection {
        door: Door,
        stop: u32,
        behavior: Behavior,
        track: Track,
    },
    Featurized {
        door: Door,
        stop: u32,
        id: PassengerId,
        behavior: Behavior,
        vector: FeatureVector,
        featurize_secs: f64,
    },
    StopBoundary(u32),
    Shutdown,
}

/// Time source owned by one stage.
pub trait Clock: Send {
    fn now(&self) -> f64;
    fn sleep(&self, secs: f64);
}

pub struct RealClock {
    start: Instant,
}

impl Default for RealClock {
    fn default() -> Self {
        Self { start: Instant::now() }
    }
}

impl Clock for RealClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn sleep(&self, secs: f64) {
        std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
    }
}

/// Advances only when slept on, so timings are exact and tests do not wait.
#[derive(Default)]
pub struct VirtualClock {
    now: Cell<f64>,
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        self.now.get()
    }

    fn sleep(&self, secs: f64) {
        self.now.set(self.now.get() + secs.max(0.0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockKind {
    #[default]
    Real,
    Virtual,
}

impl ClockKind {
    pub fn make(self) -> Box<dyn Clock> {
        match self {
            ClockKind::Real => Box::new(RealClock::default()),
            ClockKind::Virtual => Box::new(VirtualClock::default()),
        }
    }
}

pub trait FrameSource: Send {
    /// The next stop's tracks, or `None` when the route is over.
    fn next_stop(&mut self) -> Option<Result<StopFile>>;
}

/// Stops held in memory, e.g. a simulated route.
pub struct MemorySource {
    stops: VecDeque<StopFile>,
}

impl MemorySource {
    pub fn new(stops: impl IntoIterator<Item = StopFile>) -> Self {
        Self {
            stops: stops.into_iter().collect(),
        }
    }
}

impl FrameSource for MemorySource {
    fn next_stop(&mut self) -> Option<Result<StopFile>> {
        self.stops.pop_front().map(Ok)
    }
}

/// Reads `stop_*.json` files lazily, in name order.
pub struct DirSource {
    files: VecDeque<PathBuf>,
}

impl DirSource {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            files: list_dir(dir)?.into(),
        })
    }
}

impl FrameSource for DirSource {
    fn next_stop(&mut self) -> Option<Result<StopFile>> {
        self.files.pop_front().map(|p| read_stop_file(&p))
    }
}

pub trait Detector: Sync {
    fn detect(&self, door: Door, trajectory: &Trajectory) -> Result<Behavior>;
}

/// Classifies trajectories against fixed door and inside regions.
pub struct RoiDetector {
    pub door: Roi,
    pub inside: Roi,
}

impl Detector for RoiDetector {
    fn detect(&self, _door: Door, trajectory: &Trajectory) -> Result<Behavior> {
        Ok(classify(trajectory, &self.door, &self.inside)?)
    }
}

pub trait Featurizer: Send {
    fn featurize(&mut self, tracklet: &Tracklet, clock: &dyn Clock) -> Result<FeatureVector>;
}

/// SQFA aggregation of the tracklet's embeddings.
pub struct SqfaFeaturizer {
    pub cfg: EngineConfig,
}

impl Featurizer for SqfaFeaturizer {
    fn featurize(&mut self, tracklet: &Tracklet, _clock: &dyn Clock) -> Result<FeatureVector> {
        Ok(aggregate_tracklet(tracklet, &self.cfg)?)
    }
}

/// Wraps a featurizer with a fixed per-passenger latency, standing in for
/// network inference.
pub struct DelayedFeaturizer<F> {
    pub inner: F,
    pub latency_secs: f64,
}

impl<F: Featurizer> Featurizer for DelayedFeaturizer<F> {
    fn featurize(&mut self, tracklet: &Tracklet, clock: &dyn Clock) -> Result<FeatureVector> {
        clock.sleep(self.latency_secs);
        self.inner.featurize(tracklet, clock)
    }
}

#[derive(Debug, Default)]
struct Counters {
    sent: AtomicU64,
    received: AtomicU64,
    blocked: AtomicU64,
    high_water: AtomicUsize,
}

/// Sender that counts messages, blocking sends and queue depth.
struct Tx<T> {
    inner: Sender<T>,
    counters: Arc<Counters>,
}

impl<T> Clone for Tx<T> {
    fn clone(&self) -> Self {
        Self {
            inner: self.inner.clone(),
            counters: self.counters.clone(),
        }
    }
}

impl<T> Tx<T> {
    /// Blocks while the channel is full. Fails only if the receiver is gone.
    fn send(&self, msg: T) -> std::result::Result<(), ()> {
        match self.inner.try_send(msg) {
            Ok(()) => {}
            Err(TrySendError::Full(msg)) => {
                self.counters.blocked.fetch_add(1, Ordering::Relaxed);
                self.inner.send(msg).map_err(|_| ())?;
            }
            Err(TrySendError::Disconnected(_)) => return Err(()),
        }
        self.counters.sent.fetch_add(1, Ordering::Relaxed);
        self.counters.high_water.fetch_max(self.inner.len(), Ordering::Relaxed);
        Ok(())
    }
}

struct Rx<T> {
    inner: Receiver<T>,
    counters: Arc<Counters>,
}

impl<T> Rx<T> {
    /// `None` once every sender is gone and the queue is empty.
    fn recv(&self) -> Option<T> {
        let msg = self.inner.recv().ok()?;
        self.counters.received.fetch_add(1, Ordering::Relaxed);
        Some(msg)
    }
}

struct Probe {
    name: String,
    capacity: usize,
    counters: Arc<Counters>,
}

impl Probe {
    fn stats(&self) -> ChannelStats {
        let c = &self.counters;
        ChannelStats {
            channel: self.name.clone(),
            capacity: self.capacity,
            sent: c.sent.load(Ordering::Relaxed),
            received: c.received.load(Ordering::Relaxed),
            blocked_sends: c.blocked.load(Ordering::Relaxed),
            high_water: c.high_water.load(Ordering::Relaxed),
        }
    }
}

fn channel<T>(name: &str, capacity: usize) -> (Tx<T>, Rx<T>, Probe) {
    let (s, r) = bounded(capacity);
    let counters = Arc::new(Counters::default());
    (
        Tx {
            inner: s,
            counters: counters.clone(),
        },
        Rx {
            inner: r,
            counters: counters.clone(),
        },
        Probe {
            name: name.to_string(),
            capacity,
            counters,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub channel: String,
    pub capacity: usize,
    pub sent: u64,
    pub received: u64,
    pub blocked_sends: u64,
    pub high_water: usize,
}

impl ChannelStats {
    pub fn in_flight(&self) -> u64 {
        self.sent - self.received
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StopTiming {
    pub stop_id: u32,
    pub boarding: usize,
    pub alighting: usize,
    /// Total featurize time of the stop's passengers, seconds.
    pub t_f: f64,
    /// Total match time of the stop's alightings; empty when nobody alighted.
    pub t_m: Option<f64>,
    pub t_mean_per_passenger: Option<f64>,
    pub budget_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub budget_secs: f64,
    pub stops: Vec<StopTiming>,
    pub channels: Vec<ChannelStats>,
    /// Tracks detection classified as neither boarding nor alighting.
    pub discarded: u64,
}

impl TimingReport {
    pub fn any_violation(&self) -> bool {
        self.stops.iter().any(|s| s.budget_violated)
    }

    pub fn violations(&self) -> Vec<u32> {
        self.stops.iter().filter(|s| s.budget_violated).map(|s| s.stop_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub capacity: usize,
    pub budget_secs: f64,
    pub clock: ClockKind,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            capacity: 64,
            budget_secs: 30.0,
            clock: ClockKind::Real,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: TimingReport,
    pub ledger: MatchLedger,
    pub index: FlatIndex,
}

/// Events written by the optional visualization sink, one JSON line each.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum VizEvent {
    Boarded { stop: u32, id: PassengerId, door: Door },
    Alighted { stop: u32, record: QueryRecord },
    StopDone { timing: StopTiming },
    Finished { hot: usize, unmatched: usize },
}

/// First failure wins; later ones are consequences.
#[derive(Default)]
struct Abort {
    flag: AtomicBool,
    first: Mutex<Option<(&'static str, String)>>,
}

impl Abort {
    fn fail(&self, stage: &'static str, cause: impl ToString) {
        let mut first = self.first.lock().unwrap_or_else(|e| e.into_inner());
        if first.is_none() {
            *first = Some((stage, cause.to_string()));
        }
        self.flag.store(true, Ordering::SeqCst);
    }

    fn is_set(&self) -> bool {
        self.flag.load(Ordering::SeqCst)
    }

    fn take(&self) -> Option<AppError> {
        let first = self.first.lock().unwrap_or_else(|e| e.into_inner()).take();
        first.map(|(stage, cause)| AppError::StageFailure { stage, cause })
    }
}

fn drain<T>(rx: &Rx<T>) {
    while rx.recv().is_some() {}
}

fn run_source(mut source: impl FrameSource, out: [Tx<StageMessage>; 2], abort: &Abort) {
    let mut index = [0u64; 2];
    let mut last = 0u32;
    while let Some(next) = source.next_stop() {
        if abort.is_set() {
            return;
        }
        let stop = match next {
            Ok(s) if s.stop_id > last => s,
            Ok(s) => return abort.fail("source", format!("stop {} is out of order", s.stop_id)),
            Err(e) => return abort.fail("source", e),
        };
        last = stop.stop_id;
        for (d, door) in DOORS.into_iter().enumerate() {
            for track in stop.tracks(door) {
                let msg = StageMessage::Frame {
                    door,
                    index: index[d],
                    stop: stop.stop_id,
                    track: track.clone(),
                };
                index[d] += 1;
                if out[d].send(msg).is_err() {
                    return;
                }
            }
            if out[d].send(StageMessage::StopBoundary(stop.stop_id)).is_err() {
                return;
            }
        }
    }
    for tx in &out {
        let _ = tx.send(StageMessage::Shutdown);
    }
}

fn run_detect(
    rx: Rx<StageMessage>,
    tx: Tx<StageMessage>,
    detector: &dyn Detector,
    discarded: &AtomicU64,
    abort: &Abort,
) {
    while let Some(msg) = rx.recv() {
        let out = match msg {
            StageMessage::Frame { door, stop, track, .. } => match detector.detect(door, &track.trajectory) {
                Ok(behavior) if behavior.is_passage() => StageMessage::Detection {
                    door,
                    stop,
                    behavior,
                    track,
                },
                Ok(_) => {
                    discarded.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                Err(e) => {
                    abort.fail("detect", format!("track {}: {e}", track.id));
                    return drain(&rx);
                }
            },
            m @ (StageMessage::StopBoundary(_) | StageMessage::Shutdown) => m,
            other => {
                abort.fail("detect", format!("unexpected message {other:?}"));
                return drain(&rx);
            }
        };
        let last = matches!(out, StageMessage::Shutdown);
        if tx.send(out).is_err() || last {
            return;
        }
    }
}

fn run_featurize(
    rx: Rx<StageMessage>,
    tx: Tx<StageMessage>,
    mut featurizer: impl Featurizer,
    clock: Box<dyn Clock>,
    abort: &Abort,
) {
    let mut boundaries: BTreeMap<u32, usize> = BTreeMap::new();
    let mut shutdowns = 0;
    while let Some(msg) = rx.recv() {
        let out = match msg {
            StageMessage::Detection {
                door,
                stop,
                behavior,
                track,
            } => {
                let t0 = clock.now();
                match featurizer.featurize(&track.tracklet, clock.as_ref()) {
                    Ok(vector) => StageMessage::Featurized {
                        door,
                        stop,
                        id: track.id,
                        behavior,
                        vector,
                        featurize_secs: clock.now() - t0,
                    },
                    Err(e) => {
                        abort.fail("featurize", format!("track {}: {e}", track.id));
                        return drain(&rx);
                    }
                }
            }
            StageMessage::StopBoundary(s) => {
                let seen = boundaries.entry(s).or_default();
                *seen += 1;
                if *seen < DOORS.len() {
                    continue;
                }
                boundaries.remove(&s);
                StageMessage::StopBoundary(s)
            }
            StageMessage::Shutdown => {
                shutdowns += 1;
                if shutdowns < DOORS.len() {
                    continue;
                }
                StageMessage::Shutdown
            }
            other => {
                abort.fail("featurize", format!("unexpected message {other:?}"));
                return drain(&rx);
            }
        };
        let last = matches!(out, StageMessage::Shutdown);
        if tx.send(out).is_err() || last {
            return;
        }
    }
}

#[derive(Default)]
struct StopBuffer {
    boarding: Vec<(PassengerId, Door, FeatureVector)>,
    alighting: Vec<(PassengerId, FeatureVector)>,
    t_f: f64,
}

struct MatchStage<'a> {
    matcher: Matcher,
    clock: Box<dyn Clock>,
    budget: f64,
    viz: Option<Tx<VizEvent>>,
    abort: &'a Abort,
    stops: Vec<StopTiming>,
    finished: bool,
}

impl MatchStage<'_> {
    fn emit(&mut self, event: VizEvent) {
        if let Some(tx) = &self.viz {
            if tx.send(event).is_err() {
                self.viz = None;
            }
        }
    }

    fn close_stop(&mut self, stop: u32, mut buf: StopBuffer) -> Result<()> {
        buf.boarding.sort_by_key(|b| b.0);
        buf.alighting.sort_by_key(|a| a.0);
        let (boarding, alighting) = (buf.boarding.len(), buf.alighting.len());
        for (id, door, vector) in buf.boarding {
            self.matcher.board(
                id,
                vector,
                EntryMeta {
                    boarding_stop: stop,
                    door,
                },
            )?;
            self.emit(VizEvent::Boarded { stop, id, door });
        }
        let t0 = self.clock.now();
        let mut records = Vec::with_capacity(alighting);
        for (id, vector) in &buf.alighting {
            records.push(self.matcher.alight(*id, vector, stop)?);
        }
        let t_m = (alighting > 0).then(|| self.clock.now() - t0);
        for record in records {
            self.emit(VizEvent::Alighted { stop, record });
        }
        let passengers = boarding + alighting;
        let total = buf.t_f + t_m.unwrap_or(0.0);
        let timing = StopTiming {
            stop_id: stop,
            boarding,
            alighting,
            t_f: buf.t_f,
            t_m,
            t_mean_per_passenger: (passengers > 0).then(|| total / passengers as f64),
            budget_violated: total > self.budget,
        };
        self.stops.push(timing.clone());
        self.emit(VizEvent::StopDone { timing });
        Ok(())
    }

    fn run(&mut self, rx: Rx<StageMessage>) {
        let mut buffers: BTreeMap<u32, StopBuffer> = BTreeMap::new();
        while let Some(msg) = rx.recv() {
            let step = match msg {
                StageMessage::Featurized {
                    door,
                    stop,
                    id,
                    behavior,
                    vector,
                    featurize_secs,
                } => {
                    let buf = buffers.entry(stop).or_default();
                    buf.t_f += featurize_secs;
                    match behavior {
                        Behavior::Boarding => buf.boarding.push((id, door, vector)),
                        Behavior::Alighting => buf.alighting.push((id, vector)),
                        _ => {}
                    }
                    Ok(())
                }
                StageMessage::StopBoundary(s) => {
                    let buf = buffers.remove(&s).unwrap_or_default();
                    self.close_stop(s, buf)
                }
                StageMessage::Shutdown => {
                    let done = self.matcher.finish().map_err(AppError::from);
                    if done.is_ok() {
                        let ledger = self.matcher.ledger();
                        let (hot, unmatched) = (ledger.count_hot(), ledger.count_unmatched());
                        self.emit(VizEvent::Finished { hot, unmatched });
                        self.finished = true;
                    }
                    done
                }
                other => Err(AppError::Usage(format!("unexpected message {other:?}"))),
            };
            if let Err(e) = step {
                self.abort.fail("match", e);
                return drain(&rx);
            }
            if self.finished {
                return;
            }
        }
    }
}

fn run_viz(rx: Rx<VizEvent>, mut out: Box<dyn Write + Send>, abort: &Abort) {
    while let Some(event) = rx.recv() {
        let line = serde_json::to_string(&event).expect("events serialize");
        if let Err(e) = writeln!(out, "{line}") {
            abort.fail("viz", e);
            return drain(&rx);
        }
    }
    if let Err(e) = out.flush() {
        abort.fail("viz", e);
    }
}

fn join_stage(h: std::thread::ScopedJoinHandle<'_, ()>, stage: &'static str, abort: &Abort) {
    if h.join().is_err() {
        abort.fail(stage, "stage panicked");
    }
}

/// Runs a route through the stage pipeline.
///
/// Budget violations are recorded per stop, not treated as errors. Any stage
/// failure stops the source, lets the other stages drain, and is returned as
/// `StageFailure`.
pub fn run_pipeline(
    source: impl FrameSource,
    detector: &dyn Detector,
    featurizer: impl Featurizer,
    matcher: Matcher,
    opts: &PipelineOptions,
    viz: Option<Box<dyn Write + Send>>,
) -> Result<PipelineOutcome> {
    if opts.capacity == 0 {
        return Err(AppError::Usage("channel capacity must be at least 1".into()));
    }
    if !(opts.budget_secs >= 0.0) {
        return Err(AppError::Usage("budget must be non-negative".into()));
    }
    let cap = opts.capacity;
    let (front_tx, front_rx, front_probe) = channel("source->detect_front", cap);
    let (rear_tx, rear_rx, rear_probe) = channel("source->detect_rear", cap);
    let (det_tx, det_rx, det_probe) = channel("detect->featurize", cap);
    let (feat_tx, feat_rx, feat_probe) = channel("featurize->match", cap);
    let (viz_tx, viz_rx, viz_probe) = channel("match->viz", cap);
    let with_viz = viz.is_some();
    let viz_tx = with_viz.then_some(viz_tx);

    let abort = Abort::default();
    let discarded = AtomicU64::new(0);
    let mut stage = MatchStage {
        matcher,
        clock: opts.clock.make(),
        budget: opts.budget_secs,
        viz: viz_tx,
        abort: &abort,
        stops: Vec::new(),
        finished: false,
    };

    std::thread::scope(|s| {
        let abort = &abort;
        let discarded = &discarded;
        let src = s.spawn(move || run_source(source, [front_tx, rear_tx], abort));
        let det_tx2 = det_tx.clone();
        let front = s.spawn(move || run_detect(front_rx, det_tx, detector, discarded, abort));
        let rear = s.spawn(move || run_detect(rear_rx, det_tx2, detector, discarded, abort));
        let clock = opts.clock.make();
        let feat = s.spawn(move || run_featurize(det_rx, feat_tx, featurizer, clock, abort));
        let sink = viz.map(|w| s.spawn(move || run_viz(viz_rx, w, abort)));
        let stage = &mut stage;
        let matcher = s.spawn(move || {
            stage.run(feat_rx);
            stage.viz = None;
        });
        join_stage(src, "source", abort);
        join_stage(front, "detect", abort);
        join_stage(rear, "detect", abort);
        join_stage(feat, "featurize", abort);
        join_stage(matcher, "match", abort);
        if let Some(h) = sink {
            join_stage(h, "viz", abort);
        }
    });

    if let Some(e) = abort.take() {
        return Err(e);
    }
    if !stage.finished {
        return Err(AppError::StageFailure {
            stage: "match",
            cause: "input ended without shutdown".into(),
        });
    }
    let mut channels: Vec<ChannelStats> = [front_probe, rear_probe, det_probe, feat_probe]
        .iter()
        .map(Probe::stats)
        .collect();
    if with_viz {
        channels.push(viz_probe.stats());
    }
    let (ledger, index) = stage.matcher.into_parts();
    Ok(PipelineOutcome {
        report: TimingReport {
            budget_secs: opts.budget_secs,
            stops: stage.stops,
            channels,
            discarded: discarded.into_inner(),
        },
        ledger,
        index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackpressureReport {
    pub capacity: usize,
    pub frames_in: u64,
    pub frames_out: u64,
    pub in_flight: u64,
    /// Sends by the source that found a full channel and waited.
    pub source_blocked: u64,
    /// Every (door, index) sent reached the sink.
    pub fan_in_complete: bool,
    /// Each door's frames reached the sink in send order.
    pub per_door_fifo: bool,
    pub channels: Vec<ChannelStats>,
}

/// Pushes `frames` tokens, alternating doors, through two relay stages into
/// one sink that sleeps `sink_delay` per message, and accounts for every
/// message.
pub fn backpressure_check(capacity: usize, frames: u64, sink_delay: Duration) -> Result<BackpressureReport> {
    if capacity == 0 {
        return Err(AppError::Usage("channel capacity must be at least 1".into()));
    }
    let (f_tx, f_rx, f_probe) = channel::<(Door, u64)>("source->relay_front", capacity);
    let (r_tx, r_rx, r_probe) = channel::<(Door, u64)>("source->relay_rear", capacity);
    let (m_tx, m_rx, m_probe) = channel::<(Door, u64)>("relay->sink", capacity);

    let received = std::thread::scope(|s| {
        s.spawn(move || {
            let mut next = [0u64; 2];
            for i in 0..frames {
                let d = (i % 2) as usize;
                let tx = if d == 0 { &f_tx } else { &r_tx };
                tx.send((DOORS[d], next[d])).expect("relay alive");
                next[d] += 1;
            }
        });
        let m_tx2 = m_tx.clone();
        for (rx, tx) in [(f_rx, m_tx), (r_rx, m_tx2)] {
            s.spawn(move || {
                while let Some(m) = rx.recv() {
                    tx.send(m).expect("sink alive");
                }
            });
        }
        let sink = s.spawn(move || {
            let mut got = Vec::new();
            while let Some(m) = m_rx.recv() {
                if !sink_delay.is_zero() {
                    std::thread::sleep(sink_delay);
                }
                got.push(m);
            }
            got
        });
        sink.join().expect("sink thread")
    });

    let channels: Vec<ChannelStats> = [f_probe, r_probe, m_probe].iter().map(Probe::stats).collect();
    let mut expected = BTreeSet::new();
    let mut counts = [0u64; 2];
    for i in 0..frames {
        let d = (i % 2) as usize;
        expected.insert((DOORS[d], counts[d]));
        counts[d] += 1;
    }
    let got: BTreeSet<(Door, u64)> = received.iter().copied().collect();
    let per_door_fifo = DOORS.iter().all(|door| {
        let seq: Vec<u64> = received.iter().filter(|m| m.0 == *door).map(|m| m.1).collect();
        seq.windows(2).all(|w| w[0] < w[1])
    });
    Ok(BackpressureReport {
        capacity,
        frames_in: channels[0].sent + channels[1].sent,
        frames_out: channels[2].received,
        in_flight: channels.iter().map(ChannelStats::in_flight).sum(),
        source_blocked: channels[0].blocked_sends + channels[1].blocked_sends,
        fan_in_complete: got == expected && received.len() as u64 == frames,
        per_door_fifo,
        channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RoiConfig;
    use crate::scenario::from_route;
    use transit_reid_core::hsdm::{run_route, MatchMode, NoHooks};
    use transit_reid_core::sim::{generate_route, RouteSpec};

    fn cfg() -> EngineConfig {
        EngineConfig {
            d_part: 8,
            ..Default::default()
        }
    }

    fn route(stops: u32, passengers: usize, noise: f64) -> Vec<transit_reid_core::StopEvent> {
        let spec = RouteSpec {
            num_stops: stops,
            num_passengers: passengers,
            seed: 11,
            noise_sigma: noise,
            d_part: 8,
            tracklet_len: 4,
            ..Default::default()
        };
        generate_route(&spec).unwrap().0
    }

    fn detector() -> RoiDetector {
        let (door, inside) = RoiConfig::default().rois().unwrap();
        RoiDetector { door, inside }
    }

    fn virtual_opts(budget: f64) -> PipelineOptions {
        PipelineOptions {
            capacity: 4,
            budget_secs: budget,
            clock: ClockKind::Virtual,
        }
    }

    #[test]
    fn pipeline_ledger_equals_sequential_run() {
        let stops = route(8, 40, 0.1);
        let det = detector();
        let files = from_route(&stops, &det.door, &det.inside, 3, true).unwrap();
        for mode in [MatchMode::Hsdm, MatchMode::Naive] {
            let out = run_pipeline(
                MemorySource::new(files.clone()),
                &det,
                SqfaFeaturizer { cfg: cfg() },
                Matcher::new(cfg(), mode).unwrap(),
                &virtual_opts(30.0),
                None,
            )
            .unwrap();
            let seq = run_route(&stops, &cfg(), mode, &mut NoHooks).unwrap();
            let rows = |l: &MatchLedger| l.export_rows(|q, g| q == g);
            assert_eq!(rows(&out.ledger), rows(&seq.ledger));
            assert_eq!(out.report.discarded, 8 * 2 * 2);
            assert_eq!(out.report.stops.len(), 8);
            for c in &out.report.channels {
                assert_eq!(c.in_flight(), 0, "{c:?}");
                assert!(c.high_water <= c.capacity);
            }
        }
    }

    #[test]
    fn stub_latency_timings_and_budget() {
        let stops = route(3, 12, 0.0);
        let det = detector();
        let files = from_route(&stops, &det.door, &det.inside, 3, false).unwrap();
        let run = |latency: f64, budget: f64| {
            run_pipeline(
                MemorySource::new(files.clone()),
                &det,
                DelayedFeaturizer {
                    inner: SqfaFeaturizer { cfg: cfg() },
                    latency_secs: latency,
                },
                Matcher::new(cfg(), MatchMode::Hsdm).unwrap(),
                &virtual_opts(budget),
                None,
            )
            .unwrap()
            .report
        };
        let r = run(0.01, 30.0);
        for (t, s) in r.stops.iter().zip(&stops) {
            let n = s.passengers();
            assert!((t.t_f - 0.01 * n as f64).abs() < 1e-9);
            assert_eq!(t.t_m.is_none(), s.alighting.is_empty());
            assert!(!t.budget_violated);
        }
        assert_eq!(r.stops[0].t_m, None);
        let busiest = stops.iter().map(|s| s.passengers()).max().unwrap() as f64;
        assert!(run(1.0, busiest - 0.5).any_violation());
        assert!(!run(1.0, busiest + 0.5).any_violation());
    }

    #[test]
    fn empty_source_gives_empty_report() {
        let out = run_pipeline(
            MemorySource::new([]),
            &detector(),
            SqfaFeaturizer { cfg: cfg() },
            Matcher::new(cfg(), MatchMode::Hsdm).unwrap(),
            &PipelineOptions::default(),
            None,
        )
        .unwrap();
        assert!(out.report.stops.is_empty());
        assert!(out.ledger.is_empty());
    }

    struct Failing;

    impl Featurizer for Failing {
        fn featurize(&mut self, _t: &Tracklet, _c: &dyn Clock) -> Result<FeatureVector> {
            Err(AppError::Usage("model not loaded".into()))
        }
    }

    #[test]
    fn stage_failure_is_reported_and_drains() {
        let stops = route(6, 60, 0.1);
        let det = detector();
        let files = from_route(&stops, &det.door, &det.inside, 3, false).unwrap();
        let err = run_pipeline(
            MemorySource::new(files),
            &det,
            Failing,
            Matcher::new(cfg(), MatchMode::Hsdm).unwrap(),
            &virtual_opts(30.0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, AppError::StageFailure { stage: "featurize", .. }), "{err}");
    }

    #[test]
    fn out_of_order_stops_fail_in_source() {
        let stops = route(3, 5, 0.0);
        let det = detector();
        let mut files = from_route(&stops, &det.door, &det.inside, 3, false).unwrap();
        files.swap(0, 2);
        let err = run_pipeline(
            MemorySource::new(files),
            &det,
            SqfaFeaturizer { cfg: cfg() },
            Matcher::new(cfg(), MatchMode::Hsdm).unwrap(),
            &virtual_opts(30.0),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, AppError::StageFailure { stage: "source", .. }), "{err}");
    }

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }

        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn viz_sink_logs_every_event() {
        let stops = route(4, 10, 0.0);
        let det = detector();
        let files = from_route(&stops, &det.door, &det.inside, 3, false).unwrap();
        let sink = Shared::default();
        run_pipeline(
            MemorySource::new(files),
            &det,
            SqfaFeaturizer { cfg: cfg() },
            Matcher::new(cfg(), MatchMode::Hsdm).unwrap(),
            &virtual_opts(30.0),
            Some(Box::new(sink.clone())),
        )
        .unwrap();
        let text = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // 10 boardings, 10 alightings, 4 stop summaries, 1 final line.
        assert_eq!(lines.len(), 25);
        assert!(lines.last().unwrap().contains("\"finished\""));
    }

    #[test]
    fn slow_sink_blocks_source_without_loss() {
        let r = backpressure_check(1, 200, Duration::from_micros(200)).unwrap();
        assert!(r.source_blocked > 0);
        assert_eq!((r.frames_in, r.frames_out, r.in_flight), (200, 200, 0));
        assert!(r.fan_in_complete && r.per_door_fifo);
        assert!(backpressure_check(0, 1, Duration::ZERO).is_err());
    }

    #[test]
    fn ten_thousand_frames_conserved() {
        let r = backpressure_check(64, 10_000, Duration::ZERO).unwrap();
        assert_eq!(r.frames_in, 10_000);
        assert_eq!(r.frames_out, 10_000);
        assert!(r.fan_in_complete && r.per_door_fifo);
    }
}
