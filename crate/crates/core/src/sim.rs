//! Synthetic bus routes and the evaluation harness.
//!
//! Each passenger gets a unit-norm identity vector, an origin stop and a
//! later destination stop. Boarding and alighting tracklets are independent
//! noisy observations of the identity; occluded frame-parts get extra noise
//! and a correspondingly lower score. Routes are deterministic in the seed
//! (ChaCha8).

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::grading::{grade_tracklet, log_map, paste_noise_block, BoxBlurReconstructor};
use crate::hsdm::{run_route, MatchLedger, MatchMode, MatchState, RouteHooks, StopMetrics};
use crate::sqfa::{embed_tracklet, FeatureProvider, PixelStatsEmbedder};
use crate::types::{
    BodyPart, Door, FeatureVector, FrameParts, GrayImage, PartObservation, PartScore, Passage, PassengerId, StopEvent,
    Tracklet,
};
use crate::vindex::FlatIndex;

/// How frame-part observations are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationMode {
    /// Embeddings are drawn directly around the identity; scores follow the
    /// applied noise.
    Synthetic,
    /// Part crops are rendered, optionally occluded, graded against a
    /// box-blur reconstruction and embedded with `PixelStatsEmbedder`.
    Images { size: usize, blur_passes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSpec {
    pub num_stops: u32,
    pub num_passengers: usize,
    pub seed: u64,
    /// Per-dimension noise scale (pixel noise scale in image mode).
    pub noise_sigma: f64,
    pub occlusion_rate: f64,
    pub occlusion_noise_multiplier: f64,
    pub d_part: usize,
    pub tracklet_len: usize,
    pub log_k: f64,
    pub observation: ObservationMode,
}

impl Default for RouteSpec {
    fn default() -> Self {
        Self {
            num_stops: 10,
            num_passengers: 60,
            seed: 0,
            noise_sigma: 0.0,
            occlusion_rate: 0.2,
            occlusion_noise_multiplier: 4.0,
            d_part: 256,
            tracklet_len: 8,
            log_k: 20.0,
            observation: ObservationMode::Synthetic,
        }
    }
}

impl RouteSpec {
    /// Takes the embedding shape and score mapping from an engine config.
    pub fn matching(mut self, cfg: &EngineConfig) -> Self {
        self.d_part = cfg.d_part;
        self.tracklet_len = cfg.tracklet_len;
        self.log_k = cfg.log_k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason| Err(Error::InvalidSpec { field, reason });
        if self.num_stops < 2 {
            return bad("num_stops", "must be at least 2");
        }
        if self.num_passengers == 0 {
            return bad("num_passengers", "must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad("occlusion_rate", "must lie in [0, 1]");
        }
        if !(self.occlusion_noise_multiplier >= 0.0 && self.occlusion_noise_multiplier.is_finite()) {
            return bad("occlusion_noise_multiplier", "must be finite and non-negative");
        }
        if self.d_part == 0 {
            return bad("d_part", "must be at least 1");
        }
        if self.tracklet_len == 0 {
            return bad("tracklet_len", "must be at least 1");
        }
        if !(self.log_k > 0.0) {
            return bad("log_k", "must be positive");
        }
        if let ObservationMode::Images { size, .. } = self.observation {
            if size < 4 {
                return bad("observation", "image size must be at least 4");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassengerTruth {
    pub id: PassengerId,
    /// Unit-norm identity of dimension `3 * d_part`.
    pub identity: Vec<f64>,
    pub origin: u32,
    pub destination: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub num_stops: u32,
    pub passengers: Vec<PassengerTruth>,
}

impl GroundTruth {
    pub fn get(&self, id: PassengerId) -> Option<&PassengerTruth> {
        self.passengers.get(id.0 as usize).filter(|p| p.id == id)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

struct Pattern {
    base: f64,
    waves: [(f64, f64, f64, f64); 3],
}

impl Pattern {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: rng.random_range(0.3..0.7),
            waves: core::array::from_fn(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..core::f64::consts::TAU),
                    rng.random_range(0.05..0.12),
                )
            }),
        }
    }

    fn render(&self, size: usize, mut noise: impl FnMut() -> f64) -> GrayImage {
        let s = size as f64;
        GrayImage::from_fn(size, size, |x, y| {
            let (u, v) = (x as f64 / s * core::f64::consts::TAU, y as f64 / s * core::f64::consts::TAU);
            let mut p = self.base;
            for (fx, fy, ph, amp) in self.waves {
                p += amp * libm::sin(fx * u + fy * v + ph);
            }
            p + noise()
        })
        .expect("clamped pixels")
    }
}

struct Observer<'a> {
    spec: &'a RouteSpec,
    rng: ChaCha8Rng,
}

impl Observer<'_> {
    fn synthetic(&mut self, id: PassengerId, identity: &[f64]) -> Result<Tracklet> {
        let d = self.spec.d_part;
        let mut frames = Vec::with_capacity(self.spec.tracklet_len);
        for _ in 0..self.spec.tracklet_len {
            let parts: [Result<PartObservation>; 3] = BodyPart::ALL.map(|part| {
                let mu = &identity[part.index() * d..(part.index() + 1) * d];
                let occluded = self.rng.random_bool(self.spec.occlusion_rate);
                let scale = self.spec.noise_sigma
                    * if occluded {
                        self.spec.occlusion_noise_multiplier
                    } else {
                        1.0
                    };
                let noise: Vec<f64> = (0..d).map(|_| scale * gaussian(&mut self.rng)).collect();
                let embedding: Vec<f64> = mu.iter().zip(&noise).map(|(m, n)| m + n).collect();
                let mu_norm = norm(mu);
                let relative = if mu_norm > 0.0 { norm(&noise) / mu_norm } else { 0.0 };
                let score = log_map(1.0 / (1.0 + relative), 0.0, 1.0, self.spec.log_k)?;
                Ok(PartObservation::from_embedding(embedding, score))
            });
            let [a, b, c] = parts;
            frames.push([a?, b?, c?]);
        }
        Tracklet::new(id, frames)
    }

    fn images(&mut self, id: PassengerId, patterns: &[Pattern; 3], size: usize) -> Result<Tracklet> {
        let mut frames = Vec::with_capacity(self.spec.tracklet_len);
        for _ in 0..self.spec.tracklet_len {
            let frame: FrameParts = core::array::from_fn(|p| {
                let sigma = self.spec.noise_sigma;
                let rng = &mut self.rng;
                let mut img = patterns[p].render(size, || sigma * gaussian(rng));
                if self.rng.random_bool(self.spec.occlusion_rate) {
                    img = paste_noise_block(&img, 0.5, &mut self.rng);
                }
                let mut obs = PartObservation::from_image(img);
                obs.score = PartScore::ZERO;
                obs
            });
            frames.push(frame);
        }
        Tracklet::new(id, frames)
    }
}

/// Draws a route: identities, origin/destination pairs and one boarding and
/// one alighting tracklet per passenger.
pub fn generate_route(spec: &RouteSpec) -> Result<(Vec<StopEvent>, GroundTruth)> {
    spec.validate()?;
    let s = spec.num_stops;
    let d = 3 * spec.d_part;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut truth = Vec::with_capacity(spec.num_passengers);
    let mut patterns = Vec::new();
    for i in 0..spec.num_passengers {
        let origin = rng.random_range(1..s);
        let destination = rng.random_range(origin + 1..=s);
        let identity = match spec.observation {
            ObservationMode::Synthetic => {
                let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                let n = norm(&v);
                v.iter_mut().for_each(|x| *x /= n);
                v
            }
            ObservationMode::Images { size, .. } => {
                let p: [Pattern; 3] = core::array::from_fn(|_| Pattern::random(&mut rng));
                let embedder = PixelStatsEmbedder { d_part: spec.d_part };
                let mut v = Vec::with_capacity(d);
                for part in BodyPart::ALL {
                    v.extend(embedder.embed(part, &p[part.index()].render(size, || 0.0)));
                }
                let n = norm(&v);
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                patterns.push(p);
                v
            }
        };
        truth.push(PassengerTruth {
            id: PassengerId(i as u64),
            identity,
            origin,
            destination,
        });
    }

    let mut observer = Observer {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0B5E_4FA7_10E5),
    };
    let mut boarding = Vec::with_capacity(truth.len());
    let mut alighting = Vec::with_capacity(truth.len());
    for (i, p) in truth.iter().enumerate() {
        let doors = [observer.rng.random_bool(0.5), observer.rng.random_bool(0.5)]
            .map(|front| if front { Door::Front } else { Door::Rear });
        let (tb, ta) = match spec.observation {
            ObservationMode::Synthetic => (
                observer.synthetic(p.id, &p.identity)?,
                observer.synthetic(p.id, &p.identity)?,
            ),
            ObservationMode::Images { size, blur_passes } => {
                let cfg = EngineConfig {
                    log_k: spec.log_k,
                    d_part: spec.d_part,
                    ..Default::default()
                };
                let blur = BoxBlurReconstructor { passes: blur_passes };
                let embedder = PixelStatsEmbedder { d_part: spec.d_part };
                let mut out = [observer.images(p.id, &patterns[i], size)?, observer.images(p.id, &patterns[i], size)?];
                for t in &mut out {
                    *t = embed_tracklet(&grade_tracklet(t, &blur, &cfg)?, &embedder)?;
                }
                let [b, a] = out;
                (b, a)
            }
        };
        boarding.push(Passage {
            id: p.id,
            door: doors[0],
            tracklet: tb,
        });
        alighting.push(Passage {
            id: p.id,
            door: doors[1],
            tracklet: ta,
        });
    }

    let mut stops: Vec<StopEvent> = (1..=s)
        .map(|stop_id| StopEvent {
            stop_id,
            boarding: Vec::new(),
            alighting: Vec::new(),
        })
        .collect();
    for ((p, b), a) in truth.iter().zip(boarding).zip(alighting) {
        stops[p.origin as usize - 1].boarding.push(b);
        stops[p.destination as usize - 1].alighting.push(a);
    }
    Ok((
        stops,
        GroundTruth {
            num_stops: s,
            passengers: truth,
        },
    ))
}

/// Onboard count after each stop, boardings before alightings.
pub fn onboard_counts(stops: &[StopEvent]) -> Vec<i64> {
    let mut onboard = 0i64;
    stops
        .iter()
        .map(|s| {
            onboard += s.boarding.len() as i64 - s.alighting.len() as i64;
            onboard
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    pub num_stops: u32,
    /// `predicted[o - 1][d - 1]`: matched trips from origin `o` to destination `d`.
    pub predicted: Vec<Vec<u32>>,
    pub truth: Vec<Vec<u32>>,
}

impl OdMatrix {
    fn new(num_stops: u32) -> Self {
        let s = num_stops as usize;
        Self {
            num_stops,
            predicted: vec![vec![0; s]; s],
            truth: vec![vec![0; s]; s],
        }
    }

    pub fn truth_row_sums(&self) -> Vec<u32> {
        self.truth.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn truth_col_sums(&self) -> Vec<u32> {
        (0..self.num_stops as usize)
            .map(|c| self.truth.iter().map(|r| r[c]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopAccuracy {
    pub stop_id: u32,
    pub queries: usize,
    pub correct: usize,
    pub od_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r20: f64,
    pub map: f64,
    pub od_accuracy: f64,
    pub per_stop: Vec<StopAccuracy>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub od: OdMatrix,
    pub ledger: MatchLedger,
    pub remaining: FlatIndex,
    pub per_stop: Vec<StopMetrics>,
}

/// Records where each query's true gallery entry ranks at match time.
struct RankProbe {
    ranks: Vec<(PassengerId, Option<usize>)>,
}

impl RouteHooks for RankProbe {
    fn before_query(&mut self, index: &FlatIndex, query: PassengerId, vector: &FeatureVector, _stop: u32) {
        let rank = index
            .search(vector.values(), index.size())
            .ok()
            .and_then(|r| r.iter().position(|n| n.id == query))
            .map(|p| p + 1);
        self.ranks.push((query, rank));
    }
}

/// Runs aggregation and matching over a route and scores it against truth.
///
/// `r1` is the fraction of queries whose final match is their own boarding
/// record. `r5`, `r10` and `r20` count a query as a hit when the final match
/// is correct or the true entry ranked within the top n at match time, so
/// `r1 <= r5 <= r10 <= r20`. `map` averages `1 / rank` at match time (one
/// relevant item per query; zero if it was no longer in the gallery).
pub fn evaluate(stops: &[StopEvent], truth: &GroundTruth, cfg: &EngineConfig, mode: MatchMode) -> Result<Evaluation> {
    let mut probe = RankProbe { ranks: Vec::new() };
    let outcome = run_route(stops, cfg, mode, &mut probe)?;
    let ledger = outcome.ledger;

    let mut od = OdMatrix::new(truth.num_stops);
    for p in &truth.passengers {
        od.truth[p.origin as usize - 1][p.destination as usize - 1] += 1;
    }

    let mut per_stop: Vec<StopAccuracy> = stops
        .iter()
        .map(|s| StopAccuracy {
            stop_id: s.stop_id,
            queries: 0,
            correct: 0,
            od_correct: 0,
        })
        .collect();

    let n = probe.ranks.len();
    let (mut hits, mut r5, mut r10, mut r20, mut ap, mut od_ok) = (0usize, 0usize, 0usize, 0usize, 0.0, 0usize);
    for (query, rank) in &probe.ranks {
        let rec = ledger.record(*query).expect("every probed query is recorded");
        let correct = rec.gallery() == Some(*query);
        let (od_correct, origin) = match rec.state {
            MatchState::Hot { origin_stop, .. } => {
                let t = truth.get(*query).map(|t| t.origin);
                (t == Some(origin_stop), Some(origin_stop))
            }
            _ => (false, None),
        };
        if let Some(o) = origin {
            let dest = rec.alighting_stop;
            if (1..=truth.num_stops).contains(&o) && (1..=truth.num_stops).contains(&dest) {
                od.predicted[o as usize - 1][dest as usize - 1] += 1;
            }
        }
        let within = |k: usize| correct || rank.is_some_and(|r| r <= k);
        hits += correct as usize;
        r5 += within(5) as usize;
        r10 += within(10) as usize;
        r20 += within(20) as usize;
        ap += rank.map_or(0.0, |r| 1.0 / r as f64);
        od_ok += od_correct as usize;
        if let Some(s) = per_stop.iter_mut().find(|s| s.stop_id == rec.alighting_stop) {
            s.queries += 1;
            s.correct += correct as usize;
            s.od_correct += od_correct as usize;
        }
    }
    let frac = |k: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    let metrics = MetricsReport {
        r1: frac(hits),
        r5: frac(r5),
        r10: frac(r10),
        r20: frac(r20),
        map: if n == 0 { 1.0 } else { ap / n as f64 },
        od_accuracy: frac(od_ok),
        per_stop,
    };
    Ok(Evaluation {
        metrics,
        od,
        ledger,
        remaining: outcome.index,
        per_stop: outcome.per_stop,
    })
}

/// Generates the route for `spec` and evaluates it.
pub fn simulate(spec: &RouteSpec, cfg: &EngineConfig, mode: MatchMode) -> Result<Evaluation> {
    let (stops, truth) = generate_route(spec)?;
    evaluate(&stops, &truth, cfg, mode)
}

/// One (stop count, mode, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub stops: u32,
    pub mode: MatchMode,
    pub seed: u64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r20: f64,
    pub map: f64,
    pub od_accuracy: f64,
}

/// Means over repeats for one stop count, naive and HSDM side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub stops: u32,
    pub naive_r1: f64,
    pub hsdm_r1: f64,
    pub naive_r5: f64,
    pub hsdm_r5: f64,
    pub naive_r10: f64,
    pub hsdm_r10: f64,
}

/// Evaluates both modes on `repeats` seeds (`template.seed + i`) at one stop count.
pub fn sweep_cell(template: &RouteSpec, cfg: &EngineConfig, stops: u32, repeats: u64) -> Result<Vec<SweepRun>> {
    let mut runs = Vec::with_capacity(2 * repeats as usize);
    for i in 0..repeats {
        let spec = RouteSpec {
            num_stops: stops,
            seed: template.seed.wrapping_add(i),
            ..template.clone()
        };
        let (route, truth) = generate_route(&spec)?;
        for mode in [MatchMode::Naive, MatchMode::Hsdm] {
            let m = evaluate(&route, &truth, cfg, mode)?.metrics;
            runs.push(SweepRun {
                stops,
                mode,
                seed: spec.seed,
                r1: m.r1,
                r5: m.r5,
                r10: m.r10,
                r20: m.r20,
                map: m.map,
                od_accuracy: m.od_accuracy,
            });
        }
    }
    Ok(runs)
}

/// Collapses per-seed runs into one row per stop count, ascending.
pub fn summarize(runs: &[SweepRun]) -> Vec<SweepRow> {
    let mut stops: Vec<u32> = runs.iter().map(|r| r.stops).collect();
    stops.sort_unstable();
    stops.dedup();
    stops
        .into_iter()
        .map(|s| {
            let mean = |mode: MatchMode, f: fn(&SweepRun) -> f64| {
                let sel: Vec<f64> = runs.iter().filter(|r| r.stops == s && r.mode == mode).map(f).collect();
                if sel.is_empty() {
                    0.0
                } else {
                    sel.iter().sum::<f64>() / sel.len() as f64
                }
            };
            SweepRow {
                stops: s,
                naive_r1: mean(MatchMode::Naive, |r| r.r1),
                hsdm_r1: mean(MatchMode::Hsdm, |r| r.r1),
                naive_r5: mean(MatchMode::Naive, |r| r.r5),
                hsdm_r5: mean(MatchMode::Hsdm, |r| r.r5),
                naive_r10: mean(MatchMode::Naive, |r| r.r10),
                hsdm_r10: mean(MatchMode::Hsdm, |r| r.r10),
            }
        })
        .collect()
}

/// Evaluates every stop count in `stops` (inclusive) with `repeats` seeds each.
pub fn sweep_stops(
    template: &RouteSpec,
    cfg: &EngineConfig,
    stops: core::ops::RangeInclusive<u32>,
    repeats: u64,
) -> Result<(Vec<SweepRun>, Vec<SweepRow>)> {
    let mut runs = Vec::new();
    for s in stops {
        runs.extend(sweep_cell(template, cfg, s, repeats)?);
    }
    let rows = summarize(&runs);
    Ok((runs, rows))
}

/// Mean naive-mode R-1 over seeds `template.seed .. template.seed + repeats`.
pub fn mean_naive_r1(template: &RouteSpec, cfg: &EngineConfig, repeats: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..repeats {
        let spec = RouteSpec {
            seed: template.seed.wrapping_add(i),
            ..template.clone()
        };
        total += simulate(&spec, cfg, MatchMode::Naive)?.metrics.r1;
    }
    Ok(total / repeats as f64)
}

/// Bisects `noise_sigma` until mean naive R-1 lands in `[lo, hi]`.
///
/// Returns `None` if the band is not reached within the iteration budget.
pub fn calibrate_noise(
    template: &RouteSpec,
    cfg: &EngineConfig,
    band: (f64, f64),
    repeats: u64,
) -> Result<Option<(f64, f64)>> {
    let (lo, hi) = band;
    let at = |sigma: f64| {
        let spec = RouteSpec {
            noise_sigma: sigma,
            ..template.clone()
        };
        mean_naive_r1(&spec, cfg, repeats)
    };
    // Grow the upper bracket until accuracy drops below the band.
    let mut low_noise = 0.0;
    let mut high_noise = 0.01;
    let mut r = at(high_noise)?;
    let mut grow = 0;
    while r > hi {
        if (lo..=hi).contains(&r) {
            return Ok(Some((high_noise, r)));
        }
        low_noise = high_noise;
        high_noise *= 2.0;
        r = at(high_noise)?;
        grow += 1;
        if grow > 30 {
            return Ok(None);
        }
    }
    if (lo..=hi).contains(&r) {
        return Ok(Some((high_noise, r)));
    }
    for _ in 0..40 {
        let mid = 0.5 * (low_noise + high_noise);
        let r = at(mid)?;
        if (lo..=hi).contains(&r) {
            return Ok(Some((mid, r)));
        }
        if r > hi {
            low_noise = mid;
        } else {
            high_noise = mid;
        }
    }
    Ok(None)
}
