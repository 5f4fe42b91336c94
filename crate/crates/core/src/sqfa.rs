//! Selective quality feature averaging.
//!
//! Per body part, frames whose score does not exceed the threshold are
//! dropped; the retained embeddings are multiplied by their scores, summed
//! and divided by the number of retained frames. The three part vectors are
//! then concatenated in `BodyPart` order.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::types::{BodyPart, FeatureVector, GrayImage, PartScore, Tracklet};

/// Embeddings and scores of one body part across a tracklet.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatureSet<'a> {
    pub part: BodyPart,
    pub embeddings: Vec<&'a [f64]>,
    pub scores: Vec<PartScore>,
}

impl<'a> PartFeatureSet<'a> {
    pub fn from_tracklet(t: &'a Tracklet, part: BodyPart) -> Result<Self> {
        let mut embeddings = Vec::with_capacity(t.len());
        let mut scores = Vec::with_capacity(t.len());
        for (fi, frame) in t.frames().iter().enumerate() {
            let obs = &frame[part.index()];
            let e = obs.embedding.as_deref().ok_or(Error::MissingEmbedding {
                frame: fi,
                part: part.index(),
            })?;
            embeddings.push(e);
            scores.push(obs.score);
        }
        Ok(Self {
            part,
            embeddings,
            scores,
        })
    }
}

/// Indices of frames whose score strictly exceeds `threshold`.
pub fn retained(scores: &[PartScore], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.get() > threshold)
        .map(|(i, _)| i)
        .collect()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

pub fn aggregate_part(ps: &PartFeatureSet<'_>, threshold: f64) -> Result<Vec<f64>> {
    if ps.embeddings.is_empty() {
        return Err(Error::EmptyTracklet);
    }
    if ps.embeddings.len() != ps.scores.len() {
        return Err(Error::DimensionMismatch {
            expected: ps.embeddings.len(),
            got: ps.scores.len(),
        });
    }
    let dim = ps.embeddings[0].len();
    if let Some(bad) = ps.embeddings.iter().find(|e| e.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }

    let keep = retained(&ps.scores, threshold);
    if keep.is_empty() {
        // Nothing clears the bar: fall back to the best frame, weighted by its
        // score. Score ties resolve on embedding order so the result does not
        // depend on frame order.
        let best = (0..ps.scores.len())
            .max_by(|&i, &j| {
                ps.scores[i]
                    .get()
                    .total_cmp(&ps.scores[j].get())
                    .then_with(|| lexicographic(ps.embeddings[j], ps.embeddings[i]))
            })
            .expect("non-empty");
        let s = ps.scores[best].get();
        return Ok(ps.embeddings[best].iter().map(|v| s * v).collect());
    }

    let mut acc = vec![0.0; dim];
    for &i in &keep {
        let s = ps.scores[i].get();
        for (a, v) in acc.iter_mut().zip(ps.embeddings[i]) {
            *a += s * v;
        }
    }
    let n = keep.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn aggregate_tracklet(t: &Tracklet, cfg: &EngineConfig) -> Result<FeatureVector> {
    let mut parts: [Vec<f64>; 3] = Default::default();
    for part in BodyPart::ALL {
        let set = PartFeatureSet::from_tracklet(t, part)?;
        let v = aggregate_part(&set, cfg.sqfa_threshold)?;
        if v.len() != cfg.d_part {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_part,
                got: v.len(),
            });
        }
        parts[part.index()] = v;
    }
    FeatureVector::from_parts([&parts[0], &parts[1], &parts[2]])
}

/// Maps a part crop to an embedding of fixed dimension.
pub trait FeatureProvider {
    fn d_part(&self) -> usize;
    fn embed(&self, part: BodyPart, img: &GrayImage) -> Vec<f64>;
}

/// Fills every observation's embedding from its image.
pub fn embed_tracklet<P: FeatureProvider + ?Sized>(t: &Tracklet, provider: &P) -> Result<Tracklet> {
    let mut out = t.clone();
    for (fi, frame) in out.frames_mut().iter_mut().enumerate() {
        for (part, obs) in BodyPart::ALL.into_iter().zip(frame.iter_mut()) {
            let img = obs.image.as_ref().ok_or(Error::MissingImage {
                frame: fi,
                part: part.index(),
            })?;
            obs.embedding = Some(provider.embed(part, img));
        }
    }
    Ok(out)
}

/// Deterministic stand-in for a learned backbone: summary statistics of the
/// crop (a 4x4 grid of block means, global mean and deviation, and an
/// 8-bin histogram) projected through a fixed pseudo-random matrix keyed by
/// body part. Similar crops land close together.
#[derive(Debug, Clone, Copy)]
pub struct PixelStatsEmbedder {
    pub d_part: usize,
}

const GRID: usize = 4;
const COARSE_BINS: usize = 8;
const N_STATS: usize = GRID * GRID + 2 + COARSE_BINS;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PixelStatsEmbedder {
    fn stats(img: &GrayImage) -> [f64; N_STATS] {
        let (w, h) = (img.width(), img.height());
        let mut out = [0.0; N_STATS];
        let mut counts = [0usize; GRID * GRID];
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = img.get(x, y);
                let cell = (y * GRID / h) * GRID + x * GRID / w;
                out[cell] += p;
                counts[cell] += 1;
                sum += p;
                sum_sq += p * p;
                let bin = ((p * COARSE_BINS as f64) as usize).min(COARSE_BINS - 1);
                out[GRID * GRID + 2 + bin] += 1.0;
            }
        }
        for (o, c) in out.iter_mut().zip(counts) {
            *o = if c > 0 { *o / c as f64 - 0.5 } else { 0.0 };
        }
        let n = (w * h) as f64;
        let mean = sum / n;
        out[GRID * GRID] = mean - 0.5;
        out[GRID * GRID + 1] = libm::sqrt((sum_sq / n - mean * mean).max(0.0));
        for b in &mut out[GRID * GRID + 2..] {
            *b /= n;
        }
        out
    }
}

impl FeatureProvider for PixelStatsEmbedder {
    fn d_part(&self) -> usize {
        self.d_part
    }

    fn embed(&self, part: BodyPart, img: &GrayImage) -> Vec<f64> {
        let stats = Self::stats(img);
        let norm = 1.0 / libm::sqrt(N_STATS as f64);
        (0..self.d_part)
            .map(|j| {
                stats
                    .iter()
                    .enumerate()
                    .map(|(s, v)| {
                        let key = ((part.index() as u64) << 48) ^ ((j as u64) << 16) ^ s as u64;
                        let w = (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
                        w * v
                    })
                    .sum::<f64>()
                    * norm
            })
            .collect()
    }
}
