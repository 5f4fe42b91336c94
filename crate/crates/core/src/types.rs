//! Domain types shared across the matching engine and the simulator.
//!
//! Everything here is an immutable value type; stages hand clones across
//! threads freely.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stable identifier for a passenger observation (gallery entry or query).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PassengerId(pub u64);

impl fmt::Display for PassengerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Coarse body regions. The declaration order is the concatenation order of
/// aggregated features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BodyPart {
    Head,
    Torso,
    Legs,
}

impl BodyPart {
    pub const ALL: [BodyPart; 3] = [BodyPart::Head, BodyPart::Torso, BodyPart::Legs];

    pub const fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Door {
    Front,
    Rear,
}

/// Concatenated per-part embedding of dimension `3 * d_part`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureVector")]
pub struct FeatureVector {
    values: Vec<f64>,
    d_part: usize,
}

#[derive(Deserialize)]
struct RawFeatureVector {
    values: Vec<f64>,
    d_part: usize,
}

impl TryFrom<RawFeatureVector> for FeatureVector {
    type Error = Error;

    fn try_from(raw: RawFeatureVector) -> Result<Self> {
        FeatureVector::new(raw.values, raw.d_part)
    }
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, d_part: usize) -> Result<Self> {
        if d_part == 0 || values.len() != 3 * d_part {
            return Err(Error::DimensionMismatch {
                expected: 3 * d_part,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values, d_part })
    }

    /// Concatenates three part embeddings in `BodyPart` order.
    pub fn from_parts(parts: [&[f64]; 3]) -> Result<Self> {
        let d_part = parts[0].len();
        for p in &parts[1..] {
            if p.len() != d_part {
                return Err(Error::DimensionMismatch {
                    expected: d_part,
                    got: p.len(),
                });
            }
        }
        let mut values = Vec::with_capacity(3 * d_part);
        for p in parts {
            values.extend_from_slice(p);
        }
        Self::new(values, d_part)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn d_part(&self) -> usize {
        self.d_part
    }

    pub fn part(&self, part: BodyPart) -> &[f64] {
        let i = part.index();
        &self.values[i * self.d_part..(i + 1) * self.d_part]
    }
}

/// Image quality score after logarithmic mapping, always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PartScore(f64);

impl PartScore {
    pub const ONE: PartScore = PartScore(1.0);
    pub const ZERO: PartScore = PartScore(0.0);

    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    /// Clamps into `[0, 1]`; NaN maps to zero.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Self(0.0)
        } else {
            Self(value.clamp(0.0, 1.0))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PartScore {
    type Error = &'static str;

    fn try_from(v: f64) -> core::result::Result<Self, Self::Error> {
        PartScore::new(v).ok_or("part score outside [0, 1]")
    }
}

impl From<PartScore> for f64 {
    fn from(s: PartScore) -> f64 {
        s.0
    }
}

/// Row-major grayscale image with pixels normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrayImage")]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl TryFrom<RawGrayImage> for GrayImage {
    type Error = Error;

    fn try_from(raw: RawGrayImage) -> Result<Self> {
        GrayImage::new(raw.width, raw.height, raw.pixels)
    }
}

impl GrayImage {
    /// Canonical side length of a body-part crop.
    pub const CANONICAL_SIZE: usize = 128;

    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage("zero-sized image"));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidImage("pixel count does not match dimensions"));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidImage("pixel outside [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, alloc::vec![value; width * height])
    }

    /// Builds an image from a per-pixel function; outputs are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: self.pixels.len(),
                got: other.pixels.len(),
            });
        }
        Ok(())
    }
}

/// One body part seen in one frame. A freshly detected observation carries an
/// image; grading fills `score` and a feature provider fills `embedding`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartObservation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<GrayImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub score: PartScore,
}

impl PartObservation {
    pub fn from_image(image: GrayImage) -> Self {
        Self {
            image: Some(image),
            embedding: None,
            score: PartScore::ONE,
        }
    }

    pub fn from_embedding(embedding: Vec<f64>, score: PartScore) -> Self {
        Self {
            image: None,
            embedding: Some(embedding),
            score,
        }
    }
}

/// Observations of the three parts in one frame, indexed by `BodyPart::index`.
pub type FrameParts = [PartObservation; 3];

/// A short sequence of frames of one person from one camera pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTracklet")]
pub struct Tracklet {
    passenger: PassengerId,
    frames: Vec<FrameParts>,
}

#[derive(Deserialize)]
struct RawTracklet {
    passenger: PassengerId,
    frames: Vec<FrameParts>,
}

impl TryFrom<RawTracklet> for Tracklet {
    type Error = Error;

    fn try_from(raw: RawTracklet) -> Result<Self> {
        Tracklet::new(raw.passenger, raw.frames)
    }
}

impl Tracklet {
    pub const DEFAULT_LEN: usize = 8;

    pub fn new(passenger: PassengerId, frames: Vec<FrameParts>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyTracklet);
        }
        Ok(Self { passenger, frames })
    }

    pub fn passenger(&self) -> PassengerId {
        self.passenger
    }

    pub fn frames(&self) -> &[FrameParts] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [FrameParts] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A passenger crossing a door at a stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: PassengerId,
    pub door: Door,
    pub tracklet: Tracklet,
}

/// Boardings and alightings observed at one stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopEvent {
    pub stop_id: u32,
    pub boarding: Vec<Passage>,
    pub alighting: Vec<Passage>,
}

impl StopEvent {
    pub fn passengers(&self) -> usize {
        self.boarding.len() + self.alighting.len()
    }
}

/// Checks that stop ids are strictly increasing and start at 1 or later.
pub fn check_stop_order(stops: &[StopEvent]) -> Result<()> {
    let mut prev = 0u32;
    for s in stops {
        if s.stop_id <= prev {
            return Err(Error::StopOrder(s.stop_id));
        }
        prev = s.stop_id;
    }
    Ok(())
}
