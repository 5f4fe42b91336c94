//! Rule-based trajectory classification from door / inside region membership.
//!
//! Only the first and last bounding-box centers of a trajectory are
//! consulted. A point in the overlap of both regions counts as a member of
//! each, and the rules' explicit "not in door" clauses settle the overlap.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoiKind {
    Door,
    Inside,
}

/// Closed axis-aligned rectangle in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub kind: RoiKind,
}

impl Roi {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, kind: RoiKind) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::InvalidRoi("min corner must be strictly below max corner"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            kind,
        })
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_roi(p, self)
    }
}

pub fn point_in_roi(p: Point, roi: &Roi) -> bool {
    roi.x_min <= p.x && p.x <= roi.x_max && roi.y_min <= p.y && p.y <= roi.y_max
}

/// Ordered bounding-box centers of one tracked person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<Point>,
    timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(points: Vec<Point>, timestamps: Option<Vec<f64>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::EmptyTrajectory);
        }
        if let Some(ts) = &timestamps {
            if ts.len() != points.len() {
                return Err(Error::NonMonotoneTimestamps);
            }
            if ts.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::NonMonotoneTimestamps);
            }
        }
        Ok(Self { points, timestamps })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn start(&self) -> Point {
        self.points[0]
    }

    pub fn end(&self) -> Point {
        self.points[self.points.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    Alighting,
    Boarding,
    MovingInside,
    RemainingOutside,
    Unclassified,
}

impl Behavior {
    /// Only boardings and alightings feed the matcher.
    pub fn is_passage(self) -> bool {
        matches!(self, Behavior::Alighting | Behavior::Boarding)
    }
}

pub fn classify(traj: &Trajectory, door: &Roi, inside: &Roi) -> Result<Behavior> {
    if traj.points.len() < 2 {
        return Err(Error::EmptyTrajectory);
    }
    if door.kind != RoiKind::Door || inside.kind != RoiKind::Inside {
        return Err(Error::InvalidRoi("expected (door, inside) regions"));
    }
    let (s, e) = (traj.start(), traj.end());
    let (s_door, s_in) = (door.contains(s), inside.contains(s));
    let (e_door, e_in) = (door.contains(e), inside.contains(e));

    let behavior = if s_in && !s_door && e_door {
        Behavior::Alighting
    } else if s_door && e_in && !e_door {
        Behavior::Boarding
    } else if s_in && !s_door && e_in && !e_door {
        Behavior::MovingInside
    } else if s_door && e_door {
        Behavior::RemainingOutside
    } else {
        Behavior::Unclassified
    };
    Ok(behavior)
}
