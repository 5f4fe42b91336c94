//! Per-stop scenario files fed to the pipeline.
//!
//! A scenario directory holds one `stop_NNN.json` per stop. Each file lists,
//! per door, the tracks seen by that door's camera: an id, the bounding-box
//! trajectory and the part tracklet. The detection stage decides from the
//! trajectory whether a track is a boarding, an alighting or neither.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transit_reid_core::behavior::{Point, Roi, Trajectory};
use transit_reid_core::{Door, Error as CoreError, PassengerId, StopEvent, Tracklet};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: PassengerId,
    pub trajectory: Trajectory,
    pub tracklet: Tracklet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorStream {
    pub door: Door,
    pub tracks: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopFile {
    pub stop_id: u32,
    pub doors: Vec<DoorStream>,
}

impl StopFile {
    pub fn tracks(&self, door: Door) -> &[Track] {
        self.doors
            .iter()
            .find(|d| d.door == door)
            .map_or(&[], |d| d.tracks.as_slice())
    }

    pub fn track_count(&self) -> usize {
        self.doors.iter().map(|d| d.tracks.len()).sum()
    }
}

/// Ids at or above this mark are bystanders rather than passengers.
pub const BYSTANDER_BASE: u64 = 1 << 62;

fn probe_points(r: &Roi) -> [Point; 5] {
    let (w, h) = (r.x_max - r.x_min, r.y_max - r.y_min);
    let at = |fx: f64, fy: f64| Point::new(r.x_min + fx * w, r.y_min + fy * h);
    [at(0.5, 0.5), at(0.05, 0.5), at(0.95, 0.5), at(0.5, 0.05), at(0.5, 0.95)]
}

/// A point of `a` outside `b`.
fn exclusive_point(a: &Roi, b: &Roi) -> Result<Point> {
    probe_points(a)
        .into_iter()
        .find(|p| !b.contains(*p))
        .ok_or(AppError::Core(CoreError::InvalidRoi("regions overlap too much to place tracks")))
}

fn path(from: Point, to: Point, steps: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let wobble = if i == 0 || i == steps - 1 { 0.0 } else { rng.random_range(-2.0..2.0) };
            Point::new(from.x + t * (to.x - from.x) + wobble, from.y + t * (to.y - from.y) + wobble)
        })
        .collect()
}

/// Lays out a simulated route as camera tracks: boardings walk door to
/// inside, alightings inside to door. With `bystanders`, each door at each
/// stop also sees one person lingering at the door and one moving about
/// inside, both of which detection must discard.
pub fn from_route(stops: &[StopEvent], door: &Roi, inside: &Roi, seed: u64, bystanders: bool) -> Result<Vec<StopFile>> {
    let d = exclusive_point(door, inside)?;
    let i = exclusive_point(inside, door)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_bystander = BYSTANDER_BASE;
    let mut files = Vec::with_capacity(stops.len());
    for stop in stops {
        let template = stop.boarding.iter().chain(&stop.alighting).next().map(|p| p.tracklet.clone());
        let mut doors = Vec::new();
        for which in [Door::Front, Door::Rear] {
            let mut tracks = Vec::new();
            for p in stop.boarding.iter().filter(|p| p.door == which) {
                tracks.push(Track {
                    id: p.id,
                    trajectory: Trajectory::new(path(d, i, 6, &mut rng), None)?,
                    tracklet: p.tracklet.clone(),
                });
            }
            for p in stop.alighting.iter().filter(|p| p.door == which) {
                tracks.push(Track {
                    id: p.id,
                    trajectory: Trajectory::new(path(i, d, 6, &mut rng), None)?,
                    tracklet: p.tracklet.clone(),
                });
            }
            if let (true, Some(t)) = (bystanders, &template) {
                for (from, to) in [(d, d), (i, i)] {
                    tracks.push(Track {
                        id: PassengerId(next_bystander),
                        trajectory: Trajectory::new(path(from, to, 6, &mut rng), None)?,
                        tracklet: t.clone(),
                    });
                    next_bystander += 1;
                }
            }
            doors.push(DoorStream { door: which, tracks });
        }
        files.push(StopFile {
            stop_id: stop.stop_id,
            doors,
        });
    }
    Ok(files)
}

pub fn stop_file_name(stop_id: u32) -> String {
    format!("stop_{stop_id:03}.json")
}

pub fn write_dir(dir: &Path, stops: &[StopFile]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    for s in stops {
        let p = dir.join(stop_file_name(s.stop_id));
        let json = serde_json::to_vec(s).map_err(|e| AppError::format(&p, e))?;
        fs::write(&p, json).map_err(|e| AppError::io(&p, e))?;
    }
    Ok(())
}

/// `stop_*.json` files of `dir` in name order.
pub fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| AppError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("stop_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_stop_file(path: &Path) -> Result<StopFile> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::format(path, e))
}
