//! Trajectory CSV: a header row `track,x,y` or `track,x,y,t`, then one row
//! per observed bounding-box center. Rows of one track need not be
//! contiguous; they are grouped by track id in file order.

use std::path::Path;

use serde::Deserialize;
use transit_reid_core::behavior::{Point, Trajectory};

use crate::error::{AppError, Result};

#[derive(Debug, Deserialize)]
struct Row {
    track: u64,
    x: f64,
    y: f64,
    #[serde(default)]
    t: Option<f64>,
}

/// Tracks in order of first appearance.
pub fn read_trajectories(path: &Path) -> Result<Vec<(u64, Trajectory)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| AppError::format(path, e))?;
    let mut tracks: Vec<(u64, Vec<Point>, Vec<Option<f64>>)> = Vec::new();
    for row in reader.deserialize() {
        let row: Row = row.map_err(|e| AppError::format(path, e))?;
        let slot = match tracks.iter().position(|t| t.0 == row.track) {
            Some(i) => i,
            None => {
                tracks.push((row.track, Vec::new(), Vec::new()));
                tracks.len() - 1
            }
        };
        tracks[slot].1.push(Point::new(row.x, row.y));
        tracks[slot].2.push(row.t);
    }
    tracks
        .into_iter()
        .map(|(id, points, times)| {
            let times = match times.iter().all(Option::is_some) {
                true => Some(times.into_iter().flatten().collect()),
                false if times.iter().all(Option::is_none) => None,
                false => return Err(AppError::format(path, format!("track {id}: timestamps on some rows only"))),
            };
            let traj = Trajectory::new(points, times).map_err(|e| AppError::format(path, format!("track {id}: {e}")))?;
            Ok((id, traj))
        })
        .collect()
}
