//! Cell-level scoring of ground/obstacle labels against simulator truth.

use rustc_hash::FxHashMap;

use super::scene::CellClass;
use super::GroundTruth;
use crate::error::{Error, Result};
use crate::traversability::{LabeledFrame, PointLabel};

/// Cell tallies; add them up over frames, then take rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DetectionCounts {
    pub curb_cells: usize,
    /// Curb cells where every point was labelled ground.
    pub missed: usize,
    pub road_cells: usize,
    /// Road cells with at least one point labelled obstacle.
    pub false_detections: usize,
}

impl DetectionCounts {
    pub fn rate_missed(&self) -> f64 {
        if self.curb_cells == 0 {
            0.0
        } else {
            self.missed as f64 / self.curb_cells as f64
        }
    }

    pub fn rate_false(&self) -> f64 {
        if self.road_cells == 0 {
            0.0
        } else {
            self.false_detections as f64 / self.road_cells as f64
        }
    }
}

impl std::ops::AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        self.curb_cells += o.curb_cells;
        self.missed += o.missed;
        self.road_cells += o.road_cells;
        self.false_detections += o.false_detections;
    }
}

#[derive(Default)]
struct Cell {
    curb: bool,
    only_road: bool,
    seen: bool,
    obstacle: bool,
}

/// Bins the frame's points into `resolution` cells (sensor frame, xy). A cell
/// is curb if any of its points is curb, road if all of them are road, and is
/// otherwise not scored. A cell counts as obstacle if any point in it is.
pub fn eval_detection(labeled: &LabeledFrame, truth: &GroundTruth, resolution: f64) -> Result<DetectionCounts> {
    if labeled.labels.len() != truth.labels.len() {
        return Err(Error::MalformedInput(format!(
            "{} labels against {} truth labels",
            labeled.labels.len(),
            truth.labels.len()
        )));
    }
    if !(resolution > 0.0) {
        return Err(Error::Config(format!("resolution must be positive, got {resolution}")));
    }
    let mut cells: FxHashMap<(i64, i64), Cell> = FxHashMap::default();
    for ((p, l), t) in labeled.frame.points.iter().zip(&labeled.labels).zip(&truth.labels) {
        let key = ((p.x / resolution).floor() as i64, (p.y / resolution).floor() as i64);
        let c = cells.entry(key).or_default();
        if !c.seen {
            c.seen = true;
            c.only_road = true;
        }
        c.curb |= *t == CellClass::Curb;
        c.only_road &= *t == CellClass::Road;
        c.obstacle |= *l == PointLabel::Obstacle;
    }
    let mut out = DetectionCounts::default();
    for c in cells.values() {
        if c.curb {
            out.curb_cells += 1;
            out.missed += !c.obstacle as usize;
        } else if c.only_road {
            out.road_cells += 1;
            out.false_detections += c.obstacle as usize;
        }
    }
    Ok(out)
}
