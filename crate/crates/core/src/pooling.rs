//! Grid-shaped interaction features around a primary pedestrian, and the
//! nearest-neighbour state list used by concatenation-style encoders.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{heading_frame, Pose2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridFrame {
    /// Axes parallel to the world axes, centered on the primary.
    World,
    /// +x along the primary's heading. Falls back to world axes when the
    /// primary is stationary.
    Heading,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cells_per_side: usize,
    pub resolution: f64,
    pub frame: GridFrame,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            cells_per_side: 16,
            resolution: 0.6,
            frame: GridFrame::World,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells_per_side == 0 || self.cells_per_side % 2 != 0 || !(self.resolution > 0.0) {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn half_extent(&self) -> f64 {
        self.resolution * (self.cells_per_side / 2) as f64
    }

    /// Cell of a relative position; `None` outside the open square.
    pub fn cell(&self, rel: Vec2) -> Option<(usize, usize)> {
        let h = self.half_extent();
        if !(rel.x.abs() < h && rel.y.abs() < h) {
            return None;
        }
        let half = (self.cells_per_side / 2) as i64;
        let idx = |c: f64| (c / self.resolution).floor() as i64 + half;
        let (i, j) = (idx(rel.x), idx(rel.y));
        let n = self.cells_per_side as i64;
        ((0..n).contains(&i) && (0..n).contains(&j)).then_some((i as usize, j as usize))
    }

    fn to_local(&self, primary: &Pose2, point: Vec2) -> Vec2 {
        match self.frame {
            GridFrame::World => point - primary.position,
            GridFrame::Heading => {
                heading_frame(primary, point).unwrap_or(point - primary.position)
            }
        }
    }

    fn to_local_direction(&self, primary: &Pose2, v: Vec2) -> Vec2 {
        match (self.frame, primary.heading()) {
            (GridFrame::Heading, Some(h)) => Vec2::new(v.dot(h), h.det(v)),
            _ => v,
        }
    }
}

/// `cells_per_side x cells_per_side x channels` values, indexed `[i][j][c]`
/// with `i` along local x and `j` along local y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionGrid {
    pub cells_per_side: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl InteractionGrid {
    pub fn zeros(cells_per_side: usize, channels: usize) -> Self {
        InteractionGrid {
            cells_per_side,
            channels,
            values: vec![0.0; cells_per_side * cells_per_side * channels],
        }
    }

    fn offset(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.cells_per_side + j) * self.channels + c
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[self.offset(i, j, c)]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j, 0);
        &self.values[o..o + self.channels]
    }

    fn add(&mut self, i: usize, j: usize, features: &[f64]) {
        let o = self.offset(i, j, 0);
        for (dst, src) in self.values[o..o + self.channels].iter_mut().zip(features) {
            *dst += src;
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// One `i,j,channel,value` row per entry, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,channel,value\n");
        for i in 0..self.cells_per_side {
            for j in 0..self.cells_per_side {
                for c in 0..self.channels {
                    writeln!(out, "{i},{j},{c},{}", self.get(i, j, c)).expect("write to String");
                }
            }
        }
        out
    }
}

/// Neighbour counts per cell.
pub fn occupancy_grid(primary: &Pose2, neighbours: &[Vec2], spec: &GridSpec) -> Result<InteractionGrid> {
    let features: Vec<(Vec2, Vec<f64>)> = neighbours.iter().map(|p| (*p, vec![1.0])).collect();
    social_grid(primary, &features, spec)
}

/// Summed neighbour velocity relative to the primary per cell.
pub fn directional_grid(primary: &Pose2, neighbours: &[Pose2], spec: &GridSpec) -> Result<InteractionGrid> {
    let features: Vec<(Vec2, Vec<f64>)> = neighbours
        .iter()
        .map(|n| {
            let rel = spec.to_local_direction(primary, n.velocity - primary.velocity);
            (n.position, vec![rel.x, rel.y])
        })
        .collect();
    social_grid(primary, &features, spec)
}

/// Cell-wise sum of caller-supplied neighbour features. All feature vectors
/// must share one dimension.
pub fn social_grid(primary: &Pose2, neighbours: &[(Vec2, Vec<f64>)], spec: &GridSpec) -> Result<InteractionGrid> {
    spec.validate()?;
    let dim = neighbours.first().map_or(1, |(_, f)| f.len());
    if let Some((_, f)) = neighbours.iter().find(|(_, f)| f.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.len(),
        });
    }
    let mut grid = InteractionGrid::zeros(spec.cells_per_side, dim);
    for (pos, features) in neighbours {
        if let Some((i, j)) = spec.cell(spec.to_local(primary, *pos)) {
            grid.add(i, j, features);
        }
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighbourState {
    pub ped_id: Option<i64>,
    pub rel_position: Vec2,
    pub rel_velocity: Vec2,
    pub present: bool,
}

/// The `k` nearest neighbours by Euclidean distance (ties by id), padded
/// with absent zero entries.
pub fn topk_neighbour_states(primary: &Pose2, neighbours: &[(i64, Pose2)], k: usize) -> Vec<NeighbourState> {
    let mut sorted: Vec<(f64, i64, &Pose2)> = neighbours
        .iter()
        .map(|(id, p)| (p.position.distance(primary.position), *id, p))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<NeighbourState> = sorted
        .into_iter()
        .take(k)
        .map(|(_, id, p)| NeighbourState {
            ped_id: Some(id),
            rel_position: p.position - primary.position,
            rel_velocity: p.velocity - primary.velocity,
            present: true,
        })
        .collect();
    out.resize(
        k,
        NeighbourState {
            ped_id: None,
            rel_position: Vec2::ZERO,
            rel_velocity: Vec2::ZERO,
            present: false,
        },
    );
    out
}
