//! Separation vectors and the location pairs that share them.

use serde::{Deserialize, Serialize};

use crate::data_model::{Location, LocationId};
use crate::error::{Result, SpaceError};

/// Spatial lag between two locations. `canonical` identifies Δ with −Δ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationVector {
    pub dx: f64,
    pub dy: f64,
}

impl SeparationVector {
    pub const ZERO: SeparationVector = SeparationVector { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        SeparationVector { dx, dy }
    }

    /// Representative with dx > 0, or dx = 0 and dy ≥ 0.
    pub fn canonical(self) -> Self {
        if self.dx < 0.0 || (self.dx == 0.0 && self.dy < 0.0) {
            SeparationVector::new(-self.dx, -self.dy)
        } else {
            // normalizes -0.0
            SeparationVector::new(self.dx + 0.0, self.dy + 0.0)
        }
    }

    pub fn neg(self) -> Self {
        SeparationVector::new(-self.dx, -self.dy)
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0
    }

    pub fn between(from: &Location, to: &Location) -> Self {
        SeparationVector::new(to.x - from.x, to.y - from.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationStructure {
    pub delta: SeparationVector,
    pub radius: f64,
    pub pairs: Vec<(LocationId, LocationId)>,
}

const MATCH_SLACK: f64 = 1e-9;

/// Pairs of positions into `locs` whose separation lies in the ball around ±Δ.
/// Each pair (i, j) is oriented so that the lag from i to j sits on the +Δ side.
pub fn find_pair_positions(locs: &[Location], delta: SeparationVector, radius: f64) -> Vec<(usize, usize)> {
    let delta = delta.canonical();
    let r = radius.max(0.0) + MATCH_SLACK * (1.0 + delta.norm());
    let mut pairs = Vec::new();
    if delta.is_zero() {
        for i in 0..locs.len() {
            pairs.push((i, i));
        }
        if radius <= 0.0 {
            return pairs;
        }
    }
    for a in 0..locs.len() {
        for b in (a + 1)..locs.len() {
            let sep = SeparationVector::between(&locs[a], &locs[b]);
            let plus = (sep.dx - delta.dx).hypot(sep.dy - delta.dy) <= r;
            let minus = (sep.dx + delta.dx).hypot(sep.dy + delta.dy) <= r;
            match (plus, minus) {
                (true, false) => pairs.push((a, b)),
                (false, true) => pairs.push((b, a)),
                (true, true) => {
                    if locs[a].id <= locs[b].id {
                        pairs.push((a, b))
                    } else {
                        pairs.push((b, a))
                    }
                }
                (false, false) => {}
            }
        }
    }
    pairs
}

pub fn find_pairs(locs: &[Location], delta: SeparationVector, radius: f64) -> SeparationStructure {
    let pairs = find_pair_positions(locs, delta, radius)
        .into_iter()
        .map(|(i, j)| (locs[i].id, locs[j].id))
        .collect();
    SeparationStructure {
        delta: delta.canonical(),
        radius: radius.max(0.0),
        pairs,
    }
}

const LADDER_2D: [(f64, f64); 24] = [
    (1.0, 0.0),
    (1.0, 1.0),
    (0.0, 1.0),
    (1.0, -1.0),
    (2.0, 0.0),
    (2.0, 1.0),
    (2.0, 2.0),
    (1.0, 2.0),
    (0.0, 2.0),
    (1.0, -2.0),
    (2.0, -2.0),
    (2.0, -1.0),
    (3.0, 0.0),
    (3.0, 1.0),
    (3.0, 2.0),
    (3.0, 3.0),
    (2.0, 3.0),
    (1.0, 3.0),
    (0.0, 3.0),
    (1.0, -3.0),
    (2.0, -3.0),
    (3.0, -3.0),
    (3.0, -2.0),
    (3.0, -1.0),
];

pub const MAX_LADDER: usize = 20;

/// Nested neighbourhood ladders: `{(0,1)..(0,m)}` in 1D and the first m+4
/// lags of the standard 24-lag ordering in 2D, for m = 1..m_max.
pub fn default_delta_ladder(dimension: usize, m_max: usize) -> Result<Vec<Vec<SeparationVector>>> {
    if m_max == 0 || m_max > MAX_LADDER {
        return Err(SpaceError::invalid(format!(
            "ladder length must be in 1..={MAX_LADDER}, got {m_max}"
        )));
    }
    match dimension {
        1 => Ok((1..=m_max)
            .map(|m| (1..=m).map(|k| SeparationVector::new(0.0, k as f64)).collect())
            .collect()),
        2 => Ok((1..=m_max)
            .map(|m| {
                LADDER_2D[..m + 4]
                    .iter()
                    .map(|&(dx, dy)| SeparationVector::new(dx, dy))
                    .collect()
            })
            .collect()),
        _ => Err(SpaceError::invalid(format!("dimension must be 1 or 2, got {dimension}"))),
    }
}

/// Layout shape inferred from coordinates: a vertical line, a horizontal line, or a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Vertical,
    Horizontal,
    Planar,
}

pub fn detect_layout(locs: &[Location]) -> Layout {
    let same_x = locs.windows(2).all(|w| w[0].x == w[1].x);
    let same_y = locs.windows(2).all(|w| w[0].y == w[1].y);
    if same_x {
        Layout::Vertical
    } else if same_y {
        Layout::Horizontal
    } else {
        Layout::Planar
    }
}

/// Default ladders for a layout; horizontal lines use lags along x.
pub fn ladder_for_layout(layout: Layout, m_max: usize) -> Result<Vec<Vec<SeparationVector>>> {
    match layout {
        Layout::Vertical => default_delta_ladder(1, m_max),
        Layout::Horizontal => Ok(default_delta_ladder(1, m_max)?
            .into_iter()
            .map(|l| l.into_iter().map(|v| SeparationVector::new(v.dy, 0.0)).collect())
            .collect()),
        Layout::Planar => default_delta_ladder(2, m_max),
    }
}

/// Smallest nonzero separation present among the locations (canonical form).
pub fn nearest_neighbour_lag(locs: &[Location]) -> Option<SeparationVector> {
    let mut best: Option<(f64, SeparationVector)> = None;
    for a in 0..locs.len() {
        for b in (a + 1)..locs.len() {
            let sep = SeparationVector::between(&locs[a], &locs[b]).canonical();
            let d = sep.norm();
            if d == 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bs)) => {
                    d < bd - 1e-12 || ((d - bd).abs() <= 1e-12 && (sep.dx, sep.dy) > (bs.dx, bs.dy))
                }
            };
            if better {
                best = Some((d, sep));
            }
        }
    }
    best.map(|(_, s)| s)
}
