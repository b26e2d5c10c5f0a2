//! Observations, curves, datasets and the evaluation grid.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpaceError};

pub type LocationId = i64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(id: LocationId, x: f64, y: f64) -> Self {
        Location { id, x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub location_id: LocationId,
    pub t: f64,
    pub y: f64,
}

impl Observation {
    pub fn new(location_id: LocationId, t: f64, y: f64) -> Self {
        Observation { location_id, t, y }
    }
}

/// Closed time interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDomain {
    pub start: f64,
    pub end: f64,
}

impl TimeDomain {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(SpaceError::invalid(format!(
                "time domain [{start}, {end}] must be finite with start < end"
            )));
        }
        Ok(TimeDomain { start, end })
    }

    pub fn unit() -> Self {
        TimeDomain { start: 0.0, end: 1.0 }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Observation times and values of one location, in input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub locations: Vec<Location>,
    pub observations: Vec<Observation>,
    pub time_domain: TimeDomain,
}

impl FunctionalDataset {
    pub fn new(
        locations: Vec<Location>,
        observations: Vec<Observation>,
        time_domain: TimeDomain,
    ) -> Self {
        FunctionalDataset {
            locations,
            observations,
            time_domain,
        }
    }

    /// Builds a dataset from per-location curves aligned with `locations`.
    pub fn from_curves(locations: Vec<Location>, curves: &[Curve], time_domain: TimeDomain) -> Self {
        let mut observations = Vec::with_capacity(curves.iter().map(Curve::len).sum());
        for (loc, curve) in locations.iter().zip(curves) {
            for (&t, &y) in curve.times.iter().zip(&curve.values) {
                observations.push(Observation::new(loc.id, t, y));
            }
        }
        FunctionalDataset::new(locations, observations, time_domain)
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn location_index(&self) -> HashMap<LocationId, usize> {
        self.locations
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id, i))
            .collect()
    }

    /// Groups observations by location, aligned with `self.locations`.
    /// Observations referencing unknown locations are skipped.
    pub fn curves(&self) -> Vec<Curve> {
        let index = self.location_index();
        let mut curves = vec![Curve::default(); self.locations.len()];
        for obs in &self.observations {
            if let Some(&i) = index.get(&obs.location_id) {
                curves[i].times.push(obs.t);
                curves[i].values.push(obs.y);
            }
        }
        curves
    }

    /// Dataset restricted to the locations at the given positions.
    pub fn subset(&self, positions: &[usize]) -> FunctionalDataset {
        let curves = self.curves();
        let locations: Vec<Location> = positions.iter().map(|&i| self.locations[i]).collect();
        let picked: Vec<Curve> = positions.iter().map(|&i| curves[i].clone()).collect();
        FunctionalDataset::from_curves(locations, &picked, self.time_domain)
    }

    /// Same locations and times with replaced values (`values[i]` aligned with curve i).
    pub fn with_values(&self, curves: &[Curve], values: &[Vec<f64>]) -> FunctionalDataset {
        let replaced: Vec<Curve> = curves
            .iter()
            .zip(values)
            .map(|(c, v)| Curve {
                times: c.times.clone(),
                values: v.clone(),
            })
            .collect();
        FunctionalDataset::from_curves(self.locations.clone(), &replaced, self.time_domain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticKind {
    InvalidDomain,
    DuplicateLocationId,
    NonFiniteCoordinate,
    DanglingLocation,
    TimeOutOfDomain,
    NonFiniteValue,
    EmptyCurve,
}

impl fmt::Display for DiagnosticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiagnosticKind::InvalidDomain => "invalid time domain",
            DiagnosticKind::DuplicateLocationId => "duplicate location id",
            DiagnosticKind::NonFiniteCoordinate => "non-finite coordinate",
            DiagnosticKind::DanglingLocation => "dangling location",
            DiagnosticKind::TimeOutOfDomain => "time out of domain",
            DiagnosticKind::NonFiniteValue => "non-finite value",
            DiagnosticKind::EmptyCurve => "location without observations",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    Domain,
    Location(usize),
    Observation(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub record: Record,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

pub fn validate_dataset(d: &FunctionalDataset) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let dom = d.time_domain;
    if !(dom.start.is_finite() && dom.end.is_finite() && dom.start < dom.end) {
        out.push(Diagnostic {
            kind: DiagnosticKind::InvalidDomain,
            record: Record::Domain,
            message: format!("[{}, {}]", dom.start, dom.end),
        });
    }

    let mut seen: HashMap<LocationId, usize> = HashMap::new();
    for (pos, loc) in d.locations.iter().enumerate() {
        if let Some(first) = seen.insert(loc.id, pos) {
            out.push(Diagnostic {
                kind: DiagnosticKind::DuplicateLocationId,
                record: Record::Location(pos),
                message: format!("location id {} at rows {} and {}", loc.id, first, pos),
            });
        }
        if !(loc.x.is_finite() && loc.y.is_finite()) {
            out.push(Diagnostic {
                kind: DiagnosticKind::NonFiniteCoordinate,
                record: Record::Location(pos),
                message: format!("location id {} at ({}, {})", loc.id, loc.x, loc.y),
            });
        }
    }

    let mut counts: HashMap<LocationId, usize> = HashMap::new();
    for (pos, obs) in d.observations.iter().enumerate() {
        if !seen.contains_key(&obs.location_id) {
            out.push(Diagnostic {
                kind: DiagnosticKind::DanglingLocation,
                record: Record::Observation(pos),
                message: format!("observation {} references unknown location {}", pos, obs.location_id),
            });
        } else {
            *counts.entry(obs.location_id).or_insert(0) += 1;
        }
        if !obs.t.is_finite() || !dom.contains(obs.t) {
            out.push(Diagnostic {
                kind: DiagnosticKind::TimeOutOfDomain,
                record: Record::Observation(pos),
                message: format!(
                    "observation {} at t = {} outside [{}, {}]",
                    pos, obs.t, dom.start, dom.end
                ),
            });
        }
        if !obs.y.is_finite() {
            out.push(Diagnostic {
                kind: DiagnosticKind::NonFiniteValue,
                record: Record::Observation(pos),
                message: format!("observation {} has value {}", pos, obs.y),
            });
        }
    }

    for (pos, loc) in d.locations.iter().enumerate() {
        if !counts.contains_key(&loc.id) && seen.get(&loc.id) == Some(&pos) {
            out.push(Diagnostic {
                kind: DiagnosticKind::EmptyCurve,
                record: Record::Location(pos),
                message: format!("location id {} has no observations", loc.id),
            });
        }
    }
    out
}

/// Fails with the first few diagnostics joined into one message.
pub fn ensure_valid(d: &FunctionalDataset) -> Result<()> {
    let diags = validate_dataset(d);
    if diags.is_empty() {
        return Ok(());
    }
    let shown: Vec<String> = diags.iter().take(5).map(|x| x.to_string()).collect();
    let more = if diags.len() > 5 {
        format!(" (and {} more)", diags.len() - 5)
    } else {
        String::new()
    };
    Err(SpaceError::InvalidData(format!("{}{}", shown.join("; "), more)))
}

/// Equally spaced evaluation points covering a time domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    points: Vec<f64>,
    step: f64,
}

pub const DEFAULT_GRID_SIZE: usize = 101;

pub fn make_grid(domain: TimeDomain, m: usize) -> Result<EvalGrid> {
    if m < 2 {
        return Err(SpaceError::invalid(format!("grid needs at least 2 points, got {m}")));
    }
    if !(domain.start.is_finite() && domain.end.is_finite() && domain.start < domain.end) {
        return Err(SpaceError::invalid(format!(
            "time domain [{}, {}] must be finite with start < end",
            domain.start, domain.end
        )));
    }
    let step = (domain.end - domain.start) / (m - 1) as f64;
    let points = (0..m)
        .map(|i| {
            if i == m - 1 {
                domain.end
            } else {
                domain.start + i as f64 * step
            }
        })
        .collect();
    Ok(EvalGrid { points, step })
}

impl EvalGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn domain(&self) -> TimeDomain {
        TimeDomain {
            start: self.start(),
            end: self.end(),
        }
    }

    /// Left node index and fractional offset of `t`, clamped to the grid.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let m = self.points.len();
        let u = (t - self.points[0]) / self.step;
        if !(u > 0.0) {
            return (0, 0.0);
        }
        let idx = (u.floor() as usize).min(m - 2);
        let frac = (u - idx as f64).clamp(0.0, 1.0);
        (idx, frac)
    }

    /// Linear interpolation of grid values at `t`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        let (i, w) = self.locate(t);
        if w == 0.0 {
            values[i]
        } else {
            values[i] * (1.0 - w) + values[i + 1] * w
        }
    }

    /// Trapezoid quadrature weights.
    pub fn quadrature_weights(&self) -> Vec<f64> {
        let m = self.points.len();
        let mut w = vec![self.step; m];
        w[0] *= 0.5;
        w[m - 1] *= 0.5;
        w
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.quadrature_weights()
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .sum()
    }

    pub fn inner_product(&self, a: &[f64], b: &[f64]) -> f64 {
        self.quadrature_weights()
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    /// True when both grids share size and endpoints.
    pub fn matches(&self, other: &EvalGrid) -> bool {
        self.len() == other.len()
            && (self.start() - other.start()).abs() <= 1e-12 * (1.0 + self.start().abs())
            && (self.end() - other.end()).abs() <= 1e-12 * (1.0 + self.end().abs())
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn grid_is_uniform(a in -100.0f64..100.0, len in 1e-3f64..50.0, m in 2usize..400) {
            let g = make_grid(TimeDomain::new(a, a + len).unwrap(), m).unwrap();
            prop_assert_eq!(g.len(), m);
            let h = g.step();
            for w in g.points().windows(2) {
                prop_assert!(((w[1] - w[0]) - h).abs() <= 1e-12 * h.max(a.abs()) );
            }
        }
    }
}
