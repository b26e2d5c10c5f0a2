use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use space_fda::data_model::{make_grid, ensure_valid, EvalGrid, FunctionalDataset, Location, Observation, TimeDomain};
use space_fda::eigen_analysis::EigenSystem;
use space_fda::matern::MaternParams;
use space_fda::reconstruction::SpaceModel;

use crate::error::CliError;

pub const OBS_HEADER: [&str; 5] = ["loc_id", "x", "y", "t", "value"];

fn reader(path: &str) -> Result<csv::Reader<File>, CliError> {
    csv::ReaderBuilder::new().flexible(false).from_path(path).map_err(|e| CliError::io(path, e))
}

fn writer(path: &str) -> Result<csv::Writer<File>, CliError> {
    csv::WriterBuilder::new().from_path(path).map_err(|e| CliError::io(path, e))
}

fn num(s: &str, what: &str, line: u64) -> Result<f64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: cannot parse {what} '{s}'")))
}

/// Reads an observations CSV. Locations keep their order of first
/// appearance; the time domain defaults to the range of observed times.
pub fn read_observations(path: &str, domain: Option<(f64, f64)>) -> Result<FunctionalDataset, CliError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.iter().map(str::trim).ne(OBS_HEADER) {
        return Err(CliError::Data(format!(
            "{path}: expected header {}, found {}",
            OBS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut locations: Vec<Location> = Vec::new();
    let mut index: HashMap<i64, usize> = HashMap::new();
    let mut observations = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: i64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| CliError::Data(format!("{path}: line {line}: cannot parse loc_id '{}'", &rec[0])))?;
        let (x, y) = (num(&rec[1], "x", line)?, num(&rec[2], "y", line)?);
        let (t, v) = (num(&rec[3], "t", line)?, num(&rec[4], "value", line)?);
        match index.get(&id) {
            Some(&i) if locations[i].x != x || locations[i].y != y => {
                return Err(CliError::Data(format!(
                    "{path}: line {line}: location {id} moved from ({}, {}) to ({x}, {y})",
                    locations[i].x, locations[i].y
                )))
            }
            Some(_) => {}
            None => {
                index.insert(id, locations.len());
                locations.push(Location::new(id, x, y));
            }
        }
        observations.push(Observation::new(id, t, v));
    }
    if observations.is_empty() {
        return Err(CliError::Data(format!("{path}: no observations")));
    }
    let (start, end) = match domain {
        Some(d) => d,
        None => observations
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), o| (a.min(o.t), b.max(o.t))),
    };
    let time_domain = TimeDomain::new(start, end).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    let data = FunctionalDataset::new(locations, observations, time_domain);
    ensure_valid(&data).map_err(|e| CliError::Data(format!("{path}: {e}")))?;
    Ok(data)
}

pub fn write_observations(path: &str, data: &FunctionalDataset) -> Result<(), CliError> {
    let mut w = writer(path)?;
    let coords: HashMap<i64, (f64, f64)> = data.locations.iter().map(|l| (l.id, (l.x, l.y))).collect();
    w.write_record(OBS_HEADER).map_err(|e| CliError::io(path, e))?;
    for o in &data.observations {
        let (x, y) = coords[&o.location_id];
        w.write_record([o.location_id.to_string(), x.to_string(), y.to_string(), o.t.to_string(), o.y.to_string()])
            .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_min: f64,
    pub t_max: f64,
    #[serde(rename = "M")]
    pub m: usize,
}

impl GridSpec {
    pub fn of(grid: &EvalGrid) -> Self {
        GridSpec { t_min: grid.start(), t_max: grid.end(), m: grid.len() }
    }

    pub fn build(&self) -> Result<EvalGrid, CliError> {
        let domain = TimeDomain::new(self.t_min, self.t_max).map_err(|e| CliError::Data(e.to_string()))?;
        make_grid(domain, self.m).map_err(|e| CliError::Data(e.to_string()))
    }
}

#[derive(Serialize)]
struct GridSidecar<'a> {
    grid: GridSpec,
    times: &'a [f64],
}

/// Extra named column blocks written after v0..v{M-1}.
pub struct ExtraColumns<'a> {
    pub prefix: &'a str,
    pub values: &'a DMatrix<f64>,
}

/// Writes `loc_id,x,y,v0..v{M-1}` (plus any extra blocks and per-row
/// scalars) and a `<path>.grid.json` sidecar with the grid times.
pub fn write_curves(
    path: &str,
    locations: &[Location],
    grid: &EvalGrid,
    values: &DMatrix<f64>,
    extra: &[ExtraColumns<'_>],
    scalars: &[(&str, Vec<f64>)],
) -> Result<(), CliError> {
    let m = grid.len();
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["loc_id", "x", "y"].iter().map(|s| s.to_string()).collect();
    header.extend((0..m).map(|j| format!("v{j}")));
    for e in extra {
        header.extend((0..m).map(|j| format!("{}{j}", e.prefix)));
    }
    header.extend(scalars.iter().map(|s| s.0.to_string()));
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for (i, l) in locations.iter().enumerate() {
        let mut row = vec![l.id.to_string(), l.x.to_string(), l.y.to_string()];
        row.extend((0..m).map(|j| values[(i, j)].to_string()));
        for e in extra {
            row.extend((0..m).map(|j| e.values[(i, j)].to_string()));
        }
        row.extend(scalars.iter().map(|s| s.1[i].to_string()));
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    let sidecar = format!("{path}.grid.json");
    let json = serde_json::to_string_pretty(&GridSidecar { grid: GridSpec::of(grid), times: grid.points() })
        .map_err(|e| CliError::io(&sidecar, e))?;
    write_text(&sidecar, &json)
}

/// Reads the v-columns of a curves CSV, reordered to match `locations`.
pub fn read_curves(path: &str, locations: &[Location], m: usize) -> Result<DMatrix<f64>, CliError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let v_cols = header.iter().filter(|h| h.starts_with('v') && h[1..].parse::<usize>().is_ok()).count();
    if header.len() < 3 || &header[0] != "loc_id" || v_cols != m {
        return Err(CliError::Data(format!(
            "{path}: expected header loc_id,x,y,v0..v{} ({m} value columns), found {v_cols} value columns",
            m.saturating_sub(1)
        )));
    }
    let pos: HashMap<i64, usize> = locations.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let mut out = DMatrix::from_element(locations.len(), m, f64::NAN);
    let mut seen = vec![false; locations.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id: i64 =
            rec[0].trim().parse().map_err(|_| CliError::Data(format!("{path}: line {line}: bad loc_id")))?;
        let Some(&i) = pos.get(&id) else {
            return Err(CliError::Data(format!("{path}: line {line}: location {id} is not in the observations")));
        };
        for j in 0..m {
            out[(i, j)] = num(&rec[3 + j], "value", line)?;
        }
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CliError::Data(format!("{path}: no row for location {}", locations[i].id)));
    }
    Ok(out)
}

pub fn write_text(path: &str, text: &str) -> Result<(), CliError> {
    let mut f = File::create(Path::new(path)).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    f.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    write_text(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternEntry {
    pub alpha_deg: f64,
    /// Exact angle; degrees do not always convert back to the same radians.
    /// Ignored when it disagrees with `alpha_deg`, e.g. after a hand edit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_rad: Option<f64>,
    pub delta: f64,
    pub zeta: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub grid: GridSpec,
    pub mean: Vec<f64>,
    pub sigma2: f64,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub separable: bool,
    #[serde(default)]
    pub centered: bool,
    pub matern: Vec<MaternEntry>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn from_model(model: &SpaceModel, provenance: Provenance) -> Self {
        let e = &model.eigen;
        ModelFile {
            grid: GridSpec::of(&e.grid),
            mean: e.mean.clone(),
            sigma2: e.sigma2,
            eigenvalues: e.eigenvalues.clone(),
            eigenfunctions: e.eigenfunctions.clone(),
            separable: model.separable,
            centered: model.centered,
            matern: model
                .matern
                .iter()
                .map(|p| MaternEntry { alpha_deg: p.alpha.to_degrees(), alpha_rad: Some(p.alpha), delta: p.delta, zeta: p.zeta, nu: p.nu })
                .collect(),
            provenance,
        }
    }

    pub fn to_model(&self) -> Result<SpaceModel, CliError> {
        let grid = self.grid.build()?;
        let eigen = EigenSystem {
            grid,
            mean: self.mean.clone(),
            eigenfunctions: self.eigenfunctions.clone(),
            eigenvalues: self.eigenvalues.clone(),
            sigma2: self.sigma2,
        };
        let matern = self
            .matern
            .iter()
            .map(|m| {
                let alpha = match m.alpha_rad {
                    Some(r) if (r.to_degrees() - m.alpha_deg).abs() <= 1e-9 * m.alpha_deg.abs().max(1.0) => r,
                    _ => m.alpha_deg.to_radians(),
                };
                MaternParams { alpha, delta: m.delta, zeta: m.zeta, nu: m.nu }
            })
            .collect();
        let model = SpaceModel { eigen, matern, separable: self.separable, centered: self.centered };
        model.validate().map_err(|e| CliError::Data(format!("model: {e}")))?;
        Ok(model)
    }

    pub fn load(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{path}: {e}")))
    }
}
