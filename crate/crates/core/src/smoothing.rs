//! Local linear smoothing of the mean curve, covariance surfaces and the
//! noise variance, with Gaussian kernels.
//!
//! Raw inputs are aggregated per distinct time (1D) or per distinct (s, t)
//! cell (2D). Weighted least squares only depends on the per-cell counts and
//! sums, so the aggregation is exact, and the kernel moments reduce to a few
//! dense matrix products.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{EvalGrid, FunctionalDataset, LocationId};
use crate::error::{Result, SpaceError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// Bandwidth of the mean smoother.
    pub h_mu: f64,
    /// Bandwidth of the surface smoother (also used for the variance diagonal).
    pub h_g: f64,
}

impl SmootherConfig {
    pub fn new(h_mu: f64, h_g: f64) -> Result<Self> {
        let c = SmootherConfig { h_mu, h_g };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_mu > 0.0 && self.h_mu.is_finite() && self.h_g > 0.0 && self.h_g.is_finite() {
            Ok(())
        } else {
            Err(SpaceError::invalid(format!(
                "bandwidths must be positive and finite, got h_mu={}, h_g={}",
                self.h_mu, self.h_g
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawCovPoint {
    pub s: f64,
    pub t: f64,
    pub d: f64,
    /// Same curve and same observation: carries the extra noise variance.
    pub same_curve_diagonal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub grid: EvalGrid,
    pub values: DMatrix<f64>,
}

impl Surface {
    /// (G + Gᵀ) / 2.
    pub fn symmetrized(&self) -> Surface {
        let v = (&self.values + self.values.transpose()) * 0.5;
        Surface { grid: self.grid.clone(), values: v }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.values.nrows()).map(|i| self.values[(i, i)]).collect()
    }
}

#[inline]
pub(crate) fn gauss(z: f64) -> f64 {
    (-0.5 * z * z).exp()
}

/// Sorted distinct values.
pub(crate) fn distinct(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub(crate) fn position(support: &[f64], v: f64) -> usize {
    support
        .binary_search_by(|x| x.total_cmp(&v))
        .expect("value belongs to its support")
}

/// Kernel weights K(z)·zᵃ for a = 0, 1, 2 with z = (u − x)/h; rows index
/// evaluation points x, columns support points u.
pub(crate) fn kernel_matrices(eval: &[f64], support: &[f64], h: f64) -> [DMatrix<f64>; 3] {
    let (m, u) = (eval.len(), support.len());
    let mut k0 = DMatrix::zeros(m, u);
    let mut k1 = DMatrix::zeros(m, u);
    let mut k2 = DMatrix::zeros(m, u);
    for j in 0..u {
        for i in 0..m {
            let z = (support[j] - eval[i]) / h;
            let w = gauss(z);
            k0[(i, j)] = w;
            k1[(i, j)] = w * z;
            k2[(i, j)] = w * z * z;
        }
    }
    [k0, k1, k2]
}

/// Local linear smoother over a fixed support, expressed as an M×U linear map
/// from per-support sums to fitted values.
#[derive(Debug, Clone)]
pub(crate) struct LinearSmoother1d {
    weights: DMatrix<f64>,
}

impl LinearSmoother1d {
    pub(crate) fn new(support: &[f64], counts: &[f64], eval: &[f64], h: f64) -> Result<Self> {
        let mut weights = DMatrix::zeros(eval.len(), support.len());
        for (i, &x) in eval.iter().enumerate() {
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for (&u, &c) in support.iter().zip(counts) {
                let z = (u - x) / h;
                let w = c * gauss(z);
                s0 += w;
                s1 += w * z;
                s2 += w * z * z;
            }
            let det = s0 * s2 - s1 * s1;
            if !(s0 > 1e-300) || !(det > 1e-10 * s0 * s2) {
                return Err(SpaceError::DegenerateFit { at: format!("t = {x}") });
            }
            for (j, &u) in support.iter().enumerate() {
                let z = (u - x) / h;
                weights[(i, j)] = gauss(z) * (s2 - s1 * z) / det;
            }
        }
        Ok(LinearSmoother1d { weights })
    }

    pub(crate) fn apply(&self, sums: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(sums);
        (&self.weights * v).iter().copied().collect()
    }
}

/// Pooled (time, count, sum) aggregation of all observations.
pub(crate) fn pooled_times(d: &FunctionalDataset) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let support = distinct(d.observations.iter().map(|o| o.t));
    let mut counts = vec![0.0; support.len()];
    let mut sums = vec![0.0; support.len()];
    for o in &d.observations {
        let u = position(&support, o.t);
        counts[u] += 1.0;
        sums[u] += o.y;
    }
    (support, counts, sums)
}

pub fn smooth_mean(d: &FunctionalDataset, cfg: &SmootherConfig, grid: &EvalGrid) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (support, counts, sums) = pooled_times(d);
    if support.len() < 2 {
        return Err(SpaceError::InsufficientData(format!(
            "mean smoothing needs 2 distinct observation times, found {}",
            support.len()
        )));
    }
    let sm = LinearSmoother1d::new(&support, &counts, grid.points(), cfg.h_mu)?;
    Ok(sm.apply(&sums))
}

/// Raw products (Y_ik − μ̂(t_ik))(Y_jl − μ̂(t_jl)) for every pair of location ids,
/// with μ̂ linearly interpolated from its grid values.
pub fn raw_cross_covariances(
    d: &FunctionalDataset,
    grid: &EvalGrid,
    mu_hat: &[f64],
    pairs: &[(LocationId, LocationId)],
) -> Result<Vec<RawCovPoint>> {
    if pairs.is_empty() {
        return Err(SpaceError::invalid("empty pair list"));
    }
    if mu_hat.len() != grid.len() {
        return Err(SpaceError::invalid("mean length differs from grid size"));
    }
    let index = d.location_index();
    let curves = d.curves();
    let resid: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| c.times.iter().zip(&c.values).map(|(&t, &y)| y - grid.interpolate(mu_hat, t)).collect())
        .collect();
    let mut out = Vec::new();
    for &(a, b) in pairs {
        let i = *index
            .get(&a)
            .ok_or_else(|| SpaceError::invalid(format!("unknown location id {a}")))?;
        let j = *index
            .get(&b)
            .ok_or_else(|| SpaceError::invalid(format!("unknown location id {b}")))?;
        for (k, &s) in curves[i].times.iter().enumerate() {
            for (l, &t) in curves[j].times.iter().enumerate() {
                out.push(RawCovPoint {
                    s,
                    t,
                    d: resid[i][k] * resid[j][l],
                    same_curve_diagonal: i == j && k == l,
                });
            }
        }
    }
    Ok(out)
}

/// Distinct (s, t) cells with their point counts.
#[derive(Debug, Clone)]
pub(crate) struct CellTable {
    pub s_support: Vec<f64>,
    pub t_support: Vec<f64>,
    pub cells: Vec<(usize, usize)>,
    pub counts: Vec<f64>,
}

impl CellTable {
    /// Aggregates (s, t, value) triples; returns the table and per-cell value sums.
    pub(crate) fn aggregate(points: &[(f64, f64, f64)]) -> (CellTable, Vec<f64>) {
        let (table, index) = CellTable::indexed(points.iter().map(|p| (p.0, p.1)));
        let mut sums = vec![0.0; table.cells.len()];
        for (p, &c) in points.iter().zip(&index) {
            sums[c] += p.2;
        }
        (table, sums)
    }

    /// Builds the table for (s, t) locations and returns each point's cell.
    pub(crate) fn indexed(points: impl Iterator<Item = (f64, f64)> + Clone) -> (CellTable, Vec<usize>) {
        let s_support = distinct(points.clone().map(|p| p.0));
        let t_support = distinct(points.clone().map(|p| p.1));
        let mut map: HashMap<(usize, usize), usize> = HashMap::new();
        let mut cells = Vec::new();
        let mut counts = Vec::new();
        let mut index = Vec::new();
        for (s, t) in points {
            let key = (position(&s_support, s), position(&t_support, t));
            let id = *map.entry(key).or_insert_with(|| {
                cells.push(key);
                counts.push(0.0);
                cells.len() - 1
            });
            counts[id] += 1.0;
            index.push(id);
        }
        (CellTable { s_support, t_support, cells, counts }, index)
    }
}

/// Σ_cells w · k[:, v] placed in row u: an (U_s × rows(k)) matrix.
fn scatter(cells: &[(usize, usize)], w: &[f64], k: &DMatrix<f64>, n_s: usize) -> DMatrix<f64> {
    let m = k.nrows();
    let mut out = DMatrix::zeros(n_s, m);
    for (&(u, v), &wc) in cells.iter().zip(w) {
        if wc == 0.0 {
            continue;
        }
        let col = k.column(v);
        for r in 0..m {
            out[(u, r)] += wc * col[r];
        }
    }
    out
}

/// Kernel moments of a cell table at every (s, t) pair of two evaluation axes.
pub(crate) struct SurfaceMoments {
    /// S00, S10, S01, S20, S11, S02.
    pub s: [DMatrix<f64>; 6],
}

pub(crate) fn surface_moments(
    table: &CellTable,
    eval_s: &[f64],
    eval_t: &[f64],
    h: f64,
) -> (SurfaceMoments, [DMatrix<f64>; 3], [DMatrix<f64>; 3]) {
    let ks = kernel_matrices(eval_s, &table.s_support, h);
    let kt = kernel_matrices(eval_t, &table.t_support, h);
    let n_s = table.s_support.len();
    let t0 = scatter(&table.cells, &table.counts, &kt[0], n_s);
    let t1 = scatter(&table.cells, &table.counts, &kt[1], n_s);
    let t2 = scatter(&table.cells, &table.counts, &kt[2], n_s);
    let s = [
        &ks[0] * &t0,
        &ks[1] * &t0,
        &ks[0] * &t1,
        &ks[2] * &t0,
        &ks[1] * &t1,
        &ks[0] * &t2,
    ];
    (SurfaceMoments { s }, ks, kt)
}

/// First row of the inverse of the symmetric 3×3 local design
/// [[S00 S10 S01] [S10 S20 S11] [S01 S11 S02]], or `None` when singular.
#[inline]
pub(crate) fn first_inverse_row(m: [f64; 6]) -> Option<[f64; 3]> {
    let [s00, s10, s01, s20, s11, s02] = m;
    let c0 = s20 * s02 - s11 * s11;
    let c1 = -(s10 * s02 - s11 * s01);
    let c2 = s10 * s11 - s20 * s01;
    let det = s00 * c0 + s10 * c1 + s01 * c2;
    if !(s00 > 1e-300) || !(det > 1e-10 * s00 * s20 * s02) {
        return None;
    }
    Some([c0 / det, c1 / det, c2 / det])
}

/// Cached design for smoothing many value sets over the same cells.
#[derive(Debug, Clone)]
pub(crate) struct SurfaceDesign {
    cells: Vec<(usize, usize)>,
    n_s: usize,
    ks0: DMatrix<f64>,
    ks1: DMatrix<f64>,
    kt0: DMatrix<f64>,
    kt1: DMatrix<f64>,
    coef: [DMatrix<f64>; 3],
}

impl SurfaceDesign {
    pub(crate) fn new(table: &CellTable, eval: &[f64], h: f64) -> Result<Self> {
        let (mom, ks, kt) = surface_moments(table, eval, eval, h);
        let m = eval.len();
        let mut coef = [DMatrix::zeros(m, m), DMatrix::zeros(m, m), DMatrix::zeros(m, m)];
        for a in 0..m {
            for b in 0..m {
                let s = [
                    mom.s[0][(a, b)],
                    mom.s[1][(a, b)],
                    mom.s[2][(a, b)],
                    mom.s[3][(a, b)],
                    mom.s[4][(a, b)],
                    mom.s[5][(a, b)],
                ];
                let row = first_inverse_row(s).ok_or_else(|| SpaceError::DegenerateFit {
                    at: format!("(s, t) = ({}, {})", eval[a], eval[b]),
                })?;
                for c in 0..3 {
                    coef[c][(a, b)] = row[c];
                }
            }
        }
        let [ks0, ks1, _] = ks;
        let [kt0, kt1, _] = kt;
        Ok(SurfaceDesign {
            cells: table.cells.clone(),
            n_s: table.s_support.len(),
            ks0,
            ks1,
            kt0,
            kt1,
            coef,
        })
    }

    /// Intercepts of the local plane fits for per-cell value sums.
    pub(crate) fn smooth(&self, sums: &[f64]) -> DMatrix<f64> {
        let q0 = scatter(&self.cells, sums, &self.kt0, self.n_s);
        let q1 = scatter(&self.cells, sums, &self.kt1, self.n_s);
        let r00 = &self.ks0 * &q0;
        let r10 = &self.ks1 * &q0;
        let r01 = &self.ks0 * &q1;
        let mut g = self.coef[0].component_mul(&r00);
        g += self.coef[1].component_mul(&r10);
        g += self.coef[2].component_mul(&r01);
        g
    }
}

pub fn smooth_surface(
    points: &[RawCovPoint],
    cfg: &SmootherConfig,
    grid: &EvalGrid,
    drop_diagonal: bool,
) -> Result<Surface> {
    cfg.validate()?;
    let triples: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| !(drop_diagonal && p.same_curve_diagonal))
        .map(|p| (p.s, p.t, p.d))
        .collect();
    if triples.len() < 3 {
        return Err(SpaceError::InsufficientData(format!(
            "surface smoothing needs at least 3 points, got {}",
            triples.len()
        )));
    }
    let (table, sums) = CellTable::aggregate(&triples);
    let design = SurfaceDesign::new(&table, grid.points(), cfg.h_g)?;
    Ok(Surface {
        grid: grid.clone(),
        values: design.smooth(&sums),
    })
}

/// Diagonal raw points (t_ik, (Y_ik − μ̂(t_ik))²) aggregated per distinct time.
fn diagonal_sums(d: &FunctionalDataset, grid: &EvalGrid, mu_hat: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let support = distinct(d.observations.iter().map(|o| o.t));
    let mut counts = vec![0.0; support.len()];
    let mut sums = vec![0.0; support.len()];
    let known = d.location_index();
    for o in &d.observations {
        if !known.contains_key(&o.location_id) {
            continue;
        }
        let u = position(&support, o.t);
        let e = o.y - grid.interpolate(mu_hat, o.t);
        counts[u] += 1.0;
        sums[u] += e * e;
    }
    (support, counts, sums)
}

/// (2/|T|) ∫ over the middle half of the domain of the piecewise-linear
/// interpolant of `values`, floored at 0.
pub(crate) fn middle_half_average(grid: &EvalGrid, values: &[f64]) -> f64 {
    let (a, b) = (grid.start(), grid.end());
    let len = b - a;
    let (lo, hi) = (a + 0.25 * len, b - 0.25 * len);
    let pts = grid.points();
    let mut acc = 0.0;
    for m in 0..pts.len() - 1 {
        let (x0, x1) = (pts[m], pts[m + 1]);
        let (l, r) = (x0.max(lo), x1.min(hi));
        if r <= l {
            continue;
        }
        let f = |x: f64| {
            let w = (x - x0) / (x1 - x0);
            values[m] * (1.0 - w) + values[m + 1] * w
        };
        acc += 0.5 * (f(l) + f(r)) * (r - l);
    }
    (2.0 / len * acc).max(0.0)
}

pub fn estimate_sigma2(
    d: &FunctionalDataset,
    grid: &EvalGrid,
    mu_hat: &[f64],
    g00: &Surface,
    cfg: &SmootherConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (support, counts, sums) = diagonal_sums(d, grid, mu_hat);
    let total: f64 = counts.iter().sum();
    if total < 3.0 {
        return Err(SpaceError::InsufficientData(format!(
            "noise variance needs at least 3 diagonal points, got {total}"
        )));
    }
    let sm = LinearSmoother1d::new(&support, &counts, grid.points(), cfg.h_g)?;
    let v = sm.apply(&sums);
    Ok(sigma2_from_diagonal(grid, &v, g00))
}

pub(crate) fn sigma2_from_diagonal(grid: &EvalGrid, v_hat: &[f64], g00: &Surface) -> f64 {
    let gap: Vec<f64> = v_hat.iter().zip(g00.diagonal()).map(|(v, g)| v - g).collect();
    middle_half_average(grid, &gap)
}
