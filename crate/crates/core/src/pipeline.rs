//! End-to-end estimation: bandwidths, mean, covariance and cross-covariance
//! surfaces, eigen system, empirical correlations and Matérn fits.
//!
//! Everything that depends only on locations and observation times (pair
//! sets, cell tables, smoother weights) lives in [`PreparedFit`], so refits on
//! new values over the same design, as in the bootstrap, skip it.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{ensure_valid, Location, make_grid, Curve, EvalGrid, FunctionalDataset, DEFAULT_GRID_SIZE};
use crate::eigen_analysis::{correlations_for_surface, eigendecompose, EigenSystem, EmpiricalCorrelation};
use crate::error::{Result, SpaceError};
use crate::matern::{anisotropic_matern, trimmed_estimate_detailed, CorrelationPoint, FitConfig, MaternParams, TrimmedFit};
use crate::model_selection::{default_bandwidth_candidates, lobo_bandwidth, pooled_points, LoboPoints, LoboSelection};
use crate::reconstruction::SpaceModel;
use crate::smoothing::{
    distinct, position, raw_cross_covariances, sigma2_from_diagonal, smooth_mean, CellTable, LinearSmoother1d,
    SmootherConfig, Surface, SurfaceDesign,
};
use crate::spatial_structure::{detect_layout, find_pair_positions, ladder_for_layout, Layout, SeparationVector};

/// Components sharing one Matérn parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaternGroup {
    pub components: Vec<usize>,
    /// α = 0, δ = 1 fixed for this group.
    pub isotropic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// One parameter set pooled over all components.
    Separable,
    /// One parameter set per component.
    PerComponent,
    Groups(Vec<MaternGroup>),
}

impl Grouping {
    pub fn resolve(&self, k: usize) -> Result<Vec<MaternGroup>> {
        let groups = match self {
            Grouping::Separable => vec![MaternGroup { components: (0..k).collect(), isotropic: false }],
            Grouping::PerComponent => (0..k).map(|c| MaternGroup { components: vec![c], isotropic: false }).collect(),
            Grouping::Groups(g) => g.clone(),
        };
        let mut seen = vec![false; k];
        for g in &groups {
            if g.components.is_empty() {
                return Err(SpaceError::invalid("empty component group"));
            }
            for &c in &g.components {
                if c >= k || seen[c] {
                    return Err(SpaceError::invalid(format!("component {c} out of range or repeated")));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SpaceError::invalid("component groups do not cover every component"));
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub k: usize,
    pub grid_size: usize,
    /// Fixed bandwidths; `None` selects both by leave-one-bin-out CV.
    pub bandwidths: Option<SmootherConfig>,
    pub bandwidth_candidates: Option<Vec<f64>>,
    pub lobo_bins: usize,
    /// Nested Δ ladders; `None` uses the default for the detected layout.
    pub ladders: Option<Vec<Vec<SeparationVector>>>,
    pub m_max: usize,
    /// Tolerance-ball radius around each Δ.
    pub radius: f64,
    pub trim: f64,
    pub matern: FitConfig,
    pub grouping: Grouping,
    /// Fit the correlation model as seen through mean removal.
    pub centering_correction: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            k: 2,
            grid_size: DEFAULT_GRID_SIZE,
            bandwidths: None,
            bandwidth_candidates: None,
            lobo_bins: 10,
            ladders: None,
            m_max: 20,
            radius: 0.0,
            trim: 0.2,
            matern: FitConfig::default(),
            grouping: Grouping::PerComponent,
            centering_correction: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BandwidthChoice {
    pub config: SmootherConfig,
    /// Mean and surface selections when CV was run.
    pub lobo: Option<(LoboSelection, LoboSelection)>,
}

/// Leave-one-bin-out choice of h_μ (pooled observations) and h_G (off-diagonal
/// raw covariances at Δ = 0, centered by the h_μ mean).
pub fn select_bandwidths(data: &FunctionalDataset, opts: &FitOptions) -> Result<BandwidthChoice> {
    let grid = make_grid(data.time_domain, opts.grid_size)?;
    let cands = opts
        .bandwidth_candidates
        .clone()
        .unwrap_or_else(|| default_bandwidth_candidates(data.time_domain, 10));
    let mean_sel = lobo_bandwidth(LoboPoints::Curve(&pooled_points(data)), data.time_domain, &cands, opts.lobo_bins)?;
    let probe = SmootherConfig::new(mean_sel.selected, mean_sel.selected)?;
    let mu = smooth_mean(data, &probe, &grid)?;
    let selfs: Vec<_> = data.locations.iter().map(|l| (l.id, l.id)).collect();
    let triples: Vec<(f64, f64, f64)> = raw_cross_covariances(data, &grid, &mu, &selfs)?
        .into_iter()
        .filter(|p| !p.same_curve_diagonal)
        .map(|p| (p.s, p.t, p.d))
        .collect();
    let surf_sel = lobo_bandwidth(LoboPoints::Surface(&triples), data.time_domain, &cands, opts.lobo_bins)?;
    Ok(BandwidthChoice {
        config: SmootherConfig::new(mean_sel.selected, surf_sel.selected)?,
        lobo: Some((mean_sel, surf_sel)),
    })
}

/// Smoothed surface for one separation and its raw point layout.
#[derive(Debug, Clone)]
struct CrossDesign {
    delta: SeparationVector,
    pairs: Vec<(usize, usize)>,
    cells: Vec<usize>,
    n_cells: usize,
    design: SurfaceDesign,
}

/// Design-only state for repeated fits over fixed locations and times.
#[derive(Debug, Clone)]
pub struct PreparedFit {
    times: Vec<Vec<f64>>,
    grid: EvalGrid,
    bandwidths: SmootherConfig,
    k: usize,
    trim: f64,
    matern: FitConfig,
    groups: Vec<MaternGroup>,
    /// Observation → pooled time support.
    support_index: Vec<Vec<usize>>,
    n_support: usize,
    mean_smoother: LinearSmoother1d,
    diag_smoother: LinearSmoother1d,
    g00: CrossDesign,
    cross: Vec<CrossDesign>,
    /// Ladders as indices into `cross`; empty ladders dropped.
    ladders: Vec<Vec<usize>>,
    centering: Option<Arc<Centering>>,
    /// Separations without usable pairs or with a degenerate design.
    pub skipped: Vec<SeparationVector>,
    pub layout: Layout,
}

fn cross_design(
    times: &[Vec<f64>],
    delta: SeparationVector,
    pairs: Vec<(usize, usize)>,
    drop_diagonal: bool,
    grid: &EvalGrid,
    h: f64,
) -> Result<CrossDesign> {
    let mut pts = Vec::new();
    for &(i, j) in &pairs {
        for (k, &s) in times[i].iter().enumerate() {
            for (l, &t) in times[j].iter().enumerate() {
                if drop_diagonal && i == j && k == l {
                    continue;
                }
                pts.push((s, t));
            }
        }
    }
    if pts.len() < 3 {
        return Err(SpaceError::InsufficientData(format!(
            "separation ({}, {}) has {} raw covariances",
            delta.dx,
            delta.dy,
            pts.len()
        )));
    }
    let (table, cells) = CellTable::indexed(pts.iter().copied());
    let design = SurfaceDesign::new(&table, grid.points(), h)?;
    Ok(CrossDesign { delta, pairs, cells, n_cells: table.cells.len(), design })
}

impl CrossDesign {
    fn smooth(&self, resid: &[Vec<f64>], drop_diagonal: bool, grid: &EvalGrid) -> Surface {
        let mut sums = vec![0.0; self.n_cells];
        let mut p = 0;
        for &(i, j) in &self.pairs {
            for (k, &a) in resid[i].iter().enumerate() {
                for (l, &b) in resid[j].iter().enumerate() {
                    if drop_diagonal && i == j && k == l {
                        continue;
                    }
                    sums[self.cells[p]] += a * b;
                    p += 1;
                }
            }
        }
        Surface { grid: grid.clone(), values: self.design.smooth(&sums) }
    }
}

impl PreparedFit {
    pub fn new(data: &FunctionalDataset, bandwidths: SmootherConfig, opts: &FitOptions) -> Result<Self> {
        ensure_valid(data)?;
        bandwidths.validate()?;
        if opts.k == 0 {
            return Err(SpaceError::invalid("K must be positive"));
        }
        if !(0.0..0.5).contains(&opts.trim) {
            return Err(SpaceError::invalid(format!("trim must lie in [0, 0.5), got {}", opts.trim)));
        }
        let grid = make_grid(data.time_domain, opts.grid_size)?;
        if opts.k > grid.len() {
            return Err(SpaceError::invalid(format!("K = {} exceeds the grid size {}", opts.k, grid.len())));
        }
        let layout = detect_layout(&data.locations);
        let mut groups = opts.grouping.resolve(opts.k)?;
        if layout != Layout::Planar {
            // direction is meaningless on a line
            groups.iter_mut().for_each(|g| g.isotropic = true);
        }
        let curves: Vec<Curve> = data.curves();
        let times: Vec<Vec<f64>> = curves.into_iter().map(|c| c.times).collect();

        let support = distinct(times.iter().flatten().copied());
        if support.len() < 2 {
            return Err(SpaceError::InsufficientData(format!(
                "need 2 distinct observation times, found {}",
                support.len()
            )));
        }
        let support_index: Vec<Vec<usize>> =
            times.iter().map(|ts| ts.iter().map(|&t| position(&support, t)).collect()).collect();
        let mut counts = vec![0.0; support.len()];
        support_index.iter().flatten().for_each(|&u| counts[u] += 1.0);
        let mean_smoother = LinearSmoother1d::new(&support, &counts, grid.points(), bandwidths.h_mu)?;
        let diag_smoother = LinearSmoother1d::new(&support, &counts, grid.points(), bandwidths.h_g)?;

        let n = data.n_locations();
        let selfs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let g00 = cross_design(&times, SeparationVector::ZERO, selfs, true, &grid, bandwidths.h_g)?;

        let ladders = match &opts.ladders {
            Some(l) => l.clone(),
            None => ladder_for_layout(layout, opts.m_max)?,
        };
        if ladders.is_empty() || ladders.iter().any(|l| l.is_empty()) {
            return Err(SpaceError::invalid("Δ ladders must be nonempty"));
        }
        let mut deltas: Vec<SeparationVector> = Vec::new();
        for d in ladders.iter().flatten() {
            let c = d.canonical();
            if c.is_zero() {
                return Err(SpaceError::invalid("Δ ladders must not contain the zero separation"));
            }
            if !deltas.contains(&c) {
                deltas.push(c);
            }
        }
        let designs: Vec<Result<CrossDesign>> = deltas
            .par_iter()
            .map(|&d| {
                let pairs = find_pair_positions(&data.locations, d, opts.radius);
                cross_design(&times, d, pairs, false, &grid, bandwidths.h_g)
            })
            .collect();
        let mut cross = Vec::new();
        let mut skipped = Vec::new();
        let mut slot = vec![None; deltas.len()];
        for (i, r) in designs.into_iter().enumerate() {
            match r {
                Ok(c) => {
                    slot[i] = Some(cross.len());
                    cross.push(c);
                }
                Err(e) if e.is_numerical() => skipped.push(deltas[i]),
                Err(e) => return Err(e),
            }
        }
        let ladders: Vec<Vec<usize>> = ladders
            .iter()
            .map(|l| {
                let mut idx: Vec<usize> = l
                    .iter()
                    .filter_map(|d| slot[deltas.iter().position(|x| *x == d.canonical()).expect("collected")])
                    .collect();
                idx.dedup();
                idx
            })
            .filter(|l| !l.is_empty())
            .collect();
        if ladders.is_empty() {
            return Err(SpaceError::InsufficientData("no separation in any ladder has usable pairs".into()));
        }
        let centering = opts.centering_correction.then(|| {
            Arc::new(Centering::new(data.locations.clone(), cross.iter().map(|c| c.pairs.clone()).collect()))
        });
        Ok(PreparedFit {
            times,
            grid,
            bandwidths,
            k: opts.k,
            trim: opts.trim,
            matern: opts.matern,
            groups,
            support_index,
            n_support: support.len(),
            mean_smoother,
            diag_smoother,
            g00,
            cross,
            ladders,
            centering,
            skipped,
            layout,
        })
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.grid
    }

    pub fn bandwidths(&self) -> SmootherConfig {
        self.bandwidths
    }

    pub fn groups(&self) -> &[MaternGroup] {
        &self.groups
    }

    pub fn times(&self) -> &[Vec<f64>] {
        &self.times
    }

    /// Eigen system and empirical correlations for values aligned with the
    /// prepared curves.
    pub fn estimate(&self, values: &[Vec<f64>]) -> Result<Estimates> {
        if values.len() != self.times.len() || values.iter().zip(&self.times).any(|(v, t)| v.len() != t.len()) {
            return Err(SpaceError::invalid("values do not match the prepared observation layout"));
        }
        let mut sums = vec![0.0; self.n_support];
        for (v, idx) in values.iter().zip(&self.support_index) {
            for (&y, &u) in v.iter().zip(idx) {
                sums[u] += y;
            }
        }
        let mean = self.mean_smoother.apply(&sums);
        let resid: Vec<Vec<f64>> = values
            .iter()
            .zip(&self.times)
            .map(|(v, ts)| v.iter().zip(ts).map(|(&y, &t)| y - self.grid.interpolate(&mean, t)).collect())
            .collect();

        let g00 = self.g00.smooth(&resid, true, &self.grid).symmetrized();
        let (mut eigenvalues, eigenfunctions) = eigendecompose(&g00, self.k)?;
        eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
        let mut diag = vec![0.0; self.n_support];
        for (r, idx) in resid.iter().zip(&self.support_index) {
            for (&e, &u) in r.iter().zip(idx) {
                diag[u] += e * e;
            }
        }
        let v_hat = self.diag_smoother.apply(&diag);
        let sigma2 = sigma2_from_diagonal(&self.grid, &v_hat, &g00);
        let eigen = EigenSystem { grid: self.grid.clone(), mean, eigenfunctions, eigenvalues, sigma2 };
        for (k, &l) in eigen.eigenvalues.iter().enumerate() {
            if !(l > 0.0) {
                return Err(SpaceError::DegenerateEigenvalue { k, value: l });
            }
        }
        let rho_hat: Vec<Vec<f64>> = self
            .cross
            .par_iter()
            .map(|c| correlations_for_surface(&eigen, c.delta, &c.smooth(&resid, false, &self.grid)))
            .collect::<Result<_>>()?;
        Ok(Estimates {
            eigen,
            deltas: self.cross.iter().map(|c| c.delta).collect(),
            rho_hat,
            ladders: self.ladders.clone(),
            centering: self.centering.clone(),
        })
    }

    /// Full fit with the prepared grouping.
    pub fn fit_values(&self, values: &[Vec<f64>]) -> Result<(SpaceModel, Estimates, Vec<TrimmedFit>)> {
        let est = self.estimate(values)?;
        let fits = est.fit_groups(&self.groups, &self.matern, self.trim)?;
        let model = est.model(&self.groups, &fits)?;
        Ok((model, est, fits))
    }

    pub fn matern_config(&self) -> &FitConfig {
        &self.matern
    }

    pub fn trim(&self) -> f64 {
        self.trim
    }
}

/// Per-fit estimates ahead of the Matérn stage.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub eigen: EigenSystem,
    /// Usable separations, canonical.
    pub deltas: Vec<SeparationVector>,
    /// ρ̂_k(Δ), indexed [Δ][k].
    pub rho_hat: Vec<Vec<f64>>,
    /// Ladders as indices into `deltas`.
    pub ladders: Vec<Vec<usize>>,
    pub centering: Option<Arc<Centering>>,
}

/// Expected empirical correlation after the sample mean over locations is
/// removed from every score: with r_i the row means of the model correlation
/// matrix and r̄ their average, pairs at Δ have centered covariance
/// λ(ρ(Δ) − mean(r_i + r_j) + r̄) and sites have variance λ(1 − r̄).
#[derive(Debug, Clone)]
pub struct Centering {
    locations: Vec<Location>,
    /// Pairs per entry of `Estimates::deltas`.
    pairs: Vec<Vec<(usize, usize)>>,
}

const CENTERING_PASSES: usize = 2;

impl Centering {
    pub fn new(locations: Vec<Location>, pairs: Vec<Vec<(usize, usize)>>) -> Self {
        Centering { locations, pairs }
    }

    /// Additive shift ρ_centered(Δ) − ρ(Δ) for each separation, or `None`
    /// when the model leaves almost no variance after centering.
    pub fn shifts(&self, p: &MaternParams, deltas: &[SeparationVector]) -> Option<Vec<f64>> {
        let n = self.locations.len();
        let mut r = vec![1.0; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let c = anisotropic_matern(SeparationVector::between(&self.locations[i], &self.locations[j]), p);
                r[i] += c;
                r[j] += c;
            }
        }
        r.iter_mut().for_each(|v| *v /= n as f64);
        let rbar = r.iter().sum::<f64>() / n as f64;
        if 1.0 - rbar < 0.05 {
            return None;
        }
        Some(
            self.pairs
                .iter()
                .zip(deltas)
                .map(|(pairs, &d)| {
                    let rho = anisotropic_matern(d, p);
                    let s = pairs.iter().map(|&(i, j)| r[i] + r[j]).sum::<f64>() / pairs.len().max(1) as f64;
                    (rho - s + rbar) / (1.0 - rbar) - rho
                })
                .collect(),
        )
    }
}

impl Estimates {
    pub fn correlations(&self) -> Vec<EmpiricalCorrelation> {
        self.deltas
            .iter()
            .zip(&self.rho_hat)
            .flat_map(|(&delta, r)| r.iter().enumerate().map(move |(k, &rho_hat)| EmpiricalCorrelation { delta, k, rho_hat }))
            .collect()
    }

    /// Points of one ladder pooled over `components`.
    pub fn ladder_points(&self, ladder: usize, components: &[usize]) -> Vec<CorrelationPoint> {
        self.ladders[ladder]
            .iter()
            .flat_map(|&d| components.iter().map(move |&k| (self.deltas[d], self.rho_hat[d][k])))
            .collect()
    }

    /// Trimmed ladder estimates for every group.
    pub fn fit_groups(&self, groups: &[MaternGroup], cfg: &FitConfig, trim: f64) -> Result<Vec<TrimmedFit>> {
        groups
            .iter()
            .map(|g| {
                let ladders: Vec<Vec<CorrelationPoint>> =
                    (0..self.ladders.len()).map(|l| self.ladder_points(l, &g.components)).collect();
                let c = FitConfig { fix_isotropic: cfg.fix_isotropic || g.isotropic, ..*cfg };
                let mut fit = trimmed_estimate_detailed(&ladders, &c, trim)?;
                if let Some(cen) = &self.centering {
                    for _ in 0..CENTERING_PASSES {
                        let Some(shift) = cen.shifts(&fit.estimate, &self.deltas) else { break };
                        let shift = &shift;
                        let ladders: Vec<Vec<CorrelationPoint>> = self
                            .ladders
                            .iter()
                            .map(|l| {
                                l.iter()
                                    .flat_map(|&d| {
                                        g.components
                                            .iter()
                                            .map(move |&k| (self.deltas[d], (self.rho_hat[d][k] - shift[d]).clamp(-1.0, 1.0)))
                                    })
                                    .collect()
                            })
                            .collect();
                        match trimmed_estimate_detailed(&ladders, &c, trim) {
                            Ok(f) => fit = f,
                            Err(_) => break,
                        }
                    }
                }
                Ok(fit)
            })
            .collect()
    }

    pub fn model(&self, groups: &[MaternGroup], fits: &[TrimmedFit]) -> Result<SpaceModel> {
        let k = self.eigen.k();
        let mut matern = vec![None; k];
        for (g, f) in groups.iter().zip(fits) {
            for &c in &g.components {
                matern[c] = Some(f.estimate);
            }
        }
        let matern: Vec<MaternParams> = matern
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| SpaceError::invalid("component groups do not cover every component"))?;
        let separable = groups.len() == 1 || matern.windows(2).all(|w| w[0] == w[1]);
        Ok(SpaceModel::new(self.eigen.clone(), matern, separable)?.with_centering(self.centering.is_some()))
    }
}

/// Empirical correlations computed directly from fPC scores, for densely
/// observed curves: ρ̂_k(Δ) = mean over N(Δ, r) of ξ_ik ξ_jk / λ_k, clipped.
pub fn estimates_from_scores(
    eigen: &EigenSystem,
    locations: &[Location],
    scores: &nalgebra::DMatrix<f64>,
    ladders: &[Vec<SeparationVector>],
    radius: f64,
    centering_correction: bool,
) -> Result<Estimates> {
    let k = eigen.k();
    if scores.nrows() != locations.len() || scores.ncols() != k {
        return Err(SpaceError::invalid("score matrix shape differs from locations × K"));
    }
    for (c, &l) in eigen.eigenvalues.iter().enumerate() {
        if !(l > 0.0) {
            return Err(SpaceError::DegenerateEigenvalue { k: c, value: l });
        }
    }
    let mut deltas: Vec<SeparationVector> = Vec::new();
    let mut rho_hat = Vec::new();
    let mut all_pairs = Vec::new();
    for d in ladders.iter().flatten() {
        let c = d.canonical();
        if c.is_zero() || deltas.contains(&c) {
            continue;
        }
        let pairs = find_pair_positions(locations, c, radius);
        if pairs.is_empty() {
            continue;
        }
        let r: Vec<f64> = (0..k)
            .map(|q| {
                let s: f64 = pairs.iter().map(|&(i, j)| scores[(i, q)] * scores[(j, q)]).sum();
                (s / pairs.len() as f64 / eigen.eigenvalues[q]).clamp(-1.0, 1.0)
            })
            .collect();
        deltas.push(c);
        rho_hat.push(r);
        all_pairs.push(pairs);
    }
    let ladders: Vec<Vec<usize>> = ladders
        .iter()
        .map(|l| l.iter().filter_map(|d| deltas.iter().position(|x| *x == d.canonical())).collect::<Vec<_>>())
        .filter(|l: &Vec<usize>| !l.is_empty())
        .collect();
    if ladders.is_empty() {
        return Err(SpaceError::InsufficientData("no separation in any ladder has pairs".into()));
    }
    let centering = centering_correction.then(|| Arc::new(Centering::new(locations.to_vec(), all_pairs)));
    Ok(Estimates { eigen: eigen.clone(), deltas, rho_hat, ladders, centering })
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: SpaceModel,
    pub bandwidths: BandwidthChoice,
    pub estimates: Estimates,
    /// Per group, in the order of the resolved grouping.
    pub groups: Vec<MaternGroup>,
    pub group_fits: Vec<TrimmedFit>,
    pub skipped: Vec<SeparationVector>,
}

/// Fits a model, selecting bandwidths first when none are given.
pub fn fit(data: &FunctionalDataset, opts: &FitOptions) -> Result<FitReport> {
    let bandwidths = match opts.bandwidths {
        Some(config) => BandwidthChoice { config, lobo: None },
        None => select_bandwidths(data, opts)?,
    };
    let prepared = PreparedFit::new(data, bandwidths.config, opts)?;
    let values: Vec<Vec<f64>> = data.curves().into_iter().map(|c| c.values).collect();
    let (model, estimates, group_fits) = prepared.fit_values(&values)?;
    Ok(FitReport {
        model,
        bandwidths,
        estimates,
        groups: prepared.groups.clone(),
        group_fits,
        skipped: prepared.skipped.clone(),
    })
}
