//! Joint score covariance, BLUP of fPC scores, curve reconstruction and
//! asymptotic intervals.
//!
//! Joint vectors are indexed curve-major: entry i·K + k holds curve i, fPC k.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data_model::{Curve, EvalGrid, FunctionalDataset, Location};
use crate::eigen_analysis::EigenSystem;
use crate::error::{Result, SpaceError};
use crate::linalg::{cholesky_jittered, rank, symmetric_pinv};
use crate::matern::{correlation_matrix, MaternParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceModel {
    pub eigen: EigenSystem,
    /// One parameter set per fPC; identical entries when separable.
    pub matern: Vec<MaternParams>,
    pub separable: bool,
    /// Scores are taken as centered over locations: the correlation of
    /// fPC k becomes that of ξ_k − mean(ξ_k), see [`centered_correlation`].
    pub centered: bool,
}

impl SpaceModel {
    pub fn new(eigen: EigenSystem, matern: Vec<MaternParams>, separable: bool) -> Result<Self> {
        let m = SpaceModel { eigen, matern, separable, centered: false };
        m.validate()?;
        Ok(m)
    }

    pub fn with_centering(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.eigen.k();
        if self.matern.len() != k || self.eigen.eigenfunctions.len() != k {
            return Err(SpaceError::invalid(format!(
                "model has {} eigenvalues, {} eigenfunctions and {} Matérn sets",
                k,
                self.eigen.eigenfunctions.len(),
                self.matern.len()
            )));
        }
        if self.separable && self.matern.windows(2).any(|w| w[0] != w[1]) {
            return Err(SpaceError::invalid("separable model with differing Matérn parameters"));
        }
        if self.eigen.mean.len() != self.eigen.grid.len()
            || self.eigen.eigenfunctions.iter().any(|f| f.len() != self.eigen.grid.len())
        {
            return Err(SpaceError::invalid("eigen system arrays differ from the grid size"));
        }
        if !(self.eigen.sigma2 >= 0.0) || self.eigen.eigenvalues.iter().any(|l| !(*l >= 0.0)) {
            return Err(SpaceError::invalid("negative or non-finite variance in model"));
        }
        for p in &self.matern {
            p.validate()?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.eigen.k()
    }
}

/// Spatial correlation used when assembling the score covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correlation {
    /// Per-fPC Matérn correlation of the model.
    Model,
    /// ρ = I: curves treated as independent.
    Independent,
}

/// Components kept in the joint solve: λ_k above 1e−12·max λ.
fn active_components(model: &SpaceModel) -> Vec<usize> {
    let max = model.eigen.eigenvalues.iter().cloned().fold(0.0, f64::max);
    (0..model.k())
        .filter(|&k| model.eigen.eigenvalues[k] > 1e-12 * max && max > 0.0)
        .collect()
}

/// Distinct correlation matrices with the components that use them.
fn correlation_groups(
    model: &SpaceModel,
    locs: &[Location],
    comps: &[usize],
    corr: Correlation,
) -> Vec<(Vec<usize>, DMatrix<f64>)> {
    let n = locs.len();
    if corr == Correlation::Independent {
        return vec![(comps.to_vec(), DMatrix::identity(n, n))];
    }
    let mut groups: Vec<(MaternParams, Vec<usize>)> = Vec::new();
    for &k in comps {
        let p = model.matern[k];
        match groups.iter_mut().find(|g| g.0 == p) {
            Some(g) => g.1.push(k),
            None => groups.push((p, vec![k])),
        }
    }
    groups
        .into_iter()
        .map(|(p, ks)| {
            let rho = correlation_matrix(locs, &p);
            let rho = if model.centered { centered_correlation(&rho).unwrap_or(rho) } else { rho };
            (ks, rho)
        })
        .collect()
}

/// Variance share kept along the all-ones direction, which centering removes.
const CENTERED_FLOOR: f64 = 1e-6;

/// Correlation of centered scores, rescaled to unit average variance:
/// (ρ − r1ᵀ − 1rᵀ + r̄11ᵀ)/(1 − r̄) with r the row means of ρ. `None` when
/// 1 − r̄ < 0.05, where centering leaves too little variance to rescale.
pub fn centered_correlation(rho: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = rho.nrows();
    if n < 2 {
        return None;
    }
    let r: Vec<f64> = (0..n).map(|i| rho.row(i).sum() / n as f64).collect();
    let rbar = r.iter().sum::<f64>() / n as f64;
    if 1.0 - rbar < 0.05 {
        return None;
    }
    let mut c = DMatrix::from_fn(n, n, |i, j| (rho[(i, j)] - r[i] - r[j] + rbar) / (1.0 - rbar));
    for i in 0..n {
        c[(i, i)] += CENTERED_FLOOR;
    }
    Some(c)
}

/// Joint covariance of all scores, (N·K)×(N·K), curve-major.
pub fn score_covariance(model: &SpaceModel, locs: &[Location]) -> Result<DMatrix<f64>> {
    model.validate()?;
    let (n, k) = (locs.len(), model.k());
    let all: Vec<usize> = (0..k).collect();
    let mut sigma = DMatrix::zeros(n * k, n * k);
    for (ks, rho) in correlation_groups(model, locs, &all, Correlation::Model) {
        for &c in &ks {
            let lam = model.eigen.eigenvalues[c];
            for i in 0..n {
                for j in 0..n {
                    sigma[(i * k + c, j * k + c)] = rho[(i, j)] * lam;
                }
            }
        }
    }
    if n * k > 0 && sigma.trace() > 0.0 {
        cholesky_jittered(&sigma, "score covariance")?;
    }
    Ok(sigma)
}

#[derive(Debug, Clone)]
enum ErrorCov {
    /// H = σ² A⁻¹ over the active components, A factored.
    Factored {
        sigma2: f64,
        chol: Cholesky<f64, Dyn>,
        active: Vec<usize>,
    },
    /// Per-curve blocks of σ² A_i⁻¹ (independent curves).
    Blocks { blocks: Vec<DMatrix<f64>>, active: Vec<usize> },
    /// Fully materialized, curve-major over all K components.
    Dense(DMatrix<f64>),
}

/// BLUP scores with their error covariance H_K.
#[derive(Debug, Clone)]
pub struct ScoreEstimate {
    /// N×K matrix of ξ̂_ik.
    pub scores: DMatrix<f64>,
    cov: ErrorCov,
    full: OnceLock<DMatrix<f64>>,
}

impl ScoreEstimate {
    pub fn n_curves(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.scores.ncols()
    }

    /// Full (N·K)×(N·K) error covariance, curve-major.
    pub fn error_cov(&self) -> &DMatrix<f64> {
        self.full.get_or_init(|| self.materialize())
    }

    /// K×K block of curve i.
    pub fn error_cov_block(&self, i: usize) -> DMatrix<f64> {
        let k = self.n_components();
        match &self.cov {
            ErrorCov::Blocks { blocks, active } => expand(&blocks[i], active, k),
            _ => self.error_cov().view((i * k, i * k), (k, k)).into_owned(),
        }
    }

    fn materialize(&self) -> DMatrix<f64> {
        let (n, k) = (self.n_curves(), self.n_components());
        match &self.cov {
            ErrorCov::Dense(h) => h.clone(),
            ErrorCov::Blocks { blocks, active } => {
                let mut h = DMatrix::zeros(n * k, n * k);
                for (i, b) in blocks.iter().enumerate() {
                    h.view_mut((i * k, i * k), (k, k)).copy_from(&expand(b, active, k));
                }
                h
            }
            ErrorCov::Factored { sigma2, chol, active } => {
                let ka = active.len();
                let inv = chol.inverse() * *sigma2;
                let mut h = DMatrix::zeros(n * k, n * k);
                for i in 0..n {
                    for (a, &ca) in active.iter().enumerate() {
                        for j in 0..n {
                            for (b, &cb) in active.iter().enumerate() {
                                h[(i * k + ca, j * k + cb)] = inv[(i * ka + a, j * ka + b)];
                            }
                        }
                    }
                }
                // exact symmetry
                (&h + h.transpose()) * 0.5
            }
        }
    }
}

fn expand(block: &DMatrix<f64>, active: &[usize], k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k, k);
    for (a, &ca) in active.iter().enumerate() {
        for (b, &cb) in active.iter().enumerate() {
            out[(ca, cb)] = block[(a, b)];
        }
    }
    out
}

/// Per-curve design: eigenfunctions of the active components and centered values.
fn curve_designs(model: &SpaceModel, curves: &[Curve], active: &[usize]) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let e = &model.eigen;
    curves
        .iter()
        .map(|c| {
            let phi = DMatrix::from_fn(c.len(), active.len(), |r, a| {
                e.grid.interpolate(&e.eigenfunctions[active[a]], c.times[r])
            });
            let resid = DVector::from_fn(c.len(), |r, _| c.values[r] - e.mean_at(c.times[r]));
            (phi, resid)
        })
        .collect()
}

fn scores_matrix(n: usize, k: usize, active: &[usize], flat: &DVector<f64>) -> DMatrix<f64> {
    let ka = active.len();
    let mut s = DMatrix::zeros(n, k);
    for i in 0..n {
        for (a, &c) in active.iter().enumerate() {
            s[(i, c)] = flat[i * ka + a];
        }
    }
    s
}

/// BLUP of all scores under the model's spatial correlation.
pub fn blup_scores(model: &SpaceModel, data: &FunctionalDataset) -> Result<ScoreEstimate> {
    blup_scores_with(model, data, Correlation::Model)
}

/// Conditional expectation of the scores with curves treated as independent.
pub fn pace_scores(model: &SpaceModel, data: &FunctionalDataset) -> Result<ScoreEstimate> {
    blup_scores_with(model, data, Correlation::Independent)
}

/// ξ̂ = (σ² Σ⁻¹ + φᵀφ)⁻¹ φᵀ (Y − μ̂) with H = σ² (σ² Σ⁻¹ + φᵀφ)⁻¹; Σ⁻¹ is
/// assembled from per-fPC inverse correlation matrices. Falls back to the
/// direct form with a pseudo-inverse when σ² = 0.
pub fn blup_scores_with(model: &SpaceModel, data: &FunctionalDataset, corr: Correlation) -> Result<ScoreEstimate> {
    model.validate()?;
    let sigma2 = model.eigen.sigma2;
    if sigma2 == 0.0 {
        return direct_form(model, data, corr);
    }
    let (n, k) = (data.n_locations(), model.k());
    let active = active_components(model);
    let ka = active.len();
    let curves = data.curves();
    let designs = curve_designs(model, &curves, &active);
    let lam: Vec<f64> = active.iter().map(|&c| model.eigen.eigenvalues[c]).collect();

    if corr == Correlation::Independent {
        let mut flat = DVector::zeros(n * ka);
        let mut blocks = Vec::with_capacity(n);
        for (i, (phi, r)) in designs.iter().enumerate() {
            let mut a = phi.transpose() * phi;
            for (q, l) in lam.iter().enumerate() {
                a[(q, q)] += sigma2 / l;
            }
            let (chol, _) = cholesky_jittered(&a, "per-curve BLUP system")?;
            let x = chol.solve(&(phi.transpose() * r));
            flat.rows_mut(i * ka, ka).copy_from(&x);
            blocks.push(chol.inverse() * sigma2);
        }
        return Ok(ScoreEstimate {
            scores: scores_matrix(n, k, &active, &flat),
            cov: ErrorCov::Blocks { blocks, active },
            full: OnceLock::new(),
        });
    }

    let mut a = DMatrix::zeros(n * ka, n * ka);
    let pos: Vec<usize> = (0..k).map(|c| active.iter().position(|&x| x == c).unwrap_or(usize::MAX)).collect();
    for (ks, rho) in correlation_groups(model, &data.locations, &active, corr) {
        let (chol, _) = cholesky_jittered(&rho, "spatial correlation matrix")?;
        let rho_inv = chol.inverse();
        for &c in &ks {
            let q = pos[c];
            let f = sigma2 / model.eigen.eigenvalues[c];
            for i in 0..n {
                for j in 0..n {
                    a[(i * ka + q, j * ka + q)] = f * rho_inv[(i, j)];
                }
            }
        }
    }
    let mut rhs = DVector::zeros(n * ka);
    for (i, (phi, r)) in designs.iter().enumerate() {
        let g = phi.transpose() * phi;
        for p in 0..ka {
            for q in 0..ka {
                a[(i * ka + p, i * ka + q)] += g[(p, q)];
            }
        }
        rhs.rows_mut(i * ka, ka).copy_from(&(phi.transpose() * r));
    }
    let a = (&a + a.transpose()) * 0.5;
    let (chol, _) = cholesky_jittered(&a, "BLUP system")?;
    let flat = chol.solve(&rhs);
    Ok(ScoreEstimate {
        scores: scores_matrix(n, k, &active, &flat),
        cov: ErrorCov::Factored { sigma2, chol, active },
        full: OnceLock::new(),
    })
}

/// Direct form ξ̂ = Σ φᵀ (φ Σ φᵀ + σ² I)⁻¹ (Y − μ̂), H = Σ − Σ φᵀ (φ Σ φᵀ + σ² I)⁻¹ φ Σ,
/// with a pseudo-inverse when σ² = 0.
pub fn blup_scores_direct(model: &SpaceModel, data: &FunctionalDataset) -> Result<ScoreEstimate> {
    model.validate()?;
    direct_form(model, data, Correlation::Model)
}

fn direct_form(model: &SpaceModel, data: &FunctionalDataset, corr: Correlation) -> Result<ScoreEstimate> {
    let (n, k) = (data.n_locations(), model.k());
    let all: Vec<usize> = (0..k).collect();
    let curves = data.curves();
    let designs = curve_designs(model, &curves, &all);
    let mut sigma = DMatrix::zeros(n * k, n * k);
    for (ks, rho) in correlation_groups(model, &data.locations, &all, corr) {
        for &c in &ks {
            let lam = model.eigen.eigenvalues[c];
            for i in 0..n {
                for j in 0..n {
                    sigma[(i * k + c, j * k + c)] = rho[(i, j)] * lam;
                }
            }
        }
    }
    let offsets: Vec<usize> = curves
        .iter()
        .scan(0, |acc, c| {
            let o = *acc;
            *acc += c.len();
            Some(o)
        })
        .collect();
    let n_obs: usize = curves.iter().map(Curve::len).sum();
    // Φ̃: n_obs × (N·K) block diagonal
    let mut phi = DMatrix::zeros(n_obs, n * k);
    let mut r = DVector::zeros(n_obs);
    for (i, (p, res)) in designs.iter().enumerate() {
        phi.view_mut((offsets[i], i * k), (p.nrows(), k)).copy_from(p);
        r.rows_mut(offsets[i], p.nrows()).copy_from(res);
    }
    let sp = &sigma * phi.transpose();
    let mut p = &phi * &sp;
    let sigma2 = model.eigen.sigma2;
    for i in 0..n_obs {
        p[(i, i)] += sigma2;
    }
    let p = (&p + p.transpose()) * 0.5;
    let (x, gain) = if sigma2 > 0.0 {
        let (chol, _) = cholesky_jittered(&p, "observation covariance")?;
        (chol.solve(&r), chol.solve(&sp.transpose()))
    } else if let Some(chol) = nalgebra::Cholesky::new(p.clone()) {
        (chol.solve(&r), chol.solve(&sp.transpose()))
    } else {
        // singular when K < nᵢ or repeated times: noiseless data pins a subspace
        let pinv = symmetric_pinv(&p);
        (&pinv * &r, &pinv * sp.transpose())
    };
    let flat = &sp * x;
    let h = &sigma - &sp * gain;
    let h = (&h + h.transpose()) * 0.5;
    Ok(ScoreEstimate {
        scores: scores_matrix(n, k, &all, &flat),
        cov: ErrorCov::Dense(h),
        full: OnceLock::new(),
    })
}

/// Eigenfunction and mean values on `grid`, interpolating when it differs
/// from the model grid.
fn basis_on(model: &SpaceModel, grid: &EvalGrid) -> (Vec<f64>, Vec<Vec<f64>>) {
    let e = &model.eigen;
    if grid.matches(&e.grid) {
        return (e.mean.clone(), e.eigenfunctions.clone());
    }
    let mean = grid.points().iter().map(|&t| e.mean_at(t)).collect();
    let funcs = e
        .eigenfunctions
        .iter()
        .map(|f| grid.points().iter().map(|&t| e.grid.interpolate(f, t)).collect())
        .collect();
    (mean, funcs)
}

/// X̂_i(t) = μ̂(t) + Σ_k ξ̂_ik φ̂_k(t) on `grid`, N×M.
pub fn reconstruct(model: &SpaceModel, est: &ScoreEstimate, grid: &EvalGrid) -> Result<DMatrix<f64>> {
    if est.n_components() != model.k() {
        return Err(SpaceError::invalid(format!(
            "estimate has {} components, model {}",
            est.n_components(),
            model.k()
        )));
    }
    let (mean, funcs) = basis_on(model, grid);
    let m = grid.len();
    let phi = DMatrix::from_fn(model.k(), m, |k, j| funcs[k][j]);
    let mut out = &est.scores * phi;
    for mut row in out.row_iter_mut() {
        for j in 0..m {
            row[j] += mean[j];
        }
    }
    Ok(out)
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(SpaceError::invalid(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// Φ⁻¹(1 − α/2) for confidence level 1 − α.
pub fn normal_quantile(level: f64) -> Result<f64> {
    check_level(level)?;
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + 0.5 * level))
}

/// χ²_{d, level}.
pub fn chi2_quantile(dof: usize, level: f64) -> Result<f64> {
    check_level(level)?;
    if dof == 0 {
        return Err(SpaceError::invalid("chi-square needs at least 1 degree of freedom"));
    }
    let c = ChiSquared::new(dof as f64).map_err(|e| SpaceError::invalid(e.to_string()))?;
    Ok(c.inverse_cdf(level))
}

fn variance_at(model: &SpaceModel, block: &DMatrix<f64>, m: usize) -> f64 {
    let k = model.k();
    let phi = DVector::from_fn(k, |c, _| model.eigen.eigenfunctions[c][m]);
    (phi.transpose() * block * &phi)[(0, 0)].max(0.0)
}

fn fitted_at(model: &SpaceModel, est: &ScoreEstimate, i: usize, m: usize) -> f64 {
    model.eigen.mean[m]
        + (0..model.k())
            .map(|c| est.scores[(i, c)] * model.eigen.eigenfunctions[c][m])
            .sum::<f64>()
}

fn check_indices(model: &SpaceModel, est: &ScoreEstimate, i: usize) -> Result<()> {
    if i >= est.n_curves() {
        return Err(SpaceError::invalid(format!("curve {i} out of range")));
    }
    if est.n_components() != model.k() {
        return Err(SpaceError::invalid("estimate and model differ in K"));
    }
    Ok(())
}

/// X̂_i(t_m) ± Φ⁻¹(1 − α/2) √(φᵀ H_ii φ) at model grid index `m`.
pub fn pointwise_interval(model: &SpaceModel, est: &ScoreEstimate, i: usize, m: usize, level: f64) -> Result<(f64, f64)> {
    let z = normal_quantile(level)?;
    check_indices(model, est, i)?;
    if m >= model.eigen.grid.len() {
        return Err(SpaceError::invalid(format!("grid index {m} out of range")));
    }
    let half = z * variance_at(model, &est.error_cov_block(i), m).sqrt();
    let x = fitted_at(model, est, i, m);
    Ok((x - half, x + half))
}

/// X̂_i ± √(χ²_{K,1−α} φᵀ H_ii φ) over the whole model grid.
pub fn simultaneous_band(model: &SpaceModel, est: &ScoreEstimate, i: usize, level: f64) -> Result<Vec<(f64, f64)>> {
    let c = chi2_quantile(model.k(), level)?.sqrt();
    check_indices(model, est, i)?;
    let block = est.error_cov_block(i);
    Ok((0..model.eigen.grid.len())
        .map(|m| {
            let half = c * variance_at(model, &block, m).sqrt();
            let x = fitted_at(model, est, i, m);
            (x - half, x + half)
        })
        .collect())
}

/// Half-widths of pointwise intervals and simultaneous bands for every curve
/// and grid point (N×M each).
pub fn interval_half_widths(model: &SpaceModel, est: &ScoreEstimate, level: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let z = normal_quantile(level)?;
    let c = chi2_quantile(model.k(), level)?.sqrt();
    let (n, m) = (est.n_curves(), model.eigen.grid.len());
    let mut pw = DMatrix::zeros(n, m);
    let mut band = DMatrix::zeros(n, m);
    for i in 0..n {
        let block = est.error_cov_block(i);
        for j in 0..m {
            let s = variance_at(model, &block, j).sqrt();
            pw[(i, j)] = z * s;
            band[(i, j)] = c * s;
        }
    }
    Ok((pw, band))
}

/// Simultaneous intervals lᵀξ̂ ± √(χ²_{d,1−α} lᵀ H l) for the d rows of `contrasts`.
pub fn score_region(est: &ScoreEstimate, contrasts: &DMatrix<f64>, level: f64) -> Result<Vec<(f64, f64)>> {
    let nk = est.n_curves() * est.n_components();
    if contrasts.ncols() != nk {
        return Err(SpaceError::invalid(format!(
            "contrasts have {} columns, expected {}",
            contrasts.ncols(),
            nk
        )));
    }
    let d = contrasts.nrows();
    if d == 0 || rank(contrasts) < d {
        return Err(SpaceError::invalid("contrast matrix must have full row rank"));
    }
    let c = chi2_quantile(d, level)?.sqrt();
    let k = est.n_components();
    let flat = DVector::from_fn(nk, |idx, _| est.scores[(idx / k, idx % k)]);
    let h = est.error_cov();
    Ok(contrasts
        .row_iter()
        .map(|l| {
            let lt = l.transpose();
            let centre = (l * &flat)[(0, 0)];
            let var = (l * h * &lt)[(0, 0)].max(0.0);
            let half = c * var.sqrt();
            (centre - half, centre + half)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{make_grid, Observation, TimeDomain};
    use std::f64::consts::PI;

    fn model(sigma2: f64, zetas: &[f64]) -> SpaceModel {
        let grid = make_grid(TimeDomain::unit(), 51).unwrap();
        let p = grid.points();
        let f1 = vec![1.0; 51];
        let f2: Vec<f64> = p.iter().map(|t| 2f64.sqrt() * (2.0 * PI * t).sin()).collect();
        let mean: Vec<f64> = p.iter().map(|t| 0.5 * t).collect();
        let k = zetas.len();
        let eigen = EigenSystem {
            grid,
            mean,
            eigenfunctions: vec![f1, f2][..k].to_vec(),
            eigenvalues: vec![2.0, 0.7][..k].to_vec(),
            sigma2,
        };
        let matern = zetas.iter().map(|&z| MaternParams::isotropic(z, 0.5)).collect();
        let separable = zetas.windows(2).all(|w| w[0] == w[1]);
        SpaceModel::new(eigen, matern, separable).unwrap()
    }

    fn data(n: usize, per: usize) -> FunctionalDataset {
        let locs: Vec<Location> = (0..n).map(|i| Location::new(i as i64, 0.0, i as f64)).collect();
        let mut obs = Vec::new();
        for i in 0..n {
            for j in 0..per {
                let t = ((i * 7 + j * 13) % 50) as f64 / 50.0 + 0.003;
                obs.push(Observation::new(i as i64, t, (3.0 * t + i as f64).sin()));
            }
        }
        FunctionalDataset::new(locs, obs, TimeDomain::unit())
    }

    #[test]
    fn covariance_limits() {
        let m = model(0.1, &[1e-3, 1e-3]);
        let locs = data(3, 1).locations;
        let s = score_covariance(&m, &locs).unwrap();
        for i in 0..3 {
            assert_eq!(s[(2 * i, 2 * i)], 2.0);
            assert_eq!(s[(2 * i + 1, 2 * i + 1)], 0.7);
        }
        assert_eq!(s[(0, 2)], 0.0);
        let one = score_covariance(&m, &locs[..1]).unwrap();
        assert_eq!(one, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.7]));
    }

    #[test]
    fn separable_and_nonseparable_assembly_agree() {
        let mut m = model(0.1, &[3.0, 3.0]);
        let locs = data(5, 1).locations;
        let a = score_covariance(&m, &locs).unwrap();
        m.separable = false;
        let b = score_covariance(&m, &locs).unwrap();
        assert!((a - b).abs().max() <= 1e-12);
    }

    #[test]
    fn woodbury_matches_direct() {
        for zetas in [[2.0, 2.0], [4.0, 0.8]] {
            let m = model(0.3, &zetas);
            let d = data(8, 4);
            let w = blup_scores(&m, &d).unwrap();
            let x = blup_scores_direct(&m, &d).unwrap();
            let rel = (&w.scores - &x.scores).abs().max() / x.scores.abs().max();
            assert!(rel < 1e-10, "{rel}");
            let hr = (w.error_cov() - x.error_cov()).abs().max() / x.error_cov().abs().max();
            assert!(hr < 1e-10, "{hr}");
        }
    }

    #[test]
    fn independent_path_matches_generic() {
        let m = model(0.3, &[1e-3, 1e-3]);
        let d = data(6, 3);
        let fast = pace_scores(&m, &d).unwrap();
        let generic = blup_scores(&m, &d).unwrap();
        assert!((&fast.scores - &generic.scores).abs().max() < 1e-12);
        assert!((fast.error_cov() - generic.error_cov()).abs().max() < 1e-12);
        assert!((fast.error_cov_block(2) - generic.error_cov_block(2)).abs().max() < 1e-12);
    }

    #[test]
    fn reconstruct_is_linear_in_scores() {
        let m = model(0.3, &[2.0, 1.0]);
        let d = data(4, 3);
        let mut est = blup_scores(&m, &d).unwrap();
        let g = m.eigen.grid.clone();
        let base = reconstruct(&m, &est, &g).unwrap();
        est.scores *= 2.5;
        let scaled = reconstruct(&m, &est, &g).unwrap();
        for i in 0..4 {
            for j in 0..g.len() {
                let mu = m.eigen.mean[j];
                assert!(((scaled[(i, j)] - mu) - 2.5 * (base[(i, j)] - mu)).abs() < 1e-12);
            }
        }
        est.scores.fill(0.0);
        let flat = reconstruct(&m, &est, &g).unwrap();
        for i in 0..4 {
            for j in 0..g.len() {
                assert_eq!(flat[(i, j)], m.eigen.mean[j]);
            }
        }
    }

    #[test]
    fn quantiles() {
        assert!((normal_quantile(0.95).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!((chi2_quantile(1, 0.95).unwrap() - 3.841_458_820_694_124).abs() < 1e-8);
        assert!((chi2_quantile(2, 0.95).unwrap() - 5.991_464_547_107_979).abs() < 1e-8);
        assert!(normal_quantile(1.0).is_err());
        assert!(chi2_quantile(2, 0.0).is_err());
    }

    #[test]
    fn bands_dominate_intervals() {
        let m = model(0.3, &[2.0, 1.0]);
        let d = data(4, 3);
        let est = blup_scores(&m, &d).unwrap();
        let band = simultaneous_band(&m, &est, 1, 0.95).unwrap();
        for (j, b) in band.iter().enumerate() {
            let p = pointwise_interval(&m, &est, 1, j, 0.95).unwrap();
            assert!(b.1 - b.0 >= p.1 - p.0);
            if p.1 > p.0 {
                assert!(b.1 - b.0 > p.1 - p.0);
            }
        }
        assert!(pointwise_interval(&m, &est, 1, 0, 1.5).is_err());
    }

    #[test]
    fn score_region_cases() {
        let m = model(0.3, &[2.0, 1.0]);
        let d = data(3, 2);
        let est = blup_scores(&m, &d).unwrap();
        let mut l = DMatrix::zeros(1, 6);
        l[(0, 3)] = 1.0;
        let r = score_region(&est, &l, 0.95).unwrap();
        let h = est.error_cov()[(3, 3)];
        let half = 3.841_458_820_694_124f64.sqrt() * h.sqrt();
        assert!((r[0].1 - r[0].0 - 2.0 * half).abs() < 1e-8);
        assert!((0.5 * (r[0].0 + r[0].1) - est.scores[(1, 1)]).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 6, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(score_region(&est, &bad, 0.95).is_err());
    }

    #[test]
    fn zero_noise_direct_fallback() {
        let m = model(0.0, &[2.0, 1.0]);
        let d = data(5, 4);
        let est = blup_scores(&m, &d).unwrap();
        let h = est.error_cov();
        assert!((h - h.transpose()).abs().max() < 1e-10);
        assert!((0..h.nrows()).all(|i| h[(i, i)] >= -1e-10));
    }
}
