//! Eigen-analysis of smoothed surfaces, empirical spatial correlations and
//! fPCA of densely observed curves.
//!
//! Grid-discretized eigenproblems use trapezoid quadrature weights w, so the
//! symmetric matrix W^{1/2} G W^{1/2} is decomposed and eigenfunctions are
//! normalized to Σ_m w_m φ(t_m)² = 1.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data_model::EvalGrid;
use crate::error::{Result, SpaceError};
use crate::smoothing::Surface;
use crate::spatial_structure::{SeparationStructure, SeparationVector};

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    pub grid: EvalGrid,
    pub mean: Vec<f64>,
    /// Row k holds φ̂_k on the grid.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
}

impl EigenSystem {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    /// φ̂_k(t) for every k, by linear interpolation.
    pub fn eigenfunctions_at(&self, t: f64) -> Vec<f64> {
        self.eigenfunctions.iter().map(|f| self.grid.interpolate(f, t)).collect()
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        self.grid.interpolate(&self.mean, t)
    }

    /// Gram matrix of the eigenfunctions under grid quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |a, b| {
            self.grid.inner_product(&self.eigenfunctions[a], &self.eigenfunctions[b])
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCorrelation {
    pub delta: SeparationVector,
    pub k: usize,
    pub rho_hat: f64,
}

/// All eigenpairs of a symmetric surface in quadrature-weighted form,
/// sign-normalized, in arbitrary order.
fn all_pairs(surface: &Surface) -> Vec<(f64, Vec<f64>)> {
    let w = surface.grid.quadrature_weights();
    let m = w.len();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let g = &surface.values;
    let b = DMatrix::from_fn(m, m, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]) * sw[i] * sw[j]);
    let eig = SymmetricEigen::new(b);
    (0..m)
        .map(|c| {
            let mut f: Vec<f64> = (0..m).map(|i| eig.eigenvectors[(i, c)] / sw[i]).collect();
            fix_sign(&mut f, &w);
            (eig.eigenvalues[c], f)
        })
        .collect()
}

/// Nonnegative grid integral; on a tie the first nonzero value is positive.
fn needs_flip(f: &[f64], w: &[f64]) -> bool {
    let integral: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
    let scale: f64 = f.iter().zip(w).map(|(a, b)| a.abs() * b).sum();
    if integral.abs() > 1e-10 * scale {
        integral < 0.0
    } else {
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        f.iter().find(|v| v.abs() > 1e-10 * peak).is_some_and(|v| *v < 0.0)
    }
}

fn fix_sign(f: &mut [f64], w: &[f64]) {
    if needs_flip(f, w) {
        f.iter_mut().for_each(|v| *v = -*v);
    }
}

fn check_k(surface: &Surface, k: usize) -> Result<()> {
    let m = surface.grid.len();
    if k == 0 || k > m {
        return Err(SpaceError::invalid(format!("requested {k} eigenpairs from a {m}-point grid")));
    }
    if surface.values.nrows() != m || surface.values.ncols() != m {
        return Err(SpaceError::invalid("surface shape differs from its grid"));
    }
    Ok(())
}

/// Leading K eigenpairs by descending eigenvalue.
pub fn eigendecompose(surface: &Surface, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_k(surface, k)?;
    let mut pairs = all_pairs(surface);
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs.truncate(k);
    Ok(pairs.into_iter().unzip())
}

/// Leading K eigenpairs by descending |eigenvalue|, for cross surfaces.
pub fn eigendecompose_by_magnitude(surface: &Surface, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_k(surface, k)?;
    let mut pairs = all_pairs(surface);
    pairs.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()));
    pairs.truncate(k);
    Ok(pairs.into_iter().unzip())
}

/// Assigns each cross eigenpair, in order of decreasing |eigenvalue|, to the
/// unused base index whose eigenfunction has the largest absolute inner
/// product with it. Returns cross eigenvalues indexed by base k (0 where unmatched).
pub fn match_eigenpairs(base: &EigenSystem, cross_vals: &[f64], cross_funcs: &[Vec<f64>]) -> Vec<f64> {
    let k = base.k();
    let mut order: Vec<usize> = (0..cross_vals.len()).collect();
    order.sort_by(|&a, &b| cross_vals[b].abs().total_cmp(&cross_vals[a].abs()));
    let mut used = vec![false; k];
    let mut out = vec![0.0; k];
    for c in order {
        let best = (0..k)
            .filter(|&j| !used[j])
            .map(|j| (j, base.grid.inner_product(&cross_funcs[c], &base.eigenfunctions[j]).abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((j, _)) = best {
            used[j] = true;
            out[j] = cross_vals[c];
        }
    }
    out
}

/// ρ̂_k(Δ) = matched λ̂_k(Δ) / λ̂_k, clipped to [−1, 1], for every structure and k.
pub fn empirical_correlations(
    base: &EigenSystem,
    structures: &[SeparationStructure],
    surfaces: &[Surface],
) -> Result<Vec<EmpiricalCorrelation>> {
    if structures.len() != surfaces.len() {
        return Err(SpaceError::invalid("structures and surfaces differ in length"));
    }
    for (k, &l) in base.eigenvalues.iter().enumerate() {
        if !(l > 0.0) {
            return Err(SpaceError::DegenerateEigenvalue { k, value: l });
        }
    }
    let mut out = Vec::new();
    for (st, surf) in structures.iter().zip(surfaces) {
        for (k, rho_hat) in correlations_for_surface(base, st.delta, surf)?.into_iter().enumerate() {
            out.push(EmpiricalCorrelation { delta: st.delta, k, rho_hat });
        }
    }
    Ok(out)
}

pub(crate) fn correlations_for_surface(
    base: &EigenSystem,
    delta: SeparationVector,
    surface: &Surface,
) -> Result<Vec<f64>> {
    let k = base.k();
    if delta.is_zero() {
        return Ok(vec![1.0; k]);
    }
    let (vals, funcs) = eigendecompose_by_magnitude(surface, k)?;
    let matched = match_eigenpairs(base, &vals, &funcs);
    Ok(matched
        .iter()
        .zip(&base.eigenvalues)
        .map(|(c, l)| (c / l).clamp(-1.0, 1.0))
        .collect())
}

/// Result of [`dense_fpca`].
#[derive(Debug, Clone)]
pub struct DenseFpca {
    /// N×K_b penalized least-squares Fourier coefficients.
    pub coefficients: DMatrix<f64>,
    /// N×K scores ξ = C U (after centering when requested).
    pub scores: DMatrix<f64>,
    pub eigen: EigenSystem,
    pub penalty: f64,
    /// Smoothed curves Θ c on the grid, N×M.
    pub fitted: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseFpcaConfig {
    /// Odd number of Fourier basis functions.
    pub basis_size: usize,
    /// Curvature penalty; `None` selects it by generalized cross-validation.
    pub penalty: Option<f64>,
    pub n_components: usize,
    /// Subtract the mean coefficient vector before the eigen step.
    pub center: bool,
}

impl Default for DenseFpcaConfig {
    fn default() -> Self {
        DenseFpcaConfig {
            basis_size: 23,
            penalty: None,
            n_components: 2,
            center: false,
        }
    }
}

/// Fourier basis orthonormal in L² over the grid's domain: 1, cos, sin, cos 2ω, …;
/// returns the M×K_b design and the curvature weights ω_j⁴.
pub fn fourier_basis(grid: &EvalGrid, basis_size: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (a, len) = (grid.start(), grid.end() - grid.start());
    let m = grid.len();
    let mut theta = DMatrix::zeros(m, basis_size);
    let mut curv = vec![0.0; basis_size];
    for (i, &t) in grid.points().iter().enumerate() {
        theta[(i, 0)] = 1.0 / len.sqrt();
        for j in 1..basis_size {
            let freq = j.div_ceil(2) as f64;
            let arg = 2.0 * std::f64::consts::PI * freq * (t - a) / len;
            let c = (2.0 / len).sqrt();
            theta[(i, j)] = if j % 2 == 1 { c * arg.cos() } else { c * arg.sin() };
        }
    }
    for (j, c) in curv.iter_mut().enumerate().skip(1) {
        let omega = 2.0 * std::f64::consts::PI * j.div_ceil(2) as f64 / len;
        *c = omega.powi(4);
    }
    (theta, curv)
}

fn penalized_system(theta: &DMatrix<f64>, curv: &[f64], penalty: f64) -> Result<DMatrix<f64>> {
    let mut a = theta.transpose() * theta;
    // Singularity is judged against the unpenalized Gram scale, since a large
    // penalty only stiffens the system.
    let scale = a.trace() / a.nrows() as f64;
    for (j, c) in curv.iter().enumerate() {
        a[(j, j)] += penalty * c;
    }
    let min = SymmetricEigen::new(a.clone()).eigenvalues.min();
    if !(min > 1e-10 * scale) {
        return Err(SpaceError::IllConditioned(format!(
            "penalized basis system is singular (smallest eigenvalue {min:.3e}, scale {scale:.3e})"
        )));
    }
    a.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| SpaceError::IllConditioned("penalized basis system is not positive definite".into()))
}

fn gcv_penalty(curves: &DMatrix<f64>, theta: &DMatrix<f64>, curv: &[f64]) -> Result<f64> {
    let (n, m) = (curves.nrows(), curves.ncols());
    let mut best: Option<(f64, f64)> = None;
    for e in 0..=32 {
        let lambda = 10f64.powf(-12.0 + 0.5 * e as f64);
        let Ok(inv) = penalized_system(theta, curv, lambda) else { continue };
        let hat = theta * &inv * theta.transpose();
        let trace = hat.trace();
        if trace >= m as f64 - 1e-9 {
            continue;
        }
        let resid = curves - curves * hat.transpose();
        let rss = resid.norm_squared();
        let score = m as f64 * rss / (n as f64 * (m as f64 - trace).powi(2));
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, lambda));
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| SpaceError::IllConditioned("no admissible penalty on the GCV ladder".into()))
}

/// fPCA of curves observed densely on a common grid via a penalized Fourier fit.
pub fn dense_fpca(curves: &DMatrix<f64>, grid: &EvalGrid, cfg: &DenseFpcaConfig) -> Result<DenseFpca> {
    let (n, m) = (curves.nrows(), curves.ncols());
    if m != grid.len() {
        return Err(SpaceError::invalid("curve matrix width differs from grid size"));
    }
    if n == 0 {
        return Err(SpaceError::InsufficientData("no curves".into()));
    }
    if cfg.basis_size % 2 == 0 || cfg.basis_size == 0 {
        return Err(SpaceError::invalid(format!("basis size must be odd, got {}", cfg.basis_size)));
    }
    if cfg.n_components == 0 || cfg.n_components > cfg.basis_size {
        return Err(SpaceError::invalid("component count must lie in 1..=basis_size"));
    }
    if curves.iter().any(|v| !v.is_finite()) {
        return Err(SpaceError::invalid("non-finite curve values"));
    }
    let (theta, curv) = fourier_basis(grid, cfg.basis_size);
    let penalty = match cfg.penalty {
        Some(p) if p >= 0.0 && p.is_finite() => p,
        Some(p) => return Err(SpaceError::invalid(format!("penalty must be nonnegative, got {p}"))),
        None => gcv_penalty(curves, &theta, &curv)?,
    };
    let inv = penalized_system(&theta, &curv, penalty)?;
    // rows of C: c_i = (ΘᵀΘ + λP)⁻¹ Θᵀ y_i
    let coefficients = curves * &theta * inv.transpose();
    let fitted = &coefficients * theta.transpose();

    let kb = cfg.basis_size;
    let mean_coef: DVector<f64> = if cfg.center {
        DVector::from_fn(kb, |j, _| coefficients.column(j).mean())
    } else {
        DVector::zeros(kb)
    };
    let mut centered = coefficients.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean_coef.transpose();
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..kb).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = cfg.n_components;
    let w = grid.quadrature_weights();
    let mut u = DMatrix::zeros(kb, k);
    let mut funcs = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        let mut f: Vec<f64> = (&theta * &col).iter().copied().collect();
        if needs_flip(&f, &w) {
            col = -col;
            f.iter_mut().for_each(|v| *v = -*v);
        }
        u.set_column(c, &col);
        funcs.push(f);
        vals.push(eig.eigenvalues[idx].max(0.0));
    }
    let scores = &centered * &u;
    let mean: Vec<f64> = (&theta * &mean_coef).iter().copied().collect();
    let resid = curves - &fitted;
    let sigma2 = resid.norm_squared() / (n * m) as f64;
    Ok(DenseFpca {
        coefficients,
        scores,
        eigen: EigenSystem {
            grid: grid.clone(),
            mean,
            eigenfunctions: funcs,
            eigenvalues: vals,
            sigma2,
        },
        penalty,
        fitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{make_grid, TimeDomain};
    use std::f64::consts::PI;

    fn grid(m: usize) -> EvalGrid {
        make_grid(TimeDomain::unit(), m).unwrap()
    }

    fn kernel_surface(g: &EvalGrid, f: impl Fn(f64, f64) -> f64) -> Surface {
        let p = g.points();
        Surface {
            grid: g.clone(),
            values: DMatrix::from_fn(p.len(), p.len(), |i, j| f(p[i], p[j])),
        }
    }

    fn phi2(t: f64) -> f64 {
        2f64.sqrt() * (2.0 * PI * t).sin()
    }

    #[test]
    fn constant_kernel() {
        let g = grid(101);
        let (vals, funcs) = eigendecompose(&kernel_surface(&g, |_, _| 1.0), 1).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!(funcs[0].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_component_kernel() {
        let g = grid(101);
        let s = kernel_surface(&g, |a, b| 3.679 + 1.353 * phi2(a) * phi2(b));
        let (vals, funcs) = eigendecompose(&s, 2).unwrap();
        assert!((vals[0] - 3.679).abs() < 0.01 && (vals[1] - 1.353).abs() < 0.01);
        let truth: Vec<f64> = g.points().iter().map(|&t| phi2(t)).collect();
        assert!((g.inner_product(&funcs[1], &truth).abs() - 1.0).abs() < 1e-8);
        let sys = EigenSystem { grid: g.clone(), mean: vec![0.0; 101], eigenfunctions: funcs, eigenvalues: vals, sigma2: 0.0 };
        let gram = sys.gram();
        assert!((gram - DMatrix::identity(2, 2)).abs().max() < 1e-6);
    }

    #[test]
    fn rank_k_reconstruction_is_exact() {
        let g = grid(41);
        let s = kernel_surface(&g, |a, b| 2.0 + 0.5 * phi2(a) * phi2(b));
        let (vals, funcs) = eigendecompose(&s, 2).unwrap();
        let p = g.points();
        for i in 0..p.len() {
            for j in 0..p.len() {
                let r: f64 = (0..2).map(|k| vals[k] * funcs[k][i] * funcs[k][j]).sum();
                assert!((r - s.values[(i, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_surface_and_bad_k() {
        let g = grid(11);
        let s = kernel_surface(&g, |_, _| 0.0);
        let (vals, _) = eigendecompose(&s, 3).unwrap();
        assert!(vals.iter().all(|v| *v == 0.0));
        assert!(eigendecompose(&s, 12).is_err());
    }

    #[test]
    fn sign_convention() {
        let g = grid(51);
        let s = kernel_surface(&g, |a, b| -> f64 { 0.7 * (1.0 - a) * (1.0 - b) });
        let (_, funcs) = eigendecompose(&s, 1).unwrap();
        assert!(g.integrate(&funcs[0]) > 0.0);
        let s = kernel_surface(&g, |a, b| phi2(a) * phi2(b));
        let (_, funcs) = eigendecompose(&s, 1).unwrap();
        let first = funcs[0].iter().find(|v| v.abs() > 1e-8).unwrap();
        assert!(*first > 0.0);
    }

    fn base_system(g: &EvalGrid) -> EigenSystem {
        let s = kernel_surface(g, |a, b| 3.0 + 1.0 * phi2(a) * phi2(b));
        let (vals, funcs) = eigendecompose(&s, 2).unwrap();
        EigenSystem { grid: g.clone(), mean: vec![0.0; g.len()], eigenfunctions: funcs, eigenvalues: vals, sigma2: 0.0 }
    }

    #[test]
    fn matching_identity_and_swap() {
        let g = grid(51);
        let base = base_system(&g);
        let m = match_eigenpairs(&base, &base.eigenvalues, &base.eigenfunctions);
        assert_eq!(m, base.eigenvalues);
        let swapped_f = vec![base.eigenfunctions[1].clone(), base.eigenfunctions[0].clone()];
        let m = match_eigenpairs(&base, &[0.9, 0.2], &swapped_f);
        assert_eq!(m, vec![0.2, 0.9]);
    }

    #[test]
    fn correlations_from_shape_matching() {
        // second component more correlated than the first: cross order flips
        let g = grid(51);
        let base = base_system(&g);
        let cross = kernel_surface(&g, |a, b| 0.1 * 3.0 + 0.9 * phi2(a) * phi2(b));
        let rho = correlations_for_surface(&base, SeparationVector::new(0.0, 1.0), &cross).unwrap();
        assert!((rho[0] - 0.1).abs() < 1e-8 && (rho[1] - 0.9).abs() < 1e-8, "{rho:?}");
        let zero = correlations_for_surface(&base, SeparationVector::ZERO, &cross).unwrap();
        assert_eq!(zero, vec![1.0, 1.0]);
    }

    #[test]
    fn correlation_checks_base_eigenvalues() {
        let g = grid(21);
        let mut base = base_system(&g);
        base.eigenvalues[1] = 0.0;
        let st = SeparationStructure { delta: SeparationVector::new(1.0, 0.0), radius: 0.0, pairs: vec![] };
        let surf = kernel_surface(&g, |_, _| 1.0);
        assert!(matches!(
            empirical_correlations(&base, &[st], &[surf]),
            Err(SpaceError::DegenerateEigenvalue { k: 1, .. })
        ));
    }

    #[test]
    fn dense_single_basis_function() {
        let g = grid(101);
        let (theta, _) = fourier_basis(&g, 23);
        let n = 12;
        let curves = DMatrix::from_fn(n, 101, |i, m| (1.0 + i as f64) * theta[(m, 3)]);
        let cfg = DenseFpcaConfig { penalty: Some(0.0), n_components: 3, ..DenseFpcaConfig::default() };
        let out = dense_fpca(&curves, &g, &cfg).unwrap();
        assert!(out.eigen.eigenvalues[0] > 1.0);
        assert!(out.eigen.eigenvalues[1].abs() < 1e-10 * out.eigen.eigenvalues[0]);
        let target: Vec<f64> = (0..101).map(|m| theta[(m, 3)]).collect();
        assert!((g.inner_product(&out.eigen.eigenfunctions[0], &target).abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dense_huge_penalty_flattens() {
        let g = grid(61);
        let curves = DMatrix::from_fn(4, 61, |i, m| {
            let t = g.points()[m];
            i as f64 + (2.0 * PI * t).sin() + 0.3 * (6.0 * PI * t).cos()
        });
        let cfg = DenseFpcaConfig { penalty: Some(1e12), ..DenseFpcaConfig::default() };
        let out = dense_fpca(&curves, &g, &cfg).unwrap();
        for i in 0..4 {
            let row = curves.row(i);
            let mean = row.mean();
            for m in 0..61 {
                assert!((out.fitted[(i, m)] - mean).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn dense_ill_conditioned() {
        let g = grid(9);
        let curves = DMatrix::from_element(3, 9, 1.0);
        let cfg = DenseFpcaConfig { basis_size: 23, penalty: Some(0.0), ..DenseFpcaConfig::default() };
        assert!(matches!(dense_fpca(&curves, &g, &cfg), Err(SpaceError::IllConditioned(_))));
    }
}
