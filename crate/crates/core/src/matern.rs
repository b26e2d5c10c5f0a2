//! Matérn correlation with geometric anisotropy and least-squares fitting
//! of its parameters to empirical correlations.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data_model::Location;
use crate::error::{Result, SpaceError};
use crate::optim::{central_gradient, minimize, BfgsOptions};
use crate::spatial_structure::SeparationVector;
use crate::special::bessel_k_scaled;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    /// Anisotropy angle in radians, in [0, π).
    pub alpha: f64,
    /// Anisotropy ratio, ≥ 1.
    pub delta: f64,
    /// Range.
    pub zeta: f64,
    /// Smoothness.
    pub nu: f64,
}

impl MaternParams {
    pub fn new(alpha: f64, delta: f64, zeta: f64, nu: f64) -> Result<Self> {
        let p = MaternParams { alpha, delta, zeta, nu };
        p.validate()?;
        Ok(p.canonicalize())
    }

    pub fn isotropic(zeta: f64, nu: f64) -> Self {
        MaternParams { alpha: 0.0, delta: 1.0, zeta, nu }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.delta.is_finite()
            && self.delta > 0.0
            && self.zeta.is_finite()
            && self.zeta > 0.0
            && self.nu.is_finite()
            && self.nu > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SpaceError::invalid(format!("invalid Matérn parameters {self:?}")))
        }
    }

    /// Maps (α, δ) and (α + π/2, 1/δ) to the representative with δ ≥ 1 and α ∈ [0, π).
    pub fn canonicalize(self) -> Self {
        let (mut alpha, mut delta) = (self.alpha, self.delta);
        if delta < 1.0 {
            delta = 1.0 / delta;
            alpha += FRAC_PI_2;
        }
        if (delta - 1.0).abs() <= 1e-12 {
            delta = 1.0;
            alpha = 0.0;
        }
        alpha = alpha.rem_euclid(PI);
        if alpha >= PI {
            alpha = 0.0;
        }
        MaternParams { alpha, delta, zeta: self.zeta, nu: self.nu }
    }

    pub fn is_isotropic(&self) -> bool {
        self.delta == 1.0
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(SpaceError::invalid(format!("{name} must be finite, got {v}")))
    }
}

/// Isotropic Matérn correlation 2^{1−ν}/Γ(ν) (d/ζ)^ν K_ν(d/ζ).
pub fn matern_correlation(d: f64, zeta: f64, nu: f64) -> Result<f64> {
    check_finite("distance", d)?;
    check_finite("zeta", zeta)?;
    check_finite("nu", nu)?;
    if d < 0.0 || zeta <= 0.0 || nu <= 0.0 {
        return Err(SpaceError::invalid(format!(
            "need d ≥ 0, ζ > 0, ν > 0; got d={d}, ζ={zeta}, ν={nu}"
        )));
    }
    Ok(correlation_unchecked(d, zeta, nu))
}

pub(crate) fn correlation_unchecked(d: f64, zeta: f64, nu: f64) -> f64 {
    if d == 0.0 {
        return 1.0;
    }
    let x = d / zeta;
    if nu == 0.5 {
        (-x).exp()
    } else if nu == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if nu == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        correlation_bessel(x, nu)
    }
}

/// General-order evaluation through K_ν, without the half-integer shortcuts.
pub fn matern_correlation_bessel(d: f64, zeta: f64, nu: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        correlation_bessel(d / zeta, nu)
    }
}

fn correlation_bessel(x: f64, nu: f64) -> f64 {
    if x < 1e-300 {
        return 1.0;
    }
    let ln_rho = (1.0 - nu) * LN_2 - ln_gamma(nu) + nu * x.ln() + bessel_k_scaled(nu, x).ln() - x;
    ln_rho.exp().clamp(0.0, 1.0)
}

/// ‖S R Δ‖ with R the rotation by α and S = diag(√δ, 1/√δ).
pub fn anisotropic_distance(lag: SeparationVector, alpha: f64, delta: f64) -> f64 {
    let (s, c) = alpha.sin_cos();
    let p = c * lag.dx + s * lag.dy;
    let q = -s * lag.dx + c * lag.dy;
    (delta * p * p + q * q / delta).sqrt()
}

pub fn anisotropic_matern(lag: SeparationVector, p: &MaternParams) -> f64 {
    correlation_unchecked(anisotropic_distance(lag, p.alpha, p.delta), p.zeta, p.nu)
}

/// N×N correlation matrix of the locations under `p`.
pub fn correlation_matrix(locs: &[Location], p: &MaternParams) -> DMatrix<f64> {
    let n = locs.len();
    let mut m = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = anisotropic_matern(SeparationVector::between(&locs[i], &locs[j]), p);
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Fixed smoothness; `None` estimates ν.
    pub fix_nu: Option<f64>,
    /// Forces α = 0, δ = 1.
    pub fix_isotropic: bool,
    pub multistart: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            fix_nu: Some(0.5),
            fix_isotropic: false,
            multistart: 8,
            max_iterations: 500,
            gradient_tolerance: 1e-8,
        }
    }
}

pub type CorrelationPoint = (SeparationVector, f64);

const DELTA_MAX: f64 = 1e3;
const NU_MIN: f64 = 0.05;
const NU_MAX: f64 = 20.0;

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Unconstrained coordinates: ζ and ν through log-logistic maps onto fixed
/// boxes, δ = exp(ln δ_max · σ(b)) ∈ (1, δ_max), α unrestricted then wrapped.
struct Problem<'a> {
    points: &'a [CorrelationPoint],
    anisotropic: bool,
    fixed_nu: Option<f64>,
    lz: (f64, f64),
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        1 + if self.anisotropic { 2 } else { 0 } + usize::from(self.fixed_nu.is_none())
    }

    fn decode(&self, th: &[f64]) -> MaternParams {
        let zeta = (self.lz.0 + (self.lz.1 - self.lz.0) * logistic(th[0])).exp();
        let (alpha, delta, nu_index) = if self.anisotropic {
            let delta = (DELTA_MAX.ln() * logistic(th[1])).exp();
            (th[2], delta, 3)
        } else {
            (0.0, 1.0, 1)
        };
        let nu = match self.fixed_nu {
            Some(nu) => nu,
            None => (NU_MIN.ln() + (NU_MAX.ln() - NU_MIN.ln()) * logistic(th[nu_index])).exp(),
        };
        MaternParams { alpha, delta, zeta, nu }
    }

    fn encode(&self, p: &MaternParams) -> Vec<f64> {
        let mut th = vec![logit((p.zeta.ln() - self.lz.0) / (self.lz.1 - self.lz.0))];
        if self.anisotropic {
            th.push(logit(p.delta.max(1.0 + 1e-9).ln() / DELTA_MAX.ln()));
            th.push(p.alpha);
        }
        if self.fixed_nu.is_none() {
            th.push(logit((p.nu.ln() - NU_MIN.ln()) / (NU_MAX.ln() - NU_MIN.ln())));
        }
        th
    }

    fn objective(&self, th: &[f64]) -> f64 {
        let p = self.decode(th);
        self.points
            .iter()
            .map(|&(lag, r)| {
                let e = r - anisotropic_matern(lag, &p);
                e * e
            })
            .sum()
    }

    fn value_and_gradient(&self, th: &[f64]) -> (f64, Vec<f64>) {
        if self.fixed_nu != Some(0.5) {
            let f = self.objective(th);
            return (f, central_gradient(|x| self.objective(x), th, 1e-6));
        }
        let p = self.decode(th);
        let (sa, ca) = p.alpha.sin_cos();
        let mut f = 0.0;
        let mut g_zeta = 0.0;
        let mut g_delta = 0.0;
        let mut g_alpha = 0.0;
        for &(lag, r) in self.points {
            let pp = ca * lag.dx + sa * lag.dy;
            let qq = -sa * lag.dx + ca * lag.dy;
            let d = (p.delta * pp * pp + qq * qq / p.delta).sqrt();
            let rho = (-d / p.zeta).exp();
            let e = r - rho;
            f += e * e;
            // ∂f/∂ρ = −2e
            g_zeta += -2.0 * e * rho * d / (p.zeta * p.zeta);
            if self.anisotropic && d > 0.0 {
                let drho_dd = -rho / p.zeta;
                let dd_ddelta = (pp * pp - qq * qq / (p.delta * p.delta)) / (2.0 * d);
                let dd_dalpha = pp * qq * (p.delta - 1.0 / p.delta) / d;
                g_delta += -2.0 * e * drho_dd * dd_ddelta;
                g_alpha += -2.0 * e * drho_dd * dd_dalpha;
            }
        }
        let sz = logistic(th[0]);
        let mut g = vec![g_zeta * p.zeta * (self.lz.1 - self.lz.0) * sz * (1.0 - sz)];
        if self.anisotropic {
            let sb = logistic(th[1]);
            g.push(g_delta * p.delta * DELTA_MAX.ln() * sb * (1.0 - sb));
            g.push(g_alpha);
        }
        (f, g)
    }
}

fn range_bounds(points: &[CorrelationPoint]) -> (f64, f64) {
    let norms: Vec<f64> = points.iter().map(|(l, _)| l.norm()).filter(|&n| n > 0.0).collect();
    let lo = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().cloned().fold(0.0, f64::max);
    ((1e-3 * lo).ln(), (1e4 * hi).ln())
}

fn initial_ranges(points: &[CorrelationPoint]) -> (f64, f64) {
    let mut cand: Vec<f64> = points
        .iter()
        .filter(|(l, r)| l.norm() > 0.0 && *r > 0.0 && *r < 1.0)
        .map(|(l, r)| l.norm() / (-r.ln()))
        .collect();
    let mid = if cand.is_empty() {
        points.iter().map(|(l, _)| l.norm()).fold(1.0, f64::max)
    } else {
        cand.sort_by(f64::total_cmp);
        cand[cand.len() / 2]
    };
    (0.5 * mid, 2.0 * mid)
}

const SCAN_POINTS: usize = 48;

/// Range minimizing the objective over a log grid spanning the search box,
/// other parameters held at `template`.
fn scan_range(problem: &Problem, template: &MaternParams) -> f64 {
    let (lo, hi) = problem.lz;
    (0..SCAN_POINTS)
        .map(|i| (lo + (hi - lo) * (i as f64 + 0.5) / SCAN_POINTS as f64).exp())
        .map(|zeta| {
            let p = MaternParams { zeta, ..*template };
            (problem.objective(&problem.encode(&p)), zeta)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map_or(template.zeta, |(_, z)| z)
}

fn distinct_directions(points: &[CorrelationPoint]) -> usize {
    let mut dirs: Vec<(f64, f64)> = Vec::new();
    for (l, _) in points {
        if l.norm() == 0.0 {
            continue;
        }
        let c = l.canonical();
        let n = c.norm();
        let u = (c.dx / n, c.dy / n);
        if !dirs.iter().any(|d| (d.0 - u.0).abs() < 1e-9 && (d.1 - u.1).abs() < 1e-9) {
            dirs.push(u);
        }
    }
    dirs.len()
}

/// Least-squares fit of Matérn parameters to (lag, ρ̂) points.
pub fn fit_matern(points: &[CorrelationPoint], cfg: &FitConfig) -> Result<MaternParams> {
    fit_matern_detailed(points, cfg).map(|(p, _)| p)
}

/// As [`fit_matern`], also returning the attained objective.
pub fn fit_matern_detailed(points: &[CorrelationPoint], cfg: &FitConfig) -> Result<(MaternParams, f64)> {
    if cfg.multistart == 0 || cfg.max_iterations == 0 || !(cfg.gradient_tolerance > 0.0) {
        return Err(SpaceError::invalid("fit configuration needs multistart, iterations and tolerance > 0"));
    }
    if let Some(nu) = cfg.fix_nu {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(SpaceError::invalid(format!("fixed ν must be positive, got {nu}")));
        }
    }
    for (l, r) in points {
        if !(l.dx.is_finite() && l.dy.is_finite() && r.is_finite()) {
            return Err(SpaceError::invalid("non-finite correlation point"));
        }
    }
    let usable: Vec<CorrelationPoint> = points.iter().copied().filter(|(l, _)| l.norm() > 0.0).collect();
    let anisotropic = !cfg.fix_isotropic;
    let problem = Problem {
        points: &usable,
        anisotropic,
        fixed_nu: cfg.fix_nu,
        lz: (0.0, 0.0),
    };
    if usable.len() < problem.dim() {
        return Err(SpaceError::invalid(format!(
            "{} nonzero lags for {} free parameters",
            usable.len(),
            problem.dim()
        )));
    }
    if anisotropic && distinct_directions(&usable) < 2 {
        return Err(SpaceError::invalid("anisotropic fit needs lags in at least 2 directions"));
    }
    if usable.iter().all(|(_, r)| *r <= 0.0) {
        return Err(SpaceError::NoSignal);
    }
    let problem = Problem { lz: range_bounds(&usable), ..problem };

    let (short, long) = initial_ranges(&usable);
    let nu0 = cfg.fix_nu.unwrap_or(0.5);
    let starts: Vec<MaternParams> = if anisotropic {
        let n_alpha = cfg.multistart.div_ceil(2).max(1);
        (0..cfg.multistart)
            .map(|i| {
                let a = (i % n_alpha) as f64 * PI / n_alpha as f64;
                let z = if i < n_alpha { short } else { long };
                MaternParams { alpha: a, delta: 2.0, zeta: z, nu: nu0 }
            })
            .collect()
    } else {
        (0..cfg.multistart)
            .map(|i| {
                let w = if cfg.multistart == 1 { 0.5 } else { i as f64 / (cfg.multistart - 1) as f64 };
                MaternParams::isotropic(short * (long / short).powf(w), nu0)
            })
            .collect()
    };

    // Far from the optimum the objective is flat in ζ (all ρ ≈ 0 or ≈ 1) and
    // BFGS can stop there; a coarse profile scan seeds one start per α
    // direction at the best range on a log grid.
    let mut starts = starts;
    let mut seen_alpha: Vec<f64> = Vec::new();
    for s in starts.clone() {
        if seen_alpha.contains(&s.alpha) {
            continue;
        }
        seen_alpha.push(s.alpha);
        starts.push(MaternParams { zeta: scan_range(&problem, &s), ..s });
    }

    let opts = BfgsOptions {
        max_iterations: cfg.max_iterations,
        gradient_tolerance: cfg.gradient_tolerance,
    };
    let results: Vec<(f64, bool, MaternParams)> = starts
        .par_iter()
        .map(|s| {
            let r = minimize(|th| problem.value_and_gradient(th), &problem.encode(s), opts);
            (r.f, r.converged, problem.decode(&r.x).canonicalize())
        })
        .collect();

    let best = |only_converged: bool| {
        results
            .iter()
            .filter(|r| r.1 || !only_converged)
            .filter(|r| r.0.is_finite())
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .copied()
    };
    match best(true) {
        Some((f, _, p)) => Ok((p, f)),
        None => {
            let fallback = best(false);
            Err(SpaceError::ConvergenceFailure {
                best: fallback.map(|r| r.2),
                objective: fallback.map_or(f64::INFINITY, |r| r.0),
            })
        }
    }
}

/// Fit on the unweighted concatenation of all groups' points.
pub fn fit_pooled(per_k_points: &[Vec<CorrelationPoint>], cfg: &FitConfig) -> Result<MaternParams> {
    let all: Vec<CorrelationPoint> = per_k_points.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(SpaceError::invalid("no correlation points to pool"));
    }
    fit_matern(&all, cfg)
}

#[derive(Debug, Clone)]
pub struct TrimmedFit {
    pub estimate: MaternParams,
    /// Per-ladder fits; `None` where the fit failed.
    pub per_ladder: Vec<Option<MaternParams>>,
}

/// Fits every ladder and averages the parameters with `trim` removed on each side.
pub fn trimmed_estimate(ladders: &[Vec<CorrelationPoint>], cfg: &FitConfig, trim: f64) -> Result<MaternParams> {
    trimmed_estimate_detailed(ladders, cfg, trim).map(|t| t.estimate)
}

pub fn trimmed_estimate_detailed(
    ladders: &[Vec<CorrelationPoint>],
    cfg: &FitConfig,
    trim: f64,
) -> Result<TrimmedFit> {
    if ladders.is_empty() {
        return Err(SpaceError::invalid("no ladders to fit"));
    }
    let fits: Vec<Result<MaternParams>> = ladders.par_iter().map(|l| fit_matern(l, cfg)).collect();
    let per_ladder: Vec<Option<MaternParams>> = fits.iter().map(|r| r.as_ref().ok().copied()).collect();
    let ok: Vec<MaternParams> = per_ladder.iter().flatten().copied().collect();
    if ok.is_empty() {
        // Surface the last ladder's failure as the representative one.
        let err = fits.into_iter().rev().find_map(|r| r.err());
        return Err(match err {
            Some(e @ SpaceError::ConvergenceFailure { .. }) => e,
            Some(SpaceError::NoSignal) => SpaceError::NoSignal,
            _ => SpaceError::ConvergenceFailure { best: None, objective: f64::INFINITY },
        });
    }
    let estimate = trimmed_mean_params(&ok, trim)?;
    Ok(TrimmedFit { estimate, per_ladder })
}

/// Per-parameter trimmed mean; α is averaged on the circle of period π.
pub fn trimmed_mean_params(fits: &[MaternParams], trim: f64) -> Result<MaternParams> {
    if !(0.0..0.5).contains(&trim) {
        return Err(SpaceError::invalid(format!("trim must lie in [0, 0.5), got {trim}")));
    }
    if fits.is_empty() {
        return Err(SpaceError::invalid("no fits to average"));
    }
    let zeta = trimmed_mean(fits.iter().map(|p| p.zeta).collect(), trim);
    let nu = trimmed_mean(fits.iter().map(|p| p.nu).collect(), trim);
    let delta = trimmed_mean(fits.iter().map(|p| p.delta).collect(), trim);
    let alpha = circular_trimmed_mean(fits.iter().map(|p| p.alpha).collect(), trim, PI);
    Ok(MaternParams { alpha, delta, zeta, nu }.canonicalize())
}

pub fn trimmed_mean(mut v: Vec<f64>, trim: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let g = (trim * v.len() as f64).floor() as usize;
    let kept = &v[g..v.len() - g];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Trimmed mean of angles with the given period, taken around the mean direction.
pub fn circular_trimmed_mean(v: Vec<f64>, trim: f64, period: f64) -> f64 {
    let w = 2.0 * PI / period;
    let (s, c) = v.iter().fold((0.0, 0.0), |(s, c), a| (s + (w * a).sin(), c + (w * a).cos()));
    let center = if s.abs() < 1e-12 && c.abs() < 1e-12 { 0.0 } else { s.atan2(c) / w };
    let offsets: Vec<f64> = v
        .iter()
        .map(|a| {
            let d = (a - center).rem_euclid(period);
            if d >= period / 2.0 {
                d - period
            } else {
                d
            }
        })
        .collect();
    (center + trimmed_mean(offsets, trim)).rem_euclid(period)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn even_in_lag(dx in -5.0f64..5.0, dy in -5.0f64..5.0, a in 0.0f64..PI, d in 1.0f64..10.0, z in 0.3f64..9.0) {
            let p = MaternParams { alpha: a, delta: d, zeta: z, nu: 0.5 };
            let l = SeparationVector::new(dx, dy);
            prop_assert_eq!(anisotropic_matern(l, &p), anisotropic_matern(l.neg(), &p));
        }

        #[test]
        fn identifiable_pairs_agree(a in 0.0f64..PI, d in 1.01f64..20.0, dx in -4.0f64..4.0, dy in -4.0f64..4.0) {
            let p = MaternParams { alpha: a, delta: d, zeta: 2.0, nu: 0.5 };
            let q = MaternParams { alpha: (a + FRAC_PI_2) % PI, delta: 1.0 / d, zeta: 2.0, nu: 0.5 };
            let l = SeparationVector::new(dx, dy);
            prop_assert!((anisotropic_matern(l, &p) - anisotropic_matern(l, &q)).abs() < 1e-12);
            let (cp, cq) = (p.canonicalize(), q.canonicalize());
            let da = (cp.alpha - cq.alpha).abs();
            prop_assert!(da.min(PI - da) < 1e-12);
            prop_assert!((cp.delta - cq.delta).abs() < 1e-12 * d);
        }

        #[test]
        fn canonical_form_in_range(a in -10.0f64..10.0, d in 0.01f64..50.0) {
            let c = MaternParams { alpha: a, delta: d, zeta: 1.0, nu: 0.5 }.canonicalize();
            prop_assert!(c.alpha >= 0.0 && c.alpha < PI);
            prop_assert!(c.delta >= 1.0);
        }
    }
}
