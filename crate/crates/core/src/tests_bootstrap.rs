//! Parametric-bootstrap tests of separability and isotropy.
//!
//! Scores of the components under test are whitened with the correlation
//! implied by the null fit, resampled curve-wise, recolored, and turned back
//! into curves at the original observation times with fresh noise. Every
//! replicate is refitted over the original design and bandwidths.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{FunctionalDataset, Location};
use crate::eigen_analysis::EigenSystem;
use crate::error::{Result, SpaceError};
use crate::matern::{anisotropic_matern, correlation_matrix, FitConfig, MaternParams};
use crate::pipeline::{estimates_from_scores, select_bandwidths, FitOptions, Grouping, MaternGroup, PreparedFit};
use crate::reconstruction::blup_scores;
use crate::rng::{mix, substream};
use crate::spatial_structure::{nearest_neighbour_lag, SeparationVector};

/// Disjoint nonempty groups of fPC indices covering 0..K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(groups: Vec<Vec<usize>>, k: usize) -> Result<Self> {
        let mut seen = vec![false; k];
        for g in &groups {
            if g.is_empty() {
                return Err(SpaceError::invalid("partition groups must be nonempty"));
            }
            for &c in g {
                if c >= k || seen[c] {
                    return Err(SpaceError::invalid(format!("component {c} out of range or repeated in partition")));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(SpaceError::invalid("partition does not cover every component"));
        }
        Ok(Partition { groups })
    }

    /// All K components in one group.
    pub fn single(k: usize) -> Self {
        Partition { groups: vec![(0..k).collect()] }
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn k(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    fn grouping(&self, isotropic: impl Fn(usize) -> bool) -> Grouping {
        Grouping::Groups(
            self.groups
                .iter()
                .enumerate()
                .map(|(r, g)| MaternGroup { components: g.clone(), isotropic: isotropic(r) })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub observed_stat: f64,
    /// Statistics of the replicates that refitted successfully.
    pub null_stats: Vec<f64>,
    pub p_value: f64,
    /// (level, reject) pairs.
    pub decision_at: Vec<(f64, bool)>,
    pub dropped: usize,
    /// Δ at which correlations are compared.
    pub eval_delta: SeparationVector,
}

impl TestResult {
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value <= level
    }
}

const CALIBRATION_ROUNDS: usize = 2;
const CALIBRATION_SALT: u64 = 0xCA1B;

pub const DECISION_LEVELS: [f64; 3] = [0.01, 0.05, 0.10];

/// Upper-tail empirical p-value (1 + #{S^b ≥ S}) / (B + 1).
pub fn upper_p_value(observed: f64, null: &[f64]) -> f64 {
    let c = null.iter().filter(|&&s| s >= observed).count();
    (1 + c) as f64 / (null.len() + 1) as f64
}

/// Two-sided version for signed statistics: twice the smaller tail, capped at 1.
pub fn two_sided_p_value(observed: f64, null: &[f64]) -> f64 {
    let hi = null.iter().filter(|&&s| s >= observed).count();
    let lo = null.iter().filter(|&&s| s <= observed).count();
    (2.0 * (1 + hi.min(lo)) as f64 / (null.len() + 1) as f64).min(1.0)
}

/// Whitening transform T = (λC)^{-1/2} Vᵀ for ρ = VCVᵀ, and its inverse.
#[derive(Debug, Clone)]
pub struct Whitener {
    t: DMatrix<f64>,
    t_inv: DMatrix<f64>,
}

impl Whitener {
    pub fn new(rho: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(SpaceError::invalid(format!("eigenvalue must be positive, got {lambda}")));
        }
        let n = rho.nrows();
        let eig = SymmetricEigen::new(rho.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || min < -1e-6 * max {
            return Err(SpaceError::Conditioning(format!(
                "correlation matrix ({n}×{n}) is not positive definite (smallest eigenvalue {min:.3e})"
            )));
        }
        let floor = 1e-10 * max;
        let c: Vec<f64> = eig.eigenvalues.iter().map(|&v| lambda * v.max(floor)).collect();
        let v = &eig.eigenvectors;
        let t = DMatrix::from_fn(n, n, |i, j| v[(j, i)] / c[i].sqrt());
        let t_inv = DMatrix::from_fn(n, n, |i, j| v[(i, j)] * c[j].sqrt());
        Ok(Whitener { t, t_inv })
    }

    pub fn decorrelate(&self, scores: &DVector<f64>) -> DVector<f64> {
        &self.t * scores
    }

    pub fn recorrelate(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.t_inv * z
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.t
    }
}

pub fn decorrelate_scores(scores: &[f64], rho: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
    check_len(scores.len(), rho)?;
    Ok(Whitener::new(rho, lambda)?.decorrelate(&DVector::from_column_slice(scores)).as_slice().to_vec())
}

pub fn recorrelate_scores(z: &[f64], rho: &DMatrix<f64>, lambda: f64) -> Result<Vec<f64>> {
    check_len(z.len(), rho)?;
    Ok(Whitener::new(rho, lambda)?.recorrelate(&DVector::from_column_slice(z)).as_slice().to_vec())
}

fn check_len(n: usize, rho: &DMatrix<f64>) -> Result<()> {
    if rho.nrows() != n || rho.ncols() != n {
        return Err(SpaceError::invalid(format!("score vector of length {n} against a {:?} correlation", rho.shape())));
    }
    Ok(())
}

/// Separability statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SeparabilityStatistic {
    /// Σ_r RMS dispersion of ρ(Δ^eval; θ̂_k) within group r.
    #[default]
    CorrelationDispersion,
    /// Same dispersion computed on ζ̂_k.
    RangeDispersion,
    /// Same dispersion computed on ln ζ̂_k.
    LogRangeDispersion,
    /// ρ(Δ^eval; θ̂_a) − ρ(Δ^eval; θ̂_b) for the first two members of the
    /// first multi-member group, tested two-sided.
    SignedCorrelationDifference,
}

/// Isotropy statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IsotropyStatistic {
    /// Σ_r ln δ̂_r over the tested groups.
    #[default]
    LogRatio,
    /// Σ_r |α̂_r|, with α measured as the angular distance from 0 on [0, π/2].
    AbsAngle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub replicates: usize,
    pub seed: u64,
    pub fit: FitOptions,
    /// Defaults to the nearest-neighbour separation.
    pub eval_delta: Option<SeparationVector>,
    /// Largest tolerated share of failed refits.
    pub max_drop_fraction: f64,
    /// Rescale whitened scores to unit mean square before resampling.
    pub unit_scale: bool,
    /// Pilot draws per calibration round; 0 generates with the raw estimates.
    pub calibration_draws: usize,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            replicates: 199,
            seed: 0,
            fit: FitOptions::default(),
            eval_delta: None,
            max_drop_fraction: 0.1,
            unit_scale: true,
            calibration_draws: 8,
        }
    }
}

impl TestOptions {
    fn validate(&self) -> Result<()> {
        if self.replicates < 99 {
            return Err(SpaceError::invalid(format!("at least 99 bootstrap replicates required, got {}", self.replicates)));
        }
        if !(0.0..1.0).contains(&self.max_drop_fraction) {
            return Err(SpaceError::invalid("max_drop_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn eval_delta(opts: &TestOptions, locs: &[Location]) -> Result<SeparationVector> {
    match opts.eval_delta {
        Some(d) if d.is_zero() => Err(SpaceError::invalid("Δ^eval must be nonzero")),
        Some(d) => Ok(d),
        None => nearest_neighbour_lag(locs).ok_or_else(|| SpaceError::InsufficientData("need two distinct locations".into())),
    }
}

fn rms_dispersion(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn separability_stat(stat: SeparabilityStatistic, partition: &Partition, params: &[MaternParams], delta: SeparationVector) -> f64 {
    let rho = |k: usize| anisotropic_matern(delta, &params[k]);
    match stat {
        SeparabilityStatistic::CorrelationDispersion => partition
            .groups()
            .iter()
            .map(|g| rms_dispersion(&g.iter().map(|&k| rho(k)).collect::<Vec<_>>()))
            .sum(),
        SeparabilityStatistic::RangeDispersion => partition
            .groups()
            .iter()
            .map(|g| rms_dispersion(&g.iter().map(|&k| params[k].zeta).collect::<Vec<_>>()))
            .sum(),
        SeparabilityStatistic::LogRangeDispersion => partition
            .groups()
            .iter()
            .map(|g| rms_dispersion(&g.iter().map(|&k| params[k].zeta.ln()).collect::<Vec<_>>()))
            .sum(),
        SeparabilityStatistic::SignedCorrelationDifference => {
            let g = partition.groups().iter().find(|g| g.len() > 1).expect("checked by caller");
            rho(g[0]) - rho(g[1])
        }
    }
}

/// Distance of an axis angle in [0, π) from the x-axis direction.
fn angle_from_axis(alpha: f64) -> f64 {
    let a = alpha.rem_euclid(PI);
    a.min(PI - a)
}

fn isotropy_stat(stat: IsotropyStatistic, partition: &Partition, iso_groups: &[usize], params: &[MaternParams]) -> f64 {
    iso_groups
        .iter()
        .map(|&r| {
            let p = &params[partition.groups()[r][0]];
            match stat {
                IsotropyStatistic::LogRatio => p.delta.ln(),
                IsotropyStatistic::AbsAngle => angle_from_axis(p.alpha),
            }
        })
        .sum()
}

/// Null generator: whiteners per resampled component and the fixed pieces
/// of the bootstrapped curves.
struct NullModel<'a> {
    prepared: &'a PreparedFit,
    eigen: &'a EigenSystem,
    scores: &'a DMatrix<f64>,
    /// (component, whitened scores, whitener).
    resampled: Vec<(usize, DVector<f64>, Whitener)>,
    /// μ̂(t_ij) + Σ over kept components ξ̂_ik φ̂_k(t_ij).
    base: Vec<Vec<f64>>,
    /// φ̂_k(t_ij), [i][j][k].
    phi: Vec<Vec<Vec<f64>>>,
    /// Multipliers of the recolored scores, aligned with `resampled`.
    score_scale: Vec<f64>,
    noise_var: f64,
    locs: &'a [Location],
    /// Null parameters as estimated, and as used to generate scores.
    target: Vec<MaternParams>,
    generating: Vec<MaternParams>,
}

impl<'a> NullModel<'a> {
    fn new(
        prepared: &'a PreparedFit,
        locs: &'a [Location],
        eigen: &'a EigenSystem,
        scores: &'a DMatrix<f64>,
        null: &[MaternParams],
        resample: &[usize],
        unit_scale: bool,
    ) -> Result<Self> {
        let mut cache: Vec<(MaternParams, DMatrix<f64>)> = Vec::new();
        let mut resampled = Vec::new();
        for &k in resample {
            let rho = match cache.iter().find(|c| c.0 == null[k]) {
                Some(c) => c.1.clone(),
                None => {
                    let r = correlation_matrix(locs, &null[k]);
                    cache.push((null[k], r.clone()));
                    r
                }
            };
            let w = Whitener::new(&rho, eigen.eigenvalues[k])?;
            let z = w.decorrelate(&scores.column(k).into_owned());
            resampled.push((k, if unit_scale { to_unit_scale(z) } else { z }, w));
        }
        let times = prepared.times();
        let phi: Vec<Vec<Vec<f64>>> =
            times.iter().map(|ts| ts.iter().map(|&t| eigen.eigenfunctions_at(t)).collect()).collect();
        let base = times
            .iter()
            .enumerate()
            .map(|(i, ts)| {
                ts.iter()
                    .enumerate()
                    .map(|(j, &t)| {
                        let kept: f64 = (0..eigen.k())
                            .filter(|k| !resample.contains(k))
                            .map(|k| scores[(i, k)] * phi[i][j][k])
                            .sum();
                        eigen.mean_at(t) + kept
                    })
                    .collect()
            })
            .collect();
        let score_scale = vec![1.0; resampled.len()];
        let noise_var = eigen.sigma2.max(0.0);
        Ok(NullModel {
            prepared,
            eigen,
            scores,
            resampled,
            base,
            phi,
            score_scale,
            noise_var,
            locs,
            target: null.to_vec(),
            generating: null.to_vec(),
        })
    }

    /// Adjusts the generating eigenvalues, noise variance and ranges until
    /// the estimates refitted on pilot draws match the observed estimates.
    /// Components sharing null parameters share one range adjustment.
    fn calibrate(&mut self, opts: &TestOptions) -> Result<()> {
        if opts.calibration_draws == 0 {
            return Ok(());
        }
        let seed = mix(opts.seed, CALIBRATION_SALT);
        for round in 0..CALIBRATION_ROUNDS {
            let fits: Vec<(EigenSystem, Vec<MaternParams>)> = (0..opts.calibration_draws)
                .into_par_iter()
                .filter_map(|p| {
                    let values = self.draw(&mut substream(seed, (round * opts.calibration_draws + p) as u64));
                    self.prepared.fit_values(&values).ok().map(|(m, _, _)| (m.eigen, m.matern))
                })
                .collect();
            if fits.len() * 2 < opts.calibration_draws {
                return Ok(());
            }
            let n = fits.len() as f64;
            for (slot, (k, _, _)) in self.resampled.iter().enumerate() {
                let mean = fits.iter().map(|f| f.0.eigenvalues[*k]).sum::<f64>() / n;
                if mean > 0.0 {
                    let ratio = (self.eigen.eigenvalues[*k] / mean).clamp(0.25, 4.0);
                    self.score_scale[slot] *= ratio.sqrt();
                }
            }
            let s2 = fits.iter().map(|f| f.0.sigma2).sum::<f64>() / n;
            self.noise_var = (self.noise_var + self.eigen.sigma2 - s2).max(0.0);

            let ks: Vec<usize> = self.resampled.iter().map(|r| r.0).collect();
            let mut done = vec![false; ks.len()];
            for a in 0..ks.len() {
                if done[a] {
                    continue;
                }
                let group: Vec<usize> =
                    (a..ks.len()).filter(|&b| self.target[ks[b]] == self.target[ks[a]]).collect();
                let mut log_ratio = 0.0;
                for &b in &group {
                    done[b] = true;
                    let fitted = fits.iter().map(|f| f.1[ks[b]].zeta.ln()).sum::<f64>() / n;
                    log_ratio += self.target[ks[b]].zeta.ln() - fitted;
                }
                let factor = (log_ratio / group.len() as f64).clamp(-1.0, 1.0).exp();
                let mut p = self.generating[ks[a]];
                p.zeta *= factor;
                let rho = correlation_matrix(self.locs, &p);
                for &b in &group {
                    self.generating[ks[b]] = p;
                    self.resampled[b].2 = Whitener::new(&rho, self.eigen.eigenvalues[ks[b]])?;
                }
            }
        }
        Ok(())
    }

    /// Resampled curve values for one replicate.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.scores.nrows();
        let perm: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let xi: Vec<(usize, DVector<f64>)> = self
            .resampled
            .iter()
            .zip(&self.score_scale)
            .map(|((k, z, w), c)| (*k, w.recorrelate(&DVector::from_fn(n, |i, _| z[perm[i]])) * *c))
            .collect();
        let sigma = self.noise_var.sqrt();
        self.base
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &b)| {
                        let s: f64 = xi.iter().map(|(k, x)| x[i] * self.phi[i][j][*k]).sum();
                        b + s + sigma * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            })
            .collect()
    }

    fn run<F>(&self, opts: &TestOptions, stat: F) -> (Vec<f64>, usize)
    where
        F: Fn(&[MaternParams]) -> f64 + Sync,
    {
        let out: Vec<Option<f64>> = (0..opts.replicates)
            .into_par_iter()
            .map(|b| {
                let values = self.draw(&mut substream(opts.seed, b as u64));
                let r = self.prepared.fit_values(&values).ok();
                r.map(|(m, _, _)| stat(&m.matern)).filter(|s| s.is_finite())
            })
            .collect();
        let kept: Vec<f64> = out.iter().flatten().copied().collect();
        let dropped = out.len() - kept.len();
        (kept, dropped)
    }
}

/// Predicted scores are shrunk towards zero, so their whitened values have
/// mean square below one; restoring it keeps the bootstrap signal level.
fn to_unit_scale(z: DVector<f64>) -> DVector<f64> {
    let ms = z.norm_squared() / z.len() as f64;
    if ms > 0.0 { z / ms.sqrt() } else { z }
}

fn finish(observed: f64, null: Vec<f64>, dropped: usize, opts: &TestOptions, two_sided: bool, delta: SeparationVector) -> Result<TestResult> {
    let total = opts.replicates;
    if dropped as f64 > opts.max_drop_fraction * total as f64 {
        return Err(SpaceError::UnstableTest { dropped, total });
    }
    let p_value = if two_sided { two_sided_p_value(observed, &null) } else { upper_p_value(observed, &null) };
    Ok(TestResult {
        observed_stat: observed,
        null_stats: null,
        p_value,
        decision_at: DECISION_LEVELS.iter().map(|&l| (l, p_value <= l)).collect(),
        dropped,
        eval_delta: delta,
    })
}

fn prepare(data: &FunctionalDataset, fit: &FitOptions, grouping: Grouping) -> Result<PreparedFit> {
    let bw = match fit.bandwidths {
        Some(b) => b,
        None => select_bandwidths(data, fit)?.config,
    };
    PreparedFit::new(data, bw, &FitOptions { grouping, ..fit.clone() })
}

fn observed_values(data: &FunctionalDataset) -> Vec<Vec<f64>> {
    data.curves().into_iter().map(|c| c.values).collect()
}

/// Tests H0: θ_k equal within every group of `null_partition`.
pub fn separability_test(
    data: &FunctionalDataset,
    null_partition: &Partition,
    statistic: SeparabilityStatistic,
    opts: &TestOptions,
) -> Result<TestResult> {
    opts.validate()?;
    if null_partition.k() != opts.fit.k {
        return Err(SpaceError::invalid("partition size differs from K"));
    }
    let resample: Vec<usize> = null_partition.groups().iter().filter(|g| g.len() > 1).flatten().copied().collect();
    if resample.is_empty() {
        return Err(SpaceError::invalid("separability null needs a group with more than one component"));
    }
    let delta = eval_delta(opts, &data.locations)?;
    // unrestricted fit, observed statistic and BLUP scores
    let prepared = prepare(data, &opts.fit, Grouping::PerComponent)?;
    let (model, est, _) = prepared.fit_values(&observed_values(data))?;
    let observed = separability_stat(statistic, null_partition, &model.matern, delta);
    let scores = blup_scores(&model, data)?.scores;
    // pooled null fit per group
    let null_groups: Vec<MaternGroup> = match null_partition.grouping(|_| false) {
        Grouping::Groups(g) => g
            .into_iter()
            .map(|g| MaternGroup { isotropic: g.isotropic || prepared.groups()[0].isotropic, ..g })
            .collect(),
        _ => unreachable!(),
    };
    let fits = est.fit_groups(&null_groups, prepared.matern_config(), prepared.trim())?;
    let null_model = est.model(&null_groups, &fits)?;

    let mut gen = NullModel::new(&prepared, &data.locations, &model.eigen, &scores, &null_model.matern, &resample, opts.unit_scale)?;
    gen.calibrate(opts)?;
    let (null, dropped) = gen.run(opts, |p| separability_stat(statistic, null_partition, p, delta));
    let two_sided = statistic == SeparabilityStatistic::SignedCorrelationDifference;
    finish(observed, null, dropped, opts, two_sided, delta)
}

/// Tests H0: α = 0 (δ = 1) for the groups `iso_groups` of `partition`, with
/// parameters pooled within each group throughout.
pub fn isotropy_test(
    data: &FunctionalDataset,
    partition: &Partition,
    iso_groups: &[usize],
    statistic: IsotropyStatistic,
    opts: &TestOptions,
) -> Result<TestResult> {
    opts.validate()?;
    check_iso_groups(partition, iso_groups, opts.fit.k)?;
    let delta = eval_delta(opts, &data.locations)?;
    let prepared = prepare(data, &opts.fit, partition.grouping(|_| false))?;
    if prepared.groups().iter().any(|g| g.isotropic) {
        return Err(SpaceError::invalid("isotropy test needs locations spanning two dimensions"));
    }
    let (model, est, _) = prepared.fit_values(&observed_values(data))?;
    let observed = isotropy_stat(statistic, partition, iso_groups, &model.matern);
    let scores = blup_scores(&model, data)?.scores;
    let null_groups = match partition.grouping(|r| iso_groups.contains(&r)) {
        Grouping::Groups(g) => g,
        _ => unreachable!(),
    };
    let fits = est.fit_groups(&null_groups, prepared.matern_config(), prepared.trim())?;
    let null_model = est.model(&null_groups, &fits)?;
    let resample: Vec<usize> = iso_groups.iter().flat_map(|&r| partition.groups()[r].iter().copied()).collect();

    let mut gen = NullModel::new(&prepared, &data.locations, &model.eigen, &scores, &null_model.matern, &resample, opts.unit_scale)?;
    gen.calibrate(opts)?;
    let (null, dropped) = gen.run(opts, |p| isotropy_stat(statistic, partition, iso_groups, p));
    finish(observed, null, dropped, opts, false, delta)
}

fn check_iso_groups(partition: &Partition, iso_groups: &[usize], k: usize) -> Result<()> {
    if partition.k() != k {
        return Err(SpaceError::invalid("partition size differs from K"));
    }
    if iso_groups.is_empty() || iso_groups.iter().any(|&r| r >= partition.groups().len()) {
        return Err(SpaceError::invalid("isotropy groups must be nonempty indices into the partition"));
    }
    Ok(())
}

/// Isotropy test for densely observed curves with known fPC scores: the
/// empirical correlations come straight from the scores and the
/// hypothesized curves are noiseless, so no re-smoothing is needed.
pub fn isotropy_test_scores(
    locations: &[Location],
    eigen: &EigenSystem,
    scores: &DMatrix<f64>,
    partition: &Partition,
    iso_groups: &[usize],
    statistic: IsotropyStatistic,
    ladders: &[Vec<SeparationVector>],
    opts: &TestOptions,
) -> Result<TestResult> {
    opts.validate()?;
    check_iso_groups(partition, iso_groups, eigen.k())?;
    let delta = eval_delta(opts, locations)?;
    let cfg: &FitConfig = &opts.fit.matern;
    let trim = opts.fit.trim;
    let groups = match partition.grouping(|_| false) {
        Grouping::Groups(g) => g,
        _ => unreachable!(),
    };
    let fit_params = |s: &DMatrix<f64>| -> Result<Vec<MaternParams>> {
        let est = estimates_from_scores(eigen, locations, s, ladders, opts.fit.radius, opts.fit.centering_correction)?;
        let fits = est.fit_groups(&groups, cfg, trim)?;
        Ok(est.model(&groups, &fits)?.matern)
    };
    let est = estimates_from_scores(eigen, locations, scores, ladders, opts.fit.radius, opts.fit.centering_correction)?;
    let fits = est.fit_groups(&groups, cfg, trim)?;
    let observed = isotropy_stat(statistic, partition, iso_groups, &est.model(&groups, &fits)?.matern);
    let null_groups = match partition.grouping(|r| iso_groups.contains(&r)) {
        Grouping::Groups(g) => g,
        _ => unreachable!(),
    };
    let null_fits = est.fit_groups(&null_groups, cfg, trim)?;
    let null = est.model(&null_groups, &null_fits)?.matern;
    let resample: Vec<usize> = iso_groups.iter().flat_map(|&r| partition.groups()[r].iter().copied()).collect();
    let whiteners: Vec<(usize, DVector<f64>, Whitener)> = resample
        .iter()
        .map(|&k| {
            let w = Whitener::new(&correlation_matrix(locations, &null[k]), eigen.eigenvalues[k])?;
            let z = w.decorrelate(&scores.column(k).into_owned());
            Ok((k, if opts.unit_scale { to_unit_scale(z) } else { z }, w))
        })
        .collect::<Result<_>>()?;
    let n = scores.nrows();
    let out: Vec<Option<f64>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(opts.seed, b as u64);
            let perm: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut s = scores.clone();
            for (k, z, w) in &whiteners {
                s.set_column(*k, &w.recorrelate(&DVector::from_fn(n, |i, _| z[perm[i]])));
            }
            fit_params(&s).ok().map(|p| isotropy_stat(statistic, partition, iso_groups, &p)).filter(|v| v.is_finite())
        })
        .collect();
    let kept: Vec<f64> = out.iter().flatten().copied().collect();
    let dropped = out.len() - kept.len();
    finish(observed, kept, dropped, opts, false, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Location;
    use rand::SeedableRng;

    fn line(n: usize) -> Vec<Location> {
        (0..n).map(|i| Location::new(i as i64, 0.0, i as f64)).collect()
    }

    #[test]
    fn trivial_whitening() {
        let id = DMatrix::identity(3, 3);
        let x = [1.0, -2.0, 0.5];
        assert_eq!(decorrelate_scores(&x, &id, 1.0).unwrap(), x.to_vec());
        let z = decorrelate_scores(&x, &id, 4.0).unwrap();
        assert!(z.iter().zip(&x).all(|(a, b)| (a - b / 2.0).abs() < 1e-15));
        let back = recorrelate_scores(&z, &id, 4.0).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn transform_whitens_model_covariance() {
        let locs = line(12);
        let rho = correlation_matrix(&locs, &MaternParams::isotropic(3.0, 0.5));
        let w = Whitener::new(&rho, 2.5).unwrap();
        let t = w.transform();
        let cov = t * (&rho * 2.5) * t.transpose();
        assert!((cov - DMatrix::<f64>::identity(12, 12)).abs().max() < 1e-8);
        let x = DVector::from_fn(12, |i, _| (i as f64).sin());
        assert!((w.recorrelate(&w.decorrelate(&x)) - &x).abs().max() < 1e-10);
    }

    #[test]
    fn recolored_noise_has_model_covariance() {
        let locs = line(5);
        let rho = correlation_matrix(&locs, &MaternParams::isotropic(2.0, 0.5));
        let w = Whitener::new(&rho, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 40_000;
        let mut acc = DMatrix::zeros(5, 5);
        for _ in 0..reps {
            let z = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = w.recorrelate(&z);
            acc += &x * x.transpose();
        }
        acc /= reps as f64;
        // entries of λρ are at most 3, so Monte Carlo error is about 3·√(2/reps)
        assert!((acc - rho * 3.0).abs().max() < 0.1);
    }

    #[test]
    fn indefinite_correlation_rejected() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Whitener::new(&bad, 1.0), Err(SpaceError::Conditioning(_))));
    }

    #[test]
    fn p_values() {
        let null: Vec<f64> = (0..99).map(|i| i as f64).collect();
        assert_eq!(upper_p_value(1000.0, &null), 0.01);
        assert_eq!(upper_p_value(-1.0, &null), 1.0);
        assert_eq!(upper_p_value(49.0, &null), 51.0 / 100.0);
        assert_eq!(two_sided_p_value(-5.0, &null), 0.02);
        assert_eq!(two_sided_p_value(49.0, &null), 1.0);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(vec![vec![0, 1]], 2).is_ok());
        assert!(Partition::new(vec![vec![0], vec![0, 1]], 2).is_err());
        assert!(Partition::new(vec![vec![0]], 2).is_err());
        assert!(Partition::new(vec![vec![], vec![0, 1]], 2).is_err());
    }

    #[test]
    fn statistics() {
        let p = Partition::single(2);
        let a = MaternParams::isotropic(6.0, 0.5);
        let b = MaternParams::isotropic(2.0, 0.5);
        let d = SeparationVector::new(0.0, 1.0);
        let s = separability_stat(SeparabilityStatistic::CorrelationDispersion, &p, &[a, b], d);
        let ra = (-1.0f64 / 6.0).exp();
        let rb = (-0.5f64).exp();
        assert!((s - (ra - rb).abs() / 2.0).abs() < 1e-12);
        assert_eq!(separability_stat(SeparabilityStatistic::CorrelationDispersion, &p, &[a, a], d), 0.0);
        assert!((separability_stat(SeparabilityStatistic::RangeDispersion, &p, &[a, b], d) - 2.0).abs() < 1e-12);
        let an = MaternParams::new(170f64.to_radians(), 4.0, 3.0, 0.5).unwrap();
        let s = isotropy_stat(IsotropyStatistic::AbsAngle, &p, &[0], &[an, an]);
        assert!((s - 10f64.to_radians()).abs() < 1e-12);
        assert!((isotropy_stat(IsotropyStatistic::LogRatio, &p, &[0], &[an, an]) - 4f64.ln()).abs() < 1e-12);
    }
}
