//! Simulation scenarios for 1D and 2D integer layouts, a synthetic
//! vegetation-index generator, the independent-curve baseline and the
//! reconstruction improvement metric.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{make_grid, Curve, EvalGrid, FunctionalDataset, Location, TimeDomain, DEFAULT_GRID_SIZE};
use crate::error::{Result, SpaceError};
use crate::linalg::cholesky_jittered;
use crate::matern::{anisotropic_matern, correlation_matrix, MaternParams};
use crate::pipeline::{fit, FitOptions};
use crate::reconstruction::{blup_scores, pace_scores, reconstruct, SpaceModel};
use crate::rng::{mix, substream};
use crate::spatial_structure::SeparationVector;

/// λ₁ = 10·e⁻¹, λ₂ = 10·e⁻².
pub const STUDY_LAMBDAS: [f64; 2] = [3.678_794_411_714_423, 1.353_352_832_366_127];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimLayout {
    /// Locations (0, 1), …, (0, N).
    Line(usize),
    /// Locations (i, j), 1 ≤ i, j ≤ E.
    Grid(usize),
    Custom(Vec<Location>),
}

impl SimLayout {
    pub fn locations(&self) -> Vec<Location> {
        match self {
            SimLayout::Line(n) => (1..=*n).map(|i| Location::new(i as i64, 0.0, i as f64)).collect(),
            SimLayout::Grid(e) => {
                let mut v = Vec::with_capacity(e * e);
                for i in 1..=*e {
                    for j in 1..=*e {
                        v.push(Location::new(((i - 1) * e + j) as i64, i as f64, j as f64));
                    }
                }
                v
            }
            SimLayout::Custom(l) => l.clone(),
        }
    }

    /// Separation at which correlations are reported.
    pub fn eval_delta(&self) -> SeparationVector {
        match self {
            SimLayout::Line(_) => SeparationVector::new(0.0, 1.0),
            _ => SeparationVector::new(1.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub layout: SimLayout,
    pub sigma: f64,
    /// (λ_k, Matérn parameters of fPC k).
    pub per_fpc: Vec<(f64, MaternParams)>,
    pub n_per_curve: usize,
    pub grid: EvalGrid,
    /// Orthonormal eigenfunctions on the grid, one per fPC.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub seed: u64,
}

/// φ₁ = 1 and φ₂ = √2 sin(2πt) on the unit interval (unit L² norm).
pub fn study_eigenfunctions(grid: &EvalGrid) -> Vec<Vec<f64>> {
    let p = grid.points();
    vec![
        vec![1.0; p.len()],
        p.iter().map(|t| 2f64.sqrt() * (2.0 * PI * t).sin()).collect(),
    ]
}

impl Scenario {
    /// Two-component generator on [0, 1] with zero mean, 10 observations per
    /// curve on a 101-point grid.
    pub fn study(name: &str, layout: SimLayout, sigma: f64, per_fpc: Vec<(f64, MaternParams)>, seed: u64) -> Self {
        let grid = make_grid(TimeDomain::unit(), DEFAULT_GRID_SIZE).expect("valid grid");
        let k = per_fpc.len();
        let mut eigenfunctions = study_eigenfunctions(&grid);
        eigenfunctions.truncate(k);
        Scenario {
            name: name.to_string(),
            layout,
            sigma,
            per_fpc,
            n_per_curve: 10,
            mean: vec![0.0; grid.len()],
            grid,
            eigenfunctions,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.per_fpc.len();
        if k == 0 || self.eigenfunctions.len() != k {
            return Err(SpaceError::invalid("scenario needs one eigenfunction per fPC"));
        }
        if self.per_fpc.windows(2).any(|w| !(w[0].0 > w[1].0)) || self.per_fpc.iter().any(|p| !(p.0 > 0.0)) {
            return Err(SpaceError::invalid("scenario eigenvalues must be positive and strictly decreasing"));
        }
        if self.n_per_curve == 0 || self.n_per_curve > self.grid.len() {
            return Err(SpaceError::invalid("observations per curve must lie in 1..=M"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SpaceError::invalid("noise level must be finite and nonnegative"));
        }
        if self.mean.len() != self.grid.len() || self.eigenfunctions.iter().any(|f| f.len() != self.grid.len()) {
            return Err(SpaceError::invalid("scenario functions differ from the grid size"));
        }
        for (_, p) in &self.per_fpc {
            p.validate()?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.per_fpc.len()
    }

    /// True correlation of fPC k at the reporting separation.
    pub fn true_rho(&self, k: usize) -> f64 {
        anisotropic_matern(self.layout.eval_delta(), &self.per_fpc[k].1)
    }
}

fn iso(zeta: f64) -> MaternParams {
    MaternParams::isotropic(zeta, 0.5)
}

fn aniso(alpha_deg: f64, zeta: f64) -> MaternParams {
    MaternParams::new(alpha_deg.to_radians(), 8.0, zeta, 0.5).expect("valid parameters")
}

/// The eight 1D settings: separable 1–4 and non-separable 1–2.
pub fn table1_scenarios(n: usize, seed: u64) -> Vec<Scenario> {
    let [l1, l2] = STUDY_LAMBDAS;
    let rows: [(&str, f64, f64, f64); 6] = [
        ("separable 1", 0.2, 5.0, 5.0),
        ("separable 2", 1.0, 5.0, 5.0),
        ("separable 3", 0.2, 2.0, 2.0),
        ("separable 4", 1.0, 2.0, 2.0),
        ("non-separable 1", 0.5, 6.0, 2.0),
        ("non-separable 2", 1.0, 6.0, 2.0),
    ];
    rows.iter()
        .map(|&(name, sigma, z1, z2)| {
            Scenario::study(name, SimLayout::Line(n), sigma, vec![(l1, iso(z1)), (l2, iso(z2))], seed)
        })
        .collect()
}

/// The 2D settings (σ = 1, δ = 8): separable 1–4 and non-separable 1.
pub fn table2_scenarios(edge: usize, seed: u64) -> Vec<Scenario> {
    let [l1, l2] = STUDY_LAMBDAS;
    let rows: [(&str, f64, f64, f64, f64); 5] = [
        ("separable 1", 6.0, 30.0, 6.0, 30.0),
        ("separable 2", 6.0, 60.0, 6.0, 60.0),
        ("separable 3", 3.0, 30.0, 3.0, 30.0),
        ("separable 4", 3.0, 60.0, 3.0, 60.0),
        ("non-separable 1", 5.0, 75.0, 5.0, 45.0),
    ];
    rows.iter()
        .map(|&(name, z1, a1, z2, a2)| {
            Scenario::study(name, SimLayout::Grid(edge), 1.0, vec![(l1, aniso(a1, z1)), (l2, aniso(a2, z2))], seed)
        })
        .collect()
}

/// Simulated dataset with its noise-free curves and scores.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: FunctionalDataset,
    /// N×M noise-free curves on the scenario grid.
    pub truth: DMatrix<f64>,
    /// N×K generating scores.
    pub scores: DMatrix<f64>,
}

/// Cholesky factors of the per-fPC score covariances, cached for repeated draws.
#[derive(Debug, Clone)]
pub struct ScoreSampler {
    locations: Vec<Location>,
    /// Per fPC: √λ_k · L_k.
    factors: Vec<DMatrix<f64>>,
}

impl ScoreSampler {
    pub fn new(locations: Vec<Location>, per_fpc: &[(f64, MaternParams)]) -> Result<Self> {
        let mut cache: Vec<(MaternParams, DMatrix<f64>)> = Vec::new();
        let mut factors = Vec::with_capacity(per_fpc.len());
        for &(lambda, p) in per_fpc {
            let l = match cache.iter().find(|c| c.0 == p) {
                Some(c) => c.1.clone(),
                None => {
                    let (ch, _) = cholesky_jittered(&correlation_matrix(&locations, &p), "score correlation matrix")?;
                    let l = ch.l();
                    cache.push((p, l.clone()));
                    l
                }
            };
            factors.push(l * lambda.sqrt());
        }
        Ok(ScoreSampler { locations, factors })
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// N×K scores; fPCs independent, each N(0, λ_k ρ_k).
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let n = self.locations.len();
        let mut out = DMatrix::zeros(n, self.factors.len());
        for (k, f) in self.factors.iter().enumerate() {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            out.set_column(k, &(f * z));
        }
        out
    }
}

/// Draws scores, builds curves and samples noisy observations at distinct
/// grid times per curve.
pub fn simulate_with(s: &Scenario, sampler: &ScoreSampler, rng: &mut ChaCha8Rng) -> SimOutput {
    let scores = sampler.draw(rng);
    let (n, m) = (scores.nrows(), s.grid.len());
    let phi = DMatrix::from_fn(s.k(), m, |k, j| s.eigenfunctions[k][j]);
    let mut truth = &scores * phi;
    for mut row in truth.row_iter_mut() {
        for j in 0..m {
            row[j] += s.mean[j];
        }
    }
    let pts = s.grid.points();
    let mut curves = Vec::with_capacity(n);
    for i in 0..n {
        let mut idx = sample(rng, m, s.n_per_curve).into_vec();
        idx.sort_unstable();
        let values = idx
            .iter()
            .map(|&j| truth[(i, j)] + s.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        curves.push(Curve { times: idx.iter().map(|&j| pts[j]).collect(), values });
    }
    let data = FunctionalDataset::from_curves(sampler.locations().to_vec(), &curves, s.grid.domain());
    SimOutput { data, truth, scores }
}

/// Replicate 0 of the scenario under its own seed.
pub fn simulate(s: &Scenario) -> Result<SimOutput> {
    simulate_replicate(s, 0)
}

pub fn simulate_replicate(s: &Scenario, replicate: u64) -> Result<SimOutput> {
    s.validate()?;
    let sampler = ScoreSampler::new(s.layout.locations(), &s.per_fpc)?;
    Ok(simulate_with(s, &sampler, &mut substream(s.seed, replicate)))
}

/// Reconstruction with the spatial correlation replaced by the identity.
pub fn pace_baseline(model: &SpaceModel, data: &FunctionalDataset) -> Result<DMatrix<f64>> {
    let est = pace_scores(model, data)?;
    reconstruct(model, &est, &model.eigen.grid)
}

pub fn space_reconstruction(model: &SpaceModel, data: &FunctionalDataset) -> Result<DMatrix<f64>> {
    let est = blup_scores(model, data)?;
    reconstruct(model, &est, &model.eigen.grid)
}

pub fn mean_squared_error(truth: &DMatrix<f64>, recon: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != recon.shape() {
        return Err(SpaceError::invalid(format!(
            "shape mismatch: truth {:?}, reconstruction {:?}",
            truth.shape(),
            recon.shape()
        )));
    }
    Ok((truth - recon).norm_squared() / truth.len().max(1) as f64)
}

/// IP = log(Err_PACE / Err_SPACE); +∞ when SPACE is exact and PACE is not.
pub fn improvement(truth: &DMatrix<f64>, space: &DMatrix<f64>, pace: &DMatrix<f64>) -> Result<f64> {
    let es = mean_squared_error(truth, space)?;
    let ep = mean_squared_error(truth, pace)?;
    if es == ep {
        return Ok(0.0);
    }
    Ok((ep / es).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub rmse: f64,
}

impl Summary {
    pub fn of(values: &[f64], truth: f64) -> Summary {
        let n = values.len() as f64;
        if values.is_empty() {
            return Summary { mean: f64::NAN, median: f64::NAN, std: f64::NAN, rmse: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if s.len() % 2 == 1 {
            s[s.len() / 2]
        } else {
            0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2])
        };
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / n).sqrt();
        Summary { mean, median, std, rmse }
    }
}

/// Which parameter a table row tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tracked {
    /// Range ζ (1D layouts).
    Zeta,
    /// Angle α in degrees (2D layouts).
    AlphaDegrees,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scenario: String,
    pub fpc: usize,
    pub sigma: f64,
    pub tracked: Tracked,
    pub true_param: f64,
    pub true_rho: f64,
    pub param: Summary,
    pub rho: Summary,
    /// Share of replicates with IP > 0, in percent.
    pub pct_ip_positive: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Per-replicate outcome used by [`run_table`].
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub params: Vec<MaternParams>,
    pub rho: Vec<f64>,
    pub ip: f64,
}

/// Simulates, fits and reconstructs one replicate.
pub fn run_replicate(s: &Scenario, sampler: &ScoreSampler, rng: &mut ChaCha8Rng, opts: &FitOptions) -> Result<ReplicateResult> {
    let sim = simulate_with(s, sampler, rng);
    let opts = FitOptions { k: s.k(), grid_size: s.grid.len(), ..opts.clone() };
    let report = fit(&sim.data, &opts)?;
    let model = &report.model;
    let space = space_reconstruction(model, &sim.data)?;
    let pace = pace_baseline(model, &sim.data)?;
    let ip = improvement(&sim.truth, &space, &pace)?;
    let delta = s.layout.eval_delta();
    Ok(ReplicateResult {
        params: model.matern.clone(),
        rho: model.matern.iter().map(|p| anisotropic_matern(delta, p)).collect(),
        ip,
    })
}

/// α̂ in degrees, unwrapped to within ±90° of the truth.
fn alpha_near(alpha: f64, truth_deg: f64) -> f64 {
    let a = alpha.to_degrees();
    truth_deg + (a - truth_deg + 90.0).rem_euclid(180.0) - 90.0
}

/// Replicated fits of each scenario summarized per fPC. Replicate r of
/// scenario j draws from the substream (mix(seed, j), r).
pub fn run_table(scenarios: &[Scenario], replicates: usize, seed: u64, opts: &FitOptions) -> Result<Vec<TableRow>> {
    if replicates < 2 {
        return Err(SpaceError::invalid("run_table needs at least 2 replicates"));
    }
    let mut rows = Vec::new();
    for (j, s) in scenarios.iter().enumerate() {
        s.validate()?;
        let sampler = ScoreSampler::new(s.layout.locations(), &s.per_fpc)?;
        let child = mix(seed, j as u64);
        let results: Vec<Result<ReplicateResult>> = (0..replicates)
            .into_par_iter()
            .map(|r| run_replicate(s, &sampler, &mut substream(child, r as u64), opts))
            .collect();
        let ok: Vec<&ReplicateResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let failures = replicates - ok.len();
        if failures * 5 > replicates {
            return Err(SpaceError::UnstableRun { scenario: s.name.clone(), failed: failures, total: replicates });
        }
        let pct = 100.0 * ok.iter().filter(|r| r.ip > 0.0).count() as f64 / ok.len() as f64;
        let tracked = match s.layout {
            SimLayout::Line(_) => Tracked::Zeta,
            _ => Tracked::AlphaDegrees,
        };
        for k in 0..s.k() {
            let truth = s.per_fpc[k].1;
            let (true_param, vals): (f64, Vec<f64>) = match tracked {
                Tracked::Zeta => (truth.zeta, ok.iter().map(|r| r.params[k].zeta).collect()),
                Tracked::AlphaDegrees => {
                    let t = truth.alpha.to_degrees();
                    (t, ok.iter().map(|r| alpha_near(r.params[k].alpha, t)).collect())
                }
            };
            let true_rho = s.true_rho(k);
            let rhos: Vec<f64> = ok.iter().map(|r| r.rho[k]).collect();
            rows.push(TableRow {
                scenario: s.name.clone(),
                fpc: k + 1,
                sigma: s.sigma,
                tracked,
                true_param,
                true_rho,
                param: Summary::of(&vals, true_param),
                rho: Summary::of(&rhos, true_rho),
                pct_ip_positive: pct,
                replicates,
                failures,
            });
        }
    }
    Ok(rows)
}

/// Synthetic vegetation-index grid: a seasonal mean with a green-up bump, an
/// isotropic amplitude component and an anisotropic timing component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EviConfig {
    pub edge: usize,
    /// Dense sampling grid (46 eight-day composites a year by default).
    pub grid_size: usize,
    pub sigma: f64,
    pub lambdas: [f64; 2],
    pub matern: [MaternParams; 2],
    pub seed: u64,
}

impl Default for EviConfig {
    fn default() -> Self {
        EviConfig {
            edge: 25,
            grid_size: 46,
            sigma: 0.03,
            lambdas: [0.01, 0.004],
            matern: [
                MaternParams::isotropic(4.0, 0.5),
                MaternParams::new(45f64.to_radians(), 6.0, 5.0, 0.5).expect("valid parameters"),
            ],
            seed: 2005,
        }
    }
}

/// Mean, amplitude and timing-shift shapes, orthonormalized on the grid.
pub fn evi_functions(grid: &EvalGrid) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = grid.points();
    let bump = |t: f64| (-((t - 0.55) / 0.18).powi(2)).exp();
    let mean: Vec<f64> = p.iter().map(|&t| 0.25 + 0.35 * bump(t)).collect();
    let amp: Vec<f64> = p.iter().map(|&t| 0.4 + bump(t)).collect();
    let shift: Vec<f64> = p.iter().map(|&t| -2.0 * (t - 0.55) / 0.18 * bump(t)).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut f in [amp, shift] {
        for b in &basis {
            let c = grid.inner_product(&f, b);
            f.iter_mut().zip(b).for_each(|(v, w)| *v -= c * w);
        }
        let norm = grid.inner_product(&f, &f).sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
        basis.push(f);
    }
    (mean, basis)
}

impl EviConfig {
    pub fn scenario(&self) -> Result<Scenario> {
        let grid = make_grid(TimeDomain::unit(), self.grid_size)?;
        let (mean, eigenfunctions) = evi_functions(&grid);
        let s = Scenario {
            name: "evi".into(),
            layout: SimLayout::Grid(self.edge),
            sigma: self.sigma,
            per_fpc: vec![(self.lambdas[0], self.matern[0]), (self.lambdas[1], self.matern[1])],
            n_per_curve: self.grid_size,
            grid,
            eigenfunctions,
            mean,
            seed: self.seed,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Dense noisy observations at every grid time.
pub fn simulate_evi(cfg: &EviConfig) -> Result<SimOutput> {
    simulate(&cfg.scenario()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapFillReport {
    pub ip: Vec<f64>,
    pub pct_ip_positive: f64,
    pub failures: usize,
}

/// Repeatedly thins dense data to `per_curve` random observations per curve,
/// fits the model on each thinned sample, and compares SPACE and the
/// independent-curve baseline against `reference` (N×M on the fitted grid).
pub fn gap_fill_study(
    dense: &FunctionalDataset,
    reference: &DMatrix<f64>,
    samples: usize,
    per_curve: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<GapFillReport> {
    if samples == 0 || per_curve == 0 {
        return Err(SpaceError::invalid("samples and observations per curve must be positive"));
    }
    let curves = dense.curves();
    if curves.iter().any(|c| c.len() < per_curve) {
        return Err(SpaceError::InsufficientData(format!("some curve has fewer than {per_curve} observations")));
    }
    let results: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let thinned: Vec<Curve> = curves
                .iter()
                .map(|c| {
                    let mut idx = sample(&mut rng, c.len(), per_curve).into_vec();
                    idx.sort_unstable();
                    Curve {
                        times: idx.iter().map(|&i| c.times[i]).collect(),
                        values: idx.iter().map(|&i| c.values[i]).collect(),
                    }
                })
                .collect();
            let sparse = FunctionalDataset::from_curves(dense.locations.clone(), &thinned, dense.time_domain);
            let report = fit(&sparse, opts)?;
            let space = space_reconstruction(&report.model, &sparse)?;
            let pace = pace_baseline(&report.model, &sparse)?;
            improvement(reference, &space, &pace)
        })
        .collect();
    let ip: Vec<f64> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failures = samples - ip.len();
    if failures * 5 > samples {
        return Err(SpaceError::UnstableRun { scenario: "gap fill".into(), failed: failures, total: samples });
    }
    let pct = 100.0 * ip.iter().filter(|v| **v > 0.0).count() as f64 / ip.len() as f64;
    Ok(GapFillReport { ip, pct_ip_positive: pct, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_dense_observations_equal_truth() {
        let mut s = Scenario::study("dense", SimLayout::Line(5), 0.0, vec![(3.0, iso(2.0)), (1.0, iso(1.0))], 4);
        s.n_per_curve = s.grid.len();
        let out = simulate(&s).unwrap();
        for (i, c) in out.data.curves().iter().enumerate() {
            for (j, v) in c.values.iter().enumerate() {
                assert_eq!(*v, out.truth[(i, j)]);
            }
        }
    }

    #[test]
    fn reproducible_under_seed() {
        let s = &table1_scenarios(20, 11)[0];
        let a = simulate_replicate(s, 3).unwrap();
        let b = simulate_replicate(s, 3).unwrap();
        let c = simulate_replicate(s, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert_eq!(a.data.observations.len(), 200);
    }

    #[test]
    fn study_settings() {
        let t1 = table1_scenarios(100, 0);
        assert_eq!(t1[0].sigma, 0.2);
        assert!((t1[0].true_rho(0) - 0.8187).abs() < 1e-4);
        let t2 = table2_scenarios(15, 0);
        assert!((t2[1].true_rho(0) - 0.786).abs() < 1e-3);
        assert!((t2[0].true_rho(0) - 0.664).abs() < 1e-3);
        let g = &t1[0].grid;
        let f = &t1[0].eigenfunctions;
        assert!((g.inner_product(&f[1], &f[1]) - 1.0).abs() < 1e-9);
        assert!(g.inner_product(&f[0], &f[1]).abs() < 1e-9);
    }

    #[test]
    fn improvement_cases() {
        let t = DMatrix::from_element(2, 3, 1.0);
        let a = DMatrix::from_element(2, 3, 1.5);
        assert_eq!(improvement(&t, &a, &a).unwrap(), 0.0);
        let e = 1f64.exp().sqrt();
        let p = DMatrix::from_element(2, 3, 1.0 + 0.5 * e);
        assert!((improvement(&t, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(improvement(&t, &t, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 10.0], 2.0);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!((s.rmse - (1.0f64 + 0.0 + 1.0 + 64.0).sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(alpha_near(179f64.to_radians(), 0.0).round(), -1.0);
    }

    #[test]
    fn evi_functions_orthonormal() {
        let g = make_grid(TimeDomain::unit(), 46).unwrap();
        let (_, f) = evi_functions(&g);
        assert!((g.inner_product(&f[0], &f[0]) - 1.0).abs() < 1e-12);
        assert!(g.inner_product(&f[0], &f[1]).abs() < 1e-12);
    }
}
