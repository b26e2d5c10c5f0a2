//! Leave-one-bin-out bandwidth selection, J-fold reconstruction error for
//! choosing K, and the largest-drop rule on the error profile.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Curve, FunctionalDataset, Location, TimeDomain};
use crate::error::{Result, SpaceError};
use crate::reconstruction::{blup_scores, reconstruct, SpaceModel};
use crate::smoothing::{distinct, gauss, kernel_matrices, position, CellTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Bandwidth, or K as a real.
    pub candidate: f64,
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

impl CvReport {
    fn new(candidate: f64, fold_scores: Vec<f64>) -> Self {
        let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        CvReport { candidate, score, fold_scores }
    }
}

/// Raw inputs of a smoother: pooled (t, y) or surface (s, t, d).
#[derive(Debug, Clone, Copy)]
pub enum LoboPoints<'a> {
    Curve(&'a [(f64, f64)]),
    Surface(&'a [(f64, f64, f64)]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoboSelection {
    /// One report per candidate, ascending.
    pub reports: Vec<CvReport>,
    pub selected: f64,
    /// Every candidate scored the same up to rounding; `selected` is arbitrary.
    pub tie: bool,
    /// Number of bins per axis actually used.
    pub bins: usize,
}

/// Log-spaced bandwidth ladder from 2% to 40% of the domain length.
pub fn default_bandwidth_candidates(domain: TimeDomain, n: usize) -> Vec<f64> {
    let (lo, hi) = (0.02 * domain.length(), 0.4 * domain.length());
    if n <= 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

fn bin_of(v: f64, domain: TimeDomain, bins: usize) -> usize {
    let f = ((v - domain.start) / domain.length() * bins as f64).floor();
    (f.max(0.0) as usize).min(bins - 1)
}

/// Leave-one-bin-out cross-validation of the local linear smoother over
/// equal-width bins of the time domain (squares of the (s, t) domain in 2D).
/// Held-out points are predicted from all points outside their bin and scored
/// by mean squared error. When a bin holds no points, the bin count drops by
/// one, down to 2.
pub fn lobo_bandwidth(
    points: LoboPoints<'_>,
    domain: TimeDomain,
    candidates: &[f64],
    bins: usize,
) -> Result<LoboSelection> {
    if bins < 2 {
        return Err(SpaceError::invalid(format!("need at least 2 bins, got {bins}")));
    }
    if candidates.is_empty() || candidates.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(SpaceError::invalid("bandwidth candidates must be nonempty and positive"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut b = bins;
    loop {
        let run = match points {
            LoboPoints::Curve(p) => Lobo1d::new(p, domain, b).map(|l| l.run(&sorted)),
            LoboPoints::Surface(p) => Lobo2d::new(p, domain, b).map(|l| l.run(&sorted)),
        };
        match run {
            Some((reports, scale)) => return Ok(select(reports, scale, b)),
            None if b > 2 => b -= 1,
            None => {
                return Err(SpaceError::InsufficientData(
                    "leave-one-bin-out needs every bin populated, even with 2 bins".into(),
                ))
            }
        }
    }
}

fn select(reports: Vec<CvReport>, scale: f64, bins: usize) -> LoboSelection {
    let finite: Vec<&CvReport> = reports.iter().filter(|r| r.score.is_finite()).collect();
    let (selected, tie) = match finite.first() {
        None => (reports[reports.len() - 1].candidate, true),
        Some(_) => {
            let best = finite
                .iter()
                .min_by(|a, b| a.score.total_cmp(&b.score))
                .expect("nonempty");
            let worst = finite.iter().map(|r| r.score).fold(f64::MIN, f64::max);
            let tie = worst - best.score <= 1e-10 * scale.max(f64::MIN_POSITIVE);
            (best.candidate, tie)
        }
    };
    LoboSelection { reports, selected, tie, bins }
}

struct Lobo1d {
    support: Vec<f64>,
    counts: Vec<f64>,
    sums: Vec<f64>,
    squares: Vec<f64>,
    bin: Vec<usize>,
    bins: usize,
}

impl Lobo1d {
    fn new(points: &[(f64, f64)], domain: TimeDomain, bins: usize) -> Option<Self> {
        let support = distinct(points.iter().map(|p| p.0));
        let mut counts = vec![0.0; support.len()];
        let mut sums = vec![0.0; support.len()];
        let mut squares = vec![0.0; support.len()];
        for &(t, y) in points {
            let u = position(&support, t);
            counts[u] += 1.0;
            sums[u] += y;
            squares[u] += y * y;
        }
        let bin: Vec<usize> = support.iter().map(|&t| bin_of(t, domain, bins)).collect();
        let mut filled = vec![false; bins];
        bin.iter().for_each(|&b| filled[b] = true);
        filled.iter().all(|&f| f).then_some(Lobo1d { support, counts, sums, squares, bin, bins })
    }

    /// Reports per candidate and the mean squared response, the tie scale.
    fn run(&self, candidates: &[f64]) -> (Vec<CvReport>, f64) {
        let n: f64 = self.counts.iter().sum();
        let scale = self.squares.iter().sum::<f64>() / n;
        let reports = candidates
            .par_iter()
            .map(|&h| {
                let mut err = vec![0.0; self.bins];
                let mut cnt = vec![0.0; self.bins];
                for (u, &x) in self.support.iter().enumerate() {
                    let b = self.bin[u];
                    let (mut s0, mut s1, mut s2, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (v, &t) in self.support.iter().enumerate() {
                        if self.bin[v] == b {
                            continue;
                        }
                        let z = (t - x) / h;
                        let w = gauss(z);
                        s0 += self.counts[v] * w;
                        s1 += self.counts[v] * w * z;
                        s2 += self.counts[v] * w * z * z;
                        r0 += self.sums[v] * w;
                        r1 += self.sums[v] * w * z;
                    }
                    let det = s0 * s2 - s1 * s1;
                    let pred = if s0 > 1e-300 && det > 1e-10 * s0 * s2 {
                        (s2 * r0 - s1 * r1) / det
                    } else {
                        f64::NAN
                    };
                    err[b] += self.squares[u] - 2.0 * pred * self.sums[u] + self.counts[u] * pred * pred;
                    cnt[b] += self.counts[u];
                }
                CvReport::new(h, fold_errors(&err, &cnt))
            })
            .collect();
        (reports, scale)
    }
}

/// Per-fold mean squared errors; NaN (failed predictions) become +∞.
fn fold_errors(err: &[f64], cnt: &[f64]) -> Vec<f64> {
    err.iter()
        .zip(cnt)
        .map(|(e, c)| {
            let v = e / c;
            if v.is_nan() {
                f64::INFINITY
            } else {
                v.max(0.0)
            }
        })
        .collect()
}

struct Lobo2d {
    table: CellTable,
    sums: Vec<f64>,
    squares: Vec<f64>,
    /// Cells of each (s-bin, t-bin) square, flattened.
    members: Vec<Vec<usize>>,
}

impl Lobo2d {
    fn new(points: &[(f64, f64, f64)], domain: TimeDomain, bins: usize) -> Option<Self> {
        let (table, index) = CellTable::indexed(points.iter().map(|p| (p.0, p.1)));
        let mut sums = vec![0.0; table.cells.len()];
        let mut squares = vec![0.0; table.cells.len()];
        for (p, &c) in points.iter().zip(&index) {
            sums[c] += p.2;
            squares[c] += p.2 * p.2;
        }
        let mut members = vec![Vec::new(); bins * bins];
        for (c, &(u, v)) in table.cells.iter().enumerate() {
            let bs = bin_of(table.s_support[u], domain, bins);
            let bt = bin_of(table.t_support[v], domain, bins);
            members[bs * bins + bt].push(c);
        }
        members
            .iter()
            .all(|m| !m.is_empty())
            .then_some(Lobo2d { table, sums, squares, members })
    }

    fn run(&self, candidates: &[f64]) -> (Vec<CvReport>, f64) {
        let n: f64 = self.table.counts.iter().sum();
        let scale = self.squares.iter().sum::<f64>() / n;
        let reports = candidates
            .par_iter()
            .map(|&h| {
                let t = &self.table;
                let ks = kernel_matrices(&t.s_support, &t.s_support, h);
                let kt = kernel_matrices(&t.t_support, &t.t_support, h);
                // Full-data moments at every support cell: S00 S10 S01 S20 S11 S02, R00 R10 R01.
                let ns = t.s_support.len();
                let scatter = |w: &[f64], k: &DMatrix<f64>| {
                    let mut out = DMatrix::zeros(ns, k.nrows());
                    for (&(u, v), &wc) in t.cells.iter().zip(w) {
                        for r in 0..k.nrows() {
                            out[(u, r)] += wc * k[(r, v)];
                        }
                    }
                    out
                };
                let c0 = scatter(&t.counts, &kt[0]);
                let c1 = scatter(&t.counts, &kt[1]);
                let c2 = scatter(&t.counts, &kt[2]);
                let y0 = scatter(&self.sums, &kt[0]);
                let y1 = scatter(&self.sums, &kt[1]);
                let full = [
                    &ks[0] * &c0,
                    &ks[1] * &c0,
                    &ks[0] * &c1,
                    &ks[2] * &c0,
                    &ks[1] * &c1,
                    &ks[0] * &c2,
                    &ks[0] * &y0,
                    &ks[1] * &y0,
                    &ks[0] * &y1,
                ];
                let mut err = vec![0.0; self.members.len()];
                let mut cnt = vec![0.0; self.members.len()];
                for (b, cells) in self.members.iter().enumerate() {
                    for &c in cells {
                        let (a, e) = t.cells[c];
                        let mut m: [f64; 9] = std::array::from_fn(|q| full[q][(a, e)]);
                        // remove the held-out square's own contribution
                        for &src in cells {
                            let (u, v) = t.cells[src];
                            let (zs, zt) = ((t.s_support[u] - t.s_support[a]) / h, (t.t_support[v] - t.t_support[e]) / h);
                            let w = gauss(zs) * gauss(zt);
                            let wc = w * t.counts[src];
                            let wy = w * self.sums[src];
                            m[0] -= wc;
                            m[1] -= wc * zs;
                            m[2] -= wc * zt;
                            m[3] -= wc * zs * zs;
                            m[4] -= wc * zs * zt;
                            m[5] -= wc * zt * zt;
                            m[6] -= wy;
                            m[7] -= wy * zs;
                            m[8] -= wy * zt;
                        }
                        let pred = match crate::smoothing::first_inverse_row([m[0], m[1], m[2], m[3], m[4], m[5]]) {
                            Some(r) => r[0] * m[6] + r[1] * m[7] + r[2] * m[8],
                            None => f64::NAN,
                        };
                        err[b] += self.squares[c] - 2.0 * pred * self.sums[c] + t.counts[c] * pred * pred;
                        cnt[b] += t.counts[c];
                    }
                }
                CvReport::new(h, fold_errors(&err, &cnt))
            })
            .collect();
        (reports, scale)
    }
}

/// K right after the largest consecutive drop of the score profile (ties
/// toward smaller K), and whether no score decreased at all.
pub fn select_k(reports: &[CvReport]) -> Result<(usize, bool)> {
    if reports.len() < 2 {
        return Err(SpaceError::invalid("K selection needs at least 2 reports"));
    }
    let mut best = (1, f64::NEG_INFINITY);
    for j in 1..reports.len() {
        let drop = reports[j - 1].score - reports[j].score;
        if drop > best.1 {
            best = (j, drop);
        }
    }
    Ok((reports[best.0].candidate.round() as usize, !(best.1 > 0.0)))
}

/// What the reconstruction error was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrTarget {
    /// Noise-free curves on the model grid.
    Truth,
    /// One held-out observation per test curve.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrCvProfile {
    pub reports: Vec<CvReport>,
    pub target: ErrTarget,
}

/// Contiguous folds over locations sorted by (x, y).
pub fn blocked_folds(locs: &[Location], j: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by(|&a, &b| locs[a].x.total_cmp(&locs[b].x).then(locs[a].y.total_cmp(&locs[b].y)));
    let n = order.len();
    (0..j).map(|f| order[f * n / j..(f + 1) * n / j].to_vec()).collect()
}

/// Positions outside `test` farther than `buffer` from every test location.
pub fn buffered_training(locs: &[Location], test: &[usize], buffer: f64) -> Vec<usize> {
    let mut is_test = vec![false; locs.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    (0..locs.len())
        .filter(|&i| !is_test[i] && test.iter().all(|&t| locs[i].distance(&locs[t]) > buffer))
        .collect()
}

pub type FitFn<'a> = dyn Fn(&FunctionalDataset, usize) -> Result<SpaceModel> + Sync + 'a;

/// J-fold leave-curves-out reconstruction error for each K. Training curves
/// exclude anything within `buffer` of a test curve. With `truth` (N×M on the
/// fitted grid) test reconstructions are scored against it; otherwise each
/// test curve's middle observation is held out and predicted.
pub fn errcv_curves(
    data: &FunctionalDataset,
    k_candidates: &[usize],
    j: usize,
    buffer: f64,
    fit: &FitFn<'_>,
    truth: Option<&DMatrix<f64>>,
) -> Result<ErrCvProfile> {
    if j < 2 {
        return Err(SpaceError::invalid(format!("need at least 2 folds, got {j}")));
    }
    if k_candidates.is_empty() || k_candidates.contains(&0) {
        return Err(SpaceError::invalid("K candidates must be nonempty and positive"));
    }
    if !(buffer >= 0.0) {
        return Err(SpaceError::invalid("buffer must be nonnegative"));
    }
    let n = data.n_locations();
    if n < j {
        return Err(SpaceError::InsufficientData(format!("{n} curves cannot fill {j} folds")));
    }
    if let Some(t) = truth {
        if t.nrows() != n {
            return Err(SpaceError::invalid("truth rows differ from the number of curves"));
        }
    }
    let folds = blocked_folds(&data.locations, j);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = folds
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let train = buffered_training(&data.locations, test, buffer);
            if train.is_empty() {
                Err(SpaceError::BufferTooLarge { buffer, fold: f })
            } else {
                Ok((test.clone(), train))
            }
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..k_candidates.len())
        .flat_map(|a| (0..j).map(move |f| (a, f)))
        .collect();
    let errs: Vec<f64> = jobs
        .par_iter()
        .map(|&(a, f)| {
            let (test, train) = &splits[f];
            let model = fit(&data.subset(train), k_candidates[a])?;
            fold_error(&model, data, test, truth)
        })
        .collect::<Result<_>>()?;
    let reports = k_candidates
        .iter()
        .enumerate()
        .map(|(a, &k)| CvReport::new(k as f64, errs[a * j..(a + 1) * j].to_vec()))
        .collect();
    let target = if truth.is_some() { ErrTarget::Truth } else { ErrTarget::HeldOut };
    Ok(ErrCvProfile { reports, target })
}

fn fold_error(model: &SpaceModel, data: &FunctionalDataset, test: &[usize], truth: Option<&DMatrix<f64>>) -> Result<f64> {
    let test_data = data.subset(test);
    match truth {
        Some(x) => {
            let est = blup_scores(model, &test_data)?;
            let rec = reconstruct(model, &est, &model.eigen.grid)?;
            if x.ncols() != rec.ncols() {
                return Err(SpaceError::invalid("truth columns differ from the model grid"));
            }
            let mut acc = 0.0;
            for (r, &i) in test.iter().enumerate() {
                for m in 0..rec.ncols() {
                    acc += (rec[(r, m)] - x[(i, m)]).powi(2);
                }
            }
            Ok(acc / (test.len() * rec.ncols()) as f64)
        }
        None => {
            let curves = test_data.curves();
            let mut kept = Vec::with_capacity(curves.len());
            let mut held = Vec::new();
            for c in &curves {
                if c.len() < 2 {
                    kept.push(c.clone());
                    held.push(None);
                    continue;
                }
                let mid = c.len() / 2;
                let mut k = c.clone();
                let t = k.times.remove(mid);
                let y = k.values.remove(mid);
                kept.push(k);
                held.push(Some((t, y)));
            }
            if held.iter().all(Option::is_none) {
                return Err(SpaceError::InsufficientData(
                    "held-out scoring needs a test curve with at least 2 observations".into(),
                ));
            }
            let reduced = FunctionalDataset::from_curves(test_data.locations.clone(), &kept, test_data.time_domain);
            let est = blup_scores(model, &reduced)?;
            let (mut acc, mut cnt) = (0.0, 0.0);
            for (r, h) in held.iter().enumerate() {
                if let Some((t, y)) = *h {
                    let phi = model.eigen.eigenfunctions_at(t);
                    let pred = model.eigen.mean_at(t) + (0..model.k()).map(|k| est.scores[(r, k)] * phi[k]).sum::<f64>();
                    acc += (pred - y).powi(2);
                    cnt += 1.0;
                }
            }
            Ok(acc / cnt)
        }
    }
}

/// Pooled (t, y) observations of a dataset.
pub fn pooled_points(data: &FunctionalDataset) -> Vec<(f64, f64)> {
    data.curves()
        .iter()
        .flat_map(|c: &Curve| c.times.iter().copied().zip(c.values.iter().copied()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sine_points(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| {
                let t = rng.random_range(0..101) as f64 / 100.0;
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                (t, (2.0 * PI * t).sin() + sd * e)
            })
            .collect()
    }

    #[test]
    fn select_k_rules() {
        let mk = |s: &[f64]| -> Vec<CvReport> {
            s.iter().enumerate().map(|(i, &v)| CvReport::new((i + 1) as f64, vec![v])).collect()
        };
        assert_eq!(select_k(&mk(&[10.0, 2.0, 1.9, 1.85])).unwrap(), (2, false));
        assert_eq!(select_k(&mk(&[1.0, 1.0, 1.0])).unwrap(), (2, true));
        assert!(select_k(&mk(&[1.0])).is_err());
    }

    #[test]
    fn linear_data_ties() {
        let pts: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64 / 100.0, 1.0 + 2.0 * i as f64 / 100.0)).collect();
        let sel = lobo_bandwidth(LoboPoints::Curve(&pts), TimeDomain::unit(), &[0.05, 0.1, 0.3], 10).unwrap();
        assert!(sel.tie);
        assert!(sel.reports.iter().all(|r| r.score < 1e-12));
    }

    #[test]
    fn oversmoothing_loses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sine_points(&mut rng, 1000, 0.2);
        let sel = lobo_bandwidth(LoboPoints::Curve(&pts), TimeDomain::unit(), &[0.04, 5.0], 10).unwrap();
        assert_eq!(sel.selected, 0.04);
        assert!(!sel.tie);
        for r in &sel.reports {
            assert!((r.score - r.fold_scores.iter().sum::<f64>() / r.fold_scores.len() as f64).abs() < 1e-12);
            assert!(r.fold_scores.iter().all(|f| *f >= 0.0));
        }
    }

    #[test]
    fn empty_bins_reduce_count() {
        let pts: Vec<(f64, f64)> = (0..40).map(|i| (if i % 2 == 0 { 0.1 } else { 0.9 } + 0.001 * i as f64, 1.0)).collect();
        let sel = lobo_bandwidth(LoboPoints::Curve(&pts), TimeDomain::unit(), &[0.3], 10).unwrap();
        assert_eq!(sel.bins, 2);
        let one = [(0.5, 1.0), (0.5, 2.0)];
        assert!(matches!(
            lobo_bandwidth(LoboPoints::Curve(&one), TimeDomain::unit(), &[0.3], 10),
            Err(SpaceError::InsufficientData(_))
        ));
    }

    /// Brute-force LOBO on a small 2D input.
    #[test]
    fn surface_lobo_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<(f64, f64, f64)> = (0..300)
            .map(|_| {
                let s = rng.random_range(0..21) as f64 / 20.0;
                let t = rng.random_range(0..21) as f64 / 20.0;
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                (s, t, s * t + (3.0 * s).sin() + 0.1 * e)
            })
            .collect();
        let h = 0.15;
        let bins = 3;
        let sel = lobo_bandwidth(LoboPoints::Surface(&pts), TimeDomain::unit(), &[h], bins).unwrap();
        let dom = TimeDomain::unit();
        let mut err = vec![0.0; bins * bins];
        let mut cnt = vec![0.0; bins * bins];
        for p in &pts {
            let b = bin_of(p.0, dom, bins) * bins + bin_of(p.1, dom, bins);
            let mut xtx = nalgebra::Matrix3::<f64>::zeros();
            let mut xty = nalgebra::Vector3::<f64>::zeros();
            for q in &pts {
                if bin_of(q.0, dom, bins) * bins + bin_of(q.1, dom, bins) == b {
                    continue;
                }
                let x = nalgebra::Vector3::new(1.0, q.0 - p.0, q.1 - p.1);
                let w = gauss((q.0 - p.0) / h) * gauss((q.1 - p.1) / h);
                xtx += w * x * x.transpose();
                xty += w * q.2 * x;
            }
            let beta = xtx.try_inverse().unwrap() * xty;
            err[b] += (p.2 - beta[0]).powi(2);
            cnt[b] += 1.0;
        }
        for b in 0..bins * bins {
            let want = err[b] / cnt[b];
            assert!((sel.reports[0].fold_scores[b] - want).abs() < 1e-8 * want.max(1.0), "{b}");
        }
    }

    #[test]
    fn folds_and_buffers() {
        let locs: Vec<Location> = (0..10).map(|i| Location::new(i, 0.0, i as f64)).collect();
        let folds = blocked_folds(&locs, 5);
        assert_eq!(folds[1], vec![2, 3]);
        assert_eq!(buffered_training(&locs, &folds[1], 0.0), vec![0, 1, 4, 5, 6, 7, 8, 9]);
        assert_eq!(buffered_training(&locs, &folds[1], 2.0), vec![6, 7, 8, 9]);
        assert!(buffered_training(&locs, &folds[1], 100.0).is_empty());
    }

    #[test]
    fn huge_buffer_is_an_error() {
        let locs: Vec<Location> = (0..6).map(|i| Location::new(i, 0.0, i as f64)).collect();
        let obs: Vec<Observation> = (0..6).map(|i| Observation::new(i, 0.5, 1.0)).collect();
        let d = FunctionalDataset::new(locs, obs, TimeDomain::unit());
        let fit = |_: &FunctionalDataset, _: usize| -> Result<SpaceModel> { unreachable!() };
        assert!(matches!(
            errcv_curves(&d, &[1, 2], 2, 1e6, &fit, None),
            Err(SpaceError::BufferTooLarge { .. })
        ));
    }
}
