use nalgebra::DMatrix;
use serde::Serialize;
use space_fda::data_model::{make_grid, FunctionalDataset, TimeDomain};
use space_fda::matern::MaternParams;
use space_fda::model_selection::{errcv_curves, select_k, ErrCvProfile, ErrTarget};
use space_fda::pipeline::{fit, FitOptions, FitReport, Grouping};
use space_fda::reconstruction::{blup_scores, interval_half_widths, pace_scores, reconstruct, SpaceModel};
use space_fda::sim_engine::{
    gap_fill_study, study_eigenfunctions, simulate, simulate_evi, table1_scenarios, table2_scenarios, EviConfig,
    Scenario, SimLayout, SimOutput, TableRow, Tracked,
};
use space_fda::smoothing::SmootherConfig;
use space_fda::spatial_structure::SeparationVector;
use space_fda::tests_bootstrap::{
    isotropy_test, separability_test, IsotropyStatistic, Partition, SeparabilityStatistic, TestOptions,
};

use crate::config::Settings;
use crate::error::CliError;
use crate::io::{self, ExtraColumns, ModelFile, Provenance};

pub const FIT_KEYS: &[&str] = &[
    "k", "grid_size", "h_mu", "h_g", "lobo_bins", "m_max", "radius", "trim", "nu", "isotropic", "separable",
    "centering", "multistart", "t_min", "t_max",
];

pub const SIMULATE_KEYS: &[&str] =
    &["design", "scenario", "n", "edge", "sigma", "n_per_curve", "grid_size", "seed", "out", "truth"];
pub const FIT_ONLY_KEYS: &[&str] = &["data", "out", "seed", "k_max", "folds", "buffer"];
pub const RECONSTRUCT_KEYS: &[&str] = &["model", "data", "out", "level", "baseline", "truth", "pace_out"];
pub const TEST_KEYS: &[&str] = &[
    "data", "out", "kind", "statistic", "replicates", "seed", "groups", "iso_groups", "eval_dx", "eval_dy",
    "calibration_draws", "levels",
];
pub const CV_KEYS: &[&str] = &["data", "out", "k_max", "folds", "buffer", "truth"];
pub const TABLE_KEYS: &[&str] = &["which", "replicates", "n", "edge", "seed", "scenarios", "samples", "per_curve", "out"];

fn domain(s: &Settings) -> Result<Option<(f64, f64)>, CliError> {
    match (s.get::<f64>("t_min")?, s.get::<f64>("t_max")?) {
        (Some(a), Some(b)) => Ok(Some((a, b))),
        (None, None) => Ok(None),
        _ => Err(CliError::Usage("t_min and t_max must be given together".into())),
    }
}

/// Pipeline options from the shared fit keys; `k` is left at its default
/// when set to "auto".
pub fn fit_options(s: &Settings) -> Result<FitOptions, CliError> {
    let mut o = FitOptions::default();
    if s.str("k") != Some("auto") {
        o.k = s.get_or("k", o.k)?;
    }
    o.grid_size = s.get_or("grid_size", o.grid_size)?;
    o.lobo_bins = s.get_or("lobo_bins", o.lobo_bins)?;
    o.m_max = s.get_or("m_max", o.m_max)?;
    o.radius = s.get_or("radius", o.radius)?;
    o.trim = s.get_or("trim", o.trim)?;
    o.bandwidths = match (s.get::<f64>("h_mu")?, s.get::<f64>("h_g")?) {
        (Some(a), Some(b)) => Some(SmootherConfig::new(a, b)?),
        (None, None) => None,
        _ => return Err(CliError::Usage("h_mu and h_g must be given together".into())),
    };
    match s.str("nu") {
        Some("free") => o.matern.fix_nu = None,
        _ => o.matern.fix_nu = Some(s.get_or("nu", 0.5)?),
    }
    o.matern.fix_isotropic = s.flag("isotropic", false)?;
    o.matern.multistart = s.get_or("multistart", o.matern.multistart)?;
    o.centering_correction = s.flag("centering", false)?;
    if s.flag("separable", false)? {
        o.grouping = Grouping::Separable;
    }
    if o.k == 0 {
        return Err(CliError::Usage("k must be positive".into()));
    }
    Ok(o)
}

fn key(name: &str) -> String {
    name.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase()
}

fn pick(scenarios: Vec<Scenario>, name: &str) -> Result<Scenario, CliError> {
    let names: Vec<String> = scenarios.iter().map(|s| s.name.clone()).collect();
    scenarios
        .into_iter()
        .find(|s| key(&s.name) == key(name))
        .ok_or_else(|| CliError::Usage(format!("unknown scenario '{name}'; choose one of: {}", names.join(", "))))
}

fn seed(s: &Settings) -> Result<u64, CliError> {
    s.get::<u64>("seed")?.ok_or_else(|| CliError::Usage("a seed is required for this command".into()))
}

pub fn simulate_cmd(s: &Settings) -> Result<(), CliError> {
    let seed = seed(s)?;
    let out = s.required("out")?;
    let design = s.str("design").unwrap_or("line");
    let sim: SimOutput = match design {
        "evi" => {
            let d = EviConfig::default();
            let cfg = EviConfig {
                edge: s.get_or("edge", d.edge)?,
                grid_size: s.get_or("grid_size", d.grid_size)?,
                sigma: s.get_or("sigma", d.sigma)?,
                seed,
                ..d
            };
            let sc = cfg.scenario()?;
            summarize(&sc);
            simulate_evi(&cfg)?
        }
        "line" | "grid" => {
            let all = if design == "line" {
                table1_scenarios(s.get_or("n", 100)?, seed)
            } else {
                table2_scenarios(s.get_or("edge", 15)?, seed)
            };
            let mut sc = pick(all, s.str("scenario").unwrap_or("separable 2"))?;
            sc.sigma = s.get_or("sigma", sc.sigma)?;
            sc.n_per_curve = s.get_or("n_per_curve", sc.n_per_curve)?;
            if let Some(m) = s.get::<usize>("grid_size")? {
                sc.grid = make_grid(TimeDomain::unit(), m)?;
                sc.eigenfunctions = study_eigenfunctions(&sc.grid);
                sc.eigenfunctions.truncate(sc.k());
                sc.mean = vec![0.0; m];
            }
            summarize(&sc);
            simulate(&sc)?
        }
        other => return Err(CliError::Usage(format!("unknown design '{other}' (line, grid or evi)"))),
    };
    io::write_observations(out, &sim.data)?;
    if let Some(truth) = s.str("truth") {
        let grid = make_grid(sim.data.time_domain, sim.truth.ncols())?;
        io::write_curves(truth, &sim.data.locations, &grid, &sim.truth, &[], &[])?;
    }
    println!("wrote {} observations at {} locations to {out}", sim.data.observations.len(), sim.data.n_locations());
    Ok(())
}

fn summarize(sc: &Scenario) {
    let layout = match &sc.layout {
        SimLayout::Line(n) => format!("line of {n}"),
        SimLayout::Grid(e) => format!("{e}x{e} grid"),
        SimLayout::Custom(l) => format!("{} custom locations", l.len()),
    };
    println!("scenario '{}': {layout}, sigma {}, {} obs/curve, M {}", sc.name, sc.sigma, sc.n_per_curve, sc.grid.len());
    for (k, (l, p)) in sc.per_fpc.iter().enumerate() {
        println!(
            "  fPC {}: lambda {:.4}, alpha {:.1} deg, delta {}, zeta {}, nu {}",
            k + 1,
            l,
            p.alpha.to_degrees(),
            p.delta,
            p.zeta,
            p.nu
        );
    }
}

fn fmt_params(p: &MaternParams) -> String {
    format!("alpha {:.2} deg, delta {:.3}, zeta {:.4}, nu {:.3}", p.alpha.to_degrees(), p.delta, p.zeta, p.nu)
}

fn log_fit(r: &FitReport) {
    let b = r.bandwidths.config;
    match &r.bandwidths.lobo {
        Some((mu, g)) => eprintln!(
            "bandwidths (LOBO, {} bins): h_mu {:.4}{}, h_g {:.4}{}",
            mu.bins,
            b.h_mu,
            if mu.tie { " (tie)" } else { "" },
            b.h_g,
            if g.tie { " (tie)" } else { "" }
        ),
        None => eprintln!("bandwidths (fixed): h_mu {}, h_g {}", b.h_mu, b.h_g),
    }
    if !r.skipped.is_empty() {
        eprintln!("skipped {} separations without location pairs", r.skipped.len());
    }
    eprintln!("sigma2 {:.5}; eigenvalues {:?}", r.model.eigen.sigma2, r.model.eigen.eigenvalues);
    for (g, f) in r.groups.iter().zip(&r.group_fits) {
        eprintln!("group {:?}{}:", g.components, if g.isotropic { " (isotropic)" } else { "" });
        for (l, p) in f.per_ladder.iter().enumerate() {
            match p {
                Some(p) => eprintln!("  ladder {}: {}", l + 1, fmt_params(p)),
                None => eprintln!("  ladder {}: no fit", l + 1),
            }
        }
        eprintln!("  trimmed: {}", fmt_params(&f.estimate));
    }
}

fn cv_profile(
    data: &FunctionalDataset,
    opts: &FitOptions,
    s: &Settings,
    truth: Option<&DMatrix<f64>>,
) -> Result<(ErrCvProfile, usize, bool), CliError> {
    let k_max: usize = s.get_or("k_max", 4)?;
    if k_max < 2 {
        return Err(CliError::Usage("k_max must be at least 2".into()));
    }
    let folds: usize = s.get_or("folds", 5)?;
    let buffer: f64 = s.get_or("buffer", 2.0)?;
    let ks: Vec<usize> = (1..=k_max).collect();
    let fit_k = |d: &FunctionalDataset, k: usize| fit(d, &FitOptions { k, ..opts.clone() }).map(|r| r.model);
    let profile = errcv_curves(data, &ks, folds, buffer, &fit_k, truth)?;
    let (k, no_drop) = select_k(&profile.reports)?;
    eprintln!("ErrCV_{folds} profile:");
    for r in &profile.reports {
        eprintln!("  K={}: {:.6}", r.candidate, r.score);
    }
    eprintln!("selected K={k}{}", if no_drop { " (no decrease; profile is flat or rising)" } else { "" });
    Ok((profile, k, no_drop))
}

pub fn fit_cmd(s: &Settings) -> Result<(), CliError> {
    let data = io::read_observations(s.required("data")?, domain(s)?)?;
    let out = s.required("out")?;
    let mut opts = fit_options(s)?;
    if s.str("k") == Some("auto") {
        opts.k = cv_profile(&data, &opts, s, None)?.1;
    }
    let report = fit(&data, &opts)?;
    log_fit(&report);
    let prov = Provenance { seed: s.get("seed")?, config_hash: s.hash("fit") };
    io::write_json(out, &ModelFile::from_model(&report.model, prov))?;
    println!("wrote model with K={} to {out}", report.model.k());
    Ok(())
}

fn check_grid(model: &SpaceModel, data: &FunctionalDataset) -> Result<(), CliError> {
    let g = &model.eigen.grid;
    let tol = 1e-9 * (g.end() - g.start());
    if let Some(o) = data.observations.iter().find(|o| o.t < g.start() - tol || o.t > g.end() + tol) {
        return Err(CliError::Data(format!(
            "observation time {} at location {} lies outside the model grid [{}, {}]",
            o.t,
            o.location_id,
            g.start(),
            g.end()
        )));
    }
    Ok(())
}

fn row_mse(truth: &DMatrix<f64>, rec: &DMatrix<f64>, i: usize) -> f64 {
    (0..truth.ncols()).map(|j| (truth[(i, j)] - rec[(i, j)]).powi(2)).sum::<f64>() / truth.ncols() as f64
}

pub fn reconstruct_cmd(s: &Settings) -> Result<(), CliError> {
    let model = ModelFile::load(s.required("model")?)?.to_model()?;
    let grid = model.eigen.grid.clone();
    let data = io::read_observations(s.required("data")?, Some((grid.start(), grid.end())))?;
    check_grid(&model, &data)?;
    let out = s.required("out")?;
    let est = blup_scores(&model, &data)?;
    let rec = reconstruct(&model, &est, &grid)?;

    let pace = match s.str("baseline") {
        None | Some("none") => None,
        Some("pace") => Some(reconstruct(&model, &pace_scores(&model, &data)?, &grid)?),
        Some(other) => return Err(CliError::Usage(format!("unknown baseline '{other}' (pace or none)"))),
    };
    let truth = match s.str("truth") {
        Some(p) => Some(io::read_curves(p, &data.locations, grid.len())?),
        None => None,
    };

    let mut scalars: Vec<(&str, Vec<f64>)> = Vec::new();
    if let (Some(p), Some(t)) = (&pace, &truth) {
        let ip: Vec<f64> = (0..rec.nrows()).map(|i| (row_mse(t, p, i) / row_mse(t, &rec, i)).ln()).collect();
        let overall = space_fda::sim_engine::improvement(t, &rec, p)?;
        let positive = ip.iter().filter(|v| **v > 0.0).count();
        eprintln!("IP {overall:.4}; {positive} of {} curves improved over PACE", ip.len());
        scalars.push(("ip", ip));
    }

    let bounds = match s.get::<f64>("level")? {
        Some(level) => {
            let (pw, band) = interval_half_widths(&model, &est, level)?;
            Some([&rec - &pw, &rec + &pw, &rec - &band, &rec + &band])
        }
        None => None,
    };
    let extra: Vec<ExtraColumns<'_>> = match &bounds {
        Some(b) => ["pw_lo", "pw_hi", "band_lo", "band_hi"]
            .iter()
            .zip(b.iter())
            .map(|(prefix, values)| ExtraColumns { prefix, values })
            .collect(),
        None => Vec::new(),
    };
    io::write_curves(out, &data.locations, &grid, &rec, &extra, &scalars)?;
    if let Some(p) = &pace {
        let path = s.str("pace_out").map(str::to_string).unwrap_or_else(|| format!("{out}.pace.csv"));
        io::write_curves(&path, &data.locations, &grid, p, &[], &[])?;
    }
    println!("wrote {} reconstructed curves to {out}", rec.nrows());
    Ok(())
}

#[derive(Serialize)]
struct Decision {
    level: f64,
    reject: bool,
}

#[derive(Serialize)]
struct TestReport {
    kind: String,
    statistic: String,
    observed_stat: f64,
    null_stats: Vec<f64>,
    p_value: f64,
    decisions: Vec<Decision>,
    dropped: usize,
    eval_delta: [f64; 2],
    provenance: Provenance,
}

fn partition(s: &Settings, key: &str, k: usize) -> Result<Partition, CliError> {
    match s.str(key) {
        None => Ok(Partition::single(k)),
        Some(spec) => {
            let groups = spec
                .split(';')
                .map(|g| {
                    g.split(',')
                        .map(|c| c.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("invalid {key} '{spec}'"))))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Partition::new(groups, k)?)
        }
    }
}

pub fn test_cmd(s: &Settings) -> Result<(), CliError> {
    let data = io::read_observations(s.required("data")?, domain(s)?)?;
    let out = s.required("out")?;
    let fit = fit_options(s)?;
    let k = fit.k;
    let d = TestOptions::default();
    let eval_delta = match (s.get::<f64>("eval_dx")?, s.get::<f64>("eval_dy")?) {
        (None, None) => None,
        (dx, dy) => Some(SeparationVector::new(dx.unwrap_or(0.0), dy.unwrap_or(0.0))),
    };
    let opts = TestOptions {
        replicates: s.get_or("replicates", d.replicates)?,
        seed: seed(s)?,
        fit,
        eval_delta,
        calibration_draws: s.get_or("calibration_draws", d.calibration_draws)?,
        ..d
    };
    let levels: Vec<f64> = s.list("levels")?.unwrap_or_else(|| vec![0.01, 0.05, 0.1]);
    let kind = s.str("kind").unwrap_or("separability");
    let (result, statistic) = match kind {
        "separability" => {
            let stat = match s.str("statistic").unwrap_or("correlation") {
                "correlation" => SeparabilityStatistic::CorrelationDispersion,
                "range" => SeparabilityStatistic::RangeDispersion,
                "log_range" => SeparabilityStatistic::LogRangeDispersion,
                "signed" => SeparabilityStatistic::SignedCorrelationDifference,
                o => return Err(CliError::Usage(format!("unknown separability statistic '{o}'"))),
            };
            (separability_test(&data, &partition(s, "groups", k)?, stat, &opts)?, format!("{stat:?}"))
        }
        "isotropy" => {
            let stat = match s.str("statistic").unwrap_or("log_ratio") {
                "log_ratio" => IsotropyStatistic::LogRatio,
                "angle" => IsotropyStatistic::AbsAngle,
                o => return Err(CliError::Usage(format!("unknown isotropy statistic '{o}'"))),
            };
            let part = partition(s, "groups", k)?;
            let iso: Vec<usize> = s.list("iso_groups")?.unwrap_or_else(|| (0..part.groups().len()).collect());
            (isotropy_test(&data, &part, &iso, stat, &opts)?, format!("{stat:?}"))
        }
        o => return Err(CliError::Usage(format!("unknown test kind '{o}' (separability or isotropy)"))),
    };
    println!("{kind} test: statistic {:.6}, p-value {:.4}, {} refits dropped", result.observed_stat, result.p_value, result.dropped);
    let report = TestReport {
        kind: kind.to_string(),
        statistic,
        observed_stat: result.observed_stat,
        p_value: result.p_value,
        decisions: levels.iter().map(|&level| Decision { level, reject: result.rejects(level) }).collect(),
        dropped: result.dropped,
        eval_delta: [result.eval_delta.dx, result.eval_delta.dy],
        null_stats: result.null_stats,
        provenance: Provenance { seed: Some(opts.seed), config_hash: s.hash("test") },
    };
    io::write_json(out, &report)
}

#[derive(Serialize)]
struct CvEntry {
    k: usize,
    score: f64,
    fold_scores: Vec<f64>,
}

#[derive(Serialize)]
struct CvReportFile {
    target: ErrTarget,
    profile: Vec<CvEntry>,
    selected_k: usize,
    no_decrease: bool,
}

pub fn cv_cmd(s: &Settings) -> Result<(), CliError> {
    let opts = fit_options(s)?;
    let data = io::read_observations(s.required("data")?, domain(s)?)?;
    let out = s.required("out")?;
    let truth = match s.str("truth") {
        Some(p) => Some(io::read_curves(p, &data.locations, opts.grid_size)?),
        None => None,
    };
    let (profile, selected_k, no_decrease) = cv_profile(&data, &opts, s, truth.as_ref())?;
    let file = CvReportFile {
        target: profile.target,
        profile: profile
            .reports
            .iter()
            .map(|r| CvEntry { k: r.candidate as usize, score: r.score, fold_scores: r.fold_scores.clone() })
            .collect(),
        selected_k,
        no_decrease,
    };
    println!("selected K={selected_k}");
    io::write_json(out, &file)
}

fn write_table(path: &str, rows: &[TableRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record([
        "scenario", "fpc", "sigma", "tracked", "true_param", "mean", "median", "std", "rmse", "true_rho", "rho_mean",
        "rho_median", "rho_std", "rho_rmse", "pct_ip_positive", "replicates", "failures",
    ])
    .map_err(|e| CliError::io(path, e))?;
    for r in rows {
        let tracked = match r.tracked {
            Tracked::Zeta => "zeta",
            Tracked::AlphaDegrees => "alpha_deg",
        };
        let f = |v: f64| v.to_string();
        w.write_record([
            r.scenario.clone(),
            r.fpc.to_string(),
            f(r.sigma),
            tracked.to_string(),
            f(r.true_param),
            f(r.param.mean),
            f(r.param.median),
            f(r.param.std),
            f(r.param.rmse),
            f(r.true_rho),
            f(r.rho.mean),
            f(r.rho.median),
            f(r.rho.std),
            f(r.rho.rmse),
            f(r.pct_ip_positive),
            r.replicates.to_string(),
            r.failures.to_string(),
        ])
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn table_cmd(s: &Settings) -> Result<(), CliError> {
    let seed = seed(s)?;
    let out = s.required("out")?;
    let opts = fit_options(s)?;
    let which = s.str("which").unwrap_or("1");
    let filter = |all: Vec<Scenario>| -> Result<Vec<Scenario>, CliError> {
        match s.list::<String>("scenarios")? {
            None => Ok(all),
            Some(names) => names.iter().map(|n| pick(all.clone(), n)).collect(),
        }
    };
    match which {
        "1" | "2" => {
            let (scenarios, default_reps) = if which == "1" {
                (filter(table1_scenarios(s.get_or("n", 100)?, seed))?, 50)
            } else {
                (filter(table2_scenarios(s.get_or("edge", 15)?, seed))?, 25)
            };
            let rows = space_fda::sim_engine::run_table(&scenarios, s.get_or("replicates", default_reps)?, seed, &opts)?;
            for r in &rows {
                println!(
                    "{:<16} fPC{} param mean {:.3} (true {}) std {:.3}  rho mean {:.3} (true {:.3})  IP>0 {:.0}%",
                    r.scenario, r.fpc, r.param.mean, r.true_param, r.param.std, r.rho.mean, r.true_rho, r.pct_ip_positive
                );
            }
            write_table(out, &rows)
        }
        "gapfill" => {
            let cfg = EviConfig { edge: s.get_or("edge", 25)?, seed, ..EviConfig::default() };
            let dense = simulate_evi(&cfg)?;
            let opts = FitOptions { grid_size: cfg.grid_size, ..opts };
            let report = gap_fill_study(
                &dense.data,
                &dense.truth,
                s.get_or("samples", 100)?,
                s.get_or("per_curve", 5)?,
                seed,
                &opts,
            )?;
            println!("gap fill: IP>0 in {:.1}% of samples ({} failed)", report.pct_ip_positive, report.failures);
            let mut w = csv::Writer::from_path(out).map_err(|e| CliError::io(out, e))?;
            w.write_record(["sample", "ip"]).map_err(|e| CliError::io(out, e))?;
            for (i, v) in report.ip.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()]).map_err(|e| CliError::io(out, e))?;
            }
            w.flush().map_err(|e| CliError::io(out, e))
        }
        o => Err(CliError::Usage(format!("unknown table '{o}' (1, 2 or gapfill)"))),
    }
}
