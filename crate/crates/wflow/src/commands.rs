//! The command implementations. Each writes its outputs and a manifest into
//! the configured output directory and reports pass or fail.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use wflow_core::basis::{gram_check, weights};
use wflow_core::diffeo::certify_dn;
use wflow_core::dynamics::{martingale_diagnostics, member_rng, run_deterministic_flow, Sgf, Trajectory};
use wflow_core::energy::{check_c2, direct_grid_1d, estimate_zf, w_direct, w_pushforward};
use wflow_core::gradient::{diff_fd, h_f, Direction, EnergyFunctional, FdOptions, MeasureNodes};
use wflow_core::measure::{pushforward, sample_counted, Conditioning, SampleStats};
use wflow_core::pme::{solve, PmeGrid};
use wflow_core::quadrature::QuadratureGrid;
use wflow_core::stats::mean_estimate;

use crate::config::{InitConfig, RunConfig};
use crate::error::{AtPath, CliError, Result};
use crate::format::{self, write_table};
use crate::manifest::Manifest;
use crate::runner::{Runner, IMPORTANCE_STREAM, POOL_STREAM};

/// Verdict and human-readable summary of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub lines: Vec<String>,
}

pub struct Context {
    pub runner: Runner,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(runner: Runner, out_dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
        Ok(Context { runner, out_dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

struct Run<'a> {
    ctx: &'a Context,
    manifest: Manifest,
    start: Instant,
}

impl<'a> Run<'a> {
    fn new(ctx: &'a Context, command: &str, cfg: &RunConfig) -> Self {
        Run { ctx, manifest: Manifest::new(command, cfg, ctx.runner.threads()), start: Instant::now() }
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest.add_output(path)
    }

    fn finish(mut self, passed: bool, lines: Vec<String>) -> Result<Outcome> {
        self.manifest.finish(self.start.elapsed(), passed);
        let path = self.ctx.path(&format!("{}.manifest.json", self.manifest.command));
        self.manifest.write(&path)?;
        Ok(Outcome { passed, lines })
    }
}

fn one_dimensional(cfg: &RunConfig, command: &str) -> Result<()> {
    if cfg.reference.dim != 1 {
        return Err(CliError::config("reference.dim", format!("`{command}` is available in d = 1 only")));
    }
    Ok(())
}

/// Gram matrix and certified bounds of the basis.
pub fn validate_basis(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => validate_basis_d::<1>(cfg, ctx),
        _ => validate_basis_d::<2>(cfg, ctx),
    }
}

fn validate_basis_d<const D: usize>(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "validate-basis", cfg);
    let basis = cfg.basis::<D>()?;
    let grid = QuadratureGrid::default_for(basis.reference())?;
    let report = gram_check(basis.as_ref(), basis.len(), basis.reference(), &grid)?;
    let k = basis.len();
    let gram = ctx.path("gram.csv");
    let header: Vec<String> = (1..=k).map(|j| format!("phi_{j}")).collect();
    write_table(&gram, &header, &report.matrix)?;
    run.output(&gram)?;
    let w = weights(basis.as_ref(), cfg.weight_variant());
    let rows: Vec<Vec<f64>> = basis
        .bounds()
        .iter()
        .enumerate()
        .map(|(i, b)| vec![(i + 1) as f64, basis.modes()[i].weight_index as f64, b.sup, b.lip, b.hess, w.a[i], w.b[i]])
        .collect();
    let bounds = ctx.path("bounds.csv");
    let header = ["k", "weight_index", "sup", "lip", "hess", "a", "b"].map(String::from);
    write_table(&bounds, &header, &rows)?;
    run.output(&bounds)?;
    run.manifest.record("max_off_diagonal", report.max_off_diagonal);
    run.manifest.record("max_norm_deviation", report.max_norm_deviation);
    run.manifest.record("ratio_sum", w.ratio_sum());
    let passed = report.max_off_diagonal < 1e-6 && report.max_norm_deviation < 1e-6;
    let lines = vec![
        format!("K = {k}: max off-diagonal {:.3e}, max norm deviation {:.3e}", report.max_off_diagonal, report.max_norm_deviation),
        format!("sum a_k/b_k = {:.6}", w.ratio_sum()),
    ];
    run.finish(passed, lines)
}

/// Conditioned draws from the coefficient Gaussian.
pub fn sample(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => sample_d::<1>(cfg, ctx),
        _ => sample_d::<2>(cfg, ctx),
    }
}

fn sample_d<const D: usize>(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "sample", cfg);
    let spec = cfg.spec::<D>()?;
    let (draws, stats) = ctx.runner.prior_draws(&spec, cfg.sample.count, cfg.seed)?;
    let level = match spec.conditioning {
        Conditioning::Dn(n) => n,
        _ => f64::INFINITY,
    };
    let k = spec.k();
    let mut header = vec!["index".to_string()];
    header.extend((1..=k).map(|j| format!("c_{j}")));
    header.extend(["kappa", "level"].map(String::from));
    let rows: Vec<Vec<f64>> = draws
        .iter()
        .enumerate()
        .map(|(i, phi)| {
            let mut r = vec![i as f64];
            r.extend_from_slice(phi.coeffs());
            r.push(phi.kappa());
            r.push(certify_dn(phi, level).level());
            r
        })
        .collect();
    let path = ctx.path("samples.csv");
    write_table(&path, &header, &rows)?;
    run.output(&path)?;
    run.manifest.record("acceptance_rate", stats.acceptance_rate());
    let lines = vec![format!(
        "{} draws, {} proposals, acceptance rate {:.4}",
        draws.len(),
        stats.proposals,
        stats.acceptance_rate()
    )];
    run.finish(true, lines)
}

/// `W_F` by both quadratures, `Z_F` and the integrability probe.
pub fn energy(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => energy_1d(cfg, ctx),
        _ => energy_2d(cfg, ctx),
    }
}

fn energy_1d(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "energy", cfg);
    let spec = cfg.spec::<1>()?;
    let f = cfg.energy.build()?;
    let reference = spec.basis().reference().clone();
    let (draws, _) = ctx.runner.prior_draws(&spec, cfg.sample.count, cfg.seed)?;
    let grid = QuadratureGrid::default_for(&reference)?;
    let rows = ctx.runner.map(draws.len(), |i| {
        let phi = &draws[i];
        let wp = w_pushforward(&f, &reference, phi, &grid)?;
        let mu = pushforward(&reference, phi.clone());
        let wd = w_direct(&f, &mu, &direct_grid_1d(&mu, 8192)?)?;
        Ok(vec![i as f64, wp, wd, (wp - wd).abs()])
    })?;
    let worst = rows.iter().map(|r| r[3] / (1.0 + r[1].abs())).fold(0.0, f64::max);
    let path = ctx.path("energy.csv");
    write_table(&path, &["index", "w_pushforward", "w_direct", "abs_diff"].map(String::from), &rows)?;
    run.output(&path)?;
    let mut rng = member_rng(cfg.seed, IMPORTANCE_STREAM);
    let z = estimate_zf(&spec, &f, cfg.sample.count, &mut rng)?;
    let c2 = check_c2(|x, s| f.f(x, s), &reference, 2.0)?;
    run.manifest.record("max_relative_trafo_gap", worst);
    run.manifest.record("z_f", z.z.mean);
    run.manifest.record("z_f_std_error", z.z.std_error);
    run.manifest.record("c2", z.c2);
    run.manifest.record("c2_bound_excess", z.bound_excess);
    run.manifest.record("fbar_integral", c2.value);
    let passed = worst <= 1e-6 && c2.finite;
    let lines = vec![
        format!("change of variables: max |W_direct - W_pushforward| / (1 + |W|) = {worst:.3e} over {} maps", rows.len()),
        format!("Z_F = {:.6} ± {:.2e} (ESS {:.1}), fitted c2 = {:.4}, held-out excess {:.3e}", z.z.mean, z.z.std_error, z.ess, z.c2, z.bound_excess),
        format!("integrability probe: {} (value {:.4e})", if c2.finite { "finite" } else { "divergent" }, c2.value),
    ];
    run.finish(passed, lines)
}

fn energy_2d(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "energy", cfg);
    let spec = cfg.spec::<2>()?;
    let f = cfg.energy.build()?;
    let reference = spec.basis().reference().clone();
    let (draws, _) = ctx.runner.prior_draws(&spec, cfg.sample.count, cfg.seed)?;
    let grid = QuadratureGrid::default_for(&reference)?;
    let rows = ctx.runner.map(draws.len(), |i| Ok(vec![i as f64, w_pushforward(&f, &reference, &draws[i], &grid)?]))?;
    let path = ctx.path("energy.csv");
    write_table(&path, &["index", "w_pushforward"].map(String::from), &rows)?;
    run.output(&path)?;
    let mean = mean_estimate(&rows.iter().map(|r| r[1]).collect::<Vec<_>>());
    run.manifest.record("mean_w", mean.mean);
    run.finish(true, vec![format!("mean W_F = {:.6} ± {:.2e} over {} maps", mean.mean, mean.std_error, rows.len())])
}

/// One gradient-identity case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCase {
    pub fd: f64,
    pub pairing: f64,
    pub error: f64,
    pub tolerance: f64,
}

impl GradCase {
    pub fn ok(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// Finite differences of `W_F` against `μ(⟨H_F, dir⟩)` over random cases.
pub fn grad_check_cases(cfg: &RunConfig, runner: &Runner) -> Result<Vec<GradCase>> {
    one_dimensional(cfg, "grad-check")?;
    let g = &cfg.grad_check;
    let mut spec = cfg.spec::<1>()?;
    spec.conditioning = Conditioning::Dn(g.level);
    let basis = spec.basis().clone();
    let reference = basis.reference().clone();
    let f = cfg.energy.build()?;
    let grid = QuadratureGrid::for_reference(&reference, g.grid_nodes)?;
    let modes = g.direction_modes.min(basis.len());
    let opts = FdOptions { eps: g.eps, ..FdOptions::default() };
    runner.map(g.cases, |i| {
        let mut rng = member_rng(cfg.seed, i as u64);
        let phi = sample_counted(&spec, &mut rng, &mut SampleStats::default())?;
        let coeffs = (0..basis.len()).map(|k| if k < modes { rng.gen_range(-1.0..1.0) } else { 0.0 }).collect();
        let dir = Direction::Span { basis: basis.clone(), coeffs };
        let mu = pushforward(&reference, phi);
        let nodes = MeasureNodes::new(&mu, &grid)?;
        let pairing = h_f(&f, &nodes).pairing(&nodes, |y| dir.value(y));
        let fd = diff_fd(&EnergyFunctional { integrand: &f, grid: &grid }, &mu, &dir, &opts)?;
        Ok(GradCase { fd, pairing, error: (fd - pairing).abs(), tolerance: g.tolerance * (1.0 + pairing.abs()) })
    })
}

pub fn grad_check(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "grad-check", cfg);
    let cases = grad_check_cases(cfg, &ctx.runner)?;
    let rows: Vec<Vec<f64>> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| vec![i as f64, c.fd, c.pairing, c.error, c.tolerance, if c.ok() { 1.0 } else { 0.0 }])
        .collect();
    let path = ctx.path("grad_check.csv");
    write_table(&path, &["case", "fd", "pairing", "abs_error", "tolerance", "ok"].map(String::from), &rows)?;
    run.output(&path)?;
    let good = cases.iter().filter(|c| c.ok()).count();
    let worst = cases.iter().map(|c| c.error / c.tolerance).fold(0.0, f64::max);
    run.manifest.record("worst_error_over_tolerance", worst);
    let lines = vec![format!("{good}/{} within tolerance", cases.len()), format!("worst error/tolerance = {worst:.3e}")];
    run.finish(good == cases.len(), lines)
}

/// The deterministic projected flow.
pub fn flow(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => flow_d::<1>(cfg, ctx),
        _ => flow_d::<2>(cfg, ctx),
    }
}

fn flow_d<const D: usize>(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "flow", cfg);
    let fc = cfg.flow_config::<D>()?;
    let initial = if cfg.flow.initial.is_empty() { vec![0.0; fc.basis.len()] } else { cfg.flow.initial.clone() };
    let traj = run_deterministic_flow(&fc, &initial).at("flow.initial")?;
    let k = fc.basis.len();
    let mut header = ["time", "energy", "variance", "level"].map(String::from).to_vec();
    header.extend((1..=k).map(|j| format!("c_{j}")));
    let rows: Vec<Vec<f64>> = (0..traj.times.len())
        .map(|i| {
            let mut r = vec![traj.times[i], traj.energies[i], traj.variances[i], traj.certificates[i].level()];
            r.extend_from_slice(&traj.states[i]);
            r
        })
        .collect();
    let path = ctx.path("flow.csv");
    write_table(&path, &header, &rows)?;
    run.output(&path)?;
    let end = traj.times.last().copied().unwrap_or(0.0);
    run.manifest.record("final_time", end);
    run.manifest.record("max_energy_increase", traj.max_energy_increase);
    let mut lines = vec![format!(
        "reached t = {end:.6} of {} in {} accepted steps ({} rejected); Lyapunov violations: {}",
        fc.horizon,
        traj.times.len() - 1,
        traj.rejected_steps,
        traj.lyapunov_violations
    )];
    if let Some(s) = &traj.stop {
        lines.push(format!("stopped early: {s}"));
    }
    let passed = traj.completed() && traj.lyapunov_violations == 0;
    run.finish(passed, lines)
}

/// Trajectories of the stochastic flow with the starting states they used.
pub struct SgfRun<const D: usize> {
    pub sgf: Sgf<D>,
    pub initial: Vec<Vec<f64>>,
    pub trajectories: Vec<Trajectory>,
    pub labels: Vec<String>,
}

/// Builds the chain, draws starting states per `dynamics.init` and runs the ensemble.
pub fn run_sgf<const D: usize>(cfg: &RunConfig, runner: &Runner) -> Result<SgfRun<D>> {
    let sgf = Sgf::new(cfg.sgf_config::<D>()?).at("dynamics")?;
    let observables = cfg.observables_for::<D>()?;
    let m = cfg.dynamics.ensemble;
    let initial = match cfg.dynamics.init {
        InitConfig::Identity => vec![vec![0.0; sgf.config.spec.k()]; m],
        InitConfig::Prior => runner.prior_draws(&sgf.config.spec, m, cfg.seed)?.0.iter().map(|p| p.coeffs().to_vec()).collect(),
        InitConfig::Resample => runner
            .importance(&sgf.config.spec, sgf.evaluator(), &[], None, cfg.dynamics.resample_pool, cfg.seed, POOL_STREAM)?
            .resample(m, cfg.seed)?,
    };
    sgf.check_step_sanity(&initial).at("dynamics.dt")?;
    let trajectories = runner.run_ensemble(&sgf, &initial, &observables)?;
    Ok(SgfRun { sgf, initial, trajectories, labels: cfg.observables.iter().map(|o| o.label()).collect() })
}

fn chain_totals(trajectories: &[Trajectory]) -> wflow_core::dynamics::ChainStats {
    let mut s = wflow_core::dynamics::ChainStats::default();
    for t in trajectories {
        s.proposals += t.stats.proposals;
        s.accepted += t.stats.accepted;
        s.boundary += t.stats.boundary;
        s.rejected += t.stats.rejected;
    }
    s
}

pub fn sgf(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => sgf_d::<1>(cfg, ctx),
        _ => sgf_d::<2>(cfg, ctx),
    }
}

fn sgf_d<const D: usize>(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "sgf", cfg);
    let res = run_sgf::<D>(cfg, &ctx.runner)?;
    let path = ctx.path("trajectory.csv");
    format::write_trajectories(&path, &res.trajectories, &res.labels)?;
    run.output(&path)?;
    let s = chain_totals(&res.trajectories);
    run.manifest.record("acceptance_rate", s.acceptance_rate());
    run.manifest.record("boundary_fraction", s.boundary as f64 / s.proposals.max(1) as f64);
    let lines = vec![format!(
        "{} members x {} steps: acceptance {:.4}, boundary rejections {}, MH rejections {}",
        res.trajectories.len(),
        cfg.dynamics.steps,
        s.acceptance_rate(),
        s.boundary,
        s.rejected
    )];
    run.finish(true, lines)
}

/// Per-observable verdicts of the invariance and martingale suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableReport {
    pub label: String,
    pub chain_mean: f64,
    pub chain_std_error: f64,
    pub importance_mean: f64,
    pub importance_std_error: f64,
    pub z: f64,
    pub invariant: bool,
    pub block_z: Vec<f64>,
    pub stationary: bool,
    pub energy_ratio: f64,
    pub energy_std_error: f64,
    pub energy_ok: bool,
    pub qv_ratio: f64,
    pub qv_interval: [f64; 2],
    pub qv_ok: bool,
    pub underpowered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeReport {
    pub members: usize,
    pub steps: u64,
    pub dt: f64,
    pub acceptance_rate: f64,
    pub boundary_fraction: f64,
    pub importance_samples: usize,
    pub importance_ess: f64,
    pub observables: Vec<ObservableReport>,
    pub invariance_passed: bool,
    pub martingale_passed: bool,
}

impl QuantizeReport {
    pub fn passed(&self) -> bool {
        self.invariance_passed && self.martingale_passed
    }
}

/// Long-run chain averages against importance sampling, plus the
/// stationarity, energy-identity and quadratic-variation diagnostics.
pub fn quantize_report<const D: usize>(cfg: &RunConfig, runner: &Runner) -> Result<(QuantizeReport, SgfRun<D>)> {
    let mut cfg = cfg.clone();
    cfg.dynamics.square_fields = true;
    let res = run_sgf::<D>(&cfg, runner)?;
    let observables = cfg.observables_for::<D>()?;
    let q = &cfg.quantize_check;
    let draws = runner.importance(
        &res.sgf.config.spec,
        res.sgf.evaluator(),
        &observables,
        Some(res.sgf.preconditioner()),
        q.importance_samples,
        cfg.seed,
        IMPORTANCE_STREAM,
    )?;
    let gamma_means = (0..observables.len()).map(|j| draws.square_field_estimate(j)).collect::<Result<Vec<_>>>()?;
    let mart = martingale_diagnostics(&res.trajectories, &gamma_means, cfg.dynamics.dt, q.blocks)?;
    let mut reports = Vec::new();
    for (j, diag) in mart.observables.iter().enumerate() {
        let member_means: Vec<f64> = res
            .trajectories
            .iter()
            .map(|t| t.observables[1..].iter().map(|v| v[j]).sum::<f64>() / (t.observables.len() - 1) as f64)
            .collect();
        let chain = mean_estimate(&member_means);
        let is = draws.estimate(j)?;
        let se = (chain.std_error.powi(2) + is.std_error.powi(2)).sqrt();
        let z = if se > 0.0 { (chain.mean - is.estimate).abs() / se } else { 0.0 };
        let e = diag.energy_identity;
        reports.push(ObservableReport {
            label: res.labels[j].clone(),
            chain_mean: chain.mean,
            chain_std_error: chain.std_error,
            importance_mean: is.estimate,
            importance_std_error: is.std_error,
            z,
            invariant: z <= q.z_max,
            block_z: diag.block_z.clone(),
            stationary: diag.stationary,
            energy_ratio: e.ratio,
            energy_std_error: e.std_error,
            energy_ok: e.ratio >= q.energy_band[0] && e.ratio <= q.energy_band[1],
            qv_ratio: diag.quadratic_variation.ratio,
            qv_interval: [diag.quadratic_variation.lo, diag.quadratic_variation.hi],
            qv_ok: diag.quadratic_variation.contains(1.0),
            underpowered: diag.underpowered,
        });
    }
    let s = chain_totals(&res.trajectories);
    let report = QuantizeReport {
        members: res.trajectories.len(),
        steps: cfg.dynamics.steps,
        dt: cfg.dynamics.dt,
        acceptance_rate: s.acceptance_rate(),
        boundary_fraction: s.boundary as f64 / s.proposals.max(1) as f64,
        importance_samples: q.importance_samples,
        importance_ess: draws.ensemble.ess()?,
        invariance_passed: reports.iter().all(|r| r.invariant),
        martingale_passed: reports.iter().all(|r| r.stationary && r.energy_ok && r.qv_ok),
        observables: reports,
    };
    Ok((report, res))
}

pub fn quantize_check(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    match cfg.reference.dim {
        1 => quantize_check_d::<1>(cfg, ctx),
        _ => quantize_check_d::<2>(cfg, ctx),
    }
}

fn quantize_check_d<const D: usize>(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    let mut run = Run::new(ctx, "quantize-check", cfg);
    let (report, res) = quantize_report::<D>(cfg, &ctx.runner)?;
    let traj = ctx.path("quantize_trajectory.csv");
    format::write_trajectories(&traj, &res.trajectories, &res.labels)?;
    run.output(&traj)?;
    let path = ctx.path("quantize_report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    run.output(&path)?;
    run.manifest.record("acceptance_rate", report.acceptance_rate);
    let mut lines = vec![format!(
        "{} members x {} steps at dt = {}: acceptance {:.4}; importance ESS {:.0}",
        report.members, report.steps, report.dt, report.acceptance_rate, report.importance_ess
    )];
    for o in &report.observables {
        lines.push(format!(
            "{}: chain {:.5} ± {:.1e} vs importance {:.5} ± {:.1e} (z = {:.2}); stationary {}; energy ratio {:.4}; QV ratio {:.4} in [{:.4}, {:.4}]{}",
            o.label,
            o.chain_mean,
            o.chain_std_error,
            o.importance_mean,
            o.importance_std_error,
            o.z,
            o.stationary,
            o.energy_ratio,
            o.qv_ratio,
            o.qv_interval[0],
            o.qv_interval[1],
            if o.underpowered { " (underpowered)" } else { "" }
        ));
    }
    let passed = report.passed();
    run.finish(passed, lines)
}

/// The finite-volume porous media solver.
pub fn pme(cfg: &RunConfig, ctx: &Context) -> Result<Outcome> {
    one_dimensional(cfg, "pme")?;
    let mut run = Run::new(ctx, "pme", cfg);
    let pm = cfg
        .energy
        .porous_media()
        .ok_or_else(|| CliError::config("energy.preset", "`pme` needs the entropy or porous-media preset"))?;
    let p = &cfg.pme;
    let rho0 = PmeGrid::gaussian(p.lo, p.hi, p.cells, p.initial_mean, p.initial_variance).at("pme")?;
    let sol = solve(&rho0, &pm, &p.times, p.safety).at("pme")?;
    let mut header = vec!["x".to_string()];
    header.extend(p.times.iter().map(|t| format!("rho_t{t}")));
    let rows: Vec<Vec<f64>> = (0..p.cells)
        .map(|i| {
            let mut r = vec![rho0.center(i)];
            r.extend(sol.snapshots.iter().map(|s| s.rho[i]));
            r
        })
        .collect();
    let dens = ctx.path("pme.csv");
    write_table(&dens, &header, &rows)?;
    run.output(&dens)?;
    let lyap = ctx.path("pme_lyapunov.csv");
    let lrows: Vec<Vec<f64>> = sol.lyapunov.iter().map(|(t, w)| vec![*t, *w]).collect();
    write_table(&lyap, &["time", "energy"].map(String::from), &lrows)?;
    run.output(&lyap)?;
    let monotone = sol.lyapunov_nonincreasing(1e-12);
    run.manifest.record("max_mass_drift", sol.max_mass_drift);
    let mut lines = vec![format!(
        "{} steps; max mass drift {:.3e}; energy nonincreasing: {monotone}",
        sol.steps, sol.max_mass_drift
    )];
    for (t, s) in p.times.iter().zip(&sol.snapshots) {
        lines.push(format!("t = {t}: mean {:.6}, variance {:.6}", s.mean(), s.variance()));
    }
    run.finish(sol.max_mass_drift < 1e-8 && monotone, lines)
}

