//! Truncated stochastic gradient flow on coefficient space.
//!
//! The K-mode chain targets `exp(−Σ b_k c_k²/2 − W_F(λ∘φ_c⁻¹)) 1_{D⁽ⁿ⁾}(φ_c)`.
//! With drift `d_k = −b_k c_k − ⟨γ H_F∘φ, φ_k⟩_{L²(λ)}` and a diagonal
//! preconditioner `P`, a step proposes `c' = c + dt P d + √(2 dt P) ξ`.
//! `P = 1/b` (the default) gives the Ornstein–Uhlenbeck process of the
//! coefficient Gaussian, which relaxes every mode at unit rate.
//! Proposals leaving `D⁽ⁿ⁾` are rejected.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{NodeCache, VectorFieldBasis};
use crate::diffeo::{refined_bounds, Diffeo, DnCertificate};
use crate::energy::{EnergyIntegrand, S_FLOOR};
use crate::error::{fmt_point, Error, Result};
use crate::gradient::{CylinderFunction, GammaWeight, MeasureNodes};
use crate::linalg::{self, dot, inverse, mat_t_vec, Point};
use crate::measure::{Conditioning, GaussianSpec, ImportanceEstimate};
use crate::quadrature::QuadratureGrid;
use crate::reference::DensityModel;
use crate::stats::mean_estimate;

/// Source of randomness for ensemble member `member` under `seed`.
pub fn member_rng(seed: u64, member: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    rng
}

/// `W_F`, its coefficient pullback and `μ`-node data on a fixed λ-grid.
#[derive(Debug, Clone)]
pub struct NodeEvaluator<const D: usize> {
    basis: Arc<VectorFieldBasis<D>>,
    grid: QuadratureGrid<D>,
    cache: NodeCache<D>,
    rho: Vec<f64>,
    grad_rho: Vec<Point<D>>,
    lam_weights: Vec<f64>,
    energy: EnergyIntegrand,
    gamma: GammaWeight,
}

/// Output of [`NodeEvaluator::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub energy: f64,
    /// `⟨γ H_F∘φ, φ_k⟩_{L²(λ)}`
    pub pull: Vec<f64>,
    pub clamped: usize,
    pub floored: usize,
}

impl<const D: usize> NodeEvaluator<D> {
    pub fn new(basis: Arc<VectorFieldBasis<D>>, grid: QuadratureGrid<D>, energy: EnergyIntegrand, gamma: GammaWeight) -> Self {
        let cache = basis.cache(&grid);
        let reference = basis.reference();
        let rho: Vec<f64> = grid.nodes().iter().map(|x| reference.density(x)).collect();
        let grad_rho = grid.nodes().iter().map(|x| reference.grad_density(x)).collect();
        let lam_weights = grid.weights().iter().zip(&rho).map(|(w, r)| w * r).collect();
        NodeEvaluator { basis, grid, cache, rho, grad_rho, lam_weights, energy, gamma }
    }

    pub fn grid(&self) -> &QuadratureGrid<D> {
        &self.grid
    }

    pub fn cache(&self) -> &NodeCache<D> {
        &self.cache
    }

    pub fn basis(&self) -> &Arc<VectorFieldBasis<D>> {
        &self.basis
    }

    pub fn energy(&self) -> &EnergyIntegrand {
        &self.energy
    }

    /// `W_F(λ∘φ⁻¹)` and the pullback of `γ H_F`.
    pub fn evaluate(&self, phi: &Diffeo<D>) -> Result<Evaluation> {
        let k = self.basis.len();
        let mut out = Evaluation { energy: 0.0, pull: vec![0.0; k], clamped: 0, floored: 0 };
        if self.energy.is_zero() {
            return Ok(out);
        }
        let weights = self.grid.weights();
        for (i, x) in self.grid.nodes().iter().enumerate() {
            let modes = self.cache.at(i);
            let j = phi.jet_cached(x, modes);
            let det = linalg::det(&j.jac);
            if !(det > 0.0 && det.is_finite()) {
                return Err(Error::NonPositiveDeterminant { det, point: fmt_point(x) });
            }
            let rho = self.rho[i] / det;
            if rho < S_FLOOR {
                out.floored += 1;
                continue;
            }
            let v = self.energy.f(&j.value, rho) * det;
            if !v.is_finite() {
                return Err(Error::NonFiniteIntegrand { index: i, point: fmt_point(x), value: v });
            }
            out.energy += weights[i] * v;
            let gd = linalg::grad_det(&j.jac, &j.hess);
            let mut g = [0.0; D];
            for a in 0..D {
                g[a] = (self.grad_rho[i][a] - self.rho[i] * gd[a] / det) / det;
            }
            let grad = if D == 1 {
                let mut p = [0.0; D];
                p[0] = g[0] / j.jac[0][0];
                p
            } else {
                let inv = inverse(&j.jac).ok_or(Error::NonPositiveDeterminant { det, point: fmt_point(x) })?;
                mat_t_vec(&inv, &g)
            };
            let h = self.energy.gradient_at(&j.value, rho, &grad);
            let (gamma, clamped) = self.gamma.value(&j.value, rho);
            out.clamped += clamped as usize;
            let s = self.lam_weights[i] * gamma;
            for (p, m) in out.pull.iter_mut().zip(modes) {
                *p += s * dot(&h, &m.value);
            }
        }
        Ok(out)
    }

    /// `μ = λ∘φ⁻¹` on the images of the grid nodes.
    pub fn nodes(&self, phi: &Diffeo<D>) -> Result<MeasureNodes<D>> {
        let n = self.grid.len();
        let mut out = MeasureNodes {
            points: Vec::with_capacity(n),
            weights: self.lam_weights.clone(),
            density: Vec::with_capacity(n),
            grad_density: Vec::with_capacity(n),
        };
        for (i, x) in self.grid.nodes().iter().enumerate() {
            let j = phi.jet_cached(x, self.cache.at(i));
            let det = linalg::det(&j.jac);
            if !(det > 0.0 && det.is_finite()) {
                return Err(Error::NonPositiveDeterminant { det, point: fmt_point(x) });
            }
            let gd = linalg::grad_det(&j.jac, &j.hess);
            let mut g = [0.0; D];
            for a in 0..D {
                g[a] = (self.grad_rho[i][a] - self.rho[i] * gd[a] / det) / det;
            }
            let inv = inverse(&j.jac).ok_or(Error::NonPositiveDeterminant { det, point: fmt_point(x) })?;
            out.points.push(j.value);
            out.density.push(self.rho[i] / det);
            out.grad_density.push(mat_t_vec(&inv, &g));
        }
        Ok(out)
    }

    /// Images `φ(x_i)` only.
    pub fn images(&self, phi: &Diffeo<D>) -> Vec<Point<D>> {
        self.grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut y = *x;
                for (c, m) in phi.coeffs().iter().zip(self.cache.at(i)) {
                    for a in 0..D {
                        y[a] += c * m.value[a];
                    }
                }
                y
            })
            .collect()
    }

    /// `u(μ)` for each observable, from the images of the nodes.
    pub fn observe(&self, images: &[Point<D>], observables: &[CylinderFunction<D>]) -> Vec<f64> {
        observables
            .iter()
            .map(|u| {
                let z: Vec<f64> = u
                    .inner()
                    .iter()
                    .map(|h| images.iter().zip(&self.lam_weights).map(|(y, w)| w * h.value(y)).sum())
                    .collect();
                u.value_at(&z)
            })
            .collect()
    }

    /// `Σ_k P_k ⟨Du(μ)∘φ, φ_k⟩²_{L²(λ)}`, the square field of `u∘Ψ_λ` for the chain.
    pub fn projected_square_field(&self, images: &[Point<D>], u: &CylinderFunction<D>, precond: &[f64]) -> f64 {
        let z: Vec<f64> = u
            .inner()
            .iter()
            .map(|h| images.iter().zip(&self.lam_weights).map(|(y, w)| w * h.value(y)).sum())
            .collect();
        let g = u.outer_grad(&z);
        let mut proj = vec![0.0; self.basis.len()];
        for (i, y) in images.iter().enumerate() {
            let du = u.derivative_at(&g, y);
            let w = self.lam_weights[i];
            for (p, m) in proj.iter_mut().zip(self.cache.at(i)) {
                *p += w * dot(&du, &m.value);
            }
        }
        proj.iter().zip(precond).map(|(p, q)| q * p * p).sum()
    }

    /// Marginal mean and variance of the first coordinate under `μ`.
    pub fn first_moments(&self, images: &[Point<D>]) -> (f64, f64) {
        let m: f64 = images.iter().zip(&self.lam_weights).map(|(y, w)| w * y[0]).sum();
        let s: f64 = images.iter().zip(&self.lam_weights).map(|(y, w)| w * y[0] * y[0]).sum();
        (m, s - m * m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Euler–Maruyama with rejection of proposals outside `D⁽ⁿ⁾`
    EulerReflect,
    Mala,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioning {
    /// `P = I`
    Identity,
    /// `P_k = 1/b_k`
    Prior,
}

#[derive(Debug, Clone)]
pub struct SgfConfig<const D: usize> {
    pub spec: GaussianSpec<D>,
    pub energy: EnergyIntegrand,
    pub gamma: GammaWeight,
    pub scheme: Scheme,
    pub preconditioning: Preconditioning,
    pub dt: f64,
    pub steps: u64,
    /// record every `stride` steps
    pub stride: u64,
    pub seed: u64,
    pub ensemble_size: usize,
    /// λ-grid nodes per axis for `W_F` and the drift
    pub grid_nodes: usize,
    /// record `Σ_k P_k (∂_k u)²` at each record
    pub square_fields: bool,
}

impl<const D: usize> SgfConfig<D> {
    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

/// A chain state with its cached target data.
#[derive(Debug, Clone)]
pub struct ChainState<const D: usize> {
    pub phi: Diffeo<D>,
    pub log_target: f64,
    /// `P · drift`
    pub velocity: Vec<f64>,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    /// left `D⁽ⁿ⁾`
    Boundary,
    /// Metropolis–Hastings rejection
    Rejected,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChainStats {
    pub proposals: u64,
    pub accepted: u64,
    pub boundary: u64,
    pub rejected: u64,
}

impl ChainStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// One chain's recorded path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub member: u64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    /// `[record][observable]`
    pub observables: Vec<Vec<f64>>,
    /// `[record][observable]`, empty unless requested
    pub square_fields: Vec<Vec<f64>>,
    /// `[record][observable]`: `Σ (Δu)²` over the steps since the previous record
    pub increments: Vec<Vec<f64>>,
    /// outcome of the step that produced each record
    pub accepted: Vec<bool>,
    pub stats: ChainStats,
}

/// The truncated flow for one configuration.
#[derive(Debug, Clone)]
pub struct Sgf<const D: usize> {
    pub config: SgfConfig<D>,
    evaluator: NodeEvaluator<D>,
    precond: Vec<f64>,
    sqrt_precond: Vec<f64>,
}

impl<const D: usize> Sgf<D> {
    pub fn new(config: SgfConfig<D>) -> Result<Self> {
        if !(config.dt > 0.0 && config.dt.is_finite()) {
            return Err(Error::InvalidParameter { name: "dt", reason: format!("must be positive, got {}", config.dt) });
        }
        if config.stride == 0 {
            return Err(Error::InvalidParameter { name: "stride", reason: "must be at least 1".into() });
        }
        let basis = config.spec.basis().clone();
        let grid = QuadratureGrid::for_reference(basis.reference(), config.grid_nodes)?;
        let evaluator = NodeEvaluator::new(basis, grid, config.energy.clone(), config.gamma);
        let precond: Vec<f64> = match config.preconditioning {
            Preconditioning::Identity => vec![1.0; config.spec.k()],
            Preconditioning::Prior => config.spec.weights().b.iter().map(|b| 1.0 / b).collect(),
        };
        let sqrt_precond = precond.iter().map(|p| p.sqrt()).collect();
        Ok(Sgf { config, evaluator, precond, sqrt_precond })
    }

    pub fn evaluator(&self) -> &NodeEvaluator<D> {
        &self.evaluator
    }

    pub fn preconditioner(&self) -> &[f64] {
        &self.precond
    }

    /// `drift_k = −b_k c_k − ⟨γ H_F∘φ, φ_k⟩_{L²(λ)}`.
    pub fn drift(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let phi = Diffeo::new(self.config.spec.basis().clone(), coeffs.to_vec())?;
        let e = self.evaluator.evaluate(&phi)?;
        Ok(self.drift_from(phi.coeffs(), &e))
    }

    fn drift_from(&self, coeffs: &[f64], e: &Evaluation) -> Vec<f64> {
        coeffs.iter().zip(&self.config.spec.weights().b).zip(&e.pull).map(|((c, b), p)| -b * c - p).collect()
    }

    pub fn state(&self, phi: Diffeo<D>) -> Result<ChainState<D>> {
        let e = self.evaluator.evaluate(&phi)?;
        let drift = self.drift_from(phi.coeffs(), &e);
        let velocity = drift.iter().zip(&self.precond).map(|(d, p)| d * p).collect();
        Ok(ChainState { log_target: self.config.spec.log_prior(phi.coeffs()) - e.energy, velocity, energy: e.energy, phi })
    }

    /// `dt · max |P drift| < 0.1` over `initial`.
    pub fn check_step_sanity(&self, initial: &[Vec<f64>]) -> Result<()> {
        for c in initial {
            let phi = Diffeo::new(self.config.spec.basis().clone(), c.clone())?;
            let s = self.state(phi)?;
            let v = s.velocity.iter().map(|x| x * x).sum::<f64>().sqrt() * self.config.dt;
            if !(v < 0.1) {
                return Err(Error::StepSanity { value: v });
            }
        }
        Ok(())
    }

    /// One step of the configured scheme.
    pub fn step<R: Rng + ?Sized>(&self, state: &ChainState<D>, rng: &mut R) -> Result<(Option<ChainState<D>>, StepOutcome)> {
        let dt = self.config.dt;
        let c = state.phi.coeffs();
        let mut xi = vec![0.0; c.len()];
        xi.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
        let prop: Vec<f64> = (0..c.len())
            .map(|k| c[k] + dt * state.velocity[k] + (2.0 * dt).sqrt() * self.sqrt_precond[k] * xi[k])
            .collect();
        let phi = Diffeo::new(self.config.spec.basis().clone(), prop)?;
        if !self.config.spec.accepts(&phi) {
            if self.config.scheme == Scheme::Mala {
                // the uniform is drawn on every step to keep streams aligned across outcomes
                let _: f64 = rng.gen();
            }
            return Ok((None, StepOutcome::Boundary));
        }
        let next = self.state(phi)?;
        match self.config.scheme {
            Scheme::EulerReflect => Ok((Some(next), StepOutcome::Accepted)),
            Scheme::Mala => {
                let log_q = |from: &ChainState<D>, to: &ChainState<D>| -> f64 {
                    let (a, b) = (from.phi.coeffs(), to.phi.coeffs());
                    (0..a.len())
                        .map(|k| {
                            let m = a[k] + dt * from.velocity[k];
                            -(b[k] - m).powi(2) / (4.0 * dt * self.precond[k])
                        })
                        .sum()
                };
                let log_ratio = next.log_target - state.log_target + log_q(&next, state) - log_q(state, &next);
                let u: f64 = rng.gen();
                if log_ratio >= 0.0 || u.ln() < log_ratio {
                    Ok((Some(next), StepOutcome::Accepted))
                } else {
                    Ok((None, StepOutcome::Rejected))
                }
            }
        }
    }

    /// [`Sgf::step`] from raw coefficients: `(c', accepted)`.
    pub fn step_mala<R: Rng + ?Sized>(&self, coeffs: &[f64], rng: &mut R) -> Result<(Vec<f64>, bool)> {
        let s = self.state(Diffeo::new(self.config.spec.basis().clone(), coeffs.to_vec())?)?;
        let (next, outcome) = self.step(&s, rng)?;
        Ok((next.map_or_else(|| coeffs.to_vec(), |n| n.phi.coeffs().to_vec()), outcome == StepOutcome::Accepted))
    }

    /// Integrates member `member` from `initial` over `steps` steps.
    pub fn run_member(&self, member: u64, initial: &[f64], observables: &[CylinderFunction<D>]) -> Result<Trajectory> {
        let mut rng = member_rng(self.config.seed, member);
        let phi = Diffeo::new(self.config.spec.basis().clone(), initial.to_vec())?;
        if !self.config.spec.accepts(&phi) {
            return Err(Error::Certification(format!("initial state of member {member} is outside the conditioning set")));
        }
        let mut state = self.state(phi)?;
        let no = observables.len();
        let mut images = self.evaluator.images(&state.phi);
        let mut obs = self.evaluator.observe(&images, observables);
        let mut traj = Trajectory {
            member,
            times: Vec::new(),
            states: Vec::new(),
            energies: Vec::new(),
            observables: Vec::new(),
            square_fields: Vec::new(),
            increments: Vec::new(),
            accepted: Vec::new(),
            stats: ChainStats::default(),
        };
        let mut inc = vec![0.0; no];
        let mut last_accepted = true;
        let record = |traj: &mut Trajectory, t: f64, state: &ChainState<D>, obs: &[f64], images: &[Point<D>], inc: &mut Vec<f64>, acc: bool| {
            traj.times.push(t);
            traj.states.push(state.phi.coeffs().to_vec());
            traj.energies.push(state.energy);
            traj.observables.push(obs.to_vec());
            if self.config.square_fields {
                traj.square_fields
                    .push(observables.iter().map(|u| self.evaluator.projected_square_field(images, u, &self.precond)).collect());
            }
            traj.increments.push(core::mem::replace(inc, vec![0.0; no]));
            traj.accepted.push(acc);
        };
        record(&mut traj, 0.0, &state, &obs, &images, &mut inc, last_accepted);
        for step in 1..=self.config.steps {
            traj.stats.proposals += 1;
            let (next, outcome) = self.step(&state, &mut rng)?;
            match outcome {
                StepOutcome::Accepted => traj.stats.accepted += 1,
                StepOutcome::Boundary => traj.stats.boundary += 1,
                StepOutcome::Rejected => traj.stats.rejected += 1,
            }
            last_accepted = outcome == StepOutcome::Accepted;
            if let Some(n) = next {
                state = n;
                if no > 0 {
                    images = self.evaluator.images(&state.phi);
                    let new_obs = self.evaluator.observe(&images, observables);
                    for j in 0..no {
                        inc[j] += (new_obs[j] - obs[j]).powi(2);
                    }
                    obs = new_obs;
                }
            }
            if step % self.config.stride == 0 {
                record(&mut traj, step as f64 * self.config.dt, &state, &obs, &images, &mut inc, last_accepted);
            }
        }
        Ok(traj)
    }

    /// All members, sequentially; member `i` uses stream `i` of the seed.
    pub fn run_sgf(&self, initial: &[Vec<f64>], observables: &[CylinderFunction<D>]) -> Result<Vec<Trajectory>> {
        self.check_step_sanity(initial)?;
        initial.iter().enumerate().map(|(i, c)| self.run_member(i as u64, c, observables)).collect()
    }
}

/// A mean ratio with its standard error and a `±3 s.e.` interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub std_error: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RatioEstimate {
    fn new(ratio: f64, std_error: f64) -> Self {
        RatioEstimate { ratio, std_error, lo: ratio - 3.0 * std_error, hi: ratio + 3.0 * std_error }
    }

    fn trivial() -> Self {
        RatioEstimate::new(1.0, 0.0)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableDiagnostics {
    /// `z` scores of the block means of `u` against the run mean
    pub block_z: Vec<f64>,
    pub stationary: bool,
    /// `E[(Δu)²]/(2 dt)` over `Λ_F(Γ(u,u))`
    pub energy_identity: RatioEstimate,
    /// `Σ (Δu)²` over `2 ∫ Γ(u,u)(μ_s) ds`, pooled over the ensemble
    pub quadratic_variation: RatioEstimate,
    pub underpowered: bool,
    pub trivial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub observables: Vec<ObservableDiagnostics>,
}

/// Stationarity, energy-identity and quadratic-variation checks.
///
/// `gamma_means[j]` estimates `Λ_F(Γ(u_j, u_j))`. Trajectories must record
/// square fields. A cell is underpowered when its ratio has a standard error
/// above `0.03`, too large to resolve the `[0.9, 1.1]` band.
pub fn martingale_diagnostics(
    trajectories: &[Trajectory],
    gamma_means: &[ImportanceEstimate],
    dt: f64,
    blocks: usize,
) -> Result<MartingaleReport> {
    let m = trajectories.len();
    if m < 2 {
        return Err(Error::InvalidParameter { name: "trajectories", reason: "need at least two ensemble members".into() });
    }
    let no = gamma_means.len();
    let records = trajectories[0].times.len();
    if records < blocks + 1 || trajectories.iter().any(|t| t.times.len() != records || t.square_fields.len() != records) {
        return Err(Error::InvalidParameter {
            name: "trajectories",
            reason: "members must share a record grid with square fields and more records than blocks".into(),
        });
    }
    let stride_time = trajectories[0].times[1] - trajectories[0].times[0];
    let steps = (trajectories[0].times[records - 1] / dt).round();
    let mut out = Vec::with_capacity(no);
    for j in 0..no {
        let trivial = trajectories.iter().all(|t| {
            t.increments.iter().all(|v| v[j] == 0.0) && t.square_fields.iter().all(|v| v[j] == 0.0)
        }) && gamma_means[j].estimate == 0.0;
        if trivial {
            out.push(ObservableDiagnostics {
                block_z: vec![0.0; blocks],
                stationary: true,
                energy_identity: RatioEstimate::trivial(),
                quadratic_variation: RatioEstimate::trivial(),
                underpowered: false,
                trivial: true,
            });
            continue;
        }
        // stationarity: per-member block means minus the member mean
        let len = (records - 1) / blocks;
        let mut block_z = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let devs: Vec<f64> = trajectories
                .iter()
                .map(|t| {
                    let series: Vec<f64> = t.observables[1..].iter().map(|v| v[j]).collect();
                    let all = series[..len * blocks].iter().sum::<f64>() / (len * blocks) as f64;
                    series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64 - all
                })
                .collect();
            let e = mean_estimate(&devs);
            block_z.push(if e.std_error > 0.0 { e.mean / e.std_error } else { 0.0 });
        }
        let stationary = block_z.iter().all(|z| z.abs() <= 3.0);
        // energy identity
        let per_member: Vec<f64> = trajectories
            .iter()
            .map(|t| t.increments.iter().map(|v| v[j]).sum::<f64>() / (steps * 2.0 * dt))
            .collect();
        let num = mean_estimate(&per_member);
        let den = gamma_means[j];
        let ratio = num.mean / den.estimate;
        let se = ratio * ((num.std_error / num.mean).powi(2) + (den.std_error / den.estimate).powi(2)).sqrt();
        let energy_identity = RatioEstimate::new(ratio, se);
        // quadratic variation, left Riemann sum of Γ between records
        let pairs: Vec<(f64, f64)> = trajectories
            .iter()
            .map(|t| {
                let qv: f64 = t.increments[1..].iter().map(|v| v[j]).sum();
                let g: f64 = t.square_fields[..records - 1].iter().map(|v| v[j]).sum::<f64>() * 2.0 * stride_time;
                (qv, g)
            })
            .collect();
        let sq: f64 = pairs.iter().map(|p| p.0).sum();
        let sg: f64 = pairs.iter().map(|p| p.1).sum();
        let r = sq / sg;
        let mean_g = sg / m as f64;
        let var = pairs.iter().map(|(q, g)| (q - r * g).powi(2)).sum::<f64>() / ((m * (m - 1)) as f64);
        let quadratic_variation = RatioEstimate::new(r, var.sqrt() / mean_g);
        let underpowered = energy_identity.std_error > 0.03 || quadratic_variation.std_error > 0.03;
        out.push(ObservableDiagnostics { block_z, stationary, energy_identity, quadratic_variation, underpowered, trivial });
    }
    Ok(MartingaleReport { observables: out })
}

/// Settings of [`run_deterministic_flow`].
#[derive(Debug, Clone)]
pub struct FlowConfig<const D: usize> {
    pub basis: Arc<VectorFieldBasis<D>>,
    pub energy: EnergyIntegrand,
    pub gamma: GammaWeight,
    /// membership level `n` of `D⁽ⁿ⁾` required along the flow
    pub level: f64,
    pub horizon: f64,
    /// times that the integrator must hit exactly
    pub record_times: Vec<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub grid_nodes: usize,
    pub max_steps: usize,
    /// tolerated increase of `W_F` per accepted step
    pub lyapunov_tol: f64,
}

impl<const D: usize> FlowConfig<D> {
    pub fn new(basis: Arc<VectorFieldBasis<D>>, energy: EnergyIntegrand, horizon: f64) -> Self {
        FlowConfig {
            basis,
            energy,
            gamma: GammaWeight::unit(),
            level: 64.0,
            horizon,
            record_times: Vec::new(),
            rtol: 1e-8,
            atol: 1e-10,
            grid_nodes: 2048,
            max_steps: 200_000,
            lyapunov_tol: 1e-8,
        }
    }
}

/// A deterministic flow path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
    /// marginal variance of the first coordinate
    pub variances: Vec<f64>,
    pub certificates: Vec<DnCertificate>,
    pub lyapunov_violations: usize,
    pub max_energy_increase: f64,
    pub rejected_steps: usize,
    /// reason for an early stop
    pub stop: Option<String>,
}

impl FlowTrajectory {
    pub fn completed(&self) -> bool {
        self.stop.is_none()
    }

    /// Index of the record at time `t`, if one was made.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }
}

// Dormand–Prince 5(4)
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// `dc/dt = −⟨γ H_F∘φ_c, φ_k⟩_{L²(λ)}` by adaptive Dormand–Prince steps.
/// Each accepted state must certify for `D⁽ⁿ⁾` (refined bounds in `d = 1`);
/// the first failure stops the flow and the partial path is returned.
pub fn run_deterministic_flow<const D: usize>(config: &FlowConfig<D>, initial: &[f64]) -> Result<FlowTrajectory> {
    let grid = QuadratureGrid::for_reference(config.basis.reference(), config.grid_nodes)?;
    let ev = NodeEvaluator::new(config.basis.clone(), grid, config.energy.clone(), config.gamma);
    let k = config.basis.len();
    let make = |c: &[f64]| Diffeo::new(config.basis.clone(), c.to_vec());
    let rhs = |c: &[f64]| -> Result<(Vec<f64>, f64)> {
        let e = ev.evaluate(&make(c)?)?;
        Ok((e.pull.iter().map(|p| -p).collect(), e.energy))
    };
    let certify = |phi: &Diffeo<D>| DnCertificate::from_bounds(&refined_bounds(phi, ev.grid(), Some(ev.cache())), config.level);
    let mut traj = FlowTrajectory {
        times: Vec::new(),
        states: Vec::new(),
        energies: Vec::new(),
        variances: Vec::new(),
        certificates: Vec::new(),
        lyapunov_violations: 0,
        max_energy_increase: f64::NEG_INFINITY,
        rejected_steps: 0,
        stop: None,
    };
    let mut c = make(initial)?.coeffs().to_vec();
    let phi0 = make(&c)?;
    let cert = certify(&phi0);
    if !cert.member {
        return Err(Error::Certification(format!("initial map is not in D⁽ⁿ⁾ for n = {} (level {:.4})", config.level, cert.level())));
    }
    let (mut f0, mut w) = rhs(&c)?;
    let push = |traj: &mut FlowTrajectory, t: f64, c: &[f64], w: f64, cert: DnCertificate| -> Result<()> {
        let phi = make(c)?;
        traj.times.push(t);
        traj.states.push(c.to_vec());
        traj.energies.push(w);
        traj.variances.push(ev.first_moments(&ev.images(&phi)).1);
        traj.certificates.push(cert);
        Ok(())
    };
    push(&mut traj, 0.0, &c, w, cert)?;
    let mut targets: Vec<f64> = config.record_times.iter().copied().filter(|t| *t > 0.0 && *t < config.horizon).collect();
    targets.push(config.horizon);
    targets.sort_by(|a, b| a.total_cmp(b));
    let mut next_target = 0;
    let mut t = 0.0;
    let mut h = 1e-4f64.min(config.horizon);
    let mut steps = 0;
    while next_target < targets.len() {
        if steps >= config.max_steps {
            traj.stop = Some(format!("step limit {} reached at t = {t}", config.max_steps));
            break;
        }
        let goal = targets[next_target];
        let hit = t + h >= goal - 1e-14;
        let hh = if hit { goal - t } else { h };
        let mut stages: Vec<Vec<f64>> = Vec::with_capacity(7);
        stages.push(f0.clone());
        let mut w_new = w;
        let mut failed = None;
        for s in 1..7 {
            let y: Vec<f64> = (0..k).map(|i| c[i] + hh * (0..s).map(|r| DP_A[s][r] * stages[r][i]).sum::<f64>()).collect();
            match rhs(&y) {
                Ok((fy, wy)) => {
                    stages.push(fy);
                    if s == 6 {
                        w_new = wy;
                    }
                }
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if failed.is_some() {
            traj.rejected_steps += 1;
            h *= 0.25;
            if h < 1e-14 {
                traj.stop = Some(format!("step size underflow at t = {t}"));
                break;
            }
            continue;
        }
        let c_new: Vec<f64> = (0..k).map(|i| c[i] + hh * (0..6).map(|r| DP_A[6][r] * stages[r][i]).sum::<f64>()).collect();
        let err = (0..k)
            .map(|i| {
                let e = hh * (0..7).map(|r| DP_E[r] * stages[r][i]).sum::<f64>();
                let sc = config.atol + config.rtol * c[i].abs().max(c_new[i].abs());
                (e / sc).powi(2)
            })
            .sum::<f64>()
            .sqrt()
            / (k as f64).sqrt();
        steps += 1;
        if err > 1.0 {
            traj.rejected_steps += 1;
            h = hh * (0.9 * err.powf(-0.2)).max(0.2);
            continue;
        }
        let phi = make(&c_new)?;
        let cert = certify(&phi);
        if !cert.member {
            traj.stop = Some(format!(
                "certification lost at t = {:.6}: level {:.4} ≥ n = {}",
                t + hh,
                cert.level(),
                config.level
            ));
            break;
        }
        let increase = w_new - w;
        traj.max_energy_increase = traj.max_energy_increase.max(increase);
        if increase > config.lyapunov_tol {
            traj.lyapunov_violations += 1;
        }
        t = if hit { goal } else { t + hh };
        c = c_new;
        w = w_new;
        f0 = stages.swap_remove(6);
        push(&mut traj, t, &c, w, cert)?;
        if hit {
            next_target += 1;
        }
        let grow = if err > 0.0 { (0.9 * err.powf(-0.2)).min(5.0) } else { 5.0 };
        if !hit {
            h = hh * grow;
        } else {
            h = h.max(hh * grow.min(1.0));
        }
    }
    Ok(traj)
}

/// Conditioning level of a spec, `∞` without localization.
pub fn conditioning_level(c: Conditioning) -> f64 {
    match c {
        Conditioning::Dn(n) => n,
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_warped_trig_basis, WeightVariant};
    use crate::energy::Potential;
    use crate::gradient::{h_f, TestFunction};
    use crate::reference::make_gaussian_reference;

    fn spec(k: usize, cond: Conditioning) -> GaussianSpec<1> {
        let l = make_gaussian_reference::<1>(1.0).unwrap();
        GaussianSpec::new(Arc::new(build_warped_trig_basis(&l, k).unwrap()), WeightVariant::GradientAndHessian, cond)
    }

    fn config(spec: GaussianSpec<1>, energy: EnergyIntegrand, dt: f64) -> SgfConfig<1> {
        SgfConfig {
            spec,
            energy,
            gamma: GammaWeight::unit(),
            scheme: Scheme::Mala,
            preconditioning: Preconditioning::Prior,
            dt,
            steps: 100,
            stride: 10,
            seed: 3,
            ensemble_size: 2,
            grid_nodes: 512,
            square_fields: false,
        }
    }

    #[test]
    fn drift_without_energy_is_ou() {
        let s = Sgf::new(config(spec(4, Conditioning::None), EnergyIntegrand::zero(), 1e-3)).unwrap();
        let c = [0.01, -0.02, 0.003, 0.0];
        let d = s.drift(&c).unwrap();
        for k in 0..4 {
            assert_eq!(d[k], -s.config.spec.weights().b[k] * c[k]);
        }
    }

    #[test]
    fn drift_pullback_at_identity() {
        let sp = spec(4, Conditioning::None);
        let basis = sp.basis().clone();
        let s = Sgf::new(config(sp, EnergyIntegrand::entropy(), 1e-3)).unwrap();
        let d = s.drift(&[0.0; 4]).unwrap();
        let grid = QuadratureGrid::for_reference(basis.reference(), 4096).unwrap();
        for k in 0..4 {
            // H_F = −x at λ, so the pullback term is ⟨x, φ_k⟩_{L²(λ)}
            let want = grid
                .nodes()
                .iter()
                .zip(grid.weights())
                .map(|(x, w)| w * basis.reference().density(x) * x[0] * basis.eval_mode(k, x).value[0])
                .sum::<f64>();
            assert!((d[k] - want).abs() < 1e-8, "{k}: {} vs {want}", d[k]);
        }
        let evaluator = s.evaluator();
        let phi = Diffeo::new(basis.clone(), vec![0.01, 0.0, -0.01, 0.0]).unwrap();
        let g1 = evaluator.evaluate(&phi).unwrap();
        let double = NodeEvaluator::new(
            basis,
            evaluator.grid().clone(),
            EnergyIntegrand::entropy(),
            GammaWeight::new(crate::gradient::GammaKind::Constant(2.0), 2.0).unwrap(),
        );
        let g2 = double.evaluate(&phi).unwrap();
        for k in 0..4 {
            assert!((g2.pull[k] - 2.0 * g1.pull[k]).abs() <= 1e-15 * g1.pull[k].abs().max(1e-300));
        }
    }

    #[test]
    fn evaluator_matches_closed_form_gradient() {
        let sp = spec(6, Conditioning::None);
        let s = Sgf::new(config(sp.clone(), EnergyIntegrand::entropy(), 1e-3)).unwrap();
        let phi = Diffeo::new(sp.basis().clone(), vec![0.02, -0.01, 0.01, 0.004, 0.0, -0.002]).unwrap();
        let nodes = s.evaluator().nodes(&phi).unwrap();
        let h = h_f(&EnergyIntegrand::entropy(), &nodes);
        let e = s.evaluator().evaluate(&phi).unwrap();
        let grid = s.evaluator().grid();
        for k in 0..6 {
            let want: f64 = (0..grid.len()).map(|i| nodes.weights[i] * h.values[i][0] * s.evaluator().cache().at(i)[k].value[0]).sum();
            assert!((e.pull[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_proposals_are_rejected() {
        let mut cfg = config(spec(4, Conditioning::Dn(2.0 + 1e-9)), EnergyIntegrand::zero(), 1e-2);
        cfg.preconditioning = Preconditioning::Identity;
        let s = Sgf::new(cfg).unwrap();
        let mut rng = member_rng(1, 0);
        let (c, acc) = s.step_mala(&[0.0; 4], &mut rng).unwrap();
        assert!(!acc);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn small_steps_are_accepted() {
        let s = Sgf::new(config(spec(4, Conditioning::None), EnergyIntegrand::zero(), 1e-6)).unwrap();
        let t = s.run_member(0, &[0.0; 4], &[]).unwrap();
        assert!(t.stats.acceptance_rate() > 0.99);
    }

    #[test]
    fn step_sanity_is_checked() {
        let mut cfg = config(spec(4, Conditioning::None), EnergyIntegrand::zero(), 1e-3);
        cfg.preconditioning = Preconditioning::Identity;
        let s = Sgf::new(cfg).unwrap();
        let big = vec![vec![0.0, 0.0, 0.0, 0.01]];
        assert!(matches!(s.check_step_sanity(&big), Err(Error::StepSanity { .. })));
    }

    #[test]
    fn same_seed_same_path() {
        let s = Sgf::new(config(spec(4, Conditioning::Dn(4.0)), EnergyIntegrand::entropy(), 1e-3)).unwrap();
        let obs = [CylinderFunction::linear(TestFunction::Moment { axis: 0, power: 2 })];
        let a = s.run_member(1, &[0.0; 4], &obs).unwrap();
        let b = s.run_member(1, &[0.0; 4], &obs).unwrap();
        assert_eq!(a, b);
        let c = s.run_member(2, &[0.0; 4], &obs).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn stationary_point_stays_fixed() {
        // V = |x|²/2 with entropy: H_F = x − x = 0 at λ = N(0, 1)
        let sp = spec(4, Conditioning::None);
        let f = EnergyIntegrand::vq(Potential { offset: 0.0, quadratic: 1.0, soft_abs: 0.0 }, crate::energy::QForm::Constant(1.0)).unwrap();
        let cfg = FlowConfig::new(sp.basis().clone(), f, 0.1);
        let t = run_deterministic_flow(&cfg, &[0.0; 4]).unwrap();
        assert!(t.completed());
        assert!(t.states.last().unwrap().iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn heat_flow_dissipates() {
        let sp = spec(8, Conditioning::None);
        let mut cfg = FlowConfig::new(sp.basis().clone(), EnergyIntegrand::entropy(), 0.05);
        cfg.record_times = vec![0.01, 0.02];
        let t = run_deterministic_flow(&cfg, &[0.0; 8]).unwrap();
        assert_eq!(t.lyapunov_violations, 0);
        assert!(t.energies.windows(2).all(|w| w[1] <= w[0] + 1e-8));
        assert!(t.index_at(0.02).is_some());
        let v = t.variances[t.index_at(0.02).unwrap()];
        assert!((v - 1.04).abs() < 5e-2, "{v}");
    }
}
