//! Parallel execution. Work is split into units with their own seeded
//! streams and collected in unit order, so results do not depend on the
//! number of workers.

use rayon::prelude::*;
use wflow_core::diffeo::Diffeo;
use wflow_core::dynamics::{member_rng, NodeEvaluator, Sgf, Trajectory};
use wflow_core::gradient::CylinderFunction;
use wflow_core::measure::{sample_counted, GaussianSpec, ImportanceEstimate, SampleStats, WeightedEnsemble};

use crate::error::{CliError, Result};

/// Stream offsets of the auxiliary samplers; chain members use streams `0..m`.
pub const IMPORTANCE_STREAM: u64 = 1 << 32;
pub const RESAMPLE_STREAM: u64 = 1 << 33;
pub const PRIOR_STREAM: u64 = 1 << 34;
/// Starting-state pool, kept apart from the estimator draws it is tested against.
pub const POOL_STREAM: u64 = 1 << 35;
/// Draws per importance-sampling work unit.
pub const CHUNK: usize = 1024;

/// `flag`, then `WFLOW_THREADS`, then the config value, then the core count.
pub fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return if n >= 1 { Ok(n) } else { Err(CliError::config("--threads", "must be at least 1")) };
    }
    if let Ok(v) = std::env::var("WFLOW_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config("WFLOW_THREADS", format!("expected a positive integer, got {v:?}"))),
        };
    }
    Ok(config.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())))
}

pub struct Runner {
    pool: rayon::ThreadPool,
    threads: usize,
}

impl Runner {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::config("threads", e.to_string()))?;
        Ok(Runner { pool, threads })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Runs `f` over `0..n` in parallel and returns the results in index order.
    pub fn map<T: Send, F: Fn(usize) -> Result<T> + Sync>(&self, n: usize, f: F) -> Result<Vec<T>> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }

    /// All ensemble members of `sgf`; member `i` uses stream `i` of the seed.
    pub fn run_ensemble<const D: usize>(
        &self,
        sgf: &Sgf<D>,
        initial: &[Vec<f64>],
        observables: &[CylinderFunction<D>],
    ) -> Result<Vec<Trajectory>> {
        sgf.check_step_sanity(initial)?;
        self.map(initial.len(), |i| Ok(sgf.run_member(i as u64, &initial[i], observables)?))
    }

    /// `count` conditioned prior draws weighted by `e^{−W_F}`, with observable
    /// values and, when `square_fields` is set, projected square fields under
    /// the preconditioner `precond`. Unit `c` draws from stream `stream + c`.
    #[allow(clippy::too_many_arguments)]
    pub fn importance<const D: usize>(
        &self,
        spec: &GaussianSpec<D>,
        evaluator: &NodeEvaluator<D>,
        observables: &[CylinderFunction<D>],
        precond: Option<&[f64]>,
        count: usize,
        seed: u64,
        stream: u64,
    ) -> Result<ImportanceDraws<D>> {
        let chunks = count.div_ceil(CHUNK);
        let parts = self.map(chunks, |c| {
            let mut rng = member_rng(seed, stream + c as u64);
            let n = CHUNK.min(count - c * CHUNK);
            let mut part = ImportanceDraws::empty();
            for _ in 0..n {
                let phi = sample_counted(spec, &mut rng, &mut part.stats)?;
                let e = evaluator.evaluate(&phi)?;
                let images = evaluator.images(&phi);
                part.values.push(evaluator.observe(&images, observables));
                if let Some(p) = precond {
                    part.square_fields.push(observables.iter().map(|u| evaluator.projected_square_field(&images, u, p)).collect());
                }
                part.ensemble.log_weights.push(-e.energy);
                part.ensemble.samples.push(phi);
            }
            Ok(part)
        })?;
        let mut all = ImportanceDraws::empty();
        for p in parts {
            all.stats.merge(&p.stats);
            all.ensemble.samples.extend(p.ensemble.samples);
            all.ensemble.log_weights.extend(p.ensemble.log_weights);
            all.values.extend(p.values);
            all.square_fields.extend(p.square_fields);
        }
        all.ensemble.stats = all.stats;
        Ok(all)
    }

    /// `count` independent conditioned prior draws, one stream per draw.
    pub fn prior_draws<const D: usize>(&self, spec: &GaussianSpec<D>, count: usize, seed: u64) -> Result<(Vec<Diffeo<D>>, SampleStats)> {
        let draws = self.map(count, |i| {
            let mut rng = member_rng(seed, PRIOR_STREAM + i as u64);
            let mut stats = SampleStats::default();
            let phi = sample_counted(spec, &mut rng, &mut stats)?;
            Ok((phi, stats))
        })?;
        let mut stats = SampleStats::default();
        let phis = draws
            .into_iter()
            .map(|(p, s)| {
                stats.merge(&s);
                p
            })
            .collect();
        Ok((phis, stats))
    }
}

/// Weighted draws with per-draw observable values.
#[derive(Debug, Clone)]
pub struct ImportanceDraws<const D: usize> {
    pub ensemble: WeightedEnsemble<D>,
    /// `values[i][j] = u_j(μ_i)`
    pub values: Vec<Vec<f64>>,
    /// `square_fields[i][j] = Γ(u_j, u_j)(μ_i)`
    pub square_fields: Vec<Vec<f64>>,
    pub stats: SampleStats,
}

impl<const D: usize> ImportanceDraws<D> {
    fn empty() -> Self {
        ImportanceDraws {
            ensemble: WeightedEnsemble { samples: Vec::new(), log_weights: Vec::new(), stats: SampleStats::default() },
            values: Vec::new(),
            square_fields: Vec::new(),
            stats: SampleStats::default(),
        }
    }

    pub fn estimate(&self, j: usize) -> Result<ImportanceEstimate> {
        let v: Vec<f64> = self.values.iter().map(|r| r[j]).collect();
        Ok(self.ensemble.estimate(&v)?)
    }

    pub fn square_field_estimate(&self, j: usize) -> Result<ImportanceEstimate> {
        let v: Vec<f64> = self.square_fields.iter().map(|r| r[j]).collect();
        Ok(self.ensemble.estimate(&v)?)
    }

    /// `count` starting states by multinomial resampling on stream `RESAMPLE_STREAM`.
    pub fn resample(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut rng = member_rng(seed, RESAMPLE_STREAM);
        Ok(self.ensemble.resample(count, &mut rng)?.into_iter().map(|p| p.coeffs().to_vec()).collect())
    }
}
