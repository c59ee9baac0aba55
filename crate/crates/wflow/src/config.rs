//! TOML run configuration. Unknown keys are rejected, and every field is
//! validated before any computation starts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wflow_core::basis::{VectorFieldBasis, WeightVariant};
use wflow_core::dynamics::{FlowConfig, Preconditioning, Scheme, SgfConfig};
use wflow_core::energy::{Beta, EnergyIntegrand, Mobility, PorousMedia, Potential, QForm};
use wflow_core::gradient::{CylinderFunction, GammaKind, GammaWeight, TestFunction};
use wflow_core::measure::{Conditioning, GaussianSpec};
use wflow_core::reference::ReferenceMeasure;

use crate::error::{AtPath, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// worker pool size; `WFLOW_THREADS` and `--threads` take precedence
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub conditioning: ConditioningConfig,
    pub energy: EnergyConfig,
    #[serde(default)]
    pub gamma: GammaConfig,
    #[serde(default)]
    pub dynamics: DynamicsConfig,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub pme: PmeSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub grad_check: GradCheckSection,
    #[serde(default)]
    pub quantize_check: QuantizeSection,
    #[serde(default = "default_observables")]
    pub observables: Vec<ObservableConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("wflow-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub dim: usize,
    pub variance: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { dim: 1, variance: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsConfig {
    GradientOnly,
    GradientAndHessian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisConfig {
    pub modes: usize,
    pub translation: bool,
    pub weights: WeightsConfig,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { modes: 8, translation: false, weights: WeightsConfig::GradientAndHessian }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConditioningConfig {
    None {},
    D1 {},
    Dn { level: f64 },
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig::Dn { level: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    pub offset: f64,
    pub quadratic: f64,
    pub soft_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QConfig {
    Constant { value: f64 },
    Saturating { q0: f64, q1: f64, r0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BetaConfig {
    Linear { alpha: f64 },
    Saturating { alpha: f64, delta: f64, r0: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MobilityConfig {
    Constant { value: f64 },
    Saturating { b0: f64, b1: f64, r0: f64 },
}

impl MobilityConfig {
    fn build(self) -> Mobility {
        match self {
            MobilityConfig::Constant { value } => Mobility::Constant(value),
            MobilityConfig::Saturating { b0, b1, r0 } => Mobility::Saturating { b0, b1, r0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnergyConfig {
    Zero {},
    Entropy {},
    Vq {
        #[serde(default)]
        potential: PotentialConfig,
        q: QConfig,
    },
    PorousMedia {
        #[serde(default)]
        potential: PotentialConfig,
        beta: BetaConfig,
        mobility: MobilityConfig,
    },
}

impl EnergyConfig {
    pub fn heat() -> Self {
        EnergyConfig::PorousMedia {
            potential: PotentialConfig::default(),
            beta: BetaConfig::Linear { alpha: 1.0 },
            mobility: MobilityConfig::Constant { value: 1.0 },
        }
    }

    /// Coefficients of the porous media equation this energy corresponds to.
    /// The entropy preset is the heat equation.
    pub fn porous_media(&self) -> Option<PorousMedia> {
        match *self {
            EnergyConfig::Entropy {} => Some(PorousMedia::heat()),
            EnergyConfig::PorousMedia { potential, beta, mobility } => Some(PorousMedia {
                phi: potential.build(),
                beta: match beta {
                    BetaConfig::Linear { alpha } => Beta::Linear { alpha },
                    BetaConfig::Saturating { alpha, delta, r0 } => Beta::Saturating { alpha, delta, r0 },
                },
                mobility: mobility.build(),
            }),
            _ => None,
        }
    }

    pub fn build(&self) -> Result<EnergyIntegrand> {
        match *self {
            EnergyConfig::Zero {} => Ok(EnergyIntegrand::zero()),
            EnergyConfig::Entropy {} => Ok(EnergyIntegrand::entropy()),
            EnergyConfig::Vq { potential, q } => {
                let q = match q {
                    QConfig::Constant { value } => QForm::Constant(value),
                    QConfig::Saturating { q0, q1, r0 } => QForm::Saturating { q0, q1, r0 },
                };
                EnergyIntegrand::vq(potential.build(), q).at("energy")
            }
            EnergyConfig::PorousMedia { .. } => {
                EnergyIntegrand::porous_media(self.porous_media().expect("porous preset")).at("energy")
            }
        }
    }
}

impl PotentialConfig {
    fn build(self) -> Potential {
        Potential { offset: self.offset, quadratic: self.quadratic, soft_abs: self.soft_abs }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaConfig {
    Unit {},
    Constant { value: f64, bound: f64 },
    Mobility { mobility: MobilityConfig, bound: f64 },
    Tanh { base: f64, amplitude: f64, scale: f64, bound: f64 },
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig::Unit {}
    }
}

impl GammaConfig {
    pub fn build(&self) -> Result<GammaWeight> {
        let (kind, bound) = match *self {
            GammaConfig::Unit {} => return Ok(GammaWeight::unit()),
            GammaConfig::Constant { value, bound } => (GammaKind::Constant(value), bound),
            GammaConfig::Mobility { mobility, bound } => (GammaKind::Mobility(mobility.build()), bound),
            GammaConfig::Tanh { base, amplitude, scale, bound } => {
                if !(scale > 0.0) {
                    return Err(CliError::config("gamma.scale", "must be positive"));
                }
                (GammaKind::Tanh { base, amplitude, scale }, bound)
            }
        };
        GammaWeight::new(kind, bound).at("gamma.bound")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeConfig {
    Mala,
    EulerReflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreconditioningConfig {
    Identity,
    Prior,
}

/// Starting states of the ensemble members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitConfig {
    Identity,
    /// independent draws from the conditioned prior
    Prior,
    /// importance resampling from the Gibbs perturbation
    Resample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub scheme: SchemeConfig,
    pub preconditioning: PreconditioningConfig,
    pub dt: f64,
    pub steps: u64,
    pub stride: u64,
    pub ensemble: usize,
    pub grid_nodes: usize,
    pub square_fields: bool,
    pub init: InitConfig,
    /// pool size for `init = "resample"`
    pub resample_pool: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            scheme: SchemeConfig::Mala,
            preconditioning: PreconditioningConfig::Prior,
            dt: 1e-3,
            steps: 10_000,
            stride: 10,
            ensemble: 4,
            grid_nodes: 512,
            square_fields: false,
            init: InitConfig::Resample,
            resample_pool: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub horizon: f64,
    pub level: f64,
    pub record_times: Vec<f64>,
    pub grid_nodes: usize,
    /// starting coefficients; the identity when empty
    pub initial: Vec<f64>,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection { horizon: 0.25, level: 64.0, record_times: vec![0.05, 0.1, 0.15, 0.2], grid_nodes: 2048, initial: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmeSection {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub initial_mean: f64,
    pub initial_variance: f64,
    pub times: Vec<f64>,
    pub safety: f64,
}

impl Default for PmeSection {
    fn default() -> Self {
        PmeSection {
            lo: -12.0,
            hi: 12.0,
            cells: 1024,
            initial_mean: 0.0,
            initial_variance: 1.0,
            times: vec![0.05, 0.1, 0.15, 0.2, 0.25],
            safety: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    pub max_rejections: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { count: 1000, max_rejections: wflow_core::measure::DEFAULT_MAX_REJECTIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub cases: usize,
    /// conditioning level of the sampled measures
    pub level: f64,
    /// directions live in the span of this many leading modes
    pub direction_modes: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub grid_nodes: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection { cases: 50, level: 3.0, direction_modes: 8, eps: 1e-4, tolerance: 1e-3, grid_nodes: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeSection {
    pub importance_samples: usize,
    pub blocks: usize,
    /// `|chain − importance|` allowed in combined standard errors
    pub z_max: f64,
    pub energy_band: [f64; 2],
}

impl Default for QuantizeSection {
    fn default() -> Self {
        QuantizeSection { importance_samples: 20_000, blocks: 5, z_max: 3.0, energy_band: [0.9, 1.1] }
    }
}

/// A linear observable `μ ↦ μ(h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableConfig {
    Moment {
        #[serde(default)]
        axis: usize,
        power: u32,
    },
    Tanh {
        #[serde(default)]
        axis: usize,
        scale: f64,
    },
    Sin {
        #[serde(default)]
        axis: usize,
        frequency: f64,
    },
    Gaussian { center: Vec<f64>, width: f64 },
}

pub fn default_observables() -> Vec<ObservableConfig> {
    vec![
        ObservableConfig::Moment { axis: 0, power: 2 },
        ObservableConfig::Tanh { axis: 0, scale: 1.0 },
        ObservableConfig::Gaussian { center: vec![1.0], width: 0.5 },
    ]
}

impl ObservableConfig {
    pub fn label(&self) -> String {
        match self {
            ObservableConfig::Moment { axis, power } => format!("moment_x{axis}^{power}"),
            ObservableConfig::Tanh { axis, scale } => format!("tanh_x{axis}/{scale}"),
            ObservableConfig::Sin { axis, frequency } => format!("sin_{frequency}x{axis}"),
            ObservableConfig::Gaussian { width, .. } => format!("gaussian_w{width}"),
        }
    }

    pub fn build<const D: usize>(&self, path: &str) -> Result<CylinderFunction<D>> {
        let axis_ok = |axis: usize| {
            if axis < D {
                Ok(axis)
            } else {
                Err(CliError::config(format!("{path}.axis"), format!("axis {axis} out of range for d = {D}")))
            }
        };
        let h = match self {
            ObservableConfig::Moment { axis, power } => TestFunction::Moment { axis: axis_ok(*axis)?, power: *power },
            ObservableConfig::Tanh { axis, scale } => {
                if !(*scale > 0.0) {
                    return Err(CliError::config(format!("{path}.scale"), "must be positive"));
                }
                TestFunction::Tanh { axis: axis_ok(*axis)?, scale: *scale }
            }
            ObservableConfig::Sin { axis, frequency } => TestFunction::Sin { axis: axis_ok(*axis)?, frequency: *frequency },
            ObservableConfig::Gaussian { center, width } => {
                if center.len() != D {
                    return Err(CliError::config(format!("{path}.center"), format!("need {D} coordinates, got {}", center.len())));
                }
                if !(*width > 0.0) {
                    return Err(CliError::config(format!("{path}.width"), "must be positive"));
                }
                let mut c = [0.0; D];
                c.copy_from_slice(center);
                TestFunction::Gaussian { center: c, width: *width }
            }
        };
        Ok(CylinderFunction::linear(h))
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(path, format!("must be positive and finite, got {v}")))
    }
}

fn at_least(path: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::config(path, format!("must be at least {min}, got {v}")))
    }
}

fn sorted_nonnegative(path: &str, times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::config(path, "times must be finite, nonnegative and sorted"));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML, reporting the offending key of any schema error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::config(if path == "." { String::from("<root>") } else { path }, inner.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: crate::manifest::Manifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Input { path: path.to_path_buf(), reason: e.to_string() })?;
            m.config.validate()?;
            return Ok(m.config);
        }
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::config("seed", "must fit a TOML integer (at most 2^63 - 1)"));
        }
        if !(self.reference.dim == 1 || self.reference.dim == 2) {
            return Err(CliError::config("reference.dim", format!("only 1 and 2 are supported, got {}", self.reference.dim)));
        }
        positive("reference.variance", self.reference.variance)?;
        at_least("basis.modes", self.basis.modes, 1)?;
        if let Some(t) = self.threads {
            at_least("threads", t, 1)?;
        }
        if let ConditioningConfig::Dn { level } = self.conditioning {
            positive("conditioning.level", level)?;
        }
        self.energy.build()?;
        self.gamma.build()?;
        let d = &self.dynamics;
        positive("dynamics.dt", d.dt)?;
        at_least("dynamics.stride", d.stride as usize, 1)?;
        at_least("dynamics.ensemble", d.ensemble, 1)?;
        at_least("dynamics.grid_nodes", d.grid_nodes, 16)?;
        at_least("dynamics.resample_pool", d.resample_pool, 1)?;
        positive("flow.horizon", self.flow.horizon)?;
        positive("flow.level", self.flow.level)?;
        at_least("flow.grid_nodes", self.flow.grid_nodes, 16)?;
        sorted_nonnegative("flow.record_times", &self.flow.record_times)?;
        if !self.flow.initial.is_empty() && self.flow.initial.len() != self.basis_len() {
            return Err(CliError::config(
                "flow.initial",
                format!("{} coefficients for {} modes", self.flow.initial.len(), self.basis_len()),
            ));
        }
        let p = &self.pme;
        if !(p.hi > p.lo) {
            return Err(CliError::config("pme.hi", "window must satisfy lo < hi"));
        }
        at_least("pme.cells", p.cells, 3)?;
        positive("pme.initial_variance", p.initial_variance)?;
        sorted_nonnegative("pme.times", &p.times)?;
        if !(p.safety > 0.0 && p.safety <= 1.0) {
            return Err(CliError::config("pme.safety", format!("must lie in (0, 1], got {}", p.safety)));
        }
        at_least("sample.count", self.sample.count, 1)?;
        at_least("sample.max_rejections", self.sample.max_rejections as usize, 1)?;
        let g = &self.grad_check;
        at_least("grad_check.cases", g.cases, 1)?;
        positive("grad_check.level", g.level)?;
        at_least("grad_check.direction_modes", g.direction_modes, 1)?;
        positive("grad_check.eps", g.eps)?;
        positive("grad_check.tolerance", g.tolerance)?;
        at_least("grad_check.grid_nodes", g.grid_nodes, 16)?;
        let q = &self.quantize_check;
        at_least("quantize_check.importance_samples", q.importance_samples, 2)?;
        at_least("quantize_check.blocks", q.blocks, 2)?;
        positive("quantize_check.z_max", q.z_max)?;
        if !(q.energy_band[0] < q.energy_band[1]) {
            return Err(CliError::config("quantize_check.energy_band", "need lower < upper"));
        }
        match self.reference.dim {
            1 => self.check_observables::<1>()?,
            _ => self.check_observables::<2>()?,
        }
        Ok(())
    }

    fn check_observables<const D: usize>(&self) -> Result<()> {
        self.observables_for::<D>().map(|_| ())
    }

    fn basis_len(&self) -> usize {
        self.basis.modes + if self.basis.translation { self.reference.dim } else { 0 }
    }

    pub fn reference<const D: usize>(&self) -> Result<ReferenceMeasure<D>> {
        ReferenceMeasure::gaussian(self.reference.variance).at("reference.variance")
    }

    pub fn basis<const D: usize>(&self) -> Result<Arc<VectorFieldBasis<D>>> {
        let r = self.reference::<D>()?;
        Ok(Arc::new(VectorFieldBasis::warped_trig(&r, self.basis.modes, self.basis.translation).at("basis")?))
    }

    pub fn weight_variant(&self) -> WeightVariant {
        match self.basis.weights {
            WeightsConfig::GradientOnly => WeightVariant::GradientOnly,
            WeightsConfig::GradientAndHessian => WeightVariant::GradientAndHessian,
        }
    }

    pub fn conditioning(&self) -> Conditioning {
        match self.conditioning {
            ConditioningConfig::None {} => Conditioning::None,
            ConditioningConfig::D1 {} => Conditioning::D1,
            ConditioningConfig::Dn { level } => Conditioning::Dn(level),
        }
    }

    pub fn spec<const D: usize>(&self) -> Result<GaussianSpec<D>> {
        let mut s = GaussianSpec::new(self.basis::<D>()?, self.weight_variant(), self.conditioning());
        s.max_rejections = self.sample.max_rejections;
        Ok(s)
    }

    pub fn observables_for<const D: usize>(&self) -> Result<Vec<CylinderFunction<D>>> {
        self.observables.iter().enumerate().map(|(i, o)| o.build::<D>(&format!("observables[{i}]"))).collect()
    }

    pub fn sgf_config<const D: usize>(&self) -> Result<SgfConfig<D>> {
        let d = &self.dynamics;
        Ok(SgfConfig {
            spec: self.spec::<D>()?,
            energy: self.energy.build()?,
            gamma: self.gamma.build()?,
            scheme: match d.scheme {
                SchemeConfig::Mala => Scheme::Mala,
                SchemeConfig::EulerReflect => Scheme::EulerReflect,
            },
            preconditioning: match d.preconditioning {
                PreconditioningConfig::Identity => Preconditioning::Identity,
                PreconditioningConfig::Prior => Preconditioning::Prior,
            },
            dt: d.dt,
            steps: d.steps,
            stride: d.stride,
            seed: self.seed,
            ensemble_size: d.ensemble,
            grid_nodes: d.grid_nodes,
            square_fields: d.square_fields,
        })
    }

    pub fn flow_config<const D: usize>(&self) -> Result<FlowConfig<D>> {
        let mut f = FlowConfig::new(self.basis::<D>()?, self.energy.build()?, self.flow.horizon);
        f.gamma = self.gamma.build()?;
        f.level = self.flow.level;
        f.record_times = self.flow.record_times.clone();
        f.grid_nodes = self.flow.grid_nodes;
        Ok(f)
    }
}
