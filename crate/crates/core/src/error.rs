use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unsupported dimension {0}; only d = 1 and d = 2 are available")]
    UnsupportedDimension(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("integrand is not finite ({value}) at node {index} ({point})")]
    NonFiniteIntegrand { index: usize, point: String, value: f64 },
    #[error("determinant of the Jacobian is {det} at {point}; the map left the diffeomorphism class")]
    NonPositiveDeterminant { det: f64, point: String },
    #[error("inversion did not converge after {iterations} iterations (residual {residual:e})")]
    InversionFailed { iterations: usize, residual: f64 },
    #[error("rejection sampler exhausted {proposals} proposals with {accepted} accepted")]
    SamplingExhausted { proposals: u64, accepted: u64 },
    #[error("importance weights are degenerate: {0}")]
    DegenerateWeights(String),
    #[error("probe step {eps:e} leaves the certified region: {reason}")]
    StepSize { eps: f64, reason: String },
    #[error("time step {dt:e} violates the stability bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },
    #[error("certification failed: {0}")]
    Certification(String),
    #[error("step sanity violated: dt * max drift = {value:e} >= 0.1")]
    StepSanity { value: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn fmt_point<const D: usize>(x: &[f64; D]) -> String {
    use core::fmt::Write;
    let mut s = String::from("(");
    for (i, v) in x.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{v}");
    }
    s.push(')');
    s
}
