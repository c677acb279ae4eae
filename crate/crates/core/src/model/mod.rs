//! Parameter sets, the filter recursion, the likelihood and simulation.

mod filter;
mod params;
mod simulate;
mod spec;

pub(crate) use filter::{filter_unchecked, loglik_rows, Kernel};
pub use filter::{
    filter, filter_log_likelihood, log_likelihood, per_equation_coefficients,
    EquationCoefficients, FilterOutput,
};
pub use params::{check_constraints, targeting_intercept, ParamSet, Violation};
pub use simulate::{simulate, simulate_univariate, synthetic_dates, Simulation};
pub use spec::{count_parameters, full_parameter_count, ModelSpec, Parameterization, Variant};
