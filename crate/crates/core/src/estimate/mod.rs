//! Monte Carlo estimators compared against the closed-form moment, Gronwall, Hölder and
//! derivative bounds.

pub mod bounds;
pub mod gradient;
pub mod kolmogorov;
pub mod stats;

pub use bounds::{
    check_derivative_moment_bound, check_exp_moment_bound, check_flow_holder, check_gronwall, check_lyapunov_bound,
    check_multiple_exp_bound, check_poly_moment_bound, derivative_moment_rhs, exp_moment_rhs, flow_holder_rhs,
    lyapunov_rhs, multiple_exp_rhs, poly_moment_rhs, BoundReport, CiMethod, FlowPoint, GronwallAlpha, GronwallParams,
    Relation,
};
pub use gradient::{gradient_assembly, GradientAssembly};
pub use kolmogorov::{kolmogorov_table, KolmogorovParams, KolmogorovTable, LatticePoint};
pub use stats::empirical_norm;
