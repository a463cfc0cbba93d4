//! Configuration, orchestration, metrics and file output.

pub mod config;
pub mod gradcheck;
pub mod io;
pub mod run;

pub use config::{preset, Method, OperatorKind, PriorKind, RunConfig, SweepParam, SweepSpec};
pub use gradcheck::{run_gradcheck, run_oracle_report, GradcheckConfig, GradcheckReport};
pub use io::{energy_distance, psnr, MetricsRecord};
pub use run::{run_sample, run_solve, run_sweep, solve, SolveOutput, SweepRow};
