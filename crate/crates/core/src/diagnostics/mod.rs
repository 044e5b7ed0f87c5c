//! Probes that measure which dependencies a trained forecaster uses, plus
//! information-theoretic checks on the synthetic generators.

mod efficiency;
mod experiment;
mod mi;
mod probes;
mod report;
mod sharpness;
mod significance;

pub use efficiency::{efficiency_benchmark, log_log_slope, EfficiencyConfig, EfficiencyPoint, EfficiencyReport, SweepVariable};
pub use experiment::{DataSource, Experiment};
pub use mi::{
    cmi_plugin, cmi_plugin_nd, conditional_entropy, mi_plugin, mi_plugin_nd, quantile_bins, MiEstimate, Variable,
    DEFAULT_BINS, MIN_SAMPLES,
};
pub use probes::{
    activation_ablation, compare_arms, disentangled_vs_ttv, map_seeds, median, order_probe, patching_probe, relative_pct, ArmResult,
    ProbeMetric, ProbeOptions, ProbeReport, SeedResult,
};
pub use report::aggregate;
pub use sharpness::{model_sharpness, sharpness_of, unit_direction, Radius, SharpnessConfig, SharpnessEstimate};
pub use significance::{dependency_significance, DependencyCheck, SignificanceReport, SIGNIFICANCE_BINS, SIGNIFICANCE_NATS};
