//! Experiment driver: configuration, evaluation protocols, statistics,
//! and report emission.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod report;
pub mod stats;

pub use config::{
    load_config, parse_config, BaselineToggles, DomainEntry, DomainRole, DomainSource,
    EvalSettings, ExperimentConfig, LearnerSettings, Protocol, SplitSettings, WpnSettings,
};
pub use eval::{
    evaluate, CoeffStat, EvalResult, MemberPredictor, MxmlPredictor, Predictor, UniformPredictor,
};
pub use experiment::{
    base_ckpt_name, build_domains, domain_split, evaluate_phase, in_distribution_protocol,
    load_base_members, run_experiment, target_split, train_base_phase, train_wpn_phase,
    BuiltDomains, TargetSplits, TrainedModels, MANIFEST_FILE, SINGLE_CKPT, WPN_CKPT,
};
pub use report::{
    emit_report, parse_results_csv, ResultsRow, COEFFICIENTS_CSV, EPISODES_CSV, REPORT_MD,
    RESULTS_CSV,
};
