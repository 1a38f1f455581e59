//! Experiment orchestration: configuration, the frozen-model cache,
//! training and evaluation loops, and the ablation, rule-separation and
//! bridge experiments.

mod config;
mod experiments;
mod train;
mod world;

pub use config::RunConfig;
pub use experiments::{
    run_ablation_kn, run_bridge, run_rule_separation, AblationCell, AblationReport, BridgeReport, BridgeRow,
    SeparationReport, SeparationRun, ABLATION_T, SEPARATION_THRESHOLD,
};
pub use train::{
    eval_prompts, evaluate, example_step, gradcheck_end_to_end, load_generator, new_generator, prepare, prepare_data,
    save_generator, score_sequence, train, train_seed, Aggregate, EpochRecord, EvalOutput, JsonLines, Metrics,
    Prediction, Prepared, PreparedData, RunReport, SeedReport, StepOutput,
};
pub use world::{corpus_spec, load_frozen, load_or_pretrain, pretrain_plm, PlmSummary};
