//! Post-processing, ensembling and evaluation toolkit for multi-organ
//! volumetric segmentation.
//!
//! The pipeline runs preprocessing ([`preprocess`]), sliding-window softmax
//! aggregation and model ensembling ([`inference`]), connected-component
//! analysis ([`components`]) with the per-organ repair strategies built on it
//! ([`postprocess`]), a per-organ strategy search over cross-validation
//! predictions ([`optimizer`]), and Dice / confusion evaluation ([`metrics`]).
//! [`phantom`] generates seeded synthetic cases with controlled defects.

pub mod components;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nifti;
pub mod optimizer;
pub mod organs;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod volume;

pub use components::{connected_components, pooled_components, Component, ComponentSet, Connectivity};
pub use error::{Error, ErrorClass, Result};
pub use organs::{LrPair, OrganSpec, OrganTable, Side};
pub use volume::{argmax_labels, Geometry, LabelVolume, ProbVolume, ScalarVolume};
pub use postprocess::{
    apply_plan, apply_strategy, fix_left_right, keep_largest_component,
    size_constrained_component_filter, size_constraint_filter, PPPlan, Strategy, StrategyKind,
};
pub use metrics::{confusion_matrix, dice, evaluate_cases, ConfusionMatrix, EvalReport};
pub use preprocess::{
    compute_ct_stats, normalize, resample_labels, resample_scalar, NormalizationScheme,
    PreprocessConfig, ResampleMode,
};
pub use inference::{
    ensemble_average, sliding_window_predict, LookupScorer, PatchScorer, SlidingWindowConfig,
    ThresholdScorer,
};
pub use optimizer::{evaluate_plan, optimize_plan, OptimizationResult, OptimizerConfig, TraceEntry};
pub use phantom::{generate_phantom, Defect, DefectKind, Phantom, PhantomOrgan, PhantomSpec};
