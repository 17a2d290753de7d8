//! Loss terms, target construction and the optimizer loop.

pub mod gradcheck;
pub mod losses;
mod step;
mod targets;
mod train_loop;

pub use losses::{bce_loss, giou_loss, quality_focal_loss, smooth_l1};
pub use step::{batch_terms, init_loss, scene_loss, transform_loss, LossBreakdown, LossTerms, StagePlan, StepPlan};
pub use targets::{
    allocate_positive, allocation_cost, build_refinement_batch, instance_targets, uniform_contour, InstanceTarget, RefinementSample,
    SampleSource,
};
pub use train_loop::{
    batch_indices, config_from_meta, load_model, save_training_checkpoint, scene_targets, train_loop, StepRecord, TrainOutcome,
    CHECKPOINT_FILE, METRICS_FILE,
};
