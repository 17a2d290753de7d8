//! Synthetic scenes of curved text-like ribbons, dataset files, evaluation
//! and timing.

mod eval;
mod io;
mod scene;

pub use eval::{evaluate, evaluate_model, evaluate_scene, f_measure, timing_harness, EvalReport, SceneEval, TimingReport, MATCH_IOU, MIN_TIMED_CALLS};
pub use io::{generate_dataset, load_dataset, load_scene, save_dataset, scene_seed, split_indices, Dataset, Manifest, ManifestEntry, Split, TRAIN_FRACTION};
pub use scene::{generate_scene, Scene, SceneParams};
