//! Synthetic classes, fold protocol, episode sampling and file I/O.

mod episode;
pub mod io;
mod mask;
mod render;
mod split;

pub use episode::{build_eval_set, episodes_to_text, sample_episode, AuditEntry, AuditLog, DatasetIndex, Episode, Pool, RenderedEpisode, Stage};
pub use mask::Mask;
pub use render::{render_instance, stack, Instance, ShapeFamily, MAX_FOREGROUND, MIN_FOREGROUND, NUM_CLASSES};
pub use split::{fold, make_folds, stage_splits, FoldSplit, StageSplit, CLASSES_PER_FOLD, NUM_FOLDS};
