//! Four-fold class split: each fold holds out a contiguous block of five
//! classes, and its fifteen training classes divide into a classifier set
//! and an episodic set.

use crate::data::render::NUM_CLASSES;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = NUM_CLASSES / NUM_FOLDS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub test_classes: Vec<usize>,
    pub train_classes: Vec<usize>,
}

fn block(i: usize) -> Vec<usize> {
    (i * CLASSES_PER_FOLD..(i + 1) * CLASSES_PER_FOLD).collect()
}

pub fn make_folds() -> Vec<FoldSplit> {
    (0..NUM_FOLDS)
        .map(|i| FoldSplit {
            fold_index: i,
            test_classes: block(i),
            train_classes: (0..NUM_FOLDS).filter(|&j| j != i).flat_map(block).collect(),
        })
        .collect()
}

pub fn fold(index: usize) -> Result<FoldSplit> {
    make_folds().into_iter().nth(index).ok_or_else(|| Error::Range {
        what: "fold index",
        value: index,
        allowed: format!("0..{NUM_FOLDS}"),
    })
}

/// Class sets of the two training stages plus the untouched test set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSplit {
    pub fold_index: usize,
    /// Known classes; channel `i` of every class stack belongs to
    /// `classifier_classes[i]`.
    pub classifier_classes: Vec<usize>,
    pub episodic_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

/// The two lowest-indexed remaining blocks train the classifier; the last
/// one drives episodic training.
pub fn stage_splits(fold: &FoldSplit) -> StageSplit {
    let remaining: Vec<usize> = (0..NUM_FOLDS).filter(|&j| j != fold.fold_index).collect();
    StageSplit {
        fold_index: fold.fold_index,
        classifier_classes: remaining[..2].iter().copied().flat_map(block).collect(),
        episodic_classes: block(remaining[2]),
        test_classes: fold.test_classes.clone(),
    }
}

impl StageSplit {
    pub fn for_fold(index: usize) -> Result<Self> {
        Ok(stage_splits(&fold(index)?))
    }

    pub fn num_known(&self) -> usize {
        self.classifier_classes.len()
    }

    /// Channel index of a classifier class.
    pub fn channel_of(&self, class_id: usize) -> Option<usize> {
        self.classifier_classes.iter().position(|&c| c == class_id)
    }
}
