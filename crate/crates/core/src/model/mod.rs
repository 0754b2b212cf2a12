pub mod backbone;
pub mod cam;
mod layers;
pub mod network;
pub mod seg_head;

pub use backbone::Backbone;
pub use cam::{ActivationStack, CamHead, ClassLabelVector, ClassWeightVector, PriorMap};
pub use layers::{Conv2d, ConvTranspose2d, Init};
pub use network::{EpisodeForward, FewShotSegmenter, ModelConfig, Prediction};
pub use seg_head::{Decoder, NormalizedPrior, SegmentationLogits, DEGENERATE_EPS};
