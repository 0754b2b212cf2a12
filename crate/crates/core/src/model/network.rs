//! The assembled few-shot segmenter.

use camseg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::data::{stack, Mask, RenderedEpisode, Stage};
use crate::error::{Error, Result};
use crate::model::backbone::Backbone;
use crate::model::cam::{
    aggregate_kshot, mask_support, pool_weights, query_prior, ActivationStack, CamHead, ClassWeightVector, PriorMap,
};
use crate::model::seg_head::{gate_features, normalize_prior, predict_mask, Decoder, NormalizedPrior, SegmentationLogits};
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of known classes, i.e. activation channels.
    pub num_classes: usize,
    pub decoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone: BackboneConfig::default(), num_classes: 10, decoder_channels: vec![32, 16] }
    }
}

/// Every intermediate of one episode's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeForward {
    /// k×n, one row per support.
    pub support_weights: ClassWeightVector,
    /// 1×n mean over supports.
    pub weights: ClassWeightVector,
    pub query_feature: Var,
    pub query_stack: ActivationStack,
    pub prior: PriorMap,
    pub normalized: NormalizedPrior,
    pub logits: SegmentationLogits,
}

/// Forward-only result for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    /// Normalised prior at feature resolution, h×w row-major.
    pub prior: Vec<f32>,
    /// Refined query activations, n×h×w.
    pub activations: Vec<f32>,
    pub feature_size: (usize, usize),
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct FewShotSegmenter {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    cam: CamHead,
    decoder: Decoder,
}

impl FewShotSegmenter {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("the model needs at least one known class".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x1417]));
        let backbone = Backbone::new(&config.backbone, &mut store, &mut rng)?;
        let cam = CamHead::new(&mut store, config.backbone.feature_channels(), config.num_classes, &mut rng)?;
        let decoder = Decoder::new(&mut store, config.backbone.feature_channels(), &config.decoder_channels, &mut rng)?;
        Ok(FewShotSegmenter { config, store, backbone, cam, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn cam(&self) -> &CamHead {
        &self.cam
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Select what trains in each stage. The classifier stage trains the
    /// whole backbone and the activation head; the episodic stage freezes the
    /// configured backbone stages and adds the decoder.
    pub fn set_stage(&mut self, stage: Stage) {
        let all: Vec<ParamId> = self.store.ids().collect();
        for id in all {
            self.store.set_trainable(id, true);
        }
        match stage {
            Stage::Classifier => {
                for id in self.decoder.params() {
                    self.store.set_trainable(id, false);
                }
            }
            Stage::Episodic => self.backbone.freeze_layers(&mut self.store),
        }
    }

    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        self.backbone.forward(tape, &self.store, image)
    }

    /// One weight row per masked image in an N×3×H×W batch.
    pub fn support_weights(&self, tape: &mut Tape, images: &Tensor, masks: &Tensor) -> Result<ClassWeightVector> {
        let img = tape.constant(images.clone());
        let masked = mask_support(tape, img, masks)?;
        let f = self.features(tape, masked)?;
        let stack = self.cam.activations(tape, &self.store, f)?;
        pool_weights(tape, stack)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        support_images: &Tensor,
        support_masks: &Tensor,
        query: &Tensor,
    ) -> Result<EpisodeForward> {
        let support_weights = self.support_weights(tape, support_images, support_masks)?;
        let weights = aggregate_kshot(tape, support_weights)?;
        let q = tape.constant(query.clone());
        let query_feature = self.features(tape, q)?;
        let query_stack = self.cam.activations(tape, &self.store, query_feature)?;
        let prior = query_prior(tape, query_stack, weights)?;
        let normalized = normalize_prior(tape, prior)?;
        let gated = gate_features(tape, query_feature, normalized)?;
        let logits = self.decoder.decode(tape, &self.store, gated)?;
        Ok(EpisodeForward { support_weights, weights, query_feature, query_stack, prior, normalized, logits })
    }

    pub fn forward_episode(&self, tape: &mut Tape, episode: &RenderedEpisode) -> Result<EpisodeForward> {
        let refs: Vec<_> = episode.supports.iter().collect();
        let (images, masks) = stack(&refs);
        self.forward(tape, &images, &masks, &episode.query.image_tensor())
    }

    /// Inference without recording gradients or touching parameters.
    pub fn predict(&self, episode: &RenderedEpisode) -> Result<Prediction> {
        let mut tape = Tape::no_grad();
        let out = self.forward_episode(&mut tape, episode)?;
        let logits = tape.value(out.logits.0);
        if !logits.is_finite() {
            return Err(Error::Numerical("non-finite segmentation logits".into()));
        }
        let mask = predict_mask(logits)?.remove(0);
        let shape = tape.shape(out.normalized.0);
        Ok(Prediction {
            mask,
            feature_size: (shape[2], shape[3]),
            prior: tape.value(out.normalized.0).data().to_vec(),
            activations: tape.value(out.query_stack.maps).data().to_vec(),
            weights: tape.value(out.weights.0).data().to_vec(),
        })
    }
}
