//! Shared convolutional feature extractor.
//!
//! Each stage is conv3×3/s2 → ReLU → conv3×3/s1 → ReLU, so the output is
//! downsampled by 2^stages. The same parameters serve support and query
//! images.

use camseg_tensor::{ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::layers::{Conv2d, Init};

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<[Conv2d; 2]>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut c_in = config.in_channels;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let down = Conv2d::new(store, &format!("backbone.stage{i}.down"), c_in, c, 3, 2, 1, Init::Kaiming, rng)?;
            let conv = Conv2d::new(store, &format!("backbone.stage{i}.conv"), c, c, 3, 1, 1, Init::Kaiming, rng)?;
            stages.push([down, conv]);
            c_in = c;
        }
        Ok(Backbone { config: config.clone(), stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// N×3×H×W image → N×n_F×H/f×W/f feature map, f = downsample factor.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let [_, _, h, w] = tape.value(image).dims4("backbone")?;
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Tensor(camseg_tensor::TensorError::Shape {
                op: "backbone",
                detail: format!("spatial size {h}×{w} (axes 2, 3) is not divisible by {f}"),
            }));
        }
        let mut x = image;
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(tape, store, x)?;
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn stage_params(&self, stage: usize) -> Vec<ParamId> {
        self.stages[stage].iter().flat_map(Conv2d::params).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        (0..self.stages.len()).flat_map(|s| self.stage_params(s)).collect()
    }

    /// Mark the first `frozen_stages` stages (input side) untrainable and the
    /// rest trainable.
    pub fn freeze_layers(&self, store: &mut ParamStore) {
        for s in 0..self.stages.len() {
            let trainable = s >= self.config.frozen_stages;
            for id in self.stage_params(s) {
                store.set_trainable(id, trainable);
            }
        }
    }
}
