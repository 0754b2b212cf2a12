//! Prior normalisation, feature gating and the upsampling decoder.

use camseg_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::model::cam::PriorMap;
use crate::model::layers::{ConvTranspose2d, Init};

/// Range below which a prior counts as constant and normalises to 0.5.
pub const DEGENERATE_EPS: f32 = 1e-8;

/// Prior scaled to [0, 1] per image, N×1×h×w.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizedPrior(pub Var);

/// Background / foreground logits at input resolution, N×2×H×W.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationLogits(pub Var);

pub fn normalize_prior(tape: &mut Tape, prior: PriorMap) -> Result<NormalizedPrior> {
    if tape.value(prior.0).data().iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("prior map contains NaN".into()));
    }
    Ok(NormalizedPrior(tape.minmax_normalize(prior.0, DEGENERATE_EPS)?))
}

/// Multiply every feature channel by the prior.
pub fn gate_features(tape: &mut Tape, feature: Var, prior: NormalizedPrior) -> Result<Var> {
    let fs = tape.shape(feature).to_vec();
    let ps = tape.shape(prior.0).to_vec();
    if fs.len() != 4 || ps.len() != 4 || fs[2..] != ps[2..] {
        return Err(Error::Tensor(TensorError::Shape {
            op: "gate_features",
            detail: format!("feature {fs:?} and prior {ps:?} differ on spatial axes 2, 3"),
        }));
    }
    Ok(tape.mul(feature, prior.0)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    stages: Vec<ConvTranspose2d>,
}

impl Decoder {
    /// Stride-2 4×4 transposed convolutions through `hidden` channels to 2
    /// output channels. The last stage starts at zero, so a fresh decoder
    /// predicts uniform probabilities.
    pub fn new(store: &mut ParamStore, in_channels: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut stages = Vec::with_capacity(hidden.len() + 1);
        let mut c_in = in_channels;
        for (i, &c) in hidden.iter().chain(std::iter::once(&2)).enumerate() {
            let init = if i == hidden.len() { Init::Zero } else { Init::Kaiming };
            stages.push(ConvTranspose2d::new(store, &format!("decoder.up{i}"), c_in, c, 4, 2, 1, init, rng)?);
            c_in = c;
        }
        Ok(Decoder { stages })
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(ConvTranspose2d::params).collect()
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, gated: Var) -> Result<SegmentationLogits> {
        let mut x = gated;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(tape, store, x)?;
            if i + 1 < self.stages.len() {
                x = tape.relu(x);
            }
        }
        Ok(SegmentationLogits(x))
    }
}

/// Mean per-pixel two-class softmax cross entropy against a binary mask.
pub fn seg_loss(tape: &mut Tape, logits: SegmentationLogits, gt: &Tensor) -> Result<Var> {
    if let Some(bad) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("ground-truth mask value {bad} is not 0 or 1")));
    }
    Ok(tape.softmax_cross_entropy(logits.0, gt)?)
}

/// Per-pixel argmax over N×2×H×W logits; ties go to background.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<Mask>> {
    let [n, c, h, w] = logits.dims4("predict_mask")?;
    if c != 2 {
        return Err(Error::Tensor(TensorError::Shape {
            op: "predict_mask",
            detail: format!("expected 2 channels on axis 1, got {c}"),
        }));
    }
    let hw = h * w;
    (0..n)
        .map(|b| {
            let bg = &logits.data()[b * 2 * hw..b * 2 * hw + hw];
            let fg = &logits.data()[b * 2 * hw + hw..(b + 1) * 2 * hw];
            Mask::from_bits(h, w, bg.iter().zip(fg).map(|(b, f)| f > b).collect())
        })
        .collect()
}
