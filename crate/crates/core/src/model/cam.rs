//! Class activation head: known-class activation maps, the support-derived
//! class weight vector S and the query prior built from them.

use camseg_tensor::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::layers::{Conv2d, Init};

/// N×n class weights, one row per image. After k-shot aggregation N is 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassWeightVector(pub Var);

/// Per-class activation maps D (or refined D′), N×n×h×w.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationStack {
    pub maps: Var,
    pub refined: bool,
}

/// Un-normalised foreground prior, N×1×h×w.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorMap(pub Var);

/// Multi-label targets in {−1, +1}, one per known class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLabelVector(Vec<f32>);

impl ClassLabelVector {
    pub fn new(labels: Vec<f32>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
            return Err(Error::Validation(format!("class label {bad} is not ±1")));
        }
        Ok(ClassLabelVector(labels))
    }

    /// +1 at `class`, −1 elsewhere.
    pub fn one_hot(n: usize, class: usize) -> Result<Self> {
        if class >= n {
            return Err(Error::Range { what: "class channel", value: class, allowed: format!("0..{n}") });
        }
        Ok(ClassLabelVector((0..n).map(|i| if i == class { 1.0 } else { -1.0 }).collect()))
    }

    pub fn labels(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamHead {
    num_classes: usize,
    projection: Conv2d,
    branch_wide: Conv2d,
    branch_a: Conv2d,
    branch_b: Conv2d,
}

impl CamHead {
    /// The refinement branches start at zero, so a fresh head gives S = 0.
    pub fn new(store: &mut ParamStore, feature_channels: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = num_classes;
        Ok(CamHead {
            num_classes,
            projection: Conv2d::new(store, "cam.projection", feature_channels, n, 1, 1, 0, Init::FanIn, rng)?,
            branch_wide: Conv2d::new(store, "cam.refine.wide", n, n, 3, 1, 1, Init::Zero, rng)?,
            branch_a: Conv2d::new(store, "cam.refine.point_a", n, n, 1, 1, 0, Init::Zero, rng)?,
            branch_b: Conv2d::new(store, "cam.refine.point_b", n, n, 1, 1, 0, Init::Zero, rng)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.projection, &self.branch_wide, &self.branch_a, &self.branch_b]
            .into_iter()
            .flat_map(Conv2d::params)
            .collect()
    }

    pub fn projection_params(&self) -> [ParamId; 2] {
        self.projection.params()
    }

    pub fn refinement_params(&self) -> Vec<ParamId> {
        [&self.branch_wide, &self.branch_a, &self.branch_b].into_iter().flat_map(Conv2d::params).collect()
    }

    /// 1×1 convolution from n_F feature channels to n class channels.
    pub fn project_to_classes(&self, tape: &mut Tape, store: &ParamStore, feature: Var) -> Result<ActivationStack> {
        let maps = self.projection.forward(tape, store, feature)?;
        Ok(ActivationStack { maps, refined: false })
    }

    /// Sum of a 3×3 and two 1×1 convolutions, each n → n; shape preserving.
    pub fn refine_multiscale(&self, tape: &mut Tape, store: &ParamStore, stack: ActivationStack) -> Result<ActivationStack> {
        if stack.refined {
            return Err(Error::Validation("activation stack is already refined".into()));
        }
        let wide = self.branch_wide.forward(tape, store, stack.maps)?;
        let a = self.branch_a.forward(tape, store, stack.maps)?;
        let b = self.branch_b.forward(tape, store, stack.maps)?;
        let ab = tape.add(a, b)?;
        let maps = tape.add(wide, ab)?;
        Ok(ActivationStack { maps, refined: true })
    }

    /// Projection followed by refinement.
    pub fn activations(&self, tape: &mut Tape, store: &ParamStore, feature: Var) -> Result<ActivationStack> {
        let d = self.project_to_classes(tape, store, feature)?;
        self.refine_multiscale(tape, store, d)
    }
}

/// Zero the background pixels of an N×3×H×W image with a binary N×1×H×W mask.
pub fn mask_support(tape: &mut Tape, image: Var, mask: &Tensor) -> Result<Var> {
    if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("support mask value {bad} is not 0 or 1")));
    }
    let m = tape.constant(mask.clone());
    Ok(tape.mul(image, m)?)
}

/// S from a refined stack: global average pooling, no further nonlinearity.
pub fn pool_weights(tape: &mut Tape, stack: ActivationStack) -> Result<ClassWeightVector> {
    if !stack.refined {
        return Err(Error::Validation("class weights are pooled from the refined stack".into()));
    }
    Ok(ClassWeightVector(tape.global_avg_pool(stack.maps)?))
}

/// Mean over classes of softplus(−ŝ_i·s_i). `s` must hold a single row.
pub fn classification_loss(tape: &mut Tape, s: ClassWeightVector, labels: &ClassLabelVector) -> Result<Var> {
    let shape = tape.shape(s.0).to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != labels.labels().len() {
        return Err(Error::Tensor(TensorError::Shape {
            op: "classification_loss",
            detail: format!("weights of shape {shape:?} against {} labels", labels.labels().len()),
        }));
    }
    Ok(tape.logistic_loss(s.0, labels.labels())?)
}

/// Prior M[x,y] = Σ_i D′_i[x,y]·s_i.
pub fn query_prior(tape: &mut Tape, stack: ActivationStack, s: ClassWeightVector) -> Result<PriorMap> {
    if !stack.refined {
        return Err(Error::Validation("the query prior is built from the refined stack".into()));
    }
    Ok(PriorMap(tape.channel_weighted_sum(stack.maps, s.0)?))
}

/// Mean of the k rows of a k×n weight matrix.
pub fn aggregate_kshot(tape: &mut Tape, weights: ClassWeightVector) -> Result<ClassWeightVector> {
    if tape.shape(weights.0).first() == Some(&0) {
        return Err(Error::Tensor(TensorError::Contract {
            op: "aggregate_kshot",
            detail: "no support weights to aggregate".into(),
        }));
    }
    Ok(ClassWeightVector(tape.mean_batch(weights.0)?))
}
