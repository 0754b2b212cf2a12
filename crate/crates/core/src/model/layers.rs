use camseg_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Weight initialisation scheme; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, 2 / fan_in), for layers followed by ReLU.
    Kaiming,
    /// N(0, 1 / fan_in), for linear layers.
    FanIn,
    Zero,
}

fn init_tensor(shape: [usize; 4], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    let gain = match init {
        Init::Kaiming => 2.0,
        Init::FanIn => 1.0,
        Init::Zero => return Tensor::zeros(shape),
    };
    let normal = Normal::new(0.0f32, (gain / fan_in as f32).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = init_tensor([c_out, c_in, kernel, kernel], c_in * kernel * kernel, init, rng);
        Ok(Conv2d {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.conv2d(x, w, b, self.stride, self.padding)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Each output pixel sees about c_in·k²/s² input taps.
        let fan_in = (c_in * kernel * kernel / (stride * stride)).max(1);
        let w = init_tensor([c_in, c_out, kernel, kernel], fan_in, init, rng);
        Ok(ConvTranspose2d {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.conv_transpose2d(x, w, b, self.stride, self.padding)?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}
