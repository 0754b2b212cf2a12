use camseg_tensor::Tensor;

use crate::error::{Error, Result};

/// Binary foreground mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Validation(format!("{} mask bits for a {height}×{width} mask", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, on: bool) -> Self {
        Mask { height, width, bits: vec![on; height * width] }
    }

    /// Accepts only exact 0.0 / 1.0 values.
    pub fn from_values(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let bits = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Validation(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn complement(&self) -> Mask {
        Mask { height: self.height, width: self.width, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// 1×1×H×W tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.bits.iter().map(|&b| b as u8 as f32).collect(),
        )
        .expect("consistent size")
    }
}
