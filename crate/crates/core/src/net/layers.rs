use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Negative slope shared by every LeakyReLU in the engine.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Convolution parameters: `[O, C, k, k]` weight and `[O]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The tape handles of one [`Conv`] after registration.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv {
    /// He-normal weights for a LeakyReLU network, zero bias.
    pub fn init<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        Conv {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], gain / fan_in.sqrt(), rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        Conv {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// 1×1 identity channel map.
    pub fn identity_1x1(channels: usize) -> Self {
        let mut conv = Self::zeros(channels, channels, 1);
        for c in 0..channels {
            conv.weight.data_mut()[c * channels + c] = 1.0;
        }
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ConvVars {
        ConvVars {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }

    /// "Same" convolution (padding k/2) with the given stride.
    pub fn apply(vars: ConvVars, tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
        let k = tape.value(vars.weight).shape()[2];
        tape.conv2d(x, vars.weight, Some(vars.bias), stride, k / 2)
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// SHA-256 over every parameter's shape and little-endian bytes.
pub fn param_checksum<'a>(params: impl IntoIterator<Item = &'a Conv>) -> String {
    let mut h = Sha256::new();
    for conv in params {
        for t in [&conv.weight, &conv.bias] {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
