//! Small layer wrappers over a [`ParamStore`].

use edgegrasp_tensor::{Binding, ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::Rng;

pub const LEAKY_SLOPE: f32 = 0.2;
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![cout, cin, k, k], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self {
            weight,
            bias,
            stride,
            padding,
            transposed: false,
        }
    }

    /// Transposed convolution; the weight is `C_in×C_out×k×k`.
    pub fn transposed<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        std: f32,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(vec![cin, cout, k, k], std, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self {
            weight,
            bias,
            stride,
            padding,
            transposed: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let (w, b) = (p.var(self.weight), Some(p.var(self.bias)));
        if self.transposed {
            tape.conv_transpose2d(x, w, b, self.stride, self.padding)
        } else {
            tape.conv2d(x, w, b, self.stride, self.padding)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, std: f32, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(vec![outputs, inputs], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

/// Two 3×3 stride-1 convolutions with an additive skip:
/// `x + conv(lrelu(conv(x)))`, followed by LeakyReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, std: f32, rng: &mut R) -> Self {
        Self {
            first: Conv::new(store, &format!("{name}.0"), (channels, channels, 3), 1, 1, std, rng),
            second: Conv::new(store, &format!("{name}.1"), (channels, channels, 3), 1, 1, std, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.second.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}
