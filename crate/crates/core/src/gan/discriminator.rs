use edgegrasp_tensor::{Binding, ConvGeom, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GanError;
use crate::nn::{Conv, Linear, INIT_STD, LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_shape: [usize; 3],
    /// Output channels of each stride-2 convolution.
    pub channels: [usize; 4],
    /// Applied after every convolution but the last.
    pub dropout: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_shape: [3, 210, 150],
            channels: [8, 16, 32, 32],
            dropout: 0.3,
        }
    }
}

/// Stride-2 convolutions interleaved with dropout, then one linear logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    convs: Vec<Conv>,
    fc: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self, GanError> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(GanError::InvalidConfig(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut p = ParamStore::new();
        let [mut cin, mut h, mut w] = config.input_shape;
        let mut convs = Vec::new();
        for (i, &c) in config.channels.iter().enumerate() {
            let g = ConvGeom::new(cin, h, w, 4, 2, 1)
                .ok_or_else(|| GanError::InvalidConfig(format!("input {:?} too small", config.input_shape)))?;
            convs.push(Conv::new(&mut p, &format!("disc.conv{i}"), (cin, c, 4), 2, 1, INIT_STD, rng));
            (cin, h, w) = (c, g.out_height, g.out_width);
        }
        let fc = Linear::new(&mut p, "disc.fc", cin * h * w, 1, INIT_STD, rng);
        Ok(Self {
            config,
            params: p,
            convs,
            fc,
        })
    }

    /// `N×C×H×W` → `N×1` logits.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, p: &Binding, x: Var, train: bool, rng: &mut R) -> Result<Var, GanError> {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            if i < last {
                h = tape.dropout(h, self.config.dropout, train, rng)?;
            }
        }
        let n = tape.shape(h)[0];
        let flat_len = tape.value(h).len() / n;
        let flat = tape.reshape(h, vec![n, flat_len])?;
        Ok(self.fc.forward(tape, p, flat)?)
    }
}
