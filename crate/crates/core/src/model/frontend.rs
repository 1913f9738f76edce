//! Input projection: a single linear map, or two stride-2 3×3 convolutions
//! followed by a linear map.

use crate::error::{contract, Result};
use crate::nn::{Init, Linear, ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub enum Frontend {
    Linear(Linear),
    Conv2d4(Conv2dSubsampling),
}

#[derive(Clone, Debug)]
pub struct Conv2dSubsampling {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub out: Linear,
    pub channels: usize,
    pub d_in: usize,
}

fn conv_len(t: usize) -> usize {
    if t < 3 {
        0
    } else {
        (t - 3) / 2 + 1
    }
}

impl Conv2dSubsampling {
    pub fn new(store: &mut ParamStore, init: &mut Init, d_in: usize, d: usize) -> Self {
        let c = d;
        let f2 = conv_len(conv_len(d_in));
        Self {
            w1: store.add("frontend.conv1.w", init.xavier(9, c)),
            b1: store.add("frontend.conv1.b", Tensor::zeros(&[c])),
            w2: store.add("frontend.conv2.w", init.xavier(9 * c, c)),
            b2: store.add("frontend.conv2.b", Tensor::zeros(&[c])),
            out: Linear::new(store, init, "frontend.out", c * f2, d, true),
            channels: c,
            d_in,
        }
    }

    /// Output rows of the feature axis after both convolutions.
    pub fn freq_out(&self) -> usize {
        conv_len(conv_len(self.d_in))
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (t, f) = (tape.value(x).rows(), tape.value(x).cols());
        let (t1, f1) = (conv_len(t), conv_len(f));
        let (t2, f2) = (conv_len(t1), conv_len(f1));
        if t2 == 0 {
            return Err(contract(format!("{t} frames are too few for 4x subsampling")));
        }
        let c = self.channels;
        // im2col for a single input channel: row (i, j), column (di, dj).
        let mut idx = Vec::with_capacity(t1 * f1 * 9);
        for i in 0..t1 {
            for j in 0..f1 {
                for di in 0..3 {
                    for dj in 0..3 {
                        idx.push(Some((2 * i + di) * f + 2 * j + dj));
                    }
                }
            }
        }
        let patches = tape.gather_flat(x, idx, &[t1 * f1, 9])?;
        let w1 = store.bind(tape, self.w1)?;
        let b1 = store.bind(tape, self.b1)?;
        let h = tape.matmul(patches, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.activation(h, Activation::Relu)?;

        // h is [(t1·f1) × c]; second im2col gathers 3×3 windows over all channels.
        let mut idx = Vec::with_capacity(t2 * f2 * 9 * c);
        for i in 0..t2 {
            for j in 0..f2 {
                for di in 0..3 {
                    for dj in 0..3 {
                        let base = ((2 * i + di) * f1 + 2 * j + dj) * c;
                        idx.extend((0..c).map(|ch| Some(base + ch)));
                    }
                }
            }
        }
        let patches = tape.gather_flat(h, idx, &[t2 * f2, 9 * c])?;
        let w2 = store.bind(tape, self.w2)?;
        let b2 = store.bind(tape, self.b2)?;
        let h = tape.matmul(patches, w2)?;
        let h = tape.add_bias(h, b2)?;
        let h = tape.activation(h, Activation::Relu)?;
        let h = tape.reshape(h, &[t2, f2 * c])?;
        self.out.forward(tape, store, h)
    }
}

impl Frontend {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Frontend::Linear(l) => l.forward(tape, store, x),
            Frontend::Conv2d4(c) => c.forward(tape, store, x),
        }
    }
}
