//! Small autoregressive attention decoder trained by teacher forcing.

use crate::error::{contract, Result};
use crate::nn::{Ffn, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

use super::config::DlgMoeConfig;
use super::layers::{sinusoid, MultiHeadAttention, MASKED};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_out: LayerNorm,
    pub proj: Linear,
    pub sos: usize,
    pub eos: usize,
}

/// Lower-triangular additive mask for `n` positions.
pub fn causal_bias(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = MASKED;
        }
    }
    m
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &DlgMoeConfig) -> Self {
        let d = cfg.d_model;
        let vocab = cfg.decoder_vocab();
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, init, &format!("{name}.self"), d, cfg.n_heads),
                    ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{name}.cross"), d, cfg.n_heads),
                    ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
                    ffn: Ffn::new(store, init, &format!("{name}.ffn"), d, cfg.d_ffn, cfg.activation),
                }
            })
            .collect();
        Self {
            embed: store.add("decoder.embed", init.xavier(vocab, d)),
            layers,
            ln_out: LayerNorm::new(store, "decoder.ln_out", d),
            proj: Linear::new(store, init, "decoder.proj", d, vocab, true),
            sos: cfg.sos(),
            eos: cfg.eos(),
        }
    }

    /// Log-probabilities `[(U + 1) × (V + 2)]` for inputs `[sos, y…]`.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, memory: Var, y: &[usize]) -> Result<Var> {
        if let Some(&bad) = y.iter().find(|&&t| t >= self.sos) {
            return Err(contract(format!("token {bad} outside vocabulary {}", self.sos)));
        }
        let mut inputs = Vec::with_capacity(y.len() + 1);
        inputs.push(self.sos);
        inputs.extend_from_slice(y);
        let n = inputs.len();
        let d = store.get(self.embed).cols();

        let emb = store.bind(tape, self.embed)?;
        let x = tape.gather_rows(emb, &inputs)?;
        let pe = tape.constant(sinusoid(0, n, d))?;
        let mut x = tape.add(x, pe)?;
        let mask = causal_bias(n);
        for layer in &self.layers {
            let h = layer.ln_self.forward(tape, store, x)?;
            let k = layer.self_attn.k.forward(tape, store, h)?;
            let v = layer.self_attn.v.forward(tape, store, h)?;
            let a = layer.self_attn.attend(tape, store, h, k, v, Some(&mask))?;
            x = tape.add(x, a)?;

            let h = layer.ln_cross.forward(tape, store, x)?;
            let k = layer.cross_attn.k.forward(tape, store, memory)?;
            let v = layer.cross_attn.v.forward(tape, store, memory)?;
            let a = layer.cross_attn.attend(tape, store, h, k, v, None)?;
            x = tape.add(x, a)?;

            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        let h = self.ln_out.forward(tape, store, x)?;
        let logits = self.proj.forward(tape, store, h)?;
        tape.log_softmax(logits)
    }

    /// Mean token NLL of `[y…, eos]` given `[sos, y…]`.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, memory: Var, y: &[usize]) -> Result<Var> {
        let lp = self.log_probs(tape, store, memory, y)?;
        let mut targets = y.to_vec();
        targets.push(self.eos);
        tape.nll_mean(lp, &targets)
    }
}
