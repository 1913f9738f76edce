//! Encoder stack (vanilla layers, then language-group layers), shared
//! router, CTC head, attention decoder and the joint loss.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod frontend;
pub mod layers;

pub use accounting::{count_params, estimate_flops, ParamCount};
pub use config::{DlgMoeConfig, GroupMode, RouteFrom};

use serde::{Deserialize, Serialize};

use crate::ctc::CtcLabelSeq;
use crate::error::{contract, Result};
use crate::group::GroupStats;
use crate::nn::{Init, Linear, ParamStore};
use crate::router::{inter_loss, RoutingTable, SlrParams};
use crate::streaming::{chunk_mask, mask_bias};
use crate::tensor::{Tape, Tensor, Var};

use decoder::Decoder;
use frontend::{Conv2dSubsampling, Frontend};
use layers::{sinusoid, ConformerLayer, GroupStep, LayerCache};

/// Attention pattern of a whole-utterance forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Full,
    /// Full attention inside blocks of `c` frames, causal across blocks.
    Chunked(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct EncodeOptions {
    pub mode: AttentionMode,
    pub k: usize,
    pub override_lang: Option<usize>,
}

impl EncodeOptions {
    pub fn full(k: usize) -> Self {
        Self {
            mode: AttentionMode::Full,
            k,
            override_lang: None,
        }
    }
}

pub struct EncoderOutput {
    pub h_inter: Var,
    pub h_final: Var,
    /// One table per language-group layer.
    pub routing_tables: Vec<RoutingTable>,
    /// Smallest router margin per language-group layer.
    pub margins: Vec<f64>,
    /// Per language-group layer, one entry per group.
    pub stats: Vec<Vec<GroupStats>>,
    /// Layer caches after this pass (vanilla layers first).
    pub caches: Vec<LayerCache>,
    pub attn_work: u64,
}

/// Loss values of one utterance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc: f64,
    pub att: f64,
    pub inter: f64,
}

#[derive(Clone, Debug)]
pub struct DlgMoeModel {
    pub config: DlgMoeConfig,
    pub store: ParamStore,
    pub frontend: Frontend,
    pub vanilla: Vec<ConformerLayer>,
    pub groups: Vec<ConformerLayer>,
    pub slr: SlrParams,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

impl DlgMoeModel {
    pub fn new(config: DlgMoeConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let d = config.d_model;
        let frontend = if config.subsampling {
            Frontend::Conv2d4(Conv2dSubsampling::new(&mut store, &mut init, config.d_in, d))
        } else {
            Frontend::Linear(Linear::new(
                &mut store,
                &mut init,
                "frontend.proj",
                config.d_in,
                d,
                true,
            ))
        };
        let vanilla = (0..config.n_vanilla_layers)
            .map(|i| ConformerLayer::new(&mut store, &mut init, &format!("encoder.{i}"), &config, false))
            .collect();
        let slr = SlrParams::new(&mut store, &mut init, d, config.n_languages, config.vocab_size)?;
        let groups = (0..config.n_moe_layers)
            .map(|i| {
                let name = format!("encoder.{}", config.n_vanilla_layers + i);
                ConformerLayer::new(&mut store, &mut init, &name, &config, true)
            })
            .collect();
        let ctc_head = Linear::new(&mut store, &mut init, "ctc_head", d, config.vocab_size, true);
        let decoder = Decoder::new(&mut store, &mut init, &config);
        Ok(Self {
            config,
            store,
            frontend,
            vanilla,
            groups,
            slr,
            ctc_head,
            decoder,
        })
    }

    /// Attention pattern used for training: strictly causal when the model
    /// is meant to stream.
    pub fn training_mode(&self) -> AttentionMode {
        if self.config.causal {
            AttentionMode::Chunked(1)
        } else {
            AttentionMode::Full
        }
    }

    pub fn empty_caches(&self) -> Vec<LayerCache> {
        let n = self.vanilla.len() + self.groups.len();
        vec![LayerCache::empty(self.config.d_model, self.config.conv_kernel); n]
    }

    /// Encoder input after the front end and position encoding.
    pub fn embed_input(&self, tape: &mut Tape, feats: &Tensor, offset: usize) -> Result<Var> {
        if feats.shape().len() != 2 || feats.cols() != self.config.d_in {
            return Err(contract(format!(
                "features of shape {:?}, expected [T × {}]",
                feats.shape(),
                self.config.d_in
            )));
        }
        if feats.rows() == 0 {
            return Err(contract("empty feature sequence"));
        }
        let x = tape.constant(feats.clone())?;
        let x = self.frontend.forward(tape, &self.store, x)?;
        let t = tape.value(x).rows();
        let pe = tape.constant(sinusoid(offset, t, self.config.d_model))?;
        tape.add(x, pe)
    }

    /// Whole-utterance encoder pass.
    pub fn encode(&self, tape: &mut Tape, feats: &Tensor, opts: &EncodeOptions) -> Result<EncoderOutput> {
        let x = self.embed_input(tape, feats, 0)?;
        let t = tape.value(x).rows();
        let bias = match opts.mode {
            AttentionMode::Full => None,
            AttentionMode::Chunked(c) => Some(mask_bias(&chunk_mask(t, c)?, t)),
        };
        self.encode_frames(tape, x, &self.empty_caches(), bias.as_ref(), opts)
    }

    /// Runs the layer stack on new frames `x` given per-layer past state.
    pub(crate) fn encode_frames(
        &self,
        tape: &mut Tape,
        x: Var,
        past: &[LayerCache],
        mask_bias: Option<&Tensor>,
        opts: &EncodeOptions,
    ) -> Result<EncoderOutput> {
        if past.len() != self.vanilla.len() + self.groups.len() {
            return Err(contract(format!(
                "{} layer caches for {} layers",
                past.len(),
                self.vanilla.len() + self.groups.len()
            )));
        }
        let mut caches = Vec::with_capacity(past.len());
        let mut attn_work = 0;
        let mut h = x;
        for (layer, cache) in self.vanilla.iter().zip(past) {
            let out = layer.forward(tape, &self.store, h, cache, mask_bias, None)?;
            h = out.out;
            caches.push(out.cache);
            attn_work += out.attn_work;
        }
        let h_inter = h;
        let inter_value = match self.config.route_from {
            RouteFrom::HInter => Some(tape.value(h_inter).clone()),
            RouteFrom::LayerInput => None,
        };
        let mut routing_tables = Vec::with_capacity(self.groups.len());
        let mut margins = Vec::with_capacity(self.groups.len());
        let mut stats = Vec::with_capacity(self.groups.len());
        for (layer, cache) in self.groups.iter().zip(&past[self.vanilla.len()..]) {
            let step = GroupStep {
                slr: &self.slr,
                k: opts.k,
                override_lang: opts.override_lang,
                route_input: inter_value.as_ref(),
            };
            let out = layer.forward(tape, &self.store, h, cache, mask_bias, Some(&step))?;
            h = out.out;
            caches.push(out.cache);
            attn_work += out.attn_work;
            if let Some((table, margin)) = out.routing {
                routing_tables.push(table);
                margins.push(margin);
            }
            stats.push(out.stats);
        }
        Ok(EncoderOutput {
            h_inter,
            h_final: h,
            routing_tables,
            margins,
            stats,
            caches,
            attn_work,
        })
    }

    /// Log-probabilities of the final ASR head.
    pub fn ctc_log_probs(&self, tape: &mut Tape, h_final: Var) -> Result<Var> {
        let logits = self.ctc_head.forward(tape, &self.store, h_final)?;
        tape.log_softmax(logits)
    }

    /// `λ_ctc·L_ctc + (1 − λ_ctc)·L_att + λ_inter·L_inter`.
    ///
    /// `y_lid` holds language indices, one per token.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        enc: &EncoderOutput,
        y_asr: &CtcLabelSeq,
        y_lid: &[usize],
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config;
        let lp = self.ctc_log_probs(tape, enc.h_final)?;
        let ctc = crate::ctc::ctc_loss(tape, lp, y_asr)?;
        let att = self.decoder.loss(tape, &self.store, enc.h_final, y_asr.labels())?;
        let lid_classes = CtcLabelSeq::new(y_lid.iter().map(|&l| l + 1).collect())?;
        let inter = inter_loss(tape, &self.store, enc.h_inter, y_asr, &lid_classes, &self.slr)?;

        let a = tape.scale(ctc, cfg.lambda_ctc)?;
        let b = tape.scale(att, 1.0 - cfg.lambda_ctc)?;
        let c = tape.scale(inter, cfg.lambda_inter)?;
        let ab = tape.add(a, b)?;
        let total = tape.add(ab, c)?;
        let breakdown = LossBreakdown {
            total: tape.value(total).item(),
            ctc: tape.value(ctc).item(),
            att: tape.value(att).item(),
            inter: tape.value(inter).item(),
        };
        Ok((total, breakdown))
    }
}
