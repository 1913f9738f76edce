//! Chunk-by-chunk encoder inference with cached keys, values and
//! convolution context.
//!
//! Streaming with chunk size `c` reproduces the whole-utterance pass under
//! [`chunk_mask`]`(T, c)`: each chunk sees itself and every earlier frame.

use serde::{Deserialize, Serialize};

use crate::ctc::{collapse, frame_argmax};
use crate::error::{config, contract, Result};
use crate::model::layers::{LayerCache, MASKED};
use crate::model::{AttentionMode, DlgMoeModel, EncodeOptions};
use crate::tensor::{Tape, Tensor};

/// Row-major `T × T` mask; entry `(i, j)` is true when frame `i` may attend
/// to frame `j`.
pub fn chunk_mask(t_total: usize, chunk_size: usize) -> Result<Vec<bool>> {
    if chunk_size == 0 {
        return Err(config("chunk size must be at least 1"));
    }
    let mut m = vec![false; t_total * t_total];
    for i in 0..t_total {
        let end = ((i / chunk_size + 1) * chunk_size).min(t_total);
        for j in 0..end {
            m[i * t_total + j] = true;
        }
    }
    Ok(m)
}

/// Turns a boolean `rows × (len / rows)` mask into an additive bias.
pub fn mask_bias(mask: &[bool], rows: usize) -> Tensor {
    let cols = mask.len().checked_div(rows).unwrap_or(0);
    let data = mask.iter().map(|&ok| if ok { 0.0 } else { MASKED }).collect();
    Tensor::new(vec![rows, cols], data).expect("mask is rectangular")
}

/// State of one stream.
#[derive(Clone, Debug)]
pub struct ChunkState {
    pub caches: Vec<LayerCache>,
    pub frames_consumed: usize,
    /// Routing decisions so far, one list per language-group layer.
    pub routing: Vec<Vec<usize>>,
    /// Frame-wise argmax of the CTC head so far.
    pub path: Vec<usize>,
    pub k: usize,
}

impl ChunkState {
    pub fn new(model: &DlgMoeModel, k: usize) -> Result<Self> {
        if model.config.subsampling {
            return Err(config("streaming needs a model without input subsampling"));
        }
        if model.config.n_moe_layers > 0 && !(1..=model.config.experts_per_group).contains(&k) {
            return Err(config(format!("k={k} outside 1..={}", model.config.experts_per_group)));
        }
        Ok(Self {
            caches: model.empty_caches(),
            frames_consumed: 0,
            routing: vec![Vec::new(); model.groups.len()],
            path: Vec::new(),
            k,
        })
    }

    pub fn hypothesis(&self) -> Vec<usize> {
        collapse(&self.path)
    }
}

pub struct StepOutput {
    pub h_final: Tensor,
    /// This chunk's routing, one list per language-group layer.
    pub lang_ids: Vec<Vec<usize>>,
    /// Greedy hypothesis over everything consumed so far.
    pub partial_hyp: Vec<usize>,
    /// Multiply-adds spent in attention during this step.
    pub attn_work: u64,
}

/// One JSON-lines record of a streaming session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub chunk_idx: usize,
    pub partial_hyp: Vec<usize>,
    pub lang_ids: Vec<usize>,
}

/// Consumes the next chunk of frames.
pub fn stream_step(
    model: &DlgMoeModel,
    state: &mut ChunkState,
    chunk_feats: &Tensor,
    override_lang: Option<usize>,
) -> Result<StepOutput> {
    if state.caches.len() != model.vanilla.len() + model.groups.len() || state.routing.len() != model.groups.len() {
        return Err(contract("stream state does not belong to this model"));
    }
    if chunk_feats.rows() == 0 {
        return Err(contract("empty chunk"));
    }
    let mut tape = Tape::inference();
    let x = model.embed_input(&mut tape, chunk_feats, state.frames_consumed)?;
    let opts = EncodeOptions {
        mode: AttentionMode::Full,
        k: state.k,
        override_lang,
    };
    let enc = model.encode_frames(&mut tape, x, &state.caches, None, &opts)?;
    let lp = model.ctc_log_probs(&mut tape, enc.h_final)?;
    state.path.extend(frame_argmax(tape.value(lp)));
    state.frames_consumed += chunk_feats.rows();
    state.caches = enc.caches;
    let lang_ids: Vec<Vec<usize>> = enc.routing_tables.into_iter().map(|t| t.lang_ids).collect();
    for (acc, new) in state.routing.iter_mut().zip(&lang_ids) {
        acc.extend_from_slice(new);
    }
    Ok(StepOutput {
        h_final: tape.value(enc.h_final).clone(),
        lang_ids,
        partial_hyp: state.hypothesis(),
        attn_work: enc.attn_work,
    })
}

/// Streams `feats` in chunks of `chunk_size` frames.
pub fn stream_utterance(
    model: &DlgMoeModel,
    feats: &Tensor,
    chunk_size: usize,
    k: usize,
    override_lang: Option<usize>,
) -> Result<(ChunkState, Vec<StepOutput>)> {
    if chunk_size == 0 {
        return Err(config("chunk size must be at least 1"));
    }
    let mut state = ChunkState::new(model, k)?;
    let mut outs = Vec::new();
    let mut start = 0;
    while start < feats.rows() {
        let end = (start + chunk_size).min(feats.rows());
        outs.push(stream_step(
            model,
            &mut state,
            &feats.slice_rows(start, end),
            override_lang,
        )?);
        start = end;
    }
    Ok((state, outs))
}
