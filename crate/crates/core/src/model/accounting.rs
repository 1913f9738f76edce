//! Closed-form parameter and FLOP counts.

use serde::{Deserialize, Serialize};

use crate::nn::Ffn;

use super::config::DlgMoeConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters of one expert.
    pub per_expert: usize,
    /// `(k, parameters used per frame)` for `k = 1..=experts_per_group`.
    pub activated: Vec<(usize, usize)>,
}

impl ParamCount {
    pub fn activated_at(&self, k: usize) -> Option<usize> {
        self.activated.iter().find(|(kk, _)| *kk == k).map(|(_, n)| *n)
    }
}

fn linear(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

fn conv_len(t: usize) -> usize {
    if t < 3 {
        0
    } else {
        (t - 3) / 2 + 1
    }
}

fn frontend_params(cfg: &DlgMoeConfig) -> usize {
    let d = cfg.d_model;
    if cfg.subsampling {
        let f2 = conv_len(conv_len(cfg.d_in));
        linear(9, d) + linear(9 * d, d) + linear(d * f2, d)
    } else {
        linear(cfg.d_in, d)
    }
}

/// Encoder layer without its second feed-forward.
fn layer_shell_params(cfg: &DlgMoeConfig) -> usize {
    let d = cfg.d_model;
    let ln = 2 * d;
    let attn = 4 * linear(d, d);
    let conv = if cfg.conv_kernel > 0 {
        ln + linear(d, 2 * d) + cfg.conv_kernel * d + d + linear(d, d)
    } else {
        0
    };
    4 * ln + Ffn::param_count(d, cfg.d_ffn) + attn + conv
}

fn decoder_params(cfg: &DlgMoeConfig) -> usize {
    let d = cfg.d_model;
    let v = cfg.decoder_vocab();
    let layer = 3 * 2 * d + 8 * linear(d, d) + Ffn::param_count(d, cfg.d_ffn);
    v * d + cfg.decoder_layers * layer + 2 * d + linear(d, v)
}

/// Total parameters and the parameters touched per frame at each `k`.
///
/// A frame visits exactly one language group per layer, so only `k` experts
/// of that layer count as active; every router is counted.
pub fn count_params(cfg: &DlgMoeConfig) -> ParamCount {
    let d = cfg.d_model;
    let (l, n) = (cfg.n_languages, cfg.experts_per_group);
    let per_expert = Ffn::param_count(d, cfg.d_ffn);
    let slr = d * (l + 1) + d * cfg.vocab_size;
    let ctc_head = linear(d, cfg.vocab_size);
    let layers = cfg.n_vanilla_layers + cfg.n_moe_layers;
    let shared = frontend_params(cfg)
        + layers * layer_shell_params(cfg)
        + cfg.n_vanilla_layers * per_expert
        + cfg.n_moe_layers * l * d * n
        + slr
        + ctc_head
        + decoder_params(cfg);
    let total = shared + cfg.n_moe_layers * l * n * per_expert;
    let activated = (1..=n)
        .map(|k| (k, shared + cfg.n_moe_layers * k * per_expert))
        .collect();
    ParamCount {
        total,
        per_expert,
        activated,
    }
}

/// Multiply-add FLOPs (`2·m·k·n` per matmul) of one encoder pass over
/// `t_in` input frames with `k` experts per frame and full attention.
///
/// Covers the front end, every encoder layer, the language head used for
/// routing and the CTC head. The decoder and the per-group gate projections
/// are not counted.
pub fn estimate_flops(cfg: &DlgMoeConfig, t_in: usize, k: usize) -> u64 {
    let d = cfg.d_model as u64;
    let f = cfg.d_ffn as u64;
    let t = cfg.encoder_frames(t_in) as u64;
    let mm = |m: u64, k: u64, n: u64| 2 * m * k * n;

    let front = if cfg.subsampling {
        let (t1, f1) = (conv_len(t_in) as u64, conv_len(cfg.d_in) as u64);
        let f2 = conv_len(conv_len(cfg.d_in)) as u64;
        mm(t1 * f1, 9, d) + mm(t * f2, 9 * d, d) + mm(t, d * f2, d)
    } else {
        mm(t, cfg.d_in as u64, d)
    };
    let ffn = mm(t, d, f) + mm(t, f, d);
    let attn = 4 * mm(t, d, d) + 2 * mm(t, t, d);
    let conv = if cfg.conv_kernel > 0 {
        mm(t, d, 2 * d) + 2 * t * cfg.conv_kernel as u64 * d + mm(t, d, d)
    } else {
        0
    };
    let shell = ffn + attn + conv;
    let vanilla = cfg.n_vanilla_layers as u64 * (shell + ffn);
    let lid = mm(t, d, cfg.n_languages as u64 + 1);
    let groups = cfg.n_moe_layers as u64 * (shell + lid + k as u64 * ffn);
    let head = mm(t, d, cfg.vocab_size as u64);
    front + vanilla + groups + head
}
