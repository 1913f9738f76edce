//! Conformer-lite encoder layers.
//!
//! Macaron layout: `x + ½·FFN₁ → + MHSA → + causal depthwise conv → + ½·FFN₂
//! → LayerNorm`. In a language-group layer FFN₂ is replaced by dispatch to
//! the per-language expert groups.

use crate::error::Result;
use crate::group::{combine, dispatch, group_forward, group_forward_uniform, ExpertGroup, GroupStats};
use crate::nn::{Ffn, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::router::{override_routing_table, routing_with_margin, RoutingTable, SlrParams};
use crate::tensor::{Activation, Tape, Tensor, Var};

use super::config::{DlgMoeConfig, GroupMode};

/// Additive mask value for disallowed attention pairs.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, true),
            n_heads,
        }
    }

    /// Scaled dot-product attention of `query_in` rows over already projected
    /// keys and values. `mask_bias` is `[queries × keys]` of 0 / [`MASKED`].
    pub fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query_in: Var,
        keys: Var,
        values: Var,
        mask_bias: Option<&Tensor>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, query_in)?;
        let d = tape.value(q).cols();
        let dk = d / self.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let bias = mask_bias.map(|m| tape.constant(m.clone())).transpose()?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(keys, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale)?;
            if let Some(b) = bias {
                s = tape.add(s, b)?;
            }
            let p = tape.softmax(s)?;
            let vh = tape.slice_cols(values, lo, hi)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.o.forward(tape, store, cat)
    }
}

/// Pointwise → GLU → causal depthwise conv → swish → pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub ln: LayerNorm,
    pub pw1: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub pw2: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, kernel: usize) -> Self {
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            pw1: Linear::new(store, init, &format!("{name}.pw1"), d, 2 * d, true),
            dw_w: store.add(
                format!("{name}.dw.w"),
                init.uniform(&[kernel, d], (1.0 / kernel as f64).sqrt()),
            ),
            dw_b: store.add(format!("{name}.dw.b"), Tensor::zeros(&[d])),
            pw2: Linear::new(store, init, &format!("{name}.pw2"), d, d, true),
            kernel,
        }
    }

    /// Returns the branch output and the last `kernel - 1` depthwise inputs
    /// (the left context for the next chunk).
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, left: &Tensor) -> Result<(Var, Tensor)> {
        let d = tape.value(x).cols();
        let h = self.ln.forward(tape, store, x)?;
        let h = self.pw1.forward(tape, store, h)?;
        let a = tape.slice_cols(h, 0, d)?;
        let b = tape.slice_cols(h, d, 2 * d)?;
        let gate = tape.activation(b, Activation::Sigmoid)?;
        let glu = tape.mul(a, gate)?;
        let left_v = tape.constant(left.clone())?;
        let padded = tape.concat_rows(&[left_v, glu])?;
        let rows = tape.value(padded).rows();
        let tail = tape.value(padded).slice_rows(rows + 1 - self.kernel, rows);
        let w = store.bind(tape, self.dw_w)?;
        let bias = store.bind(tape, self.dw_b)?;
        let c = tape.depthwise_conv(padded, w, bias)?;
        let c = tape.activation(c, Activation::Swish)?;
        Ok((self.pw2.forward(tape, store, c)?, tail))
    }
}

/// The second half-step feed-forward: dense, or language-group experts.
#[derive(Clone, Debug)]
pub enum SecondFfn {
    Dense(Ffn),
    Groups { groups: Vec<ExpertGroup>, mode: GroupMode },
}

#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub ln_ffn1: LayerNorm,
    pub ffn1: Ffn,
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: Option<ConvModule>,
    pub ln_ffn2: LayerNorm,
    pub ffn2: SecondFfn,
    pub ln_out: LayerNorm,
}

/// Past state of one layer: projected keys/values of every earlier frame
/// and the depthwise convolution's left context.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub keys: Tensor,
    pub values: Tensor,
    pub conv: Tensor,
}

impl LayerCache {
    pub fn empty(d: usize, conv_kernel: usize) -> Self {
        Self {
            keys: Tensor::zeros(&[0, d]),
            values: Tensor::zeros(&[0, d]),
            conv: Tensor::zeros(&[conv_kernel.saturating_sub(1), d]),
        }
    }

    pub fn frames(&self) -> usize {
        self.keys.rows()
    }
}

/// Routing inputs for a language-group layer.
pub struct GroupStep<'a> {
    pub slr: &'a SlrParams,
    pub k: usize,
    pub override_lang: Option<usize>,
    /// Router input when routing from `h_inter`; otherwise the layer input is used.
    pub route_input: Option<&'a Tensor>,
}

pub struct LayerOutput {
    pub out: Var,
    pub cache: LayerCache,
    pub routing: Option<(RoutingTable, f64)>,
    pub stats: Vec<GroupStats>,
    /// Multiply-adds spent in attention scores and weighted sums.
    pub attn_work: u64,
}

impl ConformerLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &DlgMoeConfig, groups: bool) -> Self {
        let d = cfg.d_model;
        let ffn2 = if groups {
            let groups = (0..cfg.n_languages)
                .map(|lang| ExpertGroup {
                    experts: (0..cfg.experts_per_group)
                        .map(|e| {
                            Ffn::new(
                                store,
                                init,
                                &format!("{name}.group{lang}.expert{e}"),
                                d,
                                cfg.d_ffn,
                                cfg.activation,
                            )
                        })
                        .collect(),
                    unsup_router: store.add(
                        format!("{name}.group{lang}.router"),
                        init.xavier(d, cfg.experts_per_group),
                    ),
                    language: lang,
                })
                .collect();
            SecondFfn::Groups {
                groups,
                mode: cfg.group_mode,
            }
        } else {
            SecondFfn::Dense(Ffn::new(
                store,
                init,
                &format!("{name}.ffn2"),
                d,
                cfg.d_ffn,
                cfg.activation,
            ))
        };
        Self {
            ln_ffn1: LayerNorm::new(store, &format!("{name}.ln_ffn1"), d),
            ffn1: Ffn::new(store, init, &format!("{name}.ffn1"), d, cfg.d_ffn, cfg.activation),
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.n_heads),
            conv: (cfg.conv_kernel > 0)
                .then(|| ConvModule::new(store, init, &format!("{name}.conv"), d, cfg.conv_kernel)),
            ln_ffn2: LayerNorm::new(store, &format!("{name}.ln_ffn2"), d),
            ffn2,
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    pub fn is_group_layer(&self) -> bool {
        matches!(self.ffn2, SecondFfn::Groups { .. })
    }

    /// Processes new frames `x` given the cached past of this layer.
    ///
    /// `mask_bias` covers `[new frames × (past + new) frames]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        past: &LayerCache,
        mask_bias: Option<&Tensor>,
        group: Option<&GroupStep<'_>>,
    ) -> Result<LayerOutput> {
        let h = self.ln_ffn1.forward(tape, store, x)?;
        let h = self.ffn1.forward(tape, store, h)?;
        let h = tape.scale(h, 0.5)?;
        let x1 = tape.add(x, h)?;

        let a_in = self.ln_attn.forward(tape, store, x1)?;
        let k_new = self.attn.k.forward(tape, store, a_in)?;
        let v_new = self.attn.v.forward(tape, store, a_in)?;
        let (keys, values) = if past.frames() == 0 {
            (k_new, v_new)
        } else {
            let pk = tape.constant(past.keys.clone())?;
            let pv = tape.constant(past.values.clone())?;
            (tape.concat_rows(&[pk, k_new])?, tape.concat_rows(&[pv, v_new])?)
        };
        let n_new = tape.value(x).rows() as u64;
        let n_keys = tape.value(keys).rows() as u64;
        let attn_work = 2 * n_new * n_keys * tape.value(keys).cols() as u64;
        let a = self.attn.attend(tape, store, a_in, keys, values, mask_bias)?;
        let x2 = tape.add(x1, a)?;
        let new_keys = tape.value(keys).clone();
        let new_values = tape.value(values).clone();

        let (x3, conv_tail) = match &self.conv {
            Some(conv) => {
                let (c, tail) = conv.forward(tape, store, x2, &past.conv)?;
                (tape.add(x2, c)?, tail)
            }
            None => (x2, past.conv.clone()),
        };

        let h_pre = self.ln_ffn2.forward(tape, store, x3)?;
        let mut routing = None;
        let mut stats = Vec::new();
        let f = match (&self.ffn2, group) {
            (SecondFfn::Dense(ffn), _) => ffn.forward(tape, store, h_pre)?,
            (SecondFfn::Groups { groups, mode }, Some(step)) => {
                let t = tape.value(x).rows();
                let (table, margin) = match step.override_lang {
                    Some(lang) => (override_routing_table(t, lang, groups.len())?, f64::INFINITY),
                    None => {
                        let src = step.route_input.unwrap_or_else(|| tape.value(x));
                        routing_with_margin(src, step.slr, store)
                    }
                };
                let (plan, subs) = dispatch(tape, h_pre, &table, groups.len())?;
                let mut outs = Vec::with_capacity(groups.len());
                for (grp, sub) in groups.iter().zip(subs) {
                    let (o, s) = match mode {
                        GroupMode::Routed => group_forward(tape, store, sub, grp, step.k)?,
                        GroupMode::Uniform => group_forward_uniform(tape, store, sub, grp, step.k)?,
                    };
                    outs.push(o);
                    stats.push(s);
                }
                routing = Some((table, margin));
                combine(tape, &outs, &plan)?
            }
            (SecondFfn::Groups { .. }, None) => {
                return Err(crate::error::contract(
                    "language-group layer called without routing inputs",
                ));
            }
        };
        let f = tape.scale(f, 0.5)?;
        let x4 = tape.add(x3, f)?;
        let out = self.ln_out.forward(tape, store, x4)?;
        Ok(LayerOutput {
            out,
            cache: LayerCache {
                keys: new_keys,
                values: new_values,
                conv: conv_tail,
            },
            routing,
            stats,
            attn_work,
        })
    }
}

/// Absolute sinusoidal position encodings for positions `offset..offset+rows`.
pub fn sinusoid(offset: usize, rows: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; rows * d];
    for r in 0..rows {
        let pos = (offset + r) as f64;
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[r * d + i] = if i % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            };
        }
    }
    Tensor::new(vec![rows, d], data).expect("shape matches")
}
