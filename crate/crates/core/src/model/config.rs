use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::group::KPolicy;
use crate::tensor::Activation;

/// Which representation the shared router reads inside each
/// language-group layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteFrom {
    /// The input of that layer (tables may differ between layers).
    #[default]
    LayerInput,
    /// The output of the last vanilla layer (one table for all layers).
    HInter,
}

/// Gate computation inside the language groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    #[default]
    Routed,
    /// Equal weights over the first k experts, no unsupervised router.
    Uniform,
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlgMoeConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_vanilla_layers: usize,
    pub n_moe_layers: usize,
    pub n_languages: usize,
    pub experts_per_group: usize,
    pub k_policy: KPolicy,
    /// Includes the CTC blank at index 0.
    pub vocab_size: usize,
    pub lambda_ctc: f64,
    pub lambda_inter: f64,
    /// Train with a strictly causal attention mask.
    pub causal: bool,
    /// Depthwise convolution width; 0 removes the convolution module.
    pub conv_kernel: usize,
    pub decoder_layers: usize,
    pub activation: Activation,
    /// Two stride-2 3×3 convolutions in front of the encoder (4× fewer frames).
    pub subsampling: bool,
    pub route_from: RouteFrom,
    pub group_mode: GroupMode,
    pub language_names: Vec<String>,
    pub seed: u64,
}

impl Default for DlgMoeConfig {
    /// A desk-scale model: same structure as the full-size one, tiny widths.
    fn default() -> Self {
        Self {
            d_in: 16,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_vanilla_layers: 1,
            n_moe_layers: 1,
            n_languages: 2,
            experts_per_group: 2,
            k_policy: KPolicy::default(),
            vocab_size: 17,
            lambda_ctc: 0.3,
            lambda_inter: 0.1,
            causal: false,
            conv_kernel: 3,
            decoder_layers: 1,
            activation: Activation::Swish,
            subsampling: false,
            route_from: RouteFrom::LayerInput,
            group_mode: GroupMode::Routed,
            language_names: vec!["zh".into(), "en".into()],
            seed: 0,
        }
    }
}

impl DlgMoeConfig {
    /// d=256, 4 heads, d_ffn=2048, 6 vanilla + 6 language-group layers, two
    /// groups of two experts, 15-wide causal convolution, 6 decoder layers,
    /// 80-dim input with 4× subsampling.
    pub fn paper_scale() -> Self {
        Self {
            d_in: 80,
            d_model: 256,
            n_heads: 4,
            d_ffn: 2048,
            n_vanilla_layers: 6,
            n_moe_layers: 6,
            n_languages: 2,
            experts_per_group: 2,
            k_policy: KPolicy::Dynamic {
                k_min: 1,
                k_max: 2,
                seed: 0,
            },
            vocab_size: 5000,
            causal: true,
            conv_kernel: 15,
            decoder_layers: 6,
            subsampling: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config(format!(
                "d_model={} must be a positive multiple of n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_in == 0 || self.d_ffn == 0 {
            return Err(config("d_in and d_ffn must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(config(format!("lambda_ctc={} outside [0, 1]", self.lambda_ctc)));
        }
        if self.lambda_inter.is_nan() || self.lambda_inter < 0.0 {
            return Err(config(format!("lambda_inter={} must be >= 0", self.lambda_inter)));
        }
        if self.n_languages == 0 || self.vocab_size <= self.n_languages {
            return Err(config(format!(
                "need n_languages >= 1 and vocab_size > n_languages (L={}, V={})",
                self.n_languages, self.vocab_size
            )));
        }
        if self.n_moe_layers > 0 {
            if self.experts_per_group == 0 {
                return Err(config("experts_per_group must be positive"));
            }
            self.k_policy.validate(self.experts_per_group)?;
        }
        if self.subsampling && self.d_in < 7 {
            return Err(config("subsampling needs d_in >= 7"));
        }
        if !self.language_names.is_empty() && self.language_names.len() != self.n_languages {
            return Err(config(format!(
                "{} language names for {} languages",
                self.language_names.len(),
                self.n_languages
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder vocabulary: the ASR vocabulary plus start and end symbols.
    pub fn decoder_vocab(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn sos(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn language_index(&self, name: &str) -> Option<usize> {
        self.language_names
            .iter()
            .position(|n| n == name)
            .or_else(|| name.parse().ok().filter(|&i: &usize| i < self.n_languages))
    }

    /// Encoder frames produced from `t_in` input frames.
    pub fn encoder_frames(&self, t_in: usize) -> usize {
        if !self.subsampling {
            return t_in;
        }
        let conv = |t: usize| if t < 3 { 0 } else { (t - 3) / 2 + 1 };
        conv(conv(t_in))
    }
}
