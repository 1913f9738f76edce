//! The weight-shared language router.
//!
//! Two linear heads read the intermediate representation: a language head
//! with `L + 1` outputs (blank plus one class per language) and an ASR head
//! over the full vocabulary. Both are trained by CTC (the inter-loss). The
//! language head also produces the hard per-frame routing table used by
//! every language-group layer.

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, CtcLabelSeq, BLANK};
use crate::error::{contract, Result};
use crate::nn::{Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Heads of the shared router. One instance is referenced by all layers.
#[derive(Clone, Debug)]
pub struct SlrParams {
    pub w_lid: ParamId,
    pub w_asr: ParamId,
    pub n_languages: usize,
    pub vocab_size: usize,
}

impl SlrParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        d: usize,
        n_languages: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if n_languages == 0 || vocab_size <= n_languages {
            return Err(contract(format!(
                "router needs at least one language and vocab > languages (L={n_languages}, V={vocab_size})"
            )));
        }
        Ok(Self {
            w_lid: store.add("slr.w_lid", init.xavier(d, n_languages + 1)),
            w_asr: store.add("slr.w_asr", init.xavier(d, vocab_size)),
            n_languages,
            vocab_size,
        })
    }
}

/// Where a routing table came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteSource {
    Router,
    Override(usize),
}

/// Hard language assignment, one entry per frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub lang_ids: Vec<usize>,
    pub source: RouteSource,
}

impl RoutingTable {
    pub fn len(&self) -> usize {
        self.lang_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lang_ids.is_empty()
    }

    /// Frame indices assigned to `lang`, ascending.
    pub fn frames_of(&self, lang: usize) -> Vec<usize> {
        self.lang_ids
            .iter()
            .enumerate()
            .filter_map(|(t, &l)| (l == lang).then_some(t))
            .collect()
    }
}

/// One JSON-lines record for visualization tooling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub utt_id: String,
    pub lang_ids: Vec<usize>,
    pub source: RouteSource,
}

/// Sum of the language-id CTC and ASR CTC losses on `h_inter`.
///
/// `y_lid` holds CTC classes of the language head, i.e. language index + 1.
pub fn inter_loss(
    tape: &mut Tape,
    store: &ParamStore,
    h_inter: Var,
    y_asr: &CtcLabelSeq,
    y_lid: &CtcLabelSeq,
    params: &SlrParams,
) -> Result<Var> {
    if let Some(&l) = y_lid.labels().iter().find(|&&l| l > params.n_languages) {
        return Err(contract(format!(
            "language label {l} outside {} languages",
            params.n_languages
        )));
    }
    if let Some(&l) = y_asr.labels().iter().find(|&&l| l >= params.vocab_size) {
        return Err(contract(format!("token {l} outside vocabulary {}", params.vocab_size)));
    }
    let w_lid = store.bind(tape, params.w_lid)?;
    let lid_logits = tape.matmul(h_inter, w_lid)?;
    let lid_lp = tape.log_softmax(lid_logits)?;
    let lid = ctc_loss(tape, lid_lp, y_lid)?;

    let w_asr = store.bind(tape, params.w_asr)?;
    let asr_logits = tape.matmul(h_inter, w_asr)?;
    let asr_lp = tape.log_softmax(asr_logits)?;
    let asr = ctc_loss(tape, asr_lp, y_asr)?;
    tape.add(lid, asr)
}

/// Language logits `h · w_lid`, shape `[T × (L + 1)]`.
pub fn lid_logits(h: &Tensor, w_lid: &Tensor) -> Tensor {
    let (t, d, c) = (h.rows(), h.cols(), w_lid.cols());
    let mut out = vec![0.0; t * c];
    for r in 0..t {
        for j in 0..d {
            let hv = h.at(r, j);
            for k in 0..c {
                out[r * c + k] += hv * w_lid.at(j, k);
            }
        }
    }
    Tensor::new(vec![t, c], out).expect("shape matches")
}

/// Per-frame language choice from language logits, blank column removed.
///
/// Returns the language index and the margin to the runner-up (infinite
/// when there is only one language). Ties go to the lowest index.
pub fn route_frame(logits_row: &[f64]) -> (usize, f64) {
    let langs = &logits_row[BLANK + 1..];
    let mut best = 0;
    for (i, &v) in langs.iter().enumerate() {
        if v > langs[best] {
            best = i;
        }
    }
    let runner_up = langs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, langs[best] - runner_up)
}

/// Greedy frame-local routing from the router's language head.
pub fn make_routing_table(h: &Tensor, params: &SlrParams, store: &ParamStore) -> RoutingTable {
    routing_with_margin(h, params, store).0
}

/// Routing table together with the smallest decision margin over frames.
pub fn routing_with_margin(h: &Tensor, params: &SlrParams, store: &ParamStore) -> (RoutingTable, f64) {
    let logits = lid_logits(h, store.get(params.w_lid));
    let mut margin = f64::INFINITY;
    let lang_ids = (0..logits.rows())
        .map(|r| {
            let (l, m) = route_frame(logits.row(r));
            margin = margin.min(m);
            l
        })
        .collect();
    (
        RoutingTable {
            lang_ids,
            source: RouteSource::Router,
        },
        margin,
    )
}

/// Sends every frame to `lang`.
pub fn override_routing_table(t_frames: usize, lang: usize, n_languages: usize) -> Result<RoutingTable> {
    if lang >= n_languages {
        return Err(contract(format!(
            "override language {lang} outside {n_languages} languages"
        )));
    }
    Ok(RoutingTable {
        lang_ids: vec![lang; t_frames],
        source: RouteSource::Override(lang),
    })
}
