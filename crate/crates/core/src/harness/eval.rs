use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_greedy_decode;
use crate::data::{Dataset, UttClass, Utterance};
use crate::error::{config, Result};
use crate::exec::Exec;
use crate::group::UtilizationRecord;
use crate::model::{DlgMoeModel, EncodeOptions, LossBreakdown};
use crate::tensor::Tape;

/// Levenshtein alignment counts with unit costs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// `(S + I + D) / max(1, ref_len)`.
    pub rate: f64,
    /// Set when the reference was empty and the rate used denominator 1.
    pub empty_ref: bool,
}

impl EditStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditStats {
    let (n, m) = (hyp.len(), reference.len());
    // cell = (cost, S, I, D); ties prefer substitution, then deletion, then insertion.
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let diag = prev[j - 1];
            let sub = if hyp[i - 1] == reference[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1, diag.2, diag.3)
            };
            let del = {
                let c = cur[j - 1];
                (c.0 + 1, c.1, c.2, c.3 + 1)
            };
            let ins = {
                let c = prev[j];
                (c.0 + 1, c.1, c.2 + 1, c.3)
            };
            cur[j] = [sub, del, ins]
                .into_iter()
                .min_by_key(|c| c.0)
                .expect("three candidates");
        }
        prev = cur;
    }
    let (cost, s, ins, del) = prev[m];
    EditStats {
        substitutions: s,
        insertions: ins,
        deletions: del,
        ref_len: m,
        rate: cost as f64 / m.max(1) as f64,
        empty_ref: m == 0 && n > 0,
    }
}

/// Error totals over a subset of utterances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub utterances: usize,
    pub errors: usize,
    pub ref_tokens: usize,
    /// Corpus-level token error rate `errors / ref_tokens`.
    pub ter: f64,
}

impl SubsetScore {
    fn add(&mut self, e: &EditStats) {
        self.utterances += 1;
        self.errors += e.errors();
        self.ref_tokens += e.ref_len;
        self.ter = self.errors as f64 / self.ref_tokens.max(1) as f64;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingScore {
    pub frames: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl RoutingScore {
    fn add(&mut self, frames: usize, correct: usize) {
        self.frames += frames;
        self.correct += correct;
        self.accuracy = if self.frames == 0 {
            0.0
        } else {
            self.correct as f64 / self.frames as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub override_lang: Option<usize>,
    pub overall: SubsetScore,
    /// Monolingual subsets keyed by language name.
    pub per_language: BTreeMap<String, SubsetScore>,
    pub code_switch: SubsetScore,
    /// Frame routing accuracy averaged over all language-group layers.
    pub routing_mono: RoutingScore,
    pub routing_cs: RoutingScore,
    pub routing_per_layer: Vec<RoutingScore>,
    pub utilization: Vec<UtilizationRecord>,
    pub losses: LossBreakdown,
    /// Utterances whose losses were undefined (too few frames for CTC).
    pub skipped_losses: usize,
}

struct UttResult {
    class: UttClass,
    edit: EditStats,
    /// `(frames, correct)` per language-group layer.
    routing: Vec<(usize, usize)>,
    counts: Vec<Vec<Vec<usize>>>,
    losses: Option<LossBreakdown>,
}

fn eval_one(model: &DlgMoeModel, utt: &Utterance, opts: &EncodeOptions) -> Result<UttResult> {
    let mut tape = Tape::inference();
    let enc = model.encode(&mut tape, &utt.feats, opts)?;
    let lp = model.ctc_log_probs(&mut tape, enc.h_final)?;
    let hyp = ctc_greedy_decode(tape.value(lp));
    let edit = edit_distance(&hyp, &utt.y_asr);
    let routing = enc
        .routing_tables
        .iter()
        .map(|t| {
            let ok = t
                .lang_ids
                .iter()
                .zip(&utt.true_frame_lang)
                .filter(|(a, b)| a == b)
                .count();
            (t.len(), ok)
        })
        .collect();
    let counts = enc
        .stats
        .iter()
        .map(|layer| layer.iter().map(|g| g.expert_counts.clone()).collect())
        .collect();
    let losses = match model.total_loss(&mut tape, &enc, &utt.labels()?, &utt.y_lid) {
        Ok((_, parts)) => Some(parts),
        Err(crate::Error::AlignmentInfeasible { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(UttResult {
        class: utt.class(),
        edit,
        routing,
        counts,
        losses,
    })
}

/// Greedy CTC decoding and routing analysis of every utterance at `k`.
///
/// Parameters are only read. Passing `override_lang` sends every frame of
/// every language-group layer to that group.
pub fn evaluate(
    model: &DlgMoeModel,
    data: &Dataset,
    k: usize,
    override_lang: Option<usize>,
    exec: Exec,
) -> Result<EvalReport> {
    let cfg = &model.config;
    if cfg.n_moe_layers > 0 && !(1..=cfg.experts_per_group).contains(&k) {
        return Err(config(format!("k={k} outside 1..={}", cfg.experts_per_group)));
    }
    let opts = EncodeOptions {
        mode: model.training_mode(),
        k,
        override_lang,
    };
    let results = exec.map(&data.utts, |u| eval_one(model, u, &opts));

    let name = |l: usize| cfg.language_names.get(l).cloned().unwrap_or_else(|| l.to_string());
    let mut report = EvalReport {
        k,
        override_lang,
        overall: SubsetScore::default(),
        per_language: (0..cfg.n_languages)
            .map(|l| (name(l), SubsetScore::default()))
            .collect(),
        code_switch: SubsetScore::default(),
        routing_mono: RoutingScore::default(),
        routing_cs: RoutingScore::default(),
        routing_per_layer: vec![RoutingScore::default(); cfg.n_moe_layers],
        utilization: Vec::new(),
        losses: LossBreakdown::default(),
        skipped_losses: 0,
    };
    let mut counts: Vec<Vec<Vec<usize>>> =
        vec![vec![vec![0; cfg.experts_per_group]; cfg.n_languages]; cfg.n_moe_layers];
    let mut loss_n = 0usize;
    for r in results {
        let r = r?;
        report.overall.add(&r.edit);
        match r.class {
            UttClass::Mono(l) => report.per_language.entry(name(l)).or_default().add(&r.edit),
            UttClass::CodeSwitch => report.code_switch.add(&r.edit),
        }
        for (layer, &(frames, ok)) in r.routing.iter().enumerate() {
            report.routing_per_layer[layer].add(frames, ok);
            match r.class {
                UttClass::Mono(_) => report.routing_mono.add(frames, ok),
                UttClass::CodeSwitch => report.routing_cs.add(frames, ok),
            }
        }
        for (layer, groups) in r.counts.iter().enumerate() {
            for (g, c) in groups.iter().enumerate() {
                for (e, n) in c.iter().enumerate() {
                    counts[layer][g][e] += n;
                }
            }
        }
        match r.losses {
            Some(p) => {
                loss_n += 1;
                report.losses.total += p.total;
                report.losses.ctc += p.ctc;
                report.losses.att += p.att;
                report.losses.inter += p.inter;
            }
            None => report.skipped_losses += 1,
        }
    }
    if loss_n > 0 {
        let n = loss_n as f64;
        report.losses.total /= n;
        report.losses.ctc /= n;
        report.losses.att /= n;
        report.losses.inter /= n;
    }
    for (layer, groups) in counts.into_iter().enumerate() {
        for (language, expert_counts) in groups.into_iter().enumerate() {
            report.utilization.push(UtilizationRecord {
                layer,
                language,
                expert_counts,
                k,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]).rate, 0.0);
        let e = edit_distance::<u32>(&[], &[1, 2]);
        assert_eq!((e.deletions, e.rate), (2, 1.0));
        let e = edit_distance(&[1, 2], &[]);
        assert_eq!((e.insertions, e.rate, e.empty_ref), (2, 2.0, true));
        let e = edit_distance(&[1, 9, 3, 4], &[1, 2, 3]);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 1, 0));
    }
}
