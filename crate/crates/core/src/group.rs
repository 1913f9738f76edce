//! Dynamic language groups: dispatch by routing table, top-k gating inside
//! each group, and scatter back into frame order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::{Ffn, ParamId, ParamStore};
use crate::router::RoutingTable;
use crate::tensor::{Tape, Var};

/// Anything that maps `[S × d]` frames to `[S × d]` frames on the tape.
pub trait Expert {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var>;
}

impl Expert for Ffn {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ffn::forward(self, tape, store, x)
    }
}

/// The experts of one language plus their unsupervised router `W_R [d × n]`.
#[derive(Clone, Debug)]
pub struct ExpertGroup<E = Ffn> {
    pub experts: Vec<E>,
    pub unsup_router: ParamId,
    pub language: usize,
}

/// How `k` is chosen for a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KPolicy {
    Fixed { k: usize },
    Dynamic { k_min: usize, k_max: usize, seed: u64 },
}

impl Default for KPolicy {
    fn default() -> Self {
        KPolicy::Dynamic {
            k_min: 1,
            k_max: 2,
            seed: 0,
        }
    }
}

impl KPolicy {
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            KPolicy::Fixed { k } if k < 1 || k > n => Err(config(format!("fixed k={k} outside 1..={n}"))),
            KPolicy::Dynamic { k_min, k_max, .. } if k_min < 1 || k_min > k_max || k_max > n => Err(config(format!(
                "dynamic k range [{k_min}, {k_max}] invalid for {n} experts"
            ))),
            _ => Ok(()),
        }
    }

    /// Values of `k` the policy can produce.
    pub fn range(&self) -> std::ops::RangeInclusive<usize> {
        match *self {
            KPolicy::Fixed { k } => k..=k,
            KPolicy::Dynamic { k_min, k_max, .. } => k_min..=k_max,
        }
    }
}

/// Seeded `k` sampler; one draw per training step, shared by all layers.
#[derive(Clone, Debug)]
pub struct KSampler {
    policy: KPolicy,
    rng: ChaCha8Rng,
}

impl KSampler {
    pub fn new(policy: KPolicy) -> Self {
        let seed = match policy {
            KPolicy::Dynamic { seed, .. } => seed,
            KPolicy::Fixed { .. } => 0,
        };
        Self {
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample_k(&mut self) -> usize {
        match self.policy {
            KPolicy::Fixed { k } => k,
            KPolicy::Dynamic { k_min, k_max, .. } => self.rng.random_range(k_min..=k_max),
        }
    }
}

/// Per-language frame index lists for one routing table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchPlan {
    pub frames: Vec<Vec<usize>>,
    pub total: usize,
}

impl DispatchPlan {
    pub fn from_table(table: &RoutingTable, n_languages: usize) -> Result<Self> {
        let mut frames = vec![Vec::new(); n_languages];
        for (t, &l) in table.lang_ids.iter().enumerate() {
            frames
                .get_mut(l)
                .ok_or_else(|| contract(format!("frame {t} routed to language {l} of {n_languages}")))?
                .push(t);
        }
        Ok(Self {
            frames,
            total: table.len(),
        })
    }
}

/// Splits `h_pre` rows into one sub-matrix per language.
pub fn dispatch(
    tape: &mut Tape,
    h_pre: Var,
    table: &RoutingTable,
    n_languages: usize,
) -> Result<(DispatchPlan, Vec<Var>)> {
    let t = tape.value(h_pre).rows();
    if table.len() != t {
        return Err(contract(format!(
            "routing table has {} frames, input has {t}",
            table.len()
        )));
    }
    let plan = DispatchPlan::from_table(table, n_languages)?;
    let subs = plan
        .frames
        .iter()
        .map(|idx| tape.gather_rows(h_pre, idx))
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, subs))
}

/// Writes each language's rows back to their original positions.
pub fn combine(tape: &mut Tape, outputs: &[Var], plan: &DispatchPlan) -> Result<Var> {
    if outputs.len() != plan.frames.len() {
        return Err(contract(format!(
            "{} group outputs for {} languages",
            outputs.len(),
            plan.frames.len()
        )));
    }
    let mut d = 0;
    for (o, idx) in outputs.iter().zip(&plan.frames) {
        let rows = tape.value(*o).rows();
        if rows != idx.len() {
            return Err(contract(format!(
                "group output has {rows} rows, plan lists {}",
                idx.len()
            )));
        }
        if rows > 0 {
            d = tape.value(*o).cols();
        }
    }
    if d == 0 {
        d = outputs.first().map_or(0, |o| tape.value(*o).cols());
    }
    let parts: Vec<(Var, Vec<usize>)> = outputs.iter().copied().zip(plan.frames.iter().cloned()).collect();
    tape.scatter_add_rows(&parts, plan.total, d)
}

/// Usage counts for one group call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub language: usize,
    pub expert_counts: Vec<usize>,
    pub k: usize,
    /// Smallest gap between the k-th and (k+1)-th router logit over frames.
    pub min_margin: f64,
}

/// One JSON-lines record of expert utilization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationRecord {
    pub layer: usize,
    pub language: usize,
    pub expert_counts: Vec<usize>,
    pub k: usize,
}

fn check_k<E>(grp: &ExpertGroup<E>, k: usize) -> Result<()> {
    let n = grp.experts.len();
    if k == 0 || k > n {
        return Err(config(format!("k={k} outside 1..={n} for group {}", grp.language)));
    }
    Ok(())
}

/// Top-k gated mixture of the group's experts.
///
/// Each frame gets its own top-k set from `h_sub · W_R`; gates are a softmax
/// over the selected logits only, and expert `i` runs only on the frames that
/// selected it.
pub fn group_forward<E: Expert>(
    tape: &mut Tape,
    store: &ParamStore,
    h_sub: Var,
    grp: &ExpertGroup<E>,
    k: usize,
) -> Result<(Var, GroupStats)> {
    check_k(grp, k)?;
    let n = grp.experts.len();
    let (s, d) = (tape.value(h_sub).rows(), tape.value(h_sub).cols());
    let mut stats = GroupStats {
        language: grp.language,
        expert_counts: vec![0; n],
        k,
        min_margin: f64::INFINITY,
    };
    if s == 0 {
        return Ok((h_sub, stats));
    }
    let w_r = store.bind(tape, grp.unsup_router)?;
    let logits = tape.matmul(h_sub, w_r)?;
    let gates = tape.topk_softmax(logits, k)?;

    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
    {
        let lv = tape.value(logits);
        for r in 0..s {
            let row = lv.row(r);
            let sel = crate::tensor::top_k_indices(row, n.min(k + 1));
            for &i in &sel[..k] {
                per_expert[i].push(r);
            }
            if k < n {
                stats.min_margin = stats.min_margin.min(row[sel[k - 1]] - row[sel[k]]);
            }
        }
    }
    let mut parts = Vec::with_capacity(n);
    for (i, idx) in per_expert.into_iter().enumerate() {
        stats.expert_counts[i] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let x = tape.gather_rows(h_sub, &idx)?;
        let y = grp.experts[i].forward(tape, store, x)?;
        let g = tape.gather_rows(gates, &idx)?;
        let g = tape.slice_cols(g, i, i + 1)?;
        let y = tape.scale_rows(y, g)?;
        parts.push((y, idx));
    }
    let out = tape.scatter_add_rows(&parts, s, d)?;
    Ok((out, stats))
}

/// Router-free variant: the first `k` experts, each weighted `1/k`.
pub fn group_forward_uniform<E: Expert>(
    tape: &mut Tape,
    store: &ParamStore,
    h_sub: Var,
    grp: &ExpertGroup<E>,
    k: usize,
) -> Result<(Var, GroupStats)> {
    check_k(grp, k)?;
    let n = grp.experts.len();
    let (s, d) = (tape.value(h_sub).rows(), tape.value(h_sub).cols());
    let mut stats = GroupStats {
        language: grp.language,
        expert_counts: vec![0; n],
        k,
        min_margin: f64::INFINITY,
    };
    if s == 0 {
        return Ok((h_sub, stats));
    }
    let all: Vec<usize> = (0..s).collect();
    let mut parts = Vec::with_capacity(k);
    for (i, expert) in grp.experts.iter().take(k).enumerate() {
        let y = expert.forward(tape, store, h_sub)?;
        let y = tape.scale(y, 1.0 / k as f64)?;
        stats.expert_counts[i] = s;
        parts.push((y, all.clone()));
    }
    let out = tape.scatter_add_rows(&parts, s, d)?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::router::RouteSource;
    use crate::tensor::{Activation, Tensor};

    struct Identity;
    impl Expert for Identity {
        fn forward(&self, _: &mut Tape, _: &ParamStore, x: Var) -> Result<Var> {
            Ok(x)
        }
    }

    /// Expert that multiplies its input by a constant.
    struct Times(f64);
    impl Expert for Times {
        fn forward(&self, tape: &mut Tape, _: &ParamStore, x: Var) -> Result<Var> {
            tape.scale(x, self.0)
        }
    }

    fn table(ids: &[usize]) -> RoutingTable {
        RoutingTable {
            lang_ids: ids.to_vec(),
            source: RouteSource::Router,
        }
    }

    fn group<E>(store: &mut ParamStore, experts: Vec<E>, router: Tensor) -> ExpertGroup<E> {
        ExpertGroup {
            experts,
            unsup_router: store.add("w_r", router),
            language: 0,
        }
    }

    fn rows(t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn dispatch_alternating_and_all_one_language() {
        let mut tape = Tape::new();
        let x = tape.constant(rows(4, 3)).unwrap();
        let (plan, subs) = dispatch(&mut tape, x, &table(&[0, 1, 0, 1]), 2).unwrap();
        assert_eq!(plan.frames, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(tape.value(subs[0]).row(1), tape.value(x).row(2));
        assert_eq!(tape.value(subs[1]).row(0), tape.value(x).row(1));

        let (_, subs) = dispatch(&mut tape, x, &table(&[0, 0, 0, 0]), 2).unwrap();
        assert_eq!(tape.value(subs[0]), tape.value(x));
        assert_eq!(tape.value(subs[1]).shape(), &[0, 3]);

        assert!(dispatch(&mut tape, x, &table(&[0, 0]), 2).is_err());
    }

    #[test]
    fn combine_round_trip_and_count_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(rows(5, 2)).unwrap();
        let (plan, subs) = dispatch(&mut tape, x, &table(&[1, 0, 0, 1, 1]), 2).unwrap();
        let y = combine(&mut tape, &subs, &plan).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        assert!(combine(&mut tape, &[subs[1], subs[0]], &plan).is_err());
    }

    #[test]
    fn single_expert_gate_is_one() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2);
        let ffn = Ffn::new(&mut store, &mut init, "e0", 3, 5, Activation::Relu);
        let grp = group(&mut store, vec![ffn.clone()], init.xavier(3, 1));
        let mut tape = Tape::new();
        let x = tape.constant(rows(4, 3)).unwrap();
        let (y, stats) = group_forward(&mut tape, &store, x, &grp, 1).unwrap();
        let direct = Ffn::forward(&ffn, &mut tape, &store, x).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(direct)) < 1e-15);
        assert_eq!(stats.expert_counts, vec![4]);
    }

    #[test]
    fn gates_are_softmax_over_selected_logits() {
        // One frame, d=1, router logits [2, 1, 0, -1].
        let mut store = ParamStore::new();
        let experts = vec![Times(1.0), Times(10.0), Times(100.0), Times(1000.0)];
        let grp = group(
            &mut store,
            experts,
            Tensor::new(vec![1, 4], vec![2.0, 1.0, 0.0, -1.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1], 1.0)).unwrap();
        let (y, stats) = group_forward(&mut tape, &store, x, &grp, 2).unwrap();
        let g0 = 0.7311;
        let g1 = 0.2689;
        assert!((tape.value(y).item() - (g0 + 10.0 * g1)).abs() < 1e-3);
        assert_eq!(stats.expert_counts, vec![1, 1, 0, 0]);
        assert!((stats.min_margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_experts_preserve_input() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let grp = group(&mut store, vec![Identity, Identity, Identity], init.xavier(3, 3));
        let mut tape = Tape::new();
        let x0 = rows(6, 3);
        let x = tape.constant(x0.clone()).unwrap();
        for k in 1..=3 {
            let (y, _) = group_forward(&mut tape, &store, x, &grp, k).unwrap();
            assert!(tape.value(y).max_abs_diff(&x0) < 1e-15);
            let (u, _) = group_forward_uniform(&mut tape, &store, x, &grp, k).unwrap();
            assert!(tape.value(u).max_abs_diff(tape.value(y)) < 1e-15);
        }
    }

    #[test]
    fn uniform_mode_averages_first_k() {
        let mut store = ParamStore::new();
        let grp = group(
            &mut store,
            vec![Times(2.0), Times(4.0), Times(8.0)],
            Tensor::zeros(&[1, 3]),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1], 1.0)).unwrap();
        let (y, stats) = group_forward_uniform(&mut tape, &store, x, &grp, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0]);
        assert_eq!(stats.expert_counts, vec![2, 2, 0]);
        let (y, _) = group_forward_uniform(&mut tape, &store, x, &grp, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn k_bounds_and_empty_input() {
        let mut store = ParamStore::new();
        let grp = group(&mut store, vec![Identity, Identity], Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert!(group_forward(&mut tape, &store, x, &grp, 3).is_err());
        let (y, stats) = group_forward(&mut tape, &store, x, &grp, 2).unwrap();
        assert_eq!(tape.shape(y), &[0, 2]);
        assert_eq!(stats.expert_counts, vec![0, 0]);
    }

    #[test]
    fn k_sampling() {
        let mut fixed = KSampler::new(KPolicy::Fixed { k: 2 });
        assert!((0..100).all(|_| fixed.sample_k() == 2));
        let mut degenerate = KSampler::new(KPolicy::Dynamic {
            k_min: 1,
            k_max: 1,
            seed: 3,
        });
        assert!((0..100).all(|_| degenerate.sample_k() == 1));
        let mut dynamic = KSampler::new(KPolicy::Dynamic {
            k_min: 1,
            k_max: 2,
            seed: 11,
        });
        let ones = (0..10_000).filter(|_| dynamic.sample_k() == 1).count();
        let freq = ones as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn policy_validation() {
        assert!(KPolicy::Fixed { k: 0 }.validate(2).is_err());
        assert!(KPolicy::Fixed { k: 2 }.validate(2).is_ok());
        assert!(KPolicy::Dynamic {
            k_min: 2,
            k_max: 1,
            seed: 0
        }
        .validate(2)
        .is_err());
        assert!(KPolicy::Dynamic {
            k_min: 1,
            k_max: 3,
            seed: 0
        }
        .validate(2)
        .is_err());
        let json = serde_json::to_string(&KPolicy::Fixed { k: 2 }).unwrap();
        assert_eq!(json, r#"{"mode":"fixed","k":2}"#);
    }
}
