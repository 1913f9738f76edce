use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlgmoe::ctc::{collapse, ctc_loss, ctc_neg_log_likelihood, CtcLabelSeq};
use dlgmoe::group::{combine, dispatch, DispatchPlan};
use dlgmoe::harness::edit_distance;
use dlgmoe::model::{count_params, estimate_flops, DlgMoeConfig, DlgMoeModel};
use dlgmoe::router::{RouteSource, RoutingTable};
use dlgmoe::streaming::chunk_mask;
use dlgmoe::tensor::{Activation, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central differences of `sum(f(inputs) ⊙ P)` against the tape gradient.
fn check_op(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor], proj: Option<&Tensor>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true).unwrap()).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let p = match proj {
            Some(p) => p.clone(),
            None => Tensor::full(&shape, 1.0),
        };
        let pv = tape.constant(p).unwrap();
        let m = tape.mul(out, pv).unwrap();
        let l = tape.sum(m).unwrap();
        (tape.value(l).item(), tape.backward(l).unwrap(), vars, shape)
    };
    let (_, _, _, shape) = eval(inputs, None);
    let proj = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let (_, grads, vars, _) = eval(inputs, Some(&proj));
    let h = 1e-5;
    for (a, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[a]).unwrap();
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[a].data_mut()[i] += h;
            let lp = eval(&xs, Some(&proj)).0;
            xs[a].data_mut()[i] -= 2.0 * h;
            let lm = eval(&xs, Some(&proj)).0;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "input {a}[{i}]: analytic {an} vs fd {fd}");
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transpose_gradients(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[n, k], -1.0, 1.0);
        check_op(&[a, b], seed, |t, v| {
            let bt = t.transpose(v[1]).unwrap();
            t.matmul(v[0], bt).unwrap()
        })?;
    }

    #[test]
    fn normalization_gradients(rows in 1usize..4, cols in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[cols], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[cols], -0.5, 0.5);
        check_op(std::slice::from_ref(&x), seed, |t, v| t.softmax(v[0]).unwrap())?;
        check_op(std::slice::from_ref(&x), seed, |t, v| t.log_softmax(v[0]).unwrap())?;
        check_op(&[x, g, b], seed, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())?;
    }

    #[test]
    fn activation_gradients(rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        prop_assume!(x.data().iter().all(|v| v.abs() > 1e-3));
        for act in [Activation::Swish, Activation::Relu, Activation::Sigmoid] {
            check_op(std::slice::from_ref(&x), seed, |t, v| t.activation(v[0], act).unwrap())?;
        }
    }

    #[test]
    fn elementwise_and_bias_gradients(rows in 1usize..4, cols in 1usize..4, c in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[cols], -1.0, 1.0);
        let s = rand_tensor(&mut rng, &[rows, 1], -1.0, 1.0);
        check_op(&[x.clone(), y.clone()], seed, |t, v| {
            let p = t.mul(v[0], v[1]).unwrap();
            let q = t.add(p, v[0]).unwrap();
            t.scale(q, c).unwrap()
        })?;
        check_op(&[x.clone(), b], seed, |t, v| t.add_bias(v[0], v[1]).unwrap())?;
        check_op(&[x, s], seed, |t, v| t.scale_rows(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn row_plumbing_gradients(rows in 2usize..5, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[rows, 2], -1.0, 1.0);
        let idx: Vec<usize> = (0..rows + 1).map(|_| rng.random_range(0..rows)).collect();
        let split = rng.random_range(1..rows);
        check_op(&[x.clone(), y], seed, |t, v| {
            let cat = t.concat_cols(&[v[0], v[1]]).unwrap();
            let top = t.slice_rows(cat, 0, split).unwrap();
            let rest = t.slice_rows(cat, split, rows).unwrap();
            let back = t.concat_rows(&[rest, top]).unwrap();
            t.slice_cols(back, 1, cols + 2).unwrap()
        })?;
        let idx2 = idx.clone();
        check_op(std::slice::from_ref(&x), seed, move |t, v| {
            let g = t.gather_rows(v[0], &idx2).unwrap();
            t.scatter_add_rows(&[(g, idx2.clone()), (v[0], (0..rows).collect())], rows, cols).unwrap()
        })?;
        check_op(&[x], seed, |t, v| {
            let flat: Vec<Option<usize>> = (0..rows * cols).rev().map(|i| (i % 3 != 0).then_some(i)).collect();
            let g = t.gather_flat(v[0], flat, &[cols, rows]).unwrap();
            t.reshape(g, &[rows, cols]).unwrap()
        })?;
    }

    #[test]
    fn depthwise_conv_and_topk_gradients(t_len in 1usize..5, d in 1usize..4, kw in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[t_len + kw - 1, d], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[kw, d], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[d], -1.0, 1.0);
        check_op(&[x, w, b], seed, |t, v| t.depthwise_conv(v[0], v[1], v[2]).unwrap())?;
        // Logits spaced far apart so the selection cannot flip under the step.
        let n = d + 1;
        let mut logits = Vec::new();
        for _ in 0..t_len {
            let mut row: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
            for i in (1..n).rev() {
                row.swap(i, rng.random_range(0..=i));
            }
            logits.extend(row);
        }
        let l = Tensor::new(vec![t_len, n], logits).unwrap();
        let k = rng.random_range(1..=n);
        check_op(&[l], seed, move |t, v| t.topk_softmax(v[0], k).unwrap())?;
    }
}

fn brute_force_nll(lp: &Tensor, labels: &[usize]) -> f64 {
    let (t, c) = (lp.rows(), lp.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..c.pow(t as u32) {
        let mut x = code;
        for s in path.iter_mut() {
            *s = x % c;
            x /= c;
        }
        if collapse(&path) == labels {
            total += path.iter().enumerate().map(|(i, &s)| lp.at(i, s)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn normalized(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor {
    let mut x = rand_tensor(rng, &[t, c], -2.0, 2.0);
    for row in x.data_mut().chunks_mut(c) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    x
}

proptest! {
    #[test]
    fn ctc_agrees_with_path_enumeration(t in 1usize..=6, c in 2usize..=4, labels in prop::collection::vec(1usize..4, 0..=3), seed in any::<u64>()) {
        let labels: Vec<usize> = labels.into_iter().map(|l| 1 + (l - 1) % (c - 1)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = normalized(&mut rng, t, c);
        let seq = CtcLabelSeq::new(labels.clone()).unwrap();
        let fast = ctc_neg_log_likelihood(&lp, &seq).unwrap();
        let brute = brute_force_nll(&lp, &labels);
        if brute.is_infinite() {
            prop_assert_eq!(fast, f64::INFINITY);
            prop_assert!(seq.min_frames() > t);
        } else {
            prop_assert!((fast - brute).abs() < 1e-9, "{} vs {}", fast, brute);
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences(t in 2usize..=6, c in 2usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rng.random_range(0..=t.min(3) / 2 + 1);
        let labels: Vec<usize> = (0..u).map(|_| rng.random_range(1..c)).collect();
        let seq = CtcLabelSeq::new(labels).unwrap();
        prop_assume!(seq.min_frames() <= t);
        let x = rand_tensor(&mut rng, &[t, c], -2.0, 2.0);
        check_op(&[x], seed, |tape, v| {
            let lp = tape.log_softmax(v[0]).unwrap();
            ctc_loss(tape, lp, &seq).unwrap()
        })?;
    }
}

fn table_strategy() -> impl Strategy<Value = (usize, Vec<usize>, usize, u64)> {
    (1usize..=4, 0usize..=30, 1usize..=5, any::<u64>())
        .prop_flat_map(|(l, t, d, seed)| (Just(l), prop::collection::vec(0..l, t), Just(d), Just(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dispatch_partitions_frames((l, ids, _d, _seed) in table_strategy()) {
        let t = ids.len();
        let table = RoutingTable { lang_ids: ids.clone(), source: RouteSource::Router };
        let plan = DispatchPlan::from_table(&table, l).unwrap();
        let mut seen = vec![false; t];
        for (lang, frames) in plan.frames.iter().enumerate() {
            prop_assert!(frames.windows(2).all(|w| w[0] < w[1]));
            for &f in frames {
                prop_assert!(!seen[f]);
                prop_assert_eq!(ids[f], lang);
                seen[f] = true;
            }
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn dispatch_then_combine_is_identity_under_shuffles((l, ids, d, seed) in table_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rand_tensor(&mut rng, &[ids.len(), d], -3.0, 3.0);
        let mut shuffled = ids.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        for lang_ids in [ids, shuffled] {
            let table = RoutingTable { lang_ids, source: RouteSource::Router };
            let mut tape = Tape::inference();
            let hv = tape.constant(h.clone()).unwrap();
            let (plan, subs) = dispatch(&mut tape, hv, &table, l).unwrap();
            let out = combine(&mut tape, &subs, &plan).unwrap();
            prop_assert_eq!(tape.value(out), &h);
        }
    }

    #[test]
    fn gates_select_exactly_k(rows in 1usize..10, n in 1usize..6, seed in any::<u64>(), kk in 0usize..6) {
        let k = 1 + kk % n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = rand_tensor(&mut rng, &[rows, n], -6.0, 6.0);
        let mut tape = Tape::inference();
        let lv = tape.constant(logits.clone()).unwrap();
        let g = tape.topk_softmax(lv, k).unwrap();
        for (r, row) in tape.value(g).data().chunks(n).enumerate() {
            prop_assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let lr = logits.row(r);
            let min_sel = (0..n).filter(|&i| row[i] > 0.0).map(|i| lr[i]).fold(f64::INFINITY, f64::min);
            let max_rest = (0..n).filter(|&i| row[i] == 0.0).map(|i| lr[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_rest);
        }
    }

    #[test]
    fn chunk_mask_structure(t in 1usize..20, c in 1usize..24) {
        let m = chunk_mask(t, c).unwrap();
        prop_assert_eq!(m.len(), t * t);
        for i in 0..t {
            let visible = (0..t).filter(|&j| m[i * t + j]).count();
            prop_assert_eq!(visible, ((i / c + 1) * c).min(t));
            prop_assert!(m[i * t + i]);
            for j in 0..t {
                prop_assert!(!m[i * t + j] || m[i * t + j.saturating_sub(1)]);
            }
        }
        if c >= t {
            prop_assert!(m.iter().all(|&b| b));
        }
        let nested = chunk_mask(t, c * 2).unwrap();
        prop_assert!(m.iter().zip(&nested).all(|(&a, &b)| !a || b));
    }
}

/// Minimum edits by exhaustive recursion.
fn edits_brute(h: &[u8], r: &[u8]) -> usize {
    match (h, r) {
        ([], _) => r.len(),
        (_, []) => h.len(),
        ([a, hs @ ..], [b, rs @ ..]) => {
            let sub = edits_brute(hs, rs) + usize::from(a != b);
            let ins = edits_brute(hs, r) + 1;
            let del = edits_brute(h, rs) + 1;
            sub.min(ins).min(del)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn edit_distance_matches_recursion(h in prop::collection::vec(0u8..3, 0..=6), r in prop::collection::vec(0u8..3, 0..=6)) {
        let e = edit_distance(&h, &r);
        prop_assert_eq!(e.errors(), edits_brute(&h, &r));
        prop_assert_eq!(h.len() + e.deletions, r.len() + e.insertions);
        prop_assert_eq!(e.ref_len, r.len());
        prop_assert!((e.rate - e.errors() as f64 / r.len().max(1) as f64).abs() == 0.0);
    }
}

fn config_strategy() -> impl Strategy<Value = DlgMoeConfig> {
    (
        (1usize..=2, 1usize..=4, 1usize..=16, 0usize..=2, 1usize..=3),
        (1usize..=3, 1usize..=4, 0usize..=4, any::<bool>(), 0usize..=2),
        (2usize..=12, 0usize..=5),
    )
        .prop_map(
            |((heads, per_head, d_ffn, nv, nm), (l, n, kernel, sub, dec), (d_in, extra_vocab))| DlgMoeConfig {
                d_in: if sub { d_in.max(7) } else { d_in },
                d_model: heads * per_head * 2,
                n_heads: heads,
                d_ffn,
                n_vanilla_layers: nv,
                n_moe_layers: nm,
                n_languages: l,
                experts_per_group: n,
                k_policy: dlgmoe::group::KPolicy::Fixed { k: 1 },
                vocab_size: l + 1 + extra_vocab,
                conv_kernel: kernel,
                decoder_layers: dec,
                subsampling: sub,
                language_names: (0..l).map(|i| format!("lang{i}")).collect(),
                ..Default::default()
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn activated_params_grow_by_one_expert_per_moe_layer(cfg in config_strategy()) {
        cfg.validate().unwrap();
        let p = count_params(&cfg);
        prop_assert_eq!(p.activated.len(), cfg.experts_per_group);
        for k in 2..=cfg.experts_per_group {
            let step = p.activated_at(k).unwrap() - p.activated_at(k - 1).unwrap();
            prop_assert_eq!(step, cfg.n_moe_layers * p.per_expert);
        }
        let top = p.activated_at(cfg.experts_per_group).unwrap();
        prop_assert_eq!(p.total - top, cfg.n_moe_layers * (cfg.n_languages - 1) * cfg.experts_per_group * p.per_expert);
    }

    #[test]
    fn flops_depend_on_k_not_on_expert_count(cfg in config_strategy(), t_in in 7usize..60, extra in 1usize..4) {
        let wider = DlgMoeConfig { experts_per_group: cfg.experts_per_group + extra, ..cfg.clone() };
        let t = cfg.encoder_frames(t_in) as u64;
        let per_expert = 4 * t * cfg.d_model as u64 * cfg.d_ffn as u64;
        for k in 1..=cfg.experts_per_group {
            prop_assert_eq!(estimate_flops(&cfg, t_in, k), estimate_flops(&wider, t_in, k));
            if k > 1 {
                let step = estimate_flops(&cfg, t_in, k) - estimate_flops(&cfg, t_in, k - 1);
                prop_assert_eq!(step, cfg.n_moe_layers as u64 * per_expert);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn param_count_matches_built_model(cfg in config_strategy()) {
        let model = DlgMoeModel::new(cfg.clone()).unwrap();
        prop_assert_eq!(count_params(&cfg).total, model.store.num_scalars());
    }
}
