use std::sync::OnceLock;

use dlgmoe::data::{generate, Dataset, SynthSpec, UttClass};
use dlgmoe::exec::Exec;
use dlgmoe::group::KPolicy;
use dlgmoe::harness::{evaluate, route_viz, train, TrainConfig};
use dlgmoe::model::{checkpoint, DlgMoeConfig, DlgMoeModel};

fn corpus(n: usize, noise: f64, seed: u64) -> Dataset {
    generate(&SynthSpec {
        n_utts: n,
        noise_std: noise,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// A model trained to convergence on noiseless data, plus its held-out set.
fn converged() -> &'static (DlgMoeModel, Dataset) {
    static CELL: OnceLock<(DlgMoeModel, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (tr, te) = corpus(300, 0.0, 7).split(240);
        let cfg = TrainConfig {
            max_steps: 1500,
            ..Default::default()
        };
        let mut model = DlgMoeModel::new(cfg.model.clone()).unwrap();
        train(&mut model, &tr, &cfg, &mut std::io::sink(), None).unwrap();
        (model, te)
    })
}

#[test]
fn overfits_a_single_utterance() {
    let data = corpus(1, 0.05, 3);
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 0,
        max_steps: 200,
        batch_size: 1,
        ..Default::default()
    };
    let mut model = DlgMoeModel::new(cfg.model.clone()).unwrap();
    let log = train(&mut model, &data, &cfg, &mut std::io::sink(), None).unwrap();
    let (first, last) = (log[0].loss, log.last().unwrap().loss);
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn decoder_loss_falls_within_fifty_steps() {
    let data = corpus(1, 0.05, 5);
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 0,
        max_steps: 50,
        batch_size: 1,
        ..Default::default()
    };
    let mut model = DlgMoeModel::new(cfg.model.clone()).unwrap();
    let log = train(&mut model, &data, &cfg, &mut std::io::sink(), None).unwrap();
    assert!(log[49].att < log[0].att, "{} -> {}", log[0].att, log[49].att);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = corpus(12, 0.05, 1);
    let cfg = TrainConfig {
        lr: 0.0,
        max_steps: 15,
        batch_size: 4,
        ..Default::default()
    };
    let mut model = DlgMoeModel::new(cfg.model.clone()).unwrap();
    let before = model.store.clone();
    train(&mut model, &data, &cfg, &mut std::io::sink(), None).unwrap();
    for id in before.ids() {
        let same = before
            .get(id)
            .data()
            .iter()
            .zip(model.store.get(id).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} moved", before.name(id));
    }
}

#[test]
fn same_seed_gives_the_same_log() {
    let data = corpus(20, 0.05, 2);
    let cfg = TrainConfig {
        max_steps: 12,
        batch_size: 3,
        seed: 17,
        ..Default::default()
    };
    let run = || {
        let mut model = DlgMoeModel::new(cfg.model.clone()).unwrap();
        let mut log = Vec::new();
        train(&mut model, &data, &cfg, &mut log, None).unwrap();
        (log, checkpoint::param_checksum(&model))
    };
    assert_eq!(run(), run());
    let other = TrainConfig {
        seed: 18,
        ..cfg.clone()
    };
    let mut model = DlgMoeModel::new(other.model.clone()).unwrap();
    let mut log = Vec::new();
    train(&mut model, &data, &other, &mut log, None).unwrap();
    assert_ne!(log, run().0);
}

#[test]
fn training_rejects_bad_input() {
    let mut model = DlgMoeModel::new(DlgMoeConfig::default()).unwrap();
    let empty = corpus(5, 0.05, 0).split(0).0;
    assert!(train(&mut model, &empty, &TrainConfig::default(), &mut std::io::sink(), None).is_err());
    let data = corpus(5, 0.05, 0);
    let bad = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(train(&mut model, &data, &bad, &mut std::io::sink(), None).is_err());
    let bad_k = TrainConfig {
        k_policy: Some(KPolicy::Fixed { k: 3 }),
        ..Default::default()
    };
    assert!(train(&mut model, &data, &bad_k, &mut std::io::sink(), None).is_err());
    assert_eq!(model.config, DlgMoeConfig::default());
}

#[test]
fn evaluation_is_read_only() {
    let (model, test) = converged();
    let before = checkpoint::param_checksum(model);
    let a = evaluate(model, test, 2, None, Exec::Parallel).unwrap();
    let b = evaluate(model, test, 2, None, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(checkpoint::param_checksum(model), before);
}

#[test]
fn noiseless_corpus_is_learned_exactly() {
    let (model, test) = converged();
    for k in 1..=2 {
        let r = evaluate(model, test, k, None, Exec::Parallel).unwrap();
        assert_eq!(r.overall.errors, 0, "k={k}: {:?}", r.overall);
        assert_eq!(r.per_language.len(), 2);
        let subset_utts: usize =
            r.per_language.values().map(|s| s.utterances).sum::<usize>() + r.code_switch.utterances;
        assert_eq!(subset_utts, test.len());
        assert_eq!(
            r.utilization.len(),
            model.config.n_moe_layers * model.config.n_languages
        );
        assert!(r.utilization.iter().all(|u| u.k == k));
    }
}

#[test]
fn override_routes_every_frame_to_that_group() {
    let (model, test) = converged();
    let zh = model.config.language_index("zh").unwrap();
    let zh_only = Dataset {
        spec: None,
        utts: test
            .utts
            .iter()
            .filter(|u| u.class() == UttClass::Mono(zh))
            .cloned()
            .collect(),
    };
    assert!(!zh_only.is_empty());
    let r = evaluate(model, &zh_only, 1, Some(zh), Exec::Parallel).unwrap();
    assert_eq!(r.routing_mono.accuracy, 1.0);
    assert_eq!(r.override_lang, Some(zh));
    let en_counts: usize = r
        .utilization
        .iter()
        .filter(|u| u.language != zh)
        .flat_map(|u| &u.expert_counts)
        .sum();
    assert_eq!(en_counts, 0);
}

#[test]
fn fixed_and_dynamic_models_evaluate_at_their_k() {
    let data = corpus(16, 0.05, 9);
    let dynamic = DlgMoeModel::new(DlgMoeConfig::default()).unwrap();
    for k in dynamic.config.k_policy.range() {
        assert_eq!(evaluate(&dynamic, &data, k, None, Exec::Parallel).unwrap().k, k);
    }
    let cfg = TrainConfig {
        k_policy: Some(KPolicy::Fixed { k: 2 }),
        max_steps: 5,
        ..Default::default()
    };
    let mut fixed = DlgMoeModel::new(DlgMoeConfig::default()).unwrap();
    let log = train(&mut fixed, &data, &cfg, &mut std::io::sink(), None).unwrap();
    assert!(log.iter().all(|r| r.k == 2));
    assert!(evaluate(&fixed, &data, 2, None, Exec::Parallel).is_ok());
    assert!(evaluate(&fixed, &data, 3, None, Exec::Parallel).is_err());
}

#[test]
fn checkpoints_reload_to_the_same_scores() {
    let (model, test) = converged();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    checkpoint::save(model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::param_checksum(&back), checkpoint::param_checksum(model));
    assert_eq!(
        evaluate(&back, test, 1, None, Exec::Parallel).unwrap(),
        evaluate(model, test, 1, None, Exec::Parallel).unwrap()
    );
}

#[test]
fn route_strips_follow_the_true_languages() {
    let (model, test) = converged();
    let dir = tempfile::tempdir().unwrap();
    let zh = test.utts.iter().find(|u| u.class() == UttClass::Mono(0)).unwrap();
    let path = dir.path().join("zh.ppm");
    let v = route_viz(model, zh, &path, 1).unwrap();
    let z = "Z".repeat(zh.len());
    assert_eq!(v.ascii, format!("route {z}\ntruth {z}\n"));
    let ppm = std::fs::read(&path).unwrap();
    let header_len = ppm.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0 + 1;
    let width = zh.len() * 4;
    let top_row = &ppm[header_len..header_len + width * 3];
    assert!(top_row.chunks(3).all(|px| px == [220, 30, 30]));
    assert_eq!(std::fs::read_to_string(path.with_extension("txt")).unwrap(), v.ascii);

    let cs = test.utts.iter().find(|u| u.class() == UttClass::CodeSwitch).unwrap();
    let a = route_viz(model, cs, &dir.path().join("a.ppm"), 1).unwrap();
    let wrong = a.routed.iter().zip(&a.truth).filter(|(r, t)| r != t).count();
    let switches = cs.true_frame_lang.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(
        wrong <= 2 * switches,
        "{wrong} wrong frames over {switches} switches\n{}",
        a.ascii
    );
    route_viz(model, cs, &dir.path().join("b.ppm"), 1).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("a.ppm")).unwrap(),
        std::fs::read(dir.path().join("b.ppm")).unwrap()
    );
    assert!(route_viz(model, cs, &dir.path().join("missing/x.ppm"), 1).is_err());
}
