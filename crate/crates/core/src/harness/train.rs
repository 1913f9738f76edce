use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Utterance};
use crate::error::{config, contract, Error, Result};
use crate::exec::Exec;
use crate::group::{KPolicy, KSampler};
use crate::model::{checkpoint, DlgMoeConfig, DlgMoeModel, EncodeOptions, LossBreakdown};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Architecture used when training starts from scratch.
    pub model: DlgMoeConfig,
    pub lr: f64,
    /// 0 keeps the learning rate constant.
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Replaces the model's policy when set.
    pub k_policy: Option<KPolicy>,
    pub lambda_ctc: Option<f64>,
    pub lambda_inter: Option<f64>,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DlgMoeConfig::default(),
            lr: 1e-3,
            warmup_steps: 500,
            max_steps: 2000,
            batch_size: 8,
            seed: 0,
            k_policy: None,
            lambda_ctc: None,
            lambda_inter: None,
            checkpoint_every: 0,
            clip_norm: 5.0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(config(format!("lr={} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Inverse square-root warmup: linear rise to `lr` at `warmup_steps`,
    /// then `lr·sqrt(warmup/step)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.lr * (s.powf(-0.5)).min(s * w.powf(-1.5)) * w.sqrt()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub k: usize,
    pub loss: f64,
    pub ctc: f64,
    pub att: f64,
    pub inter: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: impl Iterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = shapes.collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= update;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Loss and parameter gradients of one utterance.
pub fn utterance_grads(model: &DlgMoeModel, utt: &Utterance, k: usize) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let opts = EncodeOptions {
        mode: model.training_mode(),
        k,
        override_lang: None,
    };
    let enc = model.encode(&mut tape, &utt.feats, &opts)?;
    let (loss, parts) = model.total_loss(&mut tape, &enc, &utt.labels()?, &utt.y_lid)?;
    let grads = tape.backward(loss)?;
    Ok((parts, model.store.collect_grads(&tape, &grads)))
}

/// Order in which utterances are visited: reshuffled every pass.
struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        };
        s.reshuffle_if_done();
        s
    }

    fn reshuffle_if_done(&mut self) {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                self.reshuffle_if_done();
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains `model` in place, writing one JSON line per step to `log` and
/// checkpoints into `ckpt_dir` when configured.
pub fn train(
    model: &mut DlgMoeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    ckpt_dir: Option<&Path>,
) -> Result<Vec<TrainLogRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(contract("training set is empty"));
    }
    let mut mcfg = model.config.clone();
    if let Some(p) = cfg.k_policy {
        mcfg.k_policy = p;
    }
    if let Some(l) = cfg.lambda_ctc {
        mcfg.lambda_ctc = l;
    }
    if let Some(l) = cfg.lambda_inter {
        mcfg.lambda_inter = l;
    }
    mcfg.validate()?;
    model.config = mcfg;

    let mut sampler = KSampler::new(model.config.k_policy);
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let mut adam = Adam::new(model.store.ids().map(|id| model.store.get(id).len()));
    let mut records = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let k = sampler.sample_k();
        let batch: Vec<&Utterance> = order
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| &data.utts[i])
            .collect();
        let results = cfg.exec.map(&batch, |u| utterance_grads(model, u, k));

        let b = batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (parts, g) = r?;
            mean.total += parts.total / b;
            mean.ctc += parts.ctc / b;
            mean.att += parts.att / b;
            mean.inter += parts.inter / b;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(gi.data()).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch is non-empty");
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= b);
        }
        if !mean.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} (ctc {}, att {}, inter {})",
                    mean.total, mean.ctc, mean.att, mean.inter
                ),
            });
        }
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        adam.step(model.store.tensors_mut(), &grads, cfg.lr_at(step));

        let rec = TrainLogRecord {
            step,
            k,
            loss: mean.total,
            ctc: mean.ctc,
            att: mean.att,
            inter: mean.inter,
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        records.push(rec);
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoint::save(model, &dir.join(format!("step{step:06}.json")))?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        checkpoint::save(model, &dir.join("final.json"))?;
    }
    Ok(records)
}
