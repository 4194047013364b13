//! AdamW training loop with linear warmup into cosine decay.
//!
//! Everything here is deterministic for a fixed seed: batch order comes from
//! a dedicated counter-seeded stream, accumulation orders are fixed, and the
//! step log carries no wall-clock state.

use crate::config::Config;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DetBox, EvalItem, Evaluation, TruthBox};
use crate::model::{Ablation, LossValues, Model};
use crate::params::ParamStore;
use crate::tensor::Tape;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Decoupled-weight-decay Adam. Decay only touches entries flagged for it
/// (matrices and conv kernels, not biases or gate logits).
pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &Config, store: &ParamStore) -> AdamW {
        let m = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// Applies one update from the gradients currently stored on the
    /// parameter tensors, then leaves those gradients cleared.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let decay = if entry.decay { self.weight_decay } else { 0.0 };
            let grad = match &entry.tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                let p = &mut entry.tensor.data[j];
                *p -= lr * (mh / (vh.sqrt() + self.eps) + decay * *p);
            }
            entry.tensor.zero_grad();
        }
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f32) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    if step < warmup_steps {
        return base_lr * (step + 1) as f32 / warmup_steps as f32;
    }
    let span = (total_steps - warmup_steps).max(1) as f32;
    let progress = (step - warmup_steps) as f32 / span;
    base_lr * 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos())
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub epoch: usize,
    pub step: u64,
    pub lr: f32,
    pub values: LossValues,
}

impl StepStats {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,cls,box,conf,triplet,ortho,joint";

    pub fn csv_line(&self) -> String {
        let v = self.values;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, v.cls, v.box_, v.conf, v.triplet, v.ortho, v.joint
        )
    }
}

pub struct Trainer {
    pub store: ParamStore,
    pub model: Model,
    pub ablation: Ablation,
    opt: AdamW,
    shuffle_rng: ChaCha8Rng,
    global_step: u64,
    total_steps: u64,
    warmup_steps: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, ablation: Ablation, n_train: usize) -> Result<Trainer> {
        if n_train == 0 {
            return Err(Error::Data("no training samples".into()));
        }
        let mut store = ParamStore::new(cfg.seed);
        let model = Model::new(&mut store, cfg)?;
        let opt = AdamW::new(cfg, &store);
        let steps_per_epoch = n_train.div_ceil(cfg.batch_size) as u64;
        Ok(Trainer {
            store,
            model,
            ablation,
            opt,
            // offset keeps the shuffle stream distinct from parameter init
            shuffle_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5348_5546)),
            global_step: 0,
            total_steps: steps_per_epoch * cfg.epochs as u64,
            warmup_steps: steps_per_epoch * cfg.warmup_epochs as u64,
            epoch: 0,
        })
    }

    pub fn epoch_index(&self) -> usize {
        self.epoch
    }

    /// One pass over the training set in a freshly shuffled order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<Vec<StepStats>> {
        let cfg = &self.model.cfg;
        let batch_size = cfg.batch_size;
        let base_lr = cfg.lr;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut stats = Vec::new();
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut tape = Tape::new();
            let out = self.model.batch_loss(&mut tape, &self.store, &batch, self.ablation)?;
            tape.backward(out.joint)?;
            // pull gradients off the tape onto the parameter tensors
            for i in 0..self.store.len() {
                let id = crate::params::ParamId(i as u32);
                let node = self.store.bind(&mut tape, id);
                if let Some(g) = tape.grad(node) {
                    let g = g.to_vec();
                    self.store.tensor_mut(id).accumulate_grad(&g);
                }
            }
            let lr = lr_at(self.global_step, self.total_steps, self.warmup_steps, base_lr);
            self.opt.step(&mut self.store, lr);
            stats.push(StepStats {
                epoch: self.epoch,
                step: self.global_step,
                lr,
                values: out.values,
            });
            self.global_step += 1;
        }
        self.epoch += 1;
        Ok(stats)
    }
}

/// Runs detection over `samples` and scores it against their labels.
/// `threads` > 1 splits the samples into contiguous chunks that are merged
/// back in input order, so the result does not depend on the thread count.
pub fn evaluate_detector(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    ablation: Ablation,
    conf_threshold: f32,
    threads: usize,
) -> Result<Evaluation> {
    let items = collect_eval_items(model, store, samples, ablation, conf_threshold, threads)?;
    Ok(evaluate(&items))
}

pub fn collect_eval_items(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    ablation: Ablation,
    conf_threshold: f32,
    threads: usize,
) -> Result<Vec<EvalItem>> {
    let run_one = |sample: &Sample| -> Result<EvalItem> {
        let mut tape = Tape::new();
        let dets = model.detect(&mut tape, store, sample, ablation, conf_threshold)?;
        Ok(EvalItem {
            id: sample.id.clone(),
            dets: dets
                .iter()
                .map(|d| DetBox {
                    class: d.class,
                    cx: d.cx as f64,
                    cy: d.cy as f64,
                    w: d.w as f64,
                    h: d.h as f64,
                    score: d.score as f64,
                })
                .collect(),
            gts: sample.boxes.iter().map(|&b| TruthBox::from(b)).collect(),
        })
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return samples.iter().map(run_one).collect();
    }
    let chunk_len = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk_len)
            .map(|chunk| scope.spawn(move || chunk.iter().map(run_one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut items = Vec::with_capacity(samples.len());
        for h in handles {
            items.extend(h.join().expect("eval worker panicked")?);
        }
        Ok(items)
    })
}
