//! Training and evaluation.
//!
//! The optimizer is SGD with momentum and decoupled weight decay; the
//! learning rate ramps linearly from 0 to `base_lr` over the warmup steps
//! and then follows a cosine down to 0. The loss is cross-entropy on the
//! ensemble logits.
//!
//! Determinism: parameters, batch order, and drop-path draws all derive
//! from the configured seed. Per-sample work may run on a thread pool
//! (capped by `CRVT_THREADS`), but each sample's RNG stream depends only on
//! `(seed, epoch, sample index)` and gradients are reduced in sample order,
//! so results are bit-identical regardless of thread count.

use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DatasetConfig, ModelConfig, TrainConfig};
use crate::data::{load_cifar10_binary, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::model::{bind, build, forward, save_checkpoint, Parameters};
use crate::tensor::{Tape, Tensor};

/// Linear warmup to `base_lr`, then cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / decay_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with momentum and decoupled weight decay:
/// `v ← μ·v + g`, `w ← w − lr·v − lr·wd·w`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &Parameters, momentum: f64, weight_decay: f64) -> Sgd {
        let mut velocity = Vec::new();
        params.visit(&mut |_, t| velocity.push(vec![0.0; t.numel()]));
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Applies one update. `grads` must be in parameter traversal order.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor], lr: f64) {
        let mut i = 0;
        let velocity = &mut self.velocity;
        let (mu, wd) = (self.momentum, self.weight_decay);
        *params = params.map(&mut |t: &Tensor| {
            let g = grads[i].data();
            let v = &mut velocity[i];
            i += 1;
            let mut out = t.clone();
            let data = out.data_mut();
            for ((w, vel), &gv) in data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mu * *vel + gv;
                *w -= lr * *vel + lr * wd * *w;
            }
            out
        });
    }
}

/// Adam with bias correction and decoupled weight decay.
pub struct Adam {
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &Parameters, weight_decay: f64) -> Adam {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam {
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let wd = self.weight_decay;
        *params = params.map(&mut |t: &Tensor| {
            let g = grads[i].data();
            let m = &mut ms[i];
            let v = &mut vs[i];
            i += 1;
            let mut out = t.clone();
            let data = out.data_mut();
            for (j, w) in data.iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS) + lr * wd * *w;
            }
            out
        });
    }
}

/// The configured optimizer, state included.
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: crate::config::OptimizerKind, params: &Parameters, tc: &TrainConfig) -> Self {
        match kind {
            crate::config::OptimizerKind::Sgd => {
                Optimizer::Sgd(Sgd::new(params, tc.momentum, tc.weight_decay))
            }
            crate::config::OptimizerKind::Adam => {
                Optimizer::Adam(Adam::new(params, tc.weight_decay))
            }
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub acc_l: f64,
    pub acc_s: f64,
    pub acc_ensemble: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,acc_l,acc_s,acc_ensemble";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            self.acc_l,
            self.acc_s,
            self.acc_ensemble
        )
    }
}

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_params: Parameters,
    pub best_params: Parameters,
    pub best_acc: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Worker pool shared by batch evaluation; size capped by `CRVT_THREADS`.
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("CRVT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("thread pool")
    })
}

/// Per-sample RNG stream derived from `(seed, epoch, index)`; splitmix-style
/// mixing keeps streams independent of batch layout and thread count.
fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loads the configured dataset, resized to the model's input side.
pub fn load_dataset(config: &DatasetConfig, input_side: usize) -> Result<Dataset> {
    let ds = match config {
        DatasetConfig::Synth {
            n,
            classes,
            side,
            seed,
        } => synth_dataset(*n, *classes, *side, *seed),
        DatasetConfig::Cifar10 {
            dir,
            limit,
            mean,
            std,
        } => {
            let mut ds = load_cifar10_binary(dir)?;
            if let Some(limit) = limit {
                ds.images.truncate(*limit);
                ds.labels.truncate(*limit);
            }
            match (mean, std) {
                (Some(m), Some(s)) => ds.normalized(*m, *s)?,
                (None, None) => ds,
                _ => {
                    return Err(Error::Dataset(
                        "mean and std must be given together".to_string(),
                    ))
                }
            }
        }
    };
    ds.resized(input_side)
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
    nonfinite: Option<String>,
}

fn train_sample(
    params: &Parameters,
    config: &ModelConfig,
    drop_path: f64,
    image: &Tensor,
    label: usize,
    rng_seed: u64,
) -> Result<SampleResult> {
    let mut cfg = config.clone();
    cfg.drop_path = drop_path;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let out = forward(&mut tape, &bound, &cfg, image, true, &mut rng)?;
    let loss = tape.cross_entropy(&out.ensemble, label)?;
    let loss_val = loss.value().data()[0];
    if !loss_val.is_finite() {
        return Ok(SampleResult {
            loss: loss_val,
            correct: false,
            grads: Vec::new(),
            nonfinite: Some(
                tape.first_nonfinite_context()
                    .unwrap_or_else(|| "loss".to_string()),
            ),
        });
    }
    let grads = tape.backward(&loss)?;
    let mut collected = Vec::new();
    bound.visit(&mut |name, var| {
        let g = grads
            .get(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()));
        debug_assert!(g.shape() == var.shape(), "{name}");
        collected.push(g);
    });
    Ok(SampleResult {
        loss: loss_val,
        correct: out.ensemble.value().argmax() == label,
        grads: collected,
        nonfinite: None,
    })
}

/// Trains freshly initialized parameters. See [`train_from`].
pub fn train(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<TrainOutcome> {
    let params = build(model_config, train_config.seed)?;
    train_from(params, model_config, train_config)
}

/// Runs the full training loop from the given parameters: seeded batch
/// shuffling, per-step warmup+cosine learning rate, cross-entropy on the
/// ensemble logits, metrics per epoch, and best-checkpoint tracking by
/// ensemble accuracy.
pub fn train_from(
    mut params: Parameters,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    let drop_path = train_config.drop_path.unwrap_or(model_config.drop_path);
    let dataset = load_dataset(&train_config.dataset, model_config.base_input_side)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".to_string()));
    }
    if dataset.num_classes > model_config.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {}",
            dataset.num_classes, model_config.num_classes
        )));
    }

    let n = dataset.len();
    let batch = train_config.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = LrSchedule {
        base_lr: train_config.base_lr,
        warmup_steps: train_config.warmup_epochs * steps_per_epoch,
        total_steps: train_config.epochs * steps_per_epoch,
    };
    let mut optimizer = Optimizer::new(train_config.optimizer, &params, train_config);
    let mut metrics = Vec::with_capacity(train_config.epochs);
    let mut best_params = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 0..train_config.epochs {
        let epoch_lr = schedule.lr(step);
        // deterministic shuffle per epoch
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(sample_seed(train_config.seed, epoch, usize::MAX / 2));
        for i in (1..n).rev() {
            use rand::Rng;
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let lr = schedule.lr(step);
            let results: Vec<Result<SampleResult>> = pool().install(|| {
                chunk
                    .par_iter()
                    .map(|&idx| {
                        train_sample(
                            &params,
                            model_config,
                            drop_path,
                            &dataset.images[idx],
                            dataset.labels[idx],
                            sample_seed(train_config.seed, epoch, idx),
                        )
                    })
                    .collect()
            });
            // reduce in sample order so results do not depend on thread count
            let mut mean_grads: Option<Vec<Tensor>> = None;
            let scale = 1.0 / chunk.len() as f64;
            for r in results {
                let r = r?;
                if let Some(what) = r.nonfinite {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch}, step {step}: first non-finite tensor at {what}"
                    )));
                }
                loss_sum += r.loss;
                correct += r.correct as usize;
                match &mut mean_grads {
                    None => {
                        let mut gs = r.grads;
                        for g in gs.iter_mut() {
                            let mut scaled = g.clone();
                            for v in scaled.data_mut() {
                                *v *= scale;
                            }
                            *g = scaled;
                        }
                        mean_grads = Some(gs);
                    }
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(r.grads) {
                            let mut out = a.clone();
                            for (av, gv) in out.data_mut().iter_mut().zip(g.data()) {
                                *av += gv * scale;
                            }
                            *a = out;
                        }
                    }
                }
            }
            optimizer.step(&mut params, &mean_grads.expect("non-empty batch"), lr);
            step += 1;
        }

        let eval = evaluate(&params, model_config, &dataset)?;
        metrics.push(EpochMetrics {
            epoch,
            lr: epoch_lr,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            acc_l: eval.acc_large,
            acc_s: eval.acc_small,
            acc_ensemble: eval.acc_ensemble,
        });
        if eval.acc_ensemble > best_acc {
            best_acc = eval.acc_ensemble;
            best_params = params.clone();
        }
    }

    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_acc,
        metrics,
    })
}

/// Writes checkpoints and the metrics CSV to the configured paths.
pub fn write_outputs(
    outcome: &TrainOutcome,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<()> {
    let out = &train_config.output;
    save_checkpoint(&outcome.final_params, model_config, &out.checkpoint)?;
    save_checkpoint(&outcome.best_params, model_config, &out.best_checkpoint)?;
    if let Some(dir) = out.metrics.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(&out.metrics)?;
    f.write_all(metrics_to_csv(&outcome.metrics).as_bytes())?;
    Ok(())
}

/// Per-branch and ensemble top-1 accuracy, plus every sample's logits.
pub struct EvalReport {
    pub acc_large: f64,
    pub acc_small: f64,
    pub acc_ensemble: f64,
    /// Per sample: label and the three logit vectors (large, small, ensemble).
    pub logits: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl EvalReport {
    /// CSV dump: `sample,label,l_*,s_*,e_*` columns, one row per sample.
    pub fn logits_csv(&self) -> String {
        let k = self.logits.first().map(|(_, l, _, _)| l.len()).unwrap_or(0);
        let mut header = String::from("sample,label");
        for prefix in ["l", "s", "e"] {
            for i in 0..k {
                header.push_str(&format!(",{prefix}{i}"));
            }
        }
        let mut out = header;
        out.push('\n');
        for (i, (label, l, s, e)) in self.logits.iter().enumerate() {
            out.push_str(&format!("{i},{label}"));
            for v in l.iter().chain(s).chain(e) {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_logits_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.logits_csv())?;
        Ok(())
    }
}

/// Eval-mode accuracy over a dataset; drop path is inactive and no RNG is
/// consumed, so the report is independent of any seed.
pub fn evaluate(
    params: &Parameters,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<EvalReport> {
    if dataset.num_classes > config.num_classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {}",
            dataset.num_classes, config.num_classes
        )));
    }
    let resized;
    let dataset = if dataset.side != config.base_input_side {
        resized = dataset.resized(config.base_input_side)?;
        &resized
    } else {
        dataset
    };
    let outputs: Vec<Result<(usize, Vec<f64>, Vec<f64>, Vec<f64>)>> = pool().install(|| {
        (0..dataset.len())
            .into_par_iter()
            .map(|i| {
                let (l, s, e) = crate::model::forward_eval(params, config, &dataset.images[i])?;
                Ok((
                    dataset.labels[i],
                    l.data().to_vec(),
                    s.data().to_vec(),
                    e.data().to_vec(),
                ))
            })
            .collect()
    });
    let mut logits = Vec::with_capacity(dataset.len());
    let (mut cl, mut cs, mut ce) = (0usize, 0usize, 0usize);
    for r in outputs {
        let (label, l, s, e) = r?;
        cl += (argmax(&l) == label) as usize;
        cs += (argmax(&s) == label) as usize;
        ce += (argmax(&e) == label) as usize;
        logits.push((label, l, s, e));
    }
    let n = dataset.len().max(1) as f64;
    Ok(EvalReport {
        acc_large: cl as f64 / n,
        acc_small: cs as f64 / n,
        acc_ensemble: ce as f64 / n,
        logits,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
