use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::sft_loss;
use crate::model::{BoundModel, ModelConfig, ModelState, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tasks::{evaluate, EvalResult, Example, Split, TaskData};

use super::supervised_sequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    /// Peak learning rate, cosine-decayed over `max_epochs` down to
    /// `lr * final_lr_fraction`.
    pub lr: f64,
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Every old task must reach this validation exact match.
    pub threshold: f64,
    /// Validation examples per task scored after each epoch (all if absent).
    pub eval_limit: Option<usize>,
    /// Repeat smaller tasks' training sets so each task contributes as many
    /// items per epoch as the largest one.
    pub balance_tasks: bool,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Consecutive epochs every task must stay at or above the threshold.
    pub patience: usize,
    /// Fresh initializations tried after an attempt exhausts `max_epochs`.
    pub restarts: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            final_lr_fraction: 0.1,
            weight_decay: 0.3,
            batch_size: 16,
            max_epochs: 100,
            threshold: 0.9,
            eval_limit: None,
            balance_tasks: true,
            clip_norm: Some(1.0),
            patience: 3,
            restarts: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupEpoch {
    /// 0 for the first initialization, k for the k-th restart.
    pub attempt: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: Vec<EvalResult>,
}

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub model: ModelState,
    pub curve: Vec<WarmupEpoch>,
}

/// The last `TAIL` epochs of every attempt.
fn curve_summary(curve: &[WarmupEpoch]) -> String {
    const TAIL: usize = 3;
    curve
        .iter()
        .enumerate()
        .filter(|(i, e)| curve.get(i + TAIL).is_none_or(|later| later.attempt != e.attempt))
        .map(|(_, e)| {
            let em: Vec<String> = e
                .validation
                .iter()
                .map(|r| format!("{}={:.3}", r.task, r.exact_match))
                .collect();
            format!("[{}.{} loss={:.4} {}]", e.attempt, e.epoch, e.mean_loss, em.join(" "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trains every base weight on the old tasks until each reaches the
/// validation threshold, restarting from a fresh initialization when an
/// attempt runs out of epochs. The main adapter is left at its zero-product
/// init.
pub fn warmup(model_cfg: &ModelConfig, old_tasks: &[TaskData], cfg: &WarmupConfig, seed: u64) -> Result<WarmupOutcome> {
    warmup_with(model_cfg, old_tasks, cfg, seed, |_| {})
}

/// [`warmup`] with a callback after every epoch's validation.
pub fn warmup_with(
    model_cfg: &ModelConfig,
    old_tasks: &[TaskData],
    cfg: &WarmupConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&WarmupEpoch),
) -> Result<WarmupOutcome> {
    let largest = old_tasks.iter().map(|d| d.train.len()).max().unwrap_or(0);
    let examples: Vec<_> = old_tasks
        .iter()
        .flat_map(|d| {
            let n = if cfg.balance_tasks { largest } else { d.train.len() };
            d.train.iter().cycle().take(n)
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::Empty("old-task training data"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.patience == 0 {
        return Err(Error::Config("warmup batch_size, max_epochs and patience must be positive".into()));
    }
    if cfg.patience > cfg.max_epochs {
        return Err(Error::Config(format!(
            "warmup patience {} exceeds max_epochs {}",
            cfg.patience, cfg.max_epochs
        )));
    }
    if !(0.0..=1.0).contains(&cfg.final_lr_fraction) {
        return Err(Error::Config("warmup final_lr_fraction must lie in [0, 1]".into()));
    }
    let mut curve = Vec::new();
    for attempt in 0..=cfg.restarts {
        if let Some(model) = warmup_attempt(model_cfg, &examples, old_tasks, cfg, seed, attempt, &mut curve, &mut on_epoch)? {
            return Ok(WarmupOutcome { model, curve });
        }
    }
    Err(Error::WarmupFailed {
        threshold: cfg.threshold,
        epochs: cfg.max_epochs,
        attempts: cfg.restarts + 1,
        curve: curve_summary(&curve),
    })
}

fn epoch_lr(cfg: &WarmupConfig, epoch: usize) -> f64 {
    let progress = if cfg.max_epochs > 1 { (epoch - 1) as f64 / (cfg.max_epochs - 1) as f64 } else { 0.0 };
    let f = cfg.final_lr_fraction;
    cfg.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[allow(clippy::too_many_arguments)]
fn warmup_attempt(
    model_cfg: &ModelConfig,
    examples: &[&Example],
    old_tasks: &[TaskData],
    cfg: &WarmupConfig,
    seed: u64,
    attempt: usize,
    curve: &mut Vec<WarmupEpoch>,
    on_epoch: &mut dyn FnMut(&WarmupEpoch),
) -> Result<Option<ModelState>> {
    let label = |what: &str| if attempt == 0 { format!("warmup.{what}") } else { format!("warmup.{what}.{attempt}") };
    let mut model = ModelState::init(model_cfg.clone(), rng::derive_seed(seed, &label("init")))?;
    let mut opt: AdamW<String> = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut order_rng = rng::stream(seed, &label("order"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut streak = 0;

    for epoch in 1..=cfg.max_epochs {
        opt.config.lr = epoch_lr(cfg, epoch);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let (input, targets, mask) = supervised_sequence(examples[i]);
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &model, Trainable::Base);
                let logits = bound.forward(&mut tape, &input, None)?;
                let loss = sft_loss(&mut tape, logits, &targets, &mask)?;
                loss_sum += tape.value(loss).item();
                let scaled = tape.mul_scalar(loss, 1.0 / batch.len() as f64);
                let g = tape.backward(scaled)?;
                for (name, v) in bound.base_vars() {
                    if let Some(gv) = g.get(v) {
                        let acc = grads.entry(name).or_insert_with(|| vec![0.0; gv.len()]);
                        acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                    }
                }
            }
            let norm = grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if norm.is_finite() {
                if let Some(c) = cfg.clip_norm.filter(|c| norm > *c) {
                    let s = c / norm;
                    grads.values_mut().flatten().for_each(|x| *x *= s);
                }
                for (name, g) in &grads {
                    let p = model.base.get_mut(name).expect("gradient names come from the model");
                    opt.step(name, p.data_mut(), g);
                }
            }
        }
        let validation = old_tasks
            .iter()
            .map(|d| evaluate(&model, d, Split::Validation, cfg.eval_limit))
            .collect::<Result<Vec<_>>>()?;
        if validation.iter().all(|r| r.exact_match >= cfg.threshold) {
            streak += 1;
        } else {
            streak = 0;
        }
        curve.push(WarmupEpoch {
            attempt,
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            validation,
        });
        on_epoch(curve.last().expect("just pushed"));
        if streak >= cfg.patience {
            return Ok(Some(model));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_suite, TaskKind, TaskRole, TaskSpec};

    fn old_tasks() -> Vec<TaskData> {
        let spec = |name: &str, kind| TaskSpec {
            train: 8,
            validation: 4,
            test: 4,
            max_len: 4,
            ..TaskSpec::new(name, kind, TaskRole::Old)
        };
        generate_suite(&[spec("modadd", TaskKind::ModAdd), spec("copy", TaskKind::Copy)], 2).unwrap()
    }

    fn model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            adapter_rank: 2,
            ..ModelConfig::default()
        }
    }

    fn quick(threshold: f64, restarts: usize) -> WarmupConfig {
        WarmupConfig {
            max_epochs: 2,
            batch_size: 4,
            threshold,
            patience: 1,
            restarts,
            ..WarmupConfig::default()
        }
    }

    #[test]
    fn stops_once_the_threshold_holds() {
        let o = warmup(&model_cfg(), &old_tasks(), &quick(0.0, 2), 4).unwrap();
        assert_eq!(o.curve.len(), 1);
        assert_eq!(o.curve[0].attempt, 0);
        assert!(o.model.adapter.values().all(|a| a.a.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn restarts_use_fresh_streams_and_report_every_attempt() {
        let err = warmup(&model_cfg(), &old_tasks(), &quick(1.1, 2), 4).unwrap_err();
        let Error::WarmupFailed { attempts, curve, .. } = &err else { panic!("{err}") };
        assert_eq!(*attempts, 3);
        assert!(curve.contains("[2.2 "), "{curve}");

        let long = WarmupConfig { max_epochs: 5, ..quick(1.1, 0) };
        let Err(Error::WarmupFailed { curve, .. }) = warmup(&model_cfg(), &old_tasks(), &long, 4) else { panic!() };
        assert_eq!(curve.matches('[').count(), 3);
        assert!(curve.starts_with("[0.3 "), "{curve}");

        let mut seen = Vec::new();
        let _ = warmup_with(&model_cfg(), &old_tasks(), &quick(1.1, 1), 4, |e| seen.push((e.attempt, e.epoch, e.mean_loss)));
        assert_eq!(seen.iter().map(|s| (s.0, s.1)).collect::<Vec<_>>(), [(0, 1), (0, 2), (1, 1), (1, 2)]);
        assert_ne!(seen[0].2, seen[2].2);
    }

    #[test]
    fn learning_rate_follows_a_cosine_from_peak_to_floor() {
        let cfg = WarmupConfig { lr: 2.0, final_lr_fraction: 0.25, max_epochs: 5, ..WarmupConfig::default() };
        let lrs: Vec<f64> = (1..=5).map(|e| epoch_lr(&cfg, e)).collect();
        assert_eq!(lrs[0], 2.0);
        assert!((lrs[2] - 1.25).abs() < 1e-15);
        assert!((lrs[4] - 0.5).abs() < 1e-15);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        let flat = WarmupConfig { final_lr_fraction: 1.0, ..cfg };
        assert!((1..=5).all(|e| epoch_lr(&flat, e) == 2.0));
    }

    #[test]
    fn is_deterministic_per_seed() {
        let a = warmup(&model_cfg(), &old_tasks(), &quick(0.0, 0), 7).unwrap();
        let b = warmup(&model_cfg(), &old_tasks(), &quick(0.0, 0), 7).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn rejects_zero_sizes() {
        for cfg in [
            WarmupConfig { patience: 0, ..quick(0.0, 0) },
            WarmupConfig { patience: 3, ..quick(0.0, 0) },
            WarmupConfig { final_lr_fraction: 1.5, ..quick(0.0, 0) },
        ] {
            assert!(matches!(warmup(&model_cfg(), &old_tasks(), &cfg, 0), Err(Error::Config(_))));
        }
        assert!(matches!(warmup(&model_cfg(), &[], &quick(0.0, 0), 0), Err(Error::Empty(_))));
    }
}
