//! Plain supervised fine-tuning written from scratch: its own batching,
//! gradient accumulation and Adam update.

use flashback_core::autodiff::Tape;
use flashback_core::losses::sft_loss;
use flashback_core::model::{BoundModel, ModelConfig, ModelState, Trainable};
use flashback_core::tasks::{generate_suite, Example, TaskData, TaskKind, TaskRole, TaskSpec};
use flashback_core::trainer::{epoch_order, RunConfig};

struct Adam {
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn update(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                self.m[k][i] = b1 * self.m[k][i] + (1.0 - b1) * g[i];
                self.v[k][i] = b2 * self.v[k][i] + (1.0 - b2) * g[i] * g[i];
                let mh = self.m[k][i] / (1.0 - b1.powi(self.t));
                let vh = self.v[k][i] / (1.0 - b2.powi(self.t));
                params[k][i] -= self.lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

fn teacher_forcing(e: &Example) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut full = e.prompt.clone();
    full.extend_from_slice(&e.answer);
    full.push(1);
    let n = full.len() - 1;
    let mask = (0..n).map(|t| t + 1 >= e.prompt.len()).collect();
    (full[..n].to_vec(), full[1..].to_vec(), mask)
}

/// Returns the per-item losses and the number of parameter updates.
pub fn reference_loop(model: &ModelState, data: &[TaskData], cfg: &RunConfig) -> (Vec<f64>, usize) {
    let items: Vec<&Example> = data.iter().filter(|d| d.spec.role == TaskRole::New).flat_map(|d| &d.train).collect();
    let mut model = model.clone();
    let window = cfg.batch_size * cfg.accumulation_steps;
    let mut adam = Adam { lr: cfg.learning_rate, m: vec![], v: vec![], t: 0 };
    let mut losses = Vec::new();
    let mut updates = 0;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(items.len(), cfg.seed, epoch);
        for chunk in order.chunks(window) {
            let mut grads: Vec<Vec<f64>> = model.trainable_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            for &i in chunk {
                let (input, targets, mask) = teacher_forcing(items[i]);
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &model, Trainable::Adapter);
                let logits = bound.forward(&mut tape, &input, None).unwrap();
                let loss = sft_loss(&mut tape, logits, &targets, &mask).unwrap();
                losses.push(tape.value(loss).item());
                let scaled = tape.mul_scalar(loss, 1.0 / window as f64);
                let g = tape.backward(scaled).unwrap();
                for (acc, (_, v)) in grads.iter_mut().zip(bound.adapter_vars()) {
                    acc.iter_mut().zip(g.get(v).unwrap()).for_each(|(a, b)| *a += b);
                }
            }
            let mut params: Vec<Vec<f64>> = model.trainable_params().iter().map(|(_, t)| t.data().to_vec()).collect();
            adam.update(&mut params, &grads);
            for ((_, t), p) in model.trainable_params_mut().into_iter().zip(params) {
                t.data_mut().copy_from_slice(&p);
            }
            updates += 1;
        }
    }
    (losses, updates)
}

/// Small suite, model and all-flags-off config giving 200 updates.
pub fn fixture() -> (Vec<TaskData>, ModelState, RunConfig) {
    let spec = |name: &str, kind, role| TaskSpec {
        train: 10,
        validation: 4,
        test: 2,
        max_len: 4,
        ..TaskSpec::new(name, kind, role)
    };
    let data = generate_suite(
        &[
            spec("copy", TaskKind::Copy, TaskRole::Old),
            spec("reverse", TaskKind::Reverse, TaskRole::New),
            spec("modsub", TaskKind::ModSub, TaskRole::New),
        ],
        8,
    )
    .unwrap();
    let model = ModelState::init(
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            adapter_rank: 4,
            ..ModelConfig::default()
        },
        21,
    )
    .unwrap();
    let cfg = RunConfig {
        epochs: 40,
        accumulation_steps: 4,
        learning_rate: 1e-2,
        eval_limit: Some(1),
        seed: 6,
        ..RunConfig::sft()
    };
    (data, model, cfg)
}
