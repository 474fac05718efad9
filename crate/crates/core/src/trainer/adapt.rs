use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flashback::{build_flashbacks, replicate, verify_provenance, FlashbackItem};
use crate::gradproj::{pcgrad_pair, pcgrad_per_tensor, plain_sum, FlatGrad};
use crate::latent_bank::{assign_groups, mix_increments, BankConfig, LatentBank, LatentId, PromptEncoder, ENCODER_SEED};
use crate::losses::{combine, div_loss, sft_loss, LossBreakdown};
use crate::model::{BoundModel, Decoding, Generator, ModelState, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tasks::{evaluate, forgetting_metrics, EvalResult, Example, ForgettingReport, Split, TaskData, TaskRole};
use crate::vocab::Token;

use super::supervised_sequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcgradScope {
    /// One projection over the concatenation of every trainable tensor.
    Full,
    /// Independent projection per parameter tensor.
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcgradGranularity {
    /// Once per accumulation window on the two accumulated gradients.
    Window,
    /// Once per micro-batch, before accumulation.
    MicroBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Weight of the divergence term.
    pub alpha: f64,
    pub bank: BankConfig,
    /// Flashback prompts drawn per old task.
    pub flashbacks_per_task: usize,
    /// Nucleus mass for reference generation; ignored when `greedy_flashbacks` is set.
    pub flashback_top_p: f64,
    pub greedy_flashbacks: bool,
    /// Times each old-task item is repeated in the training set.
    pub replicate: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub accumulation_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_jtl: bool,
    pub use_pcgrad: bool,
    pub use_flashbacks: bool,
    /// Old-task items become supervised training pairs instead of flashbacks.
    pub replay_mode: bool,
    pub pcgrad_scope: PcgradScope,
    pub pcgrad_granularity: PcgradGranularity,
    /// Test examples scored per task at each evaluation (all if absent).
    pub eval_limit: Option<usize>,
    /// Use at most this many training examples per new task.
    pub new_train_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            bank: BankConfig::default(),
            flashbacks_per_task: 30,
            flashback_top_p: 0.8,
            greedy_flashbacks: false,
            replicate: 1,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            epochs: 3,
            accumulation_steps: 4,
            batch_size: 1,
            seed: 0,
            use_jtl: true,
            use_pcgrad: true,
            use_flashbacks: true,
            replay_mode: false,
            pcgrad_scope: PcgradScope::Full,
            pcgrad_granularity: PcgradGranularity::Window,
            eval_limit: None,
            new_train_limit: None,
        }
    }
}

impl RunConfig {
    /// Plain supervised fine-tuning on the new tasks only.
    pub fn sft() -> Self {
        Self {
            use_jtl: false,
            use_pcgrad: false,
            use_flashbacks: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("accumulation_steps", self.accumulation_steps),
            ("batch_size", self.batch_size),
            ("replicate", self.replicate),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.flashback_top_p > 0.0 && self.flashback_top_p <= 1.0) {
            return Err(Error::Config(format!("flashback_top_p must lie in (0, 1], got {}", self.flashback_top_p)));
        }
        self.bank.validate()
    }

    pub fn decoding(&self) -> Decoding {
        if self.greedy_flashbacks {
            Decoding::Greedy
        } else {
            Decoding::TopP(self.flashback_top_p)
        }
    }

    fn window(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }
}

/// One element of the merged training set.
#[derive(Clone, Debug)]
pub enum TrainItem {
    Supervised {
        example: Example,
        query: Vec<f64>,
        group: usize,
    },
    Flashback {
        item: Arc<FlashbackItem>,
        /// Frozen reference logits over the continuation rows.
        reference_logits: Arc<Tensor>,
        group: usize,
    },
}

impl TrainItem {
    pub fn group(&self) -> usize {
        match self {
            TrainItem::Supervised { group, .. } | TrainItem::Flashback { group, .. } => *group,
        }
    }

    pub fn query(&self) -> &[f64] {
        match self {
            TrainItem::Supervised { query, .. } => query,
            TrainItem::Flashback { item, .. } => &item.query,
        }
    }

    pub fn is_flashback(&self) -> bool {
        matches!(self, TrainItem::Flashback { .. })
    }
}

/// Identifies a trainable tensor: the `i`-th main-adapter tensor or the `j`-th
/// tensor of a latent task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Adapter(usize),
    Latent(LatentId, usize),
}

impl ParamKey {
    fn label(self) -> String {
        match self {
            ParamKey::Adapter(i) => format!("adapter[{i}]"),
            ParamKey::Latent(id, j) => format!("latent[{},{}][{j}]", id.group, id.slot),
        }
    }
}

/// Gradient sums keyed by tensor.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer(pub BTreeMap<ParamKey, Vec<f64>>);

impl GradBuffer {
    fn add(&mut self, key: ParamKey, g: &[f64]) {
        let acc = self.0.entry(key).or_insert_with(|| vec![0.0; g.len()]);
        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    fn add_all(&mut self, other: &GradBuffer) {
        for (k, g) in &other.0 {
            self.add(*k, g);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn clear(&mut self) {
        self.0.clear();
    }
}

/// SFT and DIV gradients of the current window, kept apart until the update.
#[derive(Clone, Debug, Default)]
pub struct Accumulators {
    pub sft: GradBuffer,
    pub div: GradBuffer,
    /// Already-combined gradients from micro-batch level surgery.
    pub combined: GradBuffer,
    micro_sft: GradBuffer,
    micro_div: GradBuffer,
}

impl Accumulators {
    pub fn is_empty(&self) -> bool {
        self.sft.is_empty() && self.div.is_empty() && self.combined.is_empty() && self.micro_sft.is_empty() && self.micro_div.is_empty()
    }
}

/// Loss-attribution and update counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub supervised_items: usize,
    pub flashback_items: usize,
    pub sft_on_supervised: usize,
    pub sft_on_flashback: usize,
    pub div_on_supervised: usize,
    pub div_on_flashback: usize,
    pub windows: usize,
    pub optimizer_steps: usize,
    pub skipped_non_finite: usize,
    pub pcgrad_conflicts: usize,
    pub uniform_fallback_mixes: usize,
}

/// Everything `jfa_step` needs that does not change within a window.
pub struct StepContext<'a> {
    pub config: &'a RunConfig,
    pub scale: f64,
}

/// Forward and backward for one training item. Gradients go to the SFT or DIV
/// buffer according to the item kind; only main-adapter and retrieved latent
/// tensors receive gradient.
pub fn jfa_step(
    model: &ModelState,
    bank: &LatentBank,
    item: &TrainItem,
    ctx: &StepContext<'_>,
    acc: &mut Accumulators,
    counters: &mut Counters,
    retrieved_log: &mut BTreeSet<LatentId>,
) -> Result<LossBreakdown> {
    let cfg = ctx.config;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, model, Trainable::Adapter);
    let mixed = if cfg.use_jtl {
        let retrieved = bank.retrieve(item.query(), item.group(), bank.config.top_k)?;
        let m = mix_increments(&mut tape, bank, &retrieved, true)?;
        if m.weights.fallback {
            counters.uniform_fallback_mixes += 1;
        }
        Some(m)
    } else {
        None
    };
    let increments = mixed.as_ref().map(|m| &m.increments);

    let (loss, weight, breakdown, into_div) = match item {
        TrainItem::Supervised { example, .. } => {
            counters.supervised_items += 1;
            counters.sft_on_supervised += 1;
            let (input, targets, mask) = supervised_sequence(example);
            let logits = bound.forward(&mut tape, &input, increments)?;
            let loss = sft_loss(&mut tape, logits, &targets, &mask)?;
            let v = tape.value(loss).item();
            (loss, ctx.scale, combine(Some(v), None, cfg.alpha)?, false)
        }
        TrainItem::Flashback { item, reference_logits, .. } => {
            counters.flashback_items += 1;
            counters.div_on_flashback += 1;
            let mut full = item.prompt.clone();
            full.extend_from_slice(&item.reference);
            let input = &full[..full.len() - 1];
            let start = item.prompt.len() - 1;
            let logits = bound.forward(&mut tape, input, increments)?;
            let cur = tape.slice(logits, 0, start, item.reference.len())?;
            let reference = tape.constant((**reference_logits).clone());
            let loss = div_loss(&mut tape, cur, reference)?;
            let v = tape.value(loss).item();
            (loss, ctx.scale * cfg.alpha, combine(None, Some(v), cfg.alpha)?, true)
        }
    };

    if weight == 0.0 {
        return Ok(breakdown);
    }
    let root = tape.mul_scalar(loss, weight);
    let grads = tape.backward(root)?;
    let buf = if into_div { &mut acc.micro_div } else { &mut acc.micro_sft };
    for (i, (_, v)) in bound.adapter_vars().into_iter().enumerate() {
        if let Some(g) = grads.get(v) {
            buf.add(ParamKey::Adapter(i), g);
        }
    }
    if let Some(m) = &mixed {
        for b in &m.bound {
            retrieved_log.insert(b.id);
            for (j, v) in b.vars.iter().enumerate() {
                if let Some(g) = grads.get(*v) {
                    buf.add(ParamKey::Latent(b.id, j), g);
                }
            }
        }
    }
    Ok(breakdown)
}

fn union_layout(a: &GradBuffer, b: &GradBuffer) -> Vec<(ParamKey, usize)> {
    let mut keys: BTreeMap<ParamKey, usize> = BTreeMap::new();
    for buf in [a, b] {
        for (k, g) in &buf.0 {
            keys.insert(*k, g.len());
        }
    }
    keys.into_iter().collect()
}

fn pick<'a>(
    buf: &'a GradBuffer,
    layout: &[(ParamKey, usize)],
    labels: &'a [String],
    zeros: &'a [Vec<f64>],
) -> Vec<(&'a str, &'a [f64])> {
    layout
        .iter()
        .zip(labels)
        .zip(zeros)
        .map(|(((k, _), l), z)| (l.as_str(), buf.0.get(k).map_or(z.as_slice(), |g| g.as_slice())))
        .collect()
}

/// Projected (or plainly summed) `sft + div` over the union of their keys.
fn merge(sft: &GradBuffer, div: &GradBuffer, cfg: &RunConfig, counters: &mut Counters) -> Result<GradBuffer> {
    let layout = union_layout(sft, div);
    let labels: Vec<String> = layout.iter().map(|(k, _)| k.label()).collect();
    let zeros: Vec<Vec<f64>> = layout.iter().map(|(_, n)| vec![0.0; *n]).collect();
    let fs = FlatGrad::flatten(&pick(sft, &layout, &labels, &zeros));
    let fd = FlatGrad::flatten(&pick(div, &layout, &labels, &zeros));
    let out = if cfg.use_pcgrad {
        if fs.dot(&fd) < 0.0 {
            counters.pcgrad_conflicts += 1;
        }
        match cfg.pcgrad_scope {
            PcgradScope::Full => pcgrad_pair(&fs, &fd)?,
            PcgradScope::PerTensor => pcgrad_per_tensor(&fs, &fd)?,
        }
    } else {
        plain_sum(&fs, &fd)?
    };
    let values = out.unflatten(&out.layout.clone())?;
    Ok(GradBuffer(
        layout.iter().zip(values).map(|((k, _), (_, v))| (*k, v)).collect(),
    ))
}

/// Closes a micro-batch: with micro-batch surgery the pair is projected now,
/// otherwise the two gradients move into the window buffers unchanged.
pub fn end_micro_batch(acc: &mut Accumulators, cfg: &RunConfig, counters: &mut Counters) -> Result<()> {
    if cfg.use_pcgrad && cfg.pcgrad_granularity == PcgradGranularity::MicroBatch {
        if !(acc.micro_sft.is_empty() && acc.micro_div.is_empty()) {
            let merged = merge(&acc.micro_sft, &acc.micro_div, cfg, counters)?;
            acc.combined.add_all(&merged);
        }
    } else {
        acc.sft.add_all(&acc.micro_sft);
        acc.div.add_all(&acc.micro_div);
    }
    acc.micro_sft.clear();
    acc.micro_div.clear();
    Ok(())
}

/// Optimizer state for the main adapter and every touched latent task.
pub struct Optimizer {
    inner: AdamW<ParamKey>,
}

impl Optimizer {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            inner: AdamW::new(AdamWConfig {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            }),
        }
    }

    pub fn tracked(&self) -> usize {
        self.inner.tracked()
    }

    pub fn has_state(&self, key: ParamKey) -> bool {
        self.inner.has_state(&key)
    }
}

/// Applies surgery (when enabled) to the window's two gradients, sums them
/// and takes one optimizer step over every tensor that received gradient.
/// Returns false when the step was skipped for a non-finite gradient.
pub fn optimizer_update(
    acc: &mut Accumulators,
    model: &mut ModelState,
    bank: &mut LatentBank,
    opt: &mut Optimizer,
    cfg: &RunConfig,
    counters: &mut Counters,
) -> Result<bool> {
    end_micro_batch(acc, cfg, counters)?;
    counters.windows += 1;
    let mut total = merge(&acc.sft, &acc.div, cfg, counters)?;
    total.add_all(&acc.combined);
    acc.sft.clear();
    acc.div.clear();
    acc.combined.clear();
    if total.is_empty() {
        return Ok(true);
    }
    if !total.0.values().all(|g| g.iter().all(|x| x.is_finite())) {
        counters.skipped_non_finite += 1;
        return Ok(false);
    }
    let mut adapter = model.trainable_params_mut();
    let wanted: BTreeSet<LatentId> = total
        .0
        .keys()
        .filter_map(|k| match k {
            ParamKey::Latent(id, _) => Some(*id),
            ParamKey::Adapter(_) => None,
        })
        .collect();
    let mut bank_tensors: BTreeMap<LatentId, Vec<&mut Tensor>> = BTreeMap::new();
    {
        for (gi, group) in bank.groups.iter_mut().enumerate() {
            for (si, task) in group.iter_mut().enumerate() {
                let id = LatentId { group: gi, slot: si };
                if wanted.contains(&id) {
                    let mut by_name: BTreeMap<&String, _> = task.increments.iter_mut().collect();
                    let mut ts = Vec::new();
                    for t in &bank.targets {
                        let lr = by_name.remove(&t.name).expect("every latent covers every target");
                        ts.push(&mut lr.a);
                        ts.push(&mut lr.b);
                    }
                    bank_tensors.insert(id, ts);
                }
            }
        }
    }
    for (key, g) in &total.0 {
        let param: &mut Tensor = match *key {
            ParamKey::Adapter(i) => adapter[i].1,
            ParamKey::Latent(id, j) => bank_tensors.get_mut(&id).expect("collected above")[j],
        };
        opt.inner.step(key, param.data_mut(), g);
    }
    counters.optimizer_steps += 1;
    Ok(true)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("adapt.order.{epoch}")));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_sft: Option<f64>,
    pub mean_div: Option<f64>,
    pub evaluation: Vec<EvalResult>,
    pub mean_old: f64,
    pub mean_new: f64,
    /// Latent tasks retrieved with positive weight by items whose loss was backpropagated.
    pub retrieved_latents: usize,
    /// Latent tasks with a nonzero accumulated gradient this epoch.
    pub latents_with_gradient: usize,
}

/// Invariants checked during a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantChecks {
    pub reference_probe_before: String,
    pub reference_probe_after: String,
    pub keys_hash_before: String,
    pub keys_hash_after: String,
    pub provenance_mismatches: usize,
    /// Per epoch: the latents with gradient are exactly the retrieved ones.
    pub routing_consistent: bool,
    /// No SFT on flashbacks and no divergence on supervised items.
    pub attribution_clean: bool,
}

impl InvariantChecks {
    pub fn all_hold(&self) -> bool {
        self.reference_probe_before == self.reference_probe_after
            && self.keys_hash_before == self.keys_hash_after
            && self.provenance_mismatches == 0
            && self.routing_consistent
            && self.attribution_clean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub supervised_items: usize,
    pub flashback_items: usize,
    pub replay_items: usize,
    pub before: Vec<EvalResult>,
    pub epochs: Vec<EpochMetrics>,
    pub forgetting: ForgettingReport,
    pub counters: Counters,
    pub invariants: InvariantChecks,
    /// Combined loss of every item in training order.
    pub item_losses: Vec<f64>,
    pub model_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub model: ModelState,
    pub bank: LatentBank,
}

fn probe_hash(reference: &ModelState, prompts: &[Vec<Token>]) -> Result<String> {
    let mut g = Generator::new(reference);
    let mut bytes = Vec::new();
    for p in prompts {
        bytes.extend_from_slice(&g.logits(p)?.to_le_bytes());
    }
    Ok(rng::sha256_hex(&bytes))
}

fn evaluate_all(model: &ModelState, tasks: &[TaskData], limit: Option<usize>) -> Result<Vec<EvalResult>> {
    tasks.iter().map(|d| evaluate(model, d, Split::Test, limit)).collect()
}

fn role_mean(results: &[EvalResult], role: TaskRole) -> f64 {
    let xs: Vec<f64> = results.iter().filter(|r| r.role == role).map(|r| r.exact_match).collect();
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Flashback set for a run: built from the reference model's old-task
/// validation prompts, or empty when the run uses none.
pub fn prepare_flashbacks(reference: &ModelState, tasks: &[TaskData], cfg: &RunConfig) -> Result<Vec<FlashbackItem>> {
    if !cfg.use_flashbacks || cfg.replay_mode {
        return Ok(Vec::new());
    }
    let old: Vec<TaskData> = tasks.iter().filter(|d| d.spec.role == TaskRole::Old).cloned().collect();
    let encoder = PromptEncoder::new(reference.config.vocab_size, cfg.bank.key_dim, ENCODER_SEED);
    build_flashbacks(
        &old,
        cfg.flashbacks_per_task,
        reference,
        cfg.decoding(),
        &encoder,
        rng::derive_seed(cfg.seed, "flashbacks"),
    )
}

/// Builds the merged training set: new-task pairs plus the old-task items
/// (flashbacks, or supervised replay pairs), each with a query and a group.
fn build_items(
    reference: &ModelState,
    tasks: &[TaskData],
    flashbacks: &[FlashbackItem],
    cfg: &RunConfig,
    encoder: &PromptEncoder,
) -> Result<Vec<TrainItem>> {
    let mut supervised: Vec<Example> = Vec::new();
    for d in tasks.iter().filter(|d| d.spec.role == TaskRole::New) {
        let n = cfg.new_train_limit.map_or(d.train.len(), |l| l.min(d.train.len()));
        supervised.extend(d.train[..n].iter().cloned());
    }
    if supervised.is_empty() {
        return Err(Error::Empty("new-task training data"));
    }
    let mut replay: Vec<Example> = Vec::new();
    if cfg.use_flashbacks && cfg.replay_mode {
        for d in tasks.iter().filter(|d| d.spec.role == TaskRole::Old) {
            if d.train.len() < cfg.flashbacks_per_task {
                return Err(Error::PoolTooSmall {
                    task: d.spec.name.clone(),
                    need: cfg.flashbacks_per_task,
                    have: d.train.len(),
                });
            }
            let mut r = rng::stream(cfg.seed, &format!("replay.pick.{}", d.spec.name));
            let mut picks = rand::seq::index::sample(&mut r, d.train.len(), cfg.flashbacks_per_task).into_vec();
            picks.sort_unstable();
            replay.extend(picks.into_iter().map(|i| d.train[i].clone()));
        }
    }
    let n_unique = supervised.len() + replay.len() + flashbacks.len();
    let groups = assign_groups(n_unique, cfg.bank.groups, cfg.seed)?;
    let mut groups = groups.into_iter();

    let mut items = Vec::with_capacity(n_unique * cfg.replicate);
    for e in supervised {
        items.push(TrainItem::Supervised {
            query: encoder.encode(&e.prompt)?,
            example: e,
            group: groups.next().expect("one group per item"),
        });
    }
    for e in replay {
        let item = TrainItem::Supervised {
            query: encoder.encode(&e.prompt)?,
            example: e,
            group: groups.next().expect("one group per item"),
        };
        items.extend(std::iter::repeat_n(item, cfg.replicate));
    }
    let mut generator = Generator::new(reference);
    let mut with_groups = flashbacks.to_vec();
    for f in with_groups.iter_mut() {
        f.group = Some(groups.next().expect("one group per item"));
    }
    let shared = replicate(&with_groups, cfg.replicate)?;
    let mut cache: BTreeMap<*const FlashbackItem, Arc<Tensor>> = BTreeMap::new();
    for f in shared {
        let key = Arc::as_ptr(&f);
        let reference_logits = match cache.get(&key) {
            Some(t) => t.clone(),
            None => {
                let mut full = f.prompt.clone();
                full.extend_from_slice(&f.reference);
                let logits = generator.logits(&full[..full.len() - 1])?;
                let start = f.prompt.len() - 1;
                let v = logits.cols();
                let rows = f.reference.len();
                let data = logits.data()[start * v..(start + rows) * v].to_vec();
                let t = Arc::new(Tensor::new(vec![rows, v], data)?);
                cache.insert(key, t.clone());
                t
            }
        };
        items.push(TrainItem::Flashback {
            group: f.group.expect("assigned above"),
            item: f,
            reference_logits,
        });
    }
    Ok(items)
}

/// Joint flashback adaptation of a copy of `reference` on the new tasks.
/// `flashbacks` must come from [`prepare_flashbacks`] (or an equivalent file)
/// for the same reference model; their provenance is re-checked first.
pub fn adapt(
    reference: &ModelState,
    tasks: &[TaskData],
    flashbacks: &[FlashbackItem],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let ctx_err = |e: Error| e.in_run(format!("adaptation run (seed {})", cfg.seed));
    let encoder = PromptEncoder::new(reference.config.vocab_size, cfg.bank.key_dim, ENCODER_SEED);
    let provenance_mismatches = verify_provenance(flashbacks, reference, cfg.decoding()).map_err(ctx_err)?;
    if provenance_mismatches > 0 {
        return Err(ctx_err(Error::Config(format!(
            "{provenance_mismatches} flashback references do not regenerate from the reference model"
        ))));
    }
    let items = build_items(reference, tasks, flashbacks, cfg, &encoder).map_err(ctx_err)?;
    run_items(reference, tasks, items, cfg, provenance_mismatches, &mut on_epoch).map_err(ctx_err)
}

fn run_items(
    reference: &ModelState,
    tasks: &[TaskData],
    items: Vec<TrainItem>,
    cfg: &RunConfig,
    provenance_mismatches: usize,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<RunOutcome> {
    let mut model = reference.clone();
    let mut bank = LatentBank::init(cfg.bank.clone(), &reference.targets(), rng::derive_seed(cfg.seed, "bank"))?;
    let keys_hash_before = bank.keys_hash();
    let probe: Vec<Vec<Token>> = tasks
        .iter()
        .filter(|d| d.spec.role == TaskRole::Old)
        .flat_map(|d| d.validation.iter().take(4).map(|e| e.full_sequence()))
        .collect();
    let reference_probe_before = probe_hash(reference, &probe)?;

    let before = evaluate_all(reference, tasks, cfg.eval_limit)?;
    let mut opt = Optimizer::new(cfg);
    let mut counters = Counters::default();
    let mut acc = Accumulators::default();
    let mut item_losses = Vec::with_capacity(items.len() * cfg.epochs);
    let mut epochs = Vec::new();
    let mut routing_consistent = true;
    let scale = 1.0 / cfg.window() as f64;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(items.len(), cfg.seed, epoch);
        let mut retrieved = BTreeSet::new();
        let mut with_grad = BTreeSet::new();
        let (mut sft_sum, mut sft_n, mut div_sum, mut div_n) = (0.0, 0usize, 0.0, 0usize);
        let ctx = StepContext { config: cfg, scale };
        for (pos, &i) in order.iter().enumerate() {
            let item = &items[i];
            let mut log = BTreeSet::new();
            let b = jfa_step(&model, &bank, item, &ctx, &mut acc, &mut counters, &mut log)?;
            retrieved.extend(log);
            if let Some(s) = b.sft {
                sft_sum += s;
                sft_n += 1;
            }
            if let Some(d) = b.div {
                div_sum += d;
                div_n += 1;
            }
            item_losses.push(b.combined);
            let done = pos + 1;
            if done % cfg.batch_size == 0 && done % cfg.window() != 0 {
                end_micro_batch(&mut acc, cfg, &mut counters)?;
            }
            if done % cfg.window() == 0 || done == order.len() {
                end_micro_batch(&mut acc, cfg, &mut counters)?;
                for buf in [&acc.sft, &acc.div, &acc.combined] {
                    for (k, g) in &buf.0 {
                        if let ParamKey::Latent(id, _) = k {
                            if g.iter().any(|x| *x != 0.0) {
                                with_grad.insert(*id);
                            }
                        }
                    }
                }
                optimizer_update(&mut acc, &mut model, &mut bank, &mut opt, cfg, &mut counters)?;
            }
        }
        routing_consistent &= retrieved == with_grad;
        let evaluation = evaluate_all(&model, tasks, cfg.eval_limit)?;
        let m = EpochMetrics {
            epoch,
            mean_sft: (sft_n > 0).then(|| sft_sum / sft_n as f64),
            mean_div: (div_n > 0).then(|| div_sum / div_n as f64),
            mean_old: role_mean(&evaluation, TaskRole::Old),
            mean_new: role_mean(&evaluation, TaskRole::New),
            evaluation,
            retrieved_latents: retrieved.len(),
            latents_with_gradient: with_grad.len(),
        };
        on_epoch(&m);
        epochs.push(m);
    }

    let after = &epochs.last().expect("at least one epoch").evaluation;
    let forgetting = forgetting_metrics(&before, after)?;
    let invariants = InvariantChecks {
        reference_probe_before,
        reference_probe_after: probe_hash(reference, &probe)?,
        keys_hash_before,
        keys_hash_after: bank.keys_hash(),
        provenance_mismatches,
        routing_consistent,
        attribution_clean: counters.sft_on_flashback == 0 && counters.div_on_supervised == 0,
    };
    let flashback_items = items.iter().filter(|i| i.is_flashback()).count();
    let supervised_items = items.len() - flashback_items;
    let new_items: usize = tasks
        .iter()
        .filter(|d| d.spec.role == TaskRole::New)
        .map(|d| cfg.new_train_limit.map_or(d.train.len(), |l| l.min(d.train.len())))
        .sum();
    let report = RunReport {
        config: cfg.clone(),
        supervised_items,
        flashback_items,
        replay_items: supervised_items - new_items,
        before,
        forgetting,
        counters,
        invariants,
        item_losses,
        model_hash: model.content_hash(),
        epochs,
    };
    Ok(RunOutcome { report, model, bank })
}
