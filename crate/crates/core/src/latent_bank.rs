//! Latent-task store: frozen unit keys in `C` groups of `Q`, each paired with a
//! trainable low-rank increment per target matrix.
//!
//! Every training item carries a query embedding and a group id. Retrieval
//! scores the item's group by cosine similarity, and the top `k` increments
//! are mixed with weights `max(sim, 0) / Σ max(sim, 0)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{Factor, Increment, IncrementSet, LowRank, Target};
use crate::rng;
use crate::vocab::Token;

/// Seed of the frozen prompt-encoder table. Independent of run seeds so that
/// query embeddings are comparable across runs.
pub const ENCODER_SEED: u64 = 0x000e_c0de;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Number of groups `C`.
    pub groups: usize,
    /// Keys per group `Q`.
    pub keys_per_group: usize,
    /// Neighbours retrieved per item `k`.
    pub top_k: usize,
    /// Key and query dimension `c`.
    pub key_dim: usize,
    /// Rank `r` of every latent increment.
    pub rank: usize,
    pub init_std: f64,
    /// Score all `C·Q` keys instead of the item's group only.
    pub global_retrieval: bool,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            groups: 16,
            keys_per_group: 12,
            top_k: 2,
            key_dim: 64,
            rank: 8,
            init_std: 0.02,
            global_retrieval: false,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.keys_per_group == 0 || self.key_dim == 0 || self.rank == 0 {
            return Err(Error::Config("bank counts and dimensions must be positive".into()));
        }
        if self.keys_per_group > self.key_dim {
            return Err(Error::Config(format!(
                "bank.keys_per_group ({}) exceeds bank.key_dim ({}): at most {} mutually orthogonal keys fit in that space",
                self.keys_per_group, self.key_dim, self.key_dim
            )));
        }
        if self.top_k == 0 || self.top_k > self.keys_per_group {
            return Err(Error::Config(format!(
                "bank.top_k ({}) must lie in 1..={}",
                self.top_k, self.keys_per_group
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("bank.init_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn total_keys(&self) -> usize {
        self.groups * self.keys_per_group
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LatentId {
    pub group: usize,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTask {
    pub key: Vec<f64>,
    /// Keyed by target name.
    pub increments: BTreeMap<String, LowRank>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank {
    pub config: BankConfig,
    pub targets: Vec<Target>,
    pub groups: Vec<Vec<LatentTask>>,
}

/// Orthonormal rows from a Gaussian matrix by modified Gram-Schmidt with one
/// re-orthogonalization pass.
fn orthonormal_rows<R: rand::Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v = Tensor::randn(&[dim], 1.0, rng).into_data();
        for _ in 0..2 {
            for u in &rows {
                let d = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        rows.push(v);
    }
    rows
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

impl LatentBank {
    /// Builds a fresh bank: per-group orthonormal keys, `A = 0`, Gaussian `B`.
    pub fn init(config: BankConfig, targets: &[Target], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut key_rng = rng::stream(seed, "bank.keys");
        let mut inc_rng = rng::stream(seed, "bank.increments");
        let mut groups = Vec::with_capacity(config.groups);
        for _ in 0..config.groups {
            let keys = orthonormal_rows(config.keys_per_group, config.key_dim, &mut key_rng);
            let tasks = keys
                .into_iter()
                .map(|key| LatentTask {
                    key,
                    increments: targets
                        .iter()
                        .map(|t| (t.name.clone(), LowRank::init(t, config.rank, config.init_std, &mut inc_rng)))
                        .collect(),
                })
                .collect();
            groups.push(tasks);
        }
        Ok(Self {
            config,
            targets: targets.to_vec(),
            groups,
        })
    }

    pub fn task(&self, id: LatentId) -> &LatentTask {
        &self.groups[id.group][id.slot]
    }

    pub fn task_mut(&mut self, id: LatentId) -> &mut LatentTask {
        &mut self.groups[id.group][id.slot]
    }

    pub fn ids(&self) -> impl Iterator<Item = LatentId> + '_ {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, tasks)| (0..tasks.len()).map(move |s| LatentId { group: g, slot: s }))
    }

    /// Parameter names and tensors of one latent task in canonical order:
    /// targets in model order, `A` before `B`.
    pub fn params_of(&self, id: LatentId) -> Vec<(String, &Tensor)> {
        let task = self.task(id);
        let mut out = Vec::with_capacity(2 * self.targets.len());
        for t in &self.targets {
            let lr = &task.increments[&t.name];
            out.push((format!("bank.{}.{}.{}.A", id.group, id.slot, t.name), &lr.a));
            out.push((format!("bank.{}.{}.{}.B", id.group, id.slot, t.name), &lr.b));
        }
        out
    }

    /// Mutable tensors of one latent task, same order as [`Self::params_of`].
    pub fn params_of_mut(&mut self, id: LatentId) -> Vec<&mut Tensor> {
        let order: Vec<String> = self.targets.iter().map(|t| t.name.clone()).collect();
        let task = &mut self.groups[id.group][id.slot];
        let mut by_name: BTreeMap<&String, &mut LowRank> = task.increments.iter_mut().collect();
        let mut out = Vec::with_capacity(2 * order.len());
        for name in &order {
            let lr = by_name.remove(name).expect("every latent covers every target");
            out.push(&mut lr.a);
            out.push(&mut lr.b);
        }
        out
    }

    /// SHA-256 over all key vectors in id order.
    pub fn keys_hash(&self) -> String {
        let mut bytes = Vec::new();
        for g in &self.groups {
            for t in g {
                for x in &t.key {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        rng::sha256_hex(&bytes)
    }

    /// Top-`k` keys by cosine similarity, descending, ties to the lower index.
    /// Scores only `group` unless global retrieval is configured.
    pub fn retrieve(&self, q: &[f64], group: usize, k: usize) -> Result<Vec<Retrieved>> {
        if group >= self.config.groups {
            return Err(Error::Config(format!("group {group} out of range 0..{}", self.config.groups)));
        }
        if q.len() != self.config.key_dim {
            return Err(Error::Shape(format!(
                "query of length {} against keys of dimension {}",
                q.len(),
                self.config.key_dim
            )));
        }
        let candidates: Vec<LatentId> = if self.config.global_retrieval {
            self.ids().collect()
        } else {
            (0..self.groups[group].len()).map(|slot| LatentId { group, slot }).collect()
        };
        if k == 0 || k > candidates.len() {
            return Err(Error::Config(format!("cannot retrieve {k} of {} keys", candidates.len())));
        }
        let mut scored: Vec<Retrieved> = candidates
            .into_iter()
            .map(|id| Retrieved {
                id,
                similarity: cosine(q, &self.task(id).key),
            })
            .collect();
        scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Dense mixed increment per target, computed without a tape.
    pub fn mixed_dense(&self, retrieved: &[Retrieved]) -> Result<BTreeMap<String, Tensor>> {
        let mix = MixWeights::from_retrieved(retrieved)?;
        let mut out = BTreeMap::new();
        for t in &self.targets {
            let mut acc = Tensor::zeros(&[t.out, t.inp]);
            for (id, w) in &mix.weights {
                if *w > 0.0 {
                    let p = self.task(*id).increments[&t.name].product();
                    acc = acc.add(&p.scale(*w))?;
                }
            }
            out.insert(t.name.clone(), acc);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: LatentId,
    pub similarity: f64,
}

/// Normalized mixing weights, sorted by latent id.
#[derive(Clone, Debug, PartialEq)]
pub struct MixWeights {
    pub weights: Vec<(LatentId, f64)>,
    /// True when every clamped similarity was zero and uniform weights were used.
    pub fallback: bool,
}

impl MixWeights {
    pub fn from_retrieved(retrieved: &[Retrieved]) -> Result<Self> {
        if retrieved.is_empty() {
            return Err(Error::Empty("retrieved latent list"));
        }
        let mut sorted = retrieved.to_vec();
        sorted.sort_by_key(|r| r.id);
        let clamped: Vec<f64> = sorted.iter().map(|r| r.similarity.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        let (weights, fallback) = if total > 0.0 && total.is_finite() {
            (clamped.iter().map(|w| w / total).collect::<Vec<_>>(), false)
        } else {
            (vec![1.0 / sorted.len() as f64; sorted.len()], true)
        };
        Ok(Self {
            weights: sorted.iter().map(|r| r.id).zip(weights).collect(),
            fallback,
        })
    }

    /// Latents that actually contribute (positive weight).
    pub fn active(&self) -> impl Iterator<Item = (LatentId, f64)> + '_ {
        self.weights.iter().copied().filter(|(_, w)| *w > 0.0)
    }
}

/// Latent factors placed on a tape for one item.
#[derive(Clone, Debug)]
pub struct BoundLatent {
    pub id: LatentId,
    /// Vars in [`LatentBank::params_of`] order.
    pub vars: Vec<Var>,
}

/// Mixed increment for one item plus the bound latent parameters it uses.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub increments: IncrementSet,
    pub weights: MixWeights,
    pub bound: Vec<BoundLatent>,
}

/// Places the positively weighted retrieved latents on `tape` and returns the
/// factored similarity-weighted increment. The result does not depend on the
/// order of `retrieved`.
pub fn mix_increments(tape: &mut Tape, bank: &LatentBank, retrieved: &[Retrieved], trainable: bool) -> Result<Mixed> {
    let weights = MixWeights::from_retrieved(retrieved)?;
    let mut bound = Vec::new();
    let mut per_target: BTreeMap<String, Vec<Factor>> = BTreeMap::new();
    for (id, w) in weights.active() {
        let task = bank.task(id);
        let mut vars = Vec::with_capacity(2 * bank.targets.len());
        for t in &bank.targets {
            let lr = &task.increments[&t.name];
            let a = tape.leaf(lr.a.clone(), trainable);
            let b = tape.leaf(lr.b.clone(), trainable);
            vars.push(a);
            vars.push(b);
            per_target
                .entry(t.name.clone())
                .or_default()
                .push(Factor { weight: w, a, b });
        }
        bound.push(BoundLatent { id, vars });
    }
    let mut increments = IncrementSet::new();
    for (name, fs) in per_target {
        increments.insert(name, Increment::Factored(fs));
    }
    Ok(Mixed {
        increments,
        weights,
        bound,
    })
}

/// Frozen bag-of-tokens prompt encoder: mean of Gaussian table rows, L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoder {
    table: Tensor,
}

impl PromptEncoder {
    pub fn new(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "encoder.table");
        Self {
            table: Tensor::randn(&[vocab_size, dim], 1.0, &mut r),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let dim = self.dim();
        let vocab = self.table.rows();
        let mut q = vec![0.0; dim];
        for &t in tokens {
            if t >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            for (qi, x) in q.iter_mut().zip(self.table.row(t)) {
                *qi += x;
            }
        }
        let n = tokens.len() as f64;
        q.iter_mut().for_each(|x| *x /= n);
        let norm = dot(&q, &q).sqrt();
        if norm == 0.0 {
            return Err(Error::Shape("prompt embedding has zero norm".into()));
        }
        q.iter_mut().for_each(|x| *x /= norm);
        Ok(q)
    }
}

/// Independent uniform group id in `0..groups` for each of `n` items.
pub fn assign_groups(n: usize, groups: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::Rng;
    if groups == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "bank.groups");
    Ok((0..n).map(|_| r.random_range(0..groups)).collect())
}
