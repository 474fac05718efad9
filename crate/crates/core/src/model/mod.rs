//! Tiny decoder-only transformer whose projection matrices accept low-rank
//! increments.
//!
//! Every target matrix `W` (out×in) is used as `y = x·Wᵀ`. The effective
//! weight during adaptation is `W + B·A + Δθ`, where `(A, B)` is the trainable
//! main adapter and `Δθ` an optional per-item [`IncrementSet`].

mod forward;
mod generate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::Token;

pub use forward::{BoundModel, Factor, Increment, IncrementSet, Trainable};
pub use generate::{nucleus, Decoding, Generator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
    /// Rank of the main adapter.
    pub adapter_rank: usize,
    /// Std of the Gaussian B factor of the main adapter.
    pub adapter_init_std: f64,
    /// Std of every randomly initialized base matrix.
    pub init_std: f64,
    pub targets: Vec<TargetKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 32,
            d_ff: 128,
            adapter_rank: 8,
            adapter_init_std: 0.02,
            init_std: 0.02,
            targets: TargetKind::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("d_ff", self.d_ff),
            ("adapter_rank", self.adapter_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("model.targets must name at least one matrix kind".into()));
        }
        if !(self.adapter_init_std >= 0.0 && self.init_std > 0.0) {
            return Err(Error::Config("model init std values must be non-negative and finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Adaptable matrices in canonical order: layer-major, then
    /// q, k, v, o, up, down.
    pub fn targets(&self) -> Vec<Target> {
        let mut out = Vec::new();
        for layer in 0..self.n_layers {
            for kind in TargetKind::ALL {
                if self.targets.contains(&kind) {
                    out.push(Target::new(layer, kind, self));
                }
            }
        }
        out
    }

    /// Names and shapes of every base parameter, in canonical order.
    pub fn base_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.ln1.gain"), vec![d]));
            out.push((format!("layers.{l}.ln1.bias"), vec![d]));
            for kind in [TargetKind::Q, TargetKind::K, TargetKind::V, TargetKind::O] {
                out.push((target_name(l, kind), vec![d, d]));
            }
            out.push((format!("layers.{l}.ln2.gain"), vec![d]));
            out.push((format!("layers.{l}.ln2.bias"), vec![d]));
            out.push((target_name(l, TargetKind::Up), vec![f, d]));
            out.push((target_name(l, TargetKind::Down), vec![d, f]));
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out.push(("head".to_string(), vec![v, d]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl TargetKind {
    pub const ALL: [TargetKind; 6] = [
        TargetKind::Q,
        TargetKind::K,
        TargetKind::V,
        TargetKind::O,
        TargetKind::Up,
        TargetKind::Down,
    ];

    fn suffix(self) -> &'static str {
        match self {
            TargetKind::Q => "attn.q",
            TargetKind::K => "attn.k",
            TargetKind::V => "attn.v",
            TargetKind::O => "attn.o",
            TargetKind::Up => "mlp.up",
            TargetKind::Down => "mlp.down",
        }
    }
}

pub fn target_name(layer: usize, kind: TargetKind) -> String {
    format!("layers.{layer}.{}", kind.suffix())
}

/// An adaptable weight matrix of shape `out × inp`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Target {
    pub name: String,
    pub layer: usize,
    pub kind: TargetKind,
    pub out: usize,
    pub inp: usize,
}

impl Target {
    fn new(layer: usize, kind: TargetKind, cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let (out, inp) = match kind {
            TargetKind::Up => (f, d),
            TargetKind::Down => (d, f),
            _ => (d, d),
        };
        Self {
            name: target_name(layer, kind),
            layer,
            kind,
            out,
            inp,
        }
    }
}

/// Low-rank pair with product `B·A`; `A` is r×in, `B` is out×r.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRank {
    /// Zero `A`, Gaussian `B`, so the product starts at exactly zero.
    pub fn init<R: rand::Rng + ?Sized>(target: &Target, rank: usize, std: f64, rng: &mut R) -> Self {
        Self {
            a: Tensor::zeros(&[rank, target.inp]),
            b: Tensor::randn(&[target.out, rank], std, rng),
        }
    }

    pub fn product(&self) -> Tensor {
        self.b.matmul(&self.a).expect("low-rank factors agree on rank")
    }
}

/// Base weights plus the main adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub base: BTreeMap<String, Tensor>,
    pub adapter: BTreeMap<String, LowRank>,
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut base_rng = rng::stream(seed, "model.base");
        let mut base = BTreeMap::new();
        for (name, shape) in config.base_shapes() {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, config.init_std, &mut base_rng)
            };
            base.insert(name, t);
        }
        let mut adapter_rng = rng::stream(seed, "model.adapter");
        let adapter = config
            .targets()
            .iter()
            .map(|t| {
                let lr = LowRank::init(t, config.adapter_rank, config.adapter_init_std, &mut adapter_rng);
                (t.name.clone(), lr)
            })
            .collect();
        Ok(Self {
            config,
            seed,
            base,
            adapter,
        })
    }

    pub fn targets(&self) -> Vec<Target> {
        self.config.targets()
    }

    /// Main-adapter tensors in canonical order: for each target, `A` then `B`.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for t in self.targets() {
            let lr = &self.adapter[&t.name];
            out.push((format!("adapter.{}.A", t.name), &lr.a));
            out.push((format!("adapter.{}.B", t.name), &lr.b));
        }
        out
    }

    /// Mutable access matching [`Self::trainable_params`] order.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let order: Vec<String> = self.targets().into_iter().map(|t| t.name).collect();
        let mut by_name: BTreeMap<&String, &mut LowRank> = self.adapter.iter_mut().collect();
        let mut out = Vec::new();
        for name in &order {
            let lr = by_name.remove(name).expect("adapter covers every target");
            out.push((format!("adapter.{name}.A"), &mut lr.a));
            out.push((format!("adapter.{name}.B"), &mut lr.b));
        }
        out
    }

    pub fn adapter_is_zero(&self) -> bool {
        self.adapter.values().all(|lr| lr.a.is_all_zero())
    }

    /// Copy with `B·A` folded into the base weights and `A` reset to zero.
    /// Logits agree with the unmerged model up to rounding.
    pub fn merged(&self) -> ModelState {
        let mut out = self.clone();
        for (name, lr) in out.adapter.iter_mut() {
            if lr.a.is_all_zero() {
                continue;
            }
            let w = out.base.get_mut(name).expect("adapter names are base targets");
            *w = w.add(&lr.product()).expect("adapter product matches target shape");
            lr.a = Tensor::zeros(lr.a.shape());
        }
        out
    }

    pub fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Untaped logits (seq_len × vocab) without increments.
    pub fn logits(&self, tokens: &[Token]) -> Result<Tensor> {
        let mut tape = crate::autodiff::Tape::new();
        let bound = BoundModel::bind(&mut tape, self, Trainable::Nothing);
        let out = bound.forward(&mut tape, tokens, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn generate(&self, prompt: &[Token], max_new: usize, decoding: Decoding, seed: u64) -> Result<Vec<Token>> {
        let mut rng = rng::rng_from(seed);
        Generator::new(self).generate(prompt, max_new, decoding, &mut rng)
    }

    /// SHA-256 over every tensor name, shape and little-endian value, in name order.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        let adapter = self.adapter.iter().flat_map(|(n, lr)| {
            [(format!("adapter.{n}.A"), &lr.a), (format!("adapter.{n}.B"), &lr.b)]
        });
        for (name, t) in self.base.iter().map(|(n, t)| (n.clone(), t)).chain(adapter) {
            bytes.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        rng::sha256_hex(&bytes)
    }

    /// Total number of `f64` values stored.
    pub fn numel(&self) -> usize {
        self.base.values().map(Tensor::numel).sum::<usize>()
            + self.adapter.values().map(|lr| lr.a.numel() + lr.b.numel()).sum::<usize>()
    }
}
