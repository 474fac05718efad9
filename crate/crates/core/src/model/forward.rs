use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::Token;

use super::{ModelConfig, ModelState};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Which part of the model is bound as trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Adapter,
    Base,
}

/// One term `weight · B·A` of a factored increment.
#[derive(Clone, Copy, Debug)]
pub struct Factor {
    pub weight: f64,
    pub a: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub enum Increment {
    /// Full out×in matrix.
    Dense(Var),
    /// `Σ weight_j · B_j·A_j`, applied through activations without forming the matrix.
    Factored(Vec<Factor>),
}

/// Per-target weight increments living on one tape.
#[derive(Clone, Debug, Default)]
pub struct IncrementSet {
    entries: BTreeMap<String, Increment>,
}

impl IncrementSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, target: impl Into<String>, inc: Increment) {
        self.entries.insert(target.into(), inc);
    }

    pub fn get(&self, target: &str) -> Option<&Increment> {
        self.entries.get(target)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Increment)> {
        self.entries.iter()
    }

    /// Dense equivalent of every entry.
    pub fn materialize(&self, tape: &mut Tape) -> Result<IncrementSet> {
        let mut out = IncrementSet::new();
        for (name, inc) in &self.entries {
            let dense = match inc {
                Increment::Dense(v) => *v,
                Increment::Factored(fs) => {
                    let mut acc: Option<Var> = None;
                    for f in fs {
                        let p = tape.matmul(f.b, f.a)?;
                        let p = tape.mul_scalar(p, f.weight);
                        acc = Some(match acc {
                            Some(s) => tape.add(s, p)?,
                            None => p,
                        });
                    }
                    acc.ok_or(Error::Empty("factored increment"))?
                }
            };
            out.insert(name.clone(), Increment::Dense(dense));
        }
        Ok(out)
    }
}

/// Model parameters placed on a tape.
pub struct BoundModel {
    config: ModelConfig,
    target_names: Vec<String>,
    base: BTreeMap<String, Var>,
    adapter: BTreeMap<String, (Var, Var)>,
}

impl BoundModel {
    /// Places every parameter on `tape`. The adapter is left out entirely when
    /// it is frozen and all its `A` factors are zero, since it would add exact
    /// zeros.
    pub fn bind(tape: &mut Tape, model: &ModelState, trainable: Trainable) -> Self {
        let base = model
            .base
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone(), trainable == Trainable::Base);
                (name.clone(), v)
            })
            .collect();
        let mut adapter = BTreeMap::new();
        if trainable == Trainable::Adapter || !model.adapter_is_zero() {
            for t in model.targets() {
                let lr = &model.adapter[&t.name];
                let grad = trainable == Trainable::Adapter;
                let a = tape.leaf(lr.a.clone(), grad);
                let b = tape.leaf(lr.b.clone(), grad);
                adapter.insert(t.name, (a, b));
            }
        }
        Self {
            config: model.config.clone(),
            target_names: model.targets().into_iter().map(|t| t.name).collect(),
            base,
            adapter,
        }
    }

    /// Main-adapter vars in `trainable_params` order (empty if the adapter was skipped).
    pub fn adapter_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for name in &self.target_names {
            if let Some(&(a, b)) = self.adapter.get(name) {
                out.push((format!("adapter.{name}.A"), a));
                out.push((format!("adapter.{name}.B"), b));
            }
        }
        out
    }

    /// Base vars in name order.
    pub fn base_vars(&self) -> Vec<(String, Var)> {
        self.base.iter().map(|(n, v)| (n.clone(), *v)).collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check(&self, tokens: &[Token], increments: Option<&IncrementSet>) -> Result<()> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
        if let Some(set) = increments {
            for (name, _) in set.iter() {
                if !self.target_names.contains(name) {
                    return Err(Error::UnknownTarget(name.clone()));
                }
            }
        }
        Ok(())
    }

    fn w(&self, name: &str) -> Var {
        self.base[name]
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str, increments: Option<&IncrementSet>) -> Result<Var> {
        let mut y = tape.matmul_nt(x, self.w(name))?;
        if let Some(&(a, b)) = self.adapter.get(name) {
            let h = tape.matmul_nt(x, a)?;
            let u = tape.matmul_nt(h, b)?;
            y = tape.add(y, u)?;
        }
        match increments.and_then(|s| s.get(name)) {
            None => {}
            Some(Increment::Dense(d)) => {
                let u = tape.matmul_nt(x, *d)?;
                y = tape.add(y, u)?;
            }
            Some(Increment::Factored(fs)) => {
                for f in fs {
                    let h = tape.matmul_nt(x, f.a)?;
                    let mut u = tape.matmul_nt(h, f.b)?;
                    if f.weight != 1.0 {
                        u = tape.mul_scalar(u, f.weight);
                    }
                    y = tape.add(y, u)?;
                }
            }
        }
        Ok(y)
    }

    fn norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.mul_row(n, self.w(&format!("{prefix}.gain")))?;
        Ok(tape.add_row(g, self.w(&format!("{prefix}.bias")))?)
    }

    /// Logits of shape seq_len × vocab.
    pub fn forward(&self, tape: &mut Tape, tokens: &[Token], increments: Option<&IncrementSet>) -> Result<Var> {
        self.check(tokens, increments)?;
        let cfg = &self.config;
        let n = tokens.len();
        let dh = cfg.head_dim();
        let positions: Vec<usize> = (0..n).collect();

        let tok = tape.embedding(self.w("tok_emb"), tokens)?;
        let pos = tape.embedding(self.w("pos_emb"), &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut mask = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i + 1..n {
                mask.data_mut()[i * n + j] = MASKED;
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.n_layers {
            let h = self.norm(tape, x, &format!("layers.{l}.ln1"))?;
            let q = self.linear(tape, h, &format!("layers.{l}.attn.q"), increments)?;
            let k = self.linear(tape, h, &format!("layers.{l}.attn.k"), increments)?;
            let v = self.linear(tape, h, &format!("layers.{l}.attn.v"), increments)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice(q, 1, hd * dh, dh)?;
                let kh = tape.slice(k, 1, hd * dh, dh)?;
                let vh = tape.slice(v, 1, hd * dh, dh)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.mul_scalar(s, scale);
                let s = tape.add_const(s, &mask)?;
                let p = tape.softmax_rows(s);
                heads.push(tape.matmul(p, vh)?);
            }
            let att = tape.concat(&heads, 1)?;
            let o = self.linear(tape, att, &format!("layers.{l}.attn.o"), increments)?;
            x = tape.add(x, o)?;

            let h = self.norm(tape, x, &format!("layers.{l}.ln2"))?;
            let up = self.linear(tape, h, &format!("layers.{l}.mlp.up"), increments)?;
            let act = tape.gelu(up);
            let down = self.linear(tape, act, &format!("layers.{l}.mlp.down"), increments)?;
            x = tape.add(x, down)?;
        }
        let h = self.norm(tape, x, "ln_f")?;
        Ok(tape.matmul_nt(h, self.w("head"))?)
    }
}
