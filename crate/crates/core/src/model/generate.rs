use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::vocab::{Token, EOS};

use super::{BoundModel, ModelState, Trainable};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    /// Nucleus sampling with the given cumulative mass in (0, 1].
    TopP(f64),
}

/// Indices of the smallest set of tokens, taken in descending probability
/// (ties to the lower index), whose cumulative mass reaches `top_p`.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
    let mut out = Vec::new();
    let mut mass = 0.0;
    for i in order {
        out.push(i);
        mass += probs[i];
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Reusable decoding context: the model is bound once as constants and the
/// tape is rewound after every step.
pub struct Generator<'m> {
    model: &'m ModelState,
    tape: Tape,
    bound: BoundModel,
    mark: usize,
}

impl<'m> Generator<'m> {
    pub fn new(model: &'m ModelState) -> Self {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model, Trainable::Nothing);
        let mark = tape.len();
        Self {
            model,
            tape,
            bound,
            mark,
        }
    }

    /// Full logits (seq_len × vocab) for `tokens`.
    pub fn logits(&mut self, tokens: &[Token]) -> Result<Tensor> {
        let out = self.bound.forward(&mut self.tape, tokens, None);
        let t = out.map(|v| self.tape.value(v).clone());
        self.tape.truncate(self.mark);
        t
    }

    /// Logits for the token following `tokens`.
    pub fn next_logits(&mut self, tokens: &[Token]) -> Result<Vec<f64>> {
        let out = self.bound.forward(&mut self.tape, tokens, None);
        let row = out.map(|v| {
            let t = self.tape.value(v);
            t.row(t.rows() - 1).to_vec()
        });
        self.tape.truncate(self.mark);
        row
    }

    /// Continuation of at most `max_new` tokens; includes the EOS token if one
    /// was produced.
    pub fn generate<R: Rng + ?Sized>(
        &mut self,
        prompt: &[Token],
        max_new: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        let max = self.model.config.max_seq_len;
        if prompt.len() + max_new > max {
            return Err(Error::SequenceTooLong {
                len: prompt.len() + max_new,
                max,
            });
        }
        if let Decoding::TopP(p) = decoding {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.next_logits(&seq)?;
            let next = match decoding {
                Decoding::Greedy => argmax(&logits),
                Decoding::TopP(p) => {
                    let probs = softmax(&logits);
                    let keep = nucleus(&probs, p);
                    let total: f64 = keep.iter().map(|&i| probs[i]).sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = *keep.last().expect("nucleus is never empty");
                    for &i in &keep {
                        if u < probs[i] {
                            pick = i;
                            break;
                        }
                        u -= probs[i];
                    }
                    pick
                }
            };
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(seq.split_off(prompt.len()))
    }
}
