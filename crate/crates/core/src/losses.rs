//! Supervised cross-entropy, the symmetric KL divergence used on flashbacks,
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::Token;

/// Floor applied to probabilities before taking logarithms in the divergence.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean token cross-entropy over the positions where `mask` is set.
///
/// Row `t` of `logits` is scored against `targets[t]`; callers shift targets
/// so that row `t` predicts token `t + 1`.
pub fn sft_loss(tape: &mut Tape, logits: Var, targets: &[Token], mask: &[bool]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let (rows, vocab) = match shape[..] {
        [r, v] => (r, v),
        _ => return Err(Error::Shape(format!("sft_loss: logits must be 2-D, got {shape:?}"))),
    };
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Shape(format!(
            "sft_loss: {rows} logit rows, {} targets, {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::Empty("target mask"));
    }
    let mut pick = Tensor::zeros(&[rows, vocab]);
    for (t, (&tok, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab });
        }
        pick.data_mut()[t * vocab + tok] = -1.0 / n as f64;
    }
    let lp = tape.log_softmax_rows(logits);
    let picked = tape.mul_const(lp, pick)?;
    Ok(tape.sum(picked))
}

/// Mean over rows of `KL(p_ref ‖ p_cur) + KL(p_cur ‖ p_ref)`, with both
/// distributions floored at [`PROB_FLOOR`].
///
/// Evaluated as `Σ (p_ref − p_cur)(ln p_ref − ln p_cur)`, which is the same sum
/// with every term non-negative, so the result is ≥ 0 and exactly symmetric.
/// Pass `ref_logits` as a tape constant so the reference stays frozen.
pub fn div_loss(tape: &mut Tape, cur_logits: Var, ref_logits: Var) -> Result<Var> {
    let cs = tape.value(cur_logits).shape().to_vec();
    let rs = tape.value(ref_logits).shape().to_vec();
    if cs != rs {
        return Err(Error::Shape(format!("div_loss: current logits {cs:?} vs reference {rs:?}")));
    }
    if cs.len() != 2 {
        return Err(Error::Shape(format!("div_loss: logits must be 2-D, got {cs:?}")));
    }
    let rows = cs[0];
    let p_cur = tape.softmax_rows(cur_logits);
    let p_cur = tape.clamp_min(p_cur, PROB_FLOOR);
    let p_ref = tape.softmax_rows(ref_logits);
    let p_ref = tape.clamp_min(p_ref, PROB_FLOOR);
    let l_cur = tape.ln(p_cur);
    let l_ref = tape.ln(p_ref);
    let dp = tape.sub(p_ref, p_cur)?;
    let dl = tape.sub(l_ref, l_cur)?;
    let terms = tape.mul(dp, dl)?;
    let total = tape.sum(terms);
    Ok(tape.mul_scalar(total, 1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: Option<f64>,
    pub div: Option<f64>,
    pub alpha: f64,
    pub combined: f64,
}

/// `sft + alpha · div`, with an absent term counting as zero.
pub fn combine(sft: Option<f64>, div: Option<f64>, alpha: f64) -> Result<LossBreakdown> {
    if sft.is_none() && div.is_none() {
        return Err(Error::Empty("loss breakdown (neither sft nor div present)"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    Ok(LossBreakdown {
        sft,
        div,
        alpha,
        combined: sft.unwrap_or(0.0) + alpha * div.unwrap_or(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 40]));
        let loss = sft_loss(&mut tape, l, &[5, 6, 7], &[false, true, true]).unwrap();
        assert!((scalar(&tape, loss) - 40f64.ln()).abs() < 1e-10);
        assert!((40f64.ln() - 3.6889).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(&[1, 4]);
        t.data_mut()[2] = 60.0;
        let l = tape.constant(t);
        let loss = sft_loss(&mut tape, l, &[2], &[true]).unwrap();
        let v = scalar(&tape, loss);
        assert!((0.0..1e-20).contains(&v), "{v}");
    }

    #[test]
    fn empty_mask_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(sft_loss(&mut tape, l, &[1, 2], &[false, false]), Err(Error::Empty(_))));
    }

    #[test]
    fn two_token_worked_example() {
        let mut tape = Tape::new();
        let p = [0.9f64.ln(), 0.1f64.ln()];
        let cur = tape.constant(Tensor::from_rows(&[&p, &p]));
        let reference = tape.constant(Tensor::from_rows(&[&[0.0, 0.0], &[0.0, 0.0]]));
        let d = div_loss(&mut tape, cur, reference).unwrap();
        let closed = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln() + 0.5 * (0.5f64 / 0.9).ln() + 0.5 * 5f64.ln();
        assert!((scalar(&tape, d) - closed).abs() < 1e-12);
        assert!((scalar(&tape, d) - 0.8789).abs() < 1e-4);
    }

    #[test]
    fn identical_logits_have_zero_divergence() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[&[0.3, -2.0, 5.0], &[1.0, 1.0, -40.0]]);
        let a = tape.constant(x.clone());
        let b = tape.constant(x);
        let d = div_loss(&mut tape, a, b).unwrap();
        assert_eq!(scalar(&tape, d), 0.0);
    }

    #[test]
    fn divergence_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(div_loss(&mut tape, a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn reference_gets_no_gradient() {
        let mut tape = Tape::new();
        let cur = tape.param(Tensor::from_rows(&[&[0.1, 0.7, -0.2]]));
        let reference = tape.constant(Tensor::from_rows(&[&[0.5, -0.5, 0.0]]));
        let d = div_loss(&mut tape, cur, reference).unwrap();
        let g = tape.backward(d).unwrap();
        assert!(g.get(cur).is_some());
        assert!(g.get(reference).is_none());
    }

    #[test]
    fn combine_cases() {
        assert_eq!(combine(Some(2.0), Some(0.5), 1.0).unwrap().combined, 2.5);
        assert_eq!(combine(Some(2.0), Some(0.5), 0.0).unwrap().combined, 2.0);
        assert!((combine(None, Some(0.3), 2.0).unwrap().combined - 0.6).abs() < 1e-15);
        assert!(combine(None, None, 1.0).is_err());
        assert!(combine(Some(1.0), None, -1.0).is_err());
    }
}
