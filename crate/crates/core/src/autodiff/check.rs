use super::{AutodiffError, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Below this true-gradient magnitude, relative error is meaningless and the
/// absolute error is compared against [`ABS_TOLERANCE`] instead.
pub const SMALL_GRADIENT: f64 = 1e-5;
pub const ABS_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub leaf: usize,
    /// Largest relative error over elements whose gradient magnitude is at least
    /// [`SMALL_GRADIENT`].
    pub max_rel_error: f64,
    /// Largest absolute error over elements below [`SMALL_GRADIENT`].
    pub max_abs_error_small: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub leaves: Vec<LeafCheck>,
    /// Set when the graph could not be evaluated (non-finite loss, build error).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.leaves.iter().all(|l| l.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

fn eval<F>(build: &F, leaves: &[Tensor]) -> Result<f64, String>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let root = build(&mut tape, &vars).map_err(|e| e.to_string())?;
    let v = tape.value(root);
    if !v.is_scalar() {
        return Err(format!("loss has shape {:?}", v.shape()));
    }
    Ok(v.item())
}

/// Compares analytic adjoints against central finite differences.
///
/// `build` receives one [`Var`] per entry of `leaves` and must return a scalar.
/// A graph with no leaves passes vacuously.
pub fn check_gradients<F>(leaves: &[Tensor], build: F, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut report = GradCheckReport {
        tolerance,
        leaves: Vec::new(),
        failure: None,
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let root = match build(&mut tape, &vars) {
        Ok(r) => r,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    let loss = tape.value(root).item();
    if !loss.is_finite() {
        report.failure = Some(format!("non-finite loss {loss}"));
        return report;
    }
    let grads = match tape.backward(root) {
        Ok(g) => g,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };

    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaves[li].numel()]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs_small: f64 = 0.0;
        let mut passed = true;
        for e in 0..leaves[li].numel() {
            let orig = leaves[li].data()[e];
            probe[li].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&build, &probe);
            probe[li].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&build, &probe);
            probe[li].data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(msg), _) | (_, Err(msg)) => {
                    report.failure = Some(msg);
                    return report;
                }
                _ => {
                    report.failure = Some("non-finite loss under perturbation".into());
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[e];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale < SMALL_GRADIENT {
                max_abs_small = max_abs_small.max(abs);
                passed &= abs < ABS_TOLERANCE;
            } else {
                let rel = abs / scale;
                max_rel = max_rel.max(rel);
                passed &= rel < tolerance;
            }
        }
        report.leaves.push(LeafCheck {
            leaf: li,
            max_rel_error: max_rel,
            max_abs_error_small: max_abs_small,
            passed,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_leaves_passes_vacuously() {
        let report = check_gradients(&[], |tape, _| Ok(tape.constant(Tensor::scalar(2.0))), 1e-4);
        assert!(report.passed());
        assert!(report.leaves.is_empty());
    }

    #[test]
    fn zero_gradient_leaf_uses_absolute_fallback() {
        let x = Tensor::from_rows(&[&[0.3, -0.7]]);
        let unused = Tensor::from_rows(&[&[1.0, 2.0]]);
        let report = check_gradients(
            &[x, unused],
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            1e-4,
        );
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.leaves[1].max_rel_error, 0.0);
        assert!(report.leaves[1].max_abs_error_small < ABS_TOLERANCE);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let x = Tensor::from_rows(&[&[-1.0]]);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let l = tape.ln(v[0]);
                Ok(tape.sum(l))
            },
            1e-4,
        );
        assert!(!report.passed());
        assert!(report.failure.unwrap().contains("non-finite"));
    }

    #[test]
    fn wrong_adjoint_is_detected() {
        // relu at exactly 0 has a one-sided derivative; the central difference sees 0.5.
        let x = Tensor::from_rows(&[&[0.0]]);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let r = tape.relu(v[0]);
                Ok(tape.sum(r))
            },
            1e-4,
        );
        assert!(!report.passed());
    }
}
