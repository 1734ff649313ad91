use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Denominator floor for relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Parameter handed to the checker. Frozen parameters enter the tape as
/// constants and are left out of the report.
#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedParam {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: Tensor) -> Self {
        NamedParam {
            name: name.into(),
            tensor,
            trainable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_rel_error: f64,
    /// Elements whose central difference crossed a kink.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    pub passed: bool,
    pub epsilon: f64,
    pub tolerance: f64,
    /// The base point sits exactly on a kink of some piecewise op.
    pub nondifferentiable_point: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck eps={:e} tol={:e} {}{}",
            self.epsilon,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" },
            if self.nondifferentiable_point {
                " (kink at base point)"
            } else {
                ""
            }
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<28} |analytic|={:.6e} |numeric|={:.6e} max_rel={:.3e}{}",
                e.name,
                e.analytic_norm,
                e.numeric_norm,
                e.max_rel_error,
                if e.excluded > 0 {
                    format!(" excluded={}", e.excluded)
                } else {
                    String::new()
                }
            )?;
        }
        Ok(())
    }
}

struct Eval {
    loss: f64,
    signature: Vec<i8>,
}

fn evaluate<F>(loss_fn: &F, params: &[NamedParam]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.tensor, p.trainable))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::shape("gradcheck loss must be scalar"));
    }
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok((tape, vars, loss))
}

fn probe<F>(loss_fn: &F, params: &[NamedParam]) -> Result<Eval>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, loss) = evaluate(loss_fn, params)?;
    Ok(Eval {
        loss: tape.scalar(loss),
        signature: tape.signature().to_vec(),
    })
}

/// Compare reverse-mode gradients against central differences.
///
/// `loss_fn` receives one tape variable per entry of `params`, in order, and
/// must return a scalar. Elements whose `±epsilon` evaluations take a
/// different branch of a piecewise op than the base point are excluded.
pub fn finite_diff_gradcheck<F>(
    loss_fn: F,
    params: &[NamedParam],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "epsilon {epsilon:e} outside [1e-7, 1e-3]"
        )));
    }
    let (mut tape, vars, loss) = evaluate(&loss_fn, params)?;
    tape.backward(loss)?;
    let base_sig = tape.signature().to_vec();
    let nondifferentiable_point = tape.at_kink();

    let mut working: Vec<NamedParam> = params.to_vec();
    let mut entries = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let analytic: Vec<f64> = tape
            .grad(vars[pi])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let mut numeric = vec![0.0; analytic.len()];
        let mut max_rel: f64 = 0.0;
        let mut excluded = 0;
        for i in 0..analytic.len() {
            let orig = p.tensor.values()[i];
            working[pi].tensor.values_mut()[i] = orig + epsilon;
            let plus = probe(&loss_fn, &working)?;
            working[pi].tensor.values_mut()[i] = orig - epsilon;
            let minus = probe(&loss_fn, &working)?;
            working[pi].tensor.values_mut()[i] = orig;
            if plus.signature != base_sig || minus.signature != base_sig {
                excluded += 1;
                continue;
            }
            let n = (plus.loss - minus.loss) / (2.0 * epsilon);
            numeric[i] = n;
            let a = analytic[i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradEntry {
            name: p.name.clone(),
            analytic_norm: analytic.iter().map(|v| v * v).sum::<f64>().sqrt(),
            numeric_norm: numeric.iter().map(|v| v * v).sum::<f64>().sqrt(),
            max_rel_error: max_rel,
            excluded,
        });
    }
    let passed = entries.iter().all(|e| e.max_rel_error <= tolerance);
    Ok(GradReport {
        entries,
        passed,
        epsilon,
        tolerance,
        nondifferentiable_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_sum(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let report =
            finite_diff_gradcheck(square_sum, &[NamedParam::new("theta", theta)], 1e-5, 1e-4)
                .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error() < 1e-8, "{report}");
    }

    #[test]
    fn analytic_gradient_of_quadratic() {
        let mut tape = Tape::new();
        let v = tape.param(&Tensor::vector(vec![1.0, 2.0]).unwrap());
        let loss = square_sum(&mut tape, &[v]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn epsilon_out_of_range() {
        let theta = Tensor::vector(vec![1.0]).unwrap();
        let r = finite_diff_gradcheck(
            |tape, v| Ok(tape.sum(v[0])),
            &[NamedParam::new("t", theta)],
            1e-2,
            1e-4,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_params_are_not_reported() {
        let a = Tensor::vector(vec![1.0]).unwrap();
        let b = Tensor::vector(vec![2.0]).unwrap();
        let r = finite_diff_gradcheck(
            |tape, v| {
                let s = tape.add(v[0], v[1])?;
                Ok(tape.sum(s))
            },
            &[NamedParam::new("a", a), NamedParam::frozen("b", b)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].name, "a");
    }

    #[test]
    fn hinge_kink_is_flagged_and_excluded() {
        let x = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let r = finite_diff_gradcheck(
            |tape, v| {
                let h = tape.relu(v[0]);
                Ok(tape.sum(h))
            },
            &[NamedParam::new("x", x)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.nondifferentiable_point);
        assert_eq!(r.entries[0].excluded, 1);
        assert!(r.passed);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let r = finite_diff_gradcheck(
            |tape, v| {
                let l = tape.log(v[0]);
                Ok(tape.sum(l))
            },
            &[NamedParam::new("x", x)],
            1e-6,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
