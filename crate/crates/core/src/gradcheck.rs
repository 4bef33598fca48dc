//! Central finite-difference checking of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over every leaf entry of `|autodiff - fd| / max(|fd|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(leaf index, flat entry index)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central
/// differences with the given step.
///
/// `f` rebuilds the computation on a fresh tape from the supplied leaf
/// handles; it is called once for the analytic pass and twice per entry.
pub fn grad_check<F>(f: F, leaves: &[Matrix], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let vars = leaves
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).cloned().expect("tracked leaf has a gradient"))
            .collect::<Vec<_>>()
    };

    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        tape.scalar(loss)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let orig = leaf.data()[e];
            probe[li].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe[li].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe[li].data_mut()[e] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[li].data()[e];
            let rel = (ad - fd).abs() / fd.abs().max(REL_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((li, e));
            }
        }
    }
    Ok(report)
}
