//! Central-difference gradient checking for whole models.

use crate::autodiff::{Tape, Var};
use crate::error::{AeroError, Result};
use crate::model::{Bound, Model, ParamId};

/// Result for one named parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Elements whose difference quotient had to be retaken with a smaller
    /// step because the first one straddled a kink (ReLU, dead-zone edge).
    pub shrunk: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements checked per tensor, spread evenly; `0` checks all.
    pub per_group: usize,
    /// Gradient magnitude below which errors are measured absolutely.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, per_group: 0, floor: 1e-6 }
    }
}

/// Step reductions tried when two difference quotients disagree.
const SHRINK_ROUNDS: usize = 4;

fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    idx.dedup();
    idx
}

/// Compares reverse-mode gradients of `loss` with central differences for
/// every parameter of `model`.
pub fn check_model_gradients<F>(model: &Model, loss: F, opts: GradCheckOptions) -> Result<Vec<GroupCheck>>
where
    F: Fn(&Model, &mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = loss(model, &mut tape, &bound)?;
    tape.backward(out)?;

    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let b = m.params().bind_frozen(&mut t);
        let v = loss(m, &mut t, &b)?;
        Ok(t.value(v).item())
    };

    let mut probe = model.clone();
    let mut report = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        let id = ParamId(i);
        let analytic = tape.grad(bound[id]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let mut check = GroupCheck { name: p.name.clone(), checked: 0, max_abs_error: 0.0, max_rel_error: 0.0, shrunk: 0 };
        for j in sample_indices(p.tensor.numel(), opts.per_group) {
            let mut quotient = |step: f64| -> Result<f64> {
                let orig = p.tensor.data()[j];
                probe.params_mut().get_mut(id).data_mut()[j] = orig + step;
                let up = eval(&probe);
                probe.params_mut().get_mut(id).data_mut()[j] = orig - step;
                let down = eval(&probe);
                probe.params_mut().get_mut(id).data_mut()[j] = orig;
                Ok((up? - down?) / (2.0 * step))
            };
            // Halving the step must not move the quotient; when it does, a kink
            // lies within the step and a smaller step is tried. The most
            // self-consistent quotient wins.
            let mut step = opts.step;
            let mut best = (f64::INFINITY, 0.0);
            for round in 0..SHRINK_ROUNDS {
                let full = quotient(step)?;
                let half = quotient(step / 2.0)?;
                let disagreement = (full - half).abs() / full.abs().max(half.abs()).max(opts.floor);
                if disagreement < best.0 {
                    best = (disagreement, full);
                }
                if disagreement <= 1e-4 {
                    break;
                }
                if round == 0 {
                    check.shrunk += 1;
                }
                step /= 10.0;
            }
            let numeric = best.1;
            if !numeric.is_finite() {
                return Err(AeroError::Numeric(format!("non-finite difference quotient for {}[{j}]", p.name)));
            }
            let abs = (analytic[j] - numeric).abs();
            let rel = abs / analytic[j].abs().max(numeric.abs()).max(opts.floor);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(report)
}

pub fn worst(report: &[GroupCheck]) -> Option<&GroupCheck> {
    report.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}
