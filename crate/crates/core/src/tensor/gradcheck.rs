//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::autodiff::{Tape, Var};
use super::Tensor;
use crate::error::{invalid, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Per-input comparison of autodiff and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    /// `max |analytic - numeric|` over elements, divided by the larger of the
    /// two gradients' max magnitudes.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Elements whose one-sided slopes disagree (the function has a kink
    /// within `h`); they are excluded from the error figures.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn kinks(&self) -> usize {
        self.inputs.iter().map(|r| r.kinks).sum()
    }

    /// All inputs within `tol` and no kink encountered.
    pub fn passes(&self, tol: f64) -> bool {
        self.kinks() == 0 && self.inputs.iter().all(|r| r.max_rel_error < tol)
    }
}

/// Compares the tape gradient of `f` at `inputs` with central differences.
///
/// `f` receives one leaf per input. Non-scalar outputs are reduced by a fixed
/// pseudo-random projection so every output element contributes.
pub fn gradient_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = |xs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let shape = tape.shape(out);
        let scalar = if shape.numel() == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let w = Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0));
            tape.weighted_sum(out, &w)?
        };
        let value = tape.value(scalar).data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(scalar)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((value, g))
    };

    let (f0, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        let mut one_sided = vec![(0.0, 0.0); grad.len()];
        for i in 0..grad.len() {
            let orig = work[idx].data()[i];
            work[idx].data_mut()[i] = orig + h;
            let fp = eval(&work, false)?.0;
            work[idx].data_mut()[i] = orig - h;
            let fm = eval(&work, false)?.0;
            work[idx].data_mut()[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
            one_sided[i] = ((fp - f0) / h, (f0 - fm) / h);
        }
        let scale = grad
            .data()
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-12, f64::max);
        let mut kinks = 0;
        let mut max_abs: f64 = 0.0;
        for (i, (&a, &n)) in grad.data().iter().zip(&numeric).enumerate() {
            let (fwd, bwd) = one_sided[i];
            if (fwd - bwd).abs() > 1e-2 * scale.max(fwd.abs().max(bwd.abs())) {
                kinks += 1;
                continue;
            }
            max_abs = max_abs.max((a - n).abs());
        }
        reports.push(InputReport {
            index: idx,
            max_rel_error: max_abs / scale,
            max_abs_error: max_abs,
            kinks,
        });
    }
    Ok(GradCheckReport { inputs: reports })
}
