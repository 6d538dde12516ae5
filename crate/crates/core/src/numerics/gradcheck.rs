use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares tape gradients of `f` at `point` with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over every
/// input coordinate. `f` must build its output from the given leaf vars.
pub fn gradcheck<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.scalar(root))
    };

    let mut worst: f64 = 0.0;
    let mut inputs = point.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..point[k].len() {
            let x0 = point[k].data()[j];
            inputs[k].data_mut()[j] = x0 + h;
            let fp = eval(&inputs)?;
            inputs[k].data_mut()[j] = x0 - h;
            let fm = eval(&inputs)?;
            inputs[k].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("central difference".into()));
            }
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
