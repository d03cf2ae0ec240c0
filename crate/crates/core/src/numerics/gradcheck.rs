use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar map against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_coords(f, x, h, None)
}

/// As [`grad_check`], restricted to the listed coordinates when `coords` is set.
pub fn grad_check_coords<F>(f: F, x: &Tensor, h: f32, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-5, 1e-2]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(&tape, xv);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item() as f64)
    };
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        // Use the actually representable step for the denominator.
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic.data()[i] as f64;
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
