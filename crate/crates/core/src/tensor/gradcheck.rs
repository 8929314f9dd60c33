use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Largest relative disagreement between the taped gradient of `f` at `x`
/// and central finite differences:
/// `max_i |g_i - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |g_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    grad_check_coords(f, x, h, None)
}

/// [`grad_check`] restricted to the given flat coordinates (all when `None`).
pub fn grad_check_coords<F>(mut f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check", "step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true))?;
    let out = f(&mut tape, xv)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("function must return a scalar, got {:?}", tape.shape(out)),
        ));
    }
    tape.backward(out)?;
    let analytic = tape
        .take_grad(xv)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe)?;
        let o = f(&mut t, v)?;
        let val = t.data(o)[0];
        if !val.is_finite() {
            return Err(Error::numeric("grad_check", "function is non-finite at a probe point"));
        }
        Ok(val)
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
        if i >= x.numel() {
            return Err(Error::Index { op: "grad_check", index: i, len: x.numel() });
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let g = analytic[i];
        worst = worst.max((g - fd).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}
