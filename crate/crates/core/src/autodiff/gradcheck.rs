use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates
/// of `x`, using central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` builds a scalar-valued program on a fresh graph from the leaf it is
/// handed.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_entries(f, x, &(0..x.numel()).collect::<Vec<_>>(), h)
}

/// As [`grad_check`], restricted to the listed flat indices of `x`.
pub fn grad_check_entries<F>(f: F, x: &Tensor, entries: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let leaf = g.param(x);
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g
        .grad(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in entries {
        if i >= x.numel() {
            return Err(Error::InvalidArgument(format!(
                "entry {i} out of range for {} values",
                x.numel()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
