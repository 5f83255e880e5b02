use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares analytic gradients against central finite differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. Every
/// coordinate of every parameter is perturbed by `±eps`; the worst relative
/// error `|a - n| / max(|a|, |n|, 1e-8)` is returned.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference eps must be positive, got {eps}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.item(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
