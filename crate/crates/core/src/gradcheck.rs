//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ModelParams;

pub const DEFAULT_EPS: f32 = 1e-3;

/// Which components of a parameter to perturb.
#[derive(Clone, Debug)]
pub enum Probes {
    All,
    Random { count: usize, seed: u64 },
    Indices(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over the probed components.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares the tape gradient of parameter `id` against central differences
/// of the scalar built by `loss_fn`.
pub fn finite_diff_check<F>(
    params: &mut ModelParams,
    id: &str,
    eps: f32,
    probes: Probes,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ModelParams, &mut Tape) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss, params)?;
    let analytic = params.get(id)?.grad.clone();
    let n = analytic.len();

    let indices: Vec<usize> = match probes {
        Probes::All => (0..n).collect(),
        Probes::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, count.min(n)).into_vec();
            idx.sort_unstable();
            idx
        }
        Probes::Indices(v) => v,
    };

    let mut eval = |params: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss_fn(params, &mut tape)?;
        Ok(tape.value(l).item() as f64)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for &i in &indices {
        let original = params.value(id)?.data()[i];
        let up = original + eps;
        let down = original - eps;
        params.get_mut(id)?.value.data_mut()[i] = up;
        let f_up = eval(params)?;
        params.get_mut(id)?.value.data_mut()[i] = down;
        let f_down = eval(params)?;
        params.get_mut(id)?.value.data_mut()[i] = original;

        let step = up as f64 - down as f64;
        let numeric = (f_up - f_down) / step;
        let a = analytic.data()[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    params.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient_is_exact() {
        let mut params = ModelParams::new();
        params
            .insert("w", Tensor::new([4], vec![0.3, -0.2, 0.15, 0.0]).unwrap())
            .unwrap();
        let report = finite_diff_check(&mut params, "w", DEFAULT_EPS, Probes::All, |p, t| {
            let w = t.param(p, "w")?;
            Ok(t.sum_squares(&[w]))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // d/dw of sum(w * detach(w)) is reported as w (detached half is dropped),
        // the true derivative is 2w.
        let mut params = ModelParams::new();
        params
            .insert("w", Tensor::new([2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let report = finite_diff_check(&mut params, "w", DEFAULT_EPS, Probes::All, |p, t| {
            let w = t.param(p, "w")?;
            let d = t.detach(w);
            let m = t.mul(w, d)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.3);
    }
}
