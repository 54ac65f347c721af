use super::{Graph, Result, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(|a|, |n|, floor)`,
    /// see [`resolution_floor`].
    pub max_rel_error: f64,
    /// Coordinates checked, as (input index, element index).
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crosses a relu kink.
    pub skipped: Vec<(usize, usize)>,
}

/// Smallest gradient magnitude central differences resolve to relative
/// accuracy: `f(x ± eps)` carry rounding error of order `ε_mach·|f|`, so the
/// difference quotient is only good to about `ε_mach·|f| / eps` in absolute
/// terms. Below this floor the error is measured relative to the floor.
pub fn resolution_floor(f: f64, eps: f64) -> f64 {
    (1e5 * f64::EPSILON * f.abs().max(1.0) / eps).max(1e-8)
}

/// Gradient check of a scalar function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Gradient check of a scalar function of several tensors.
///
/// A coordinate is skipped rather than failed when the relu activation
/// pattern at `x + eps` differs from the one at `x - eps`, which is where
/// central differences straddle a non-differentiable point.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let floor = resolution_floor(g.scalar(loss), eps);

    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<i8>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.scalar(out), g.kink_signature().to_vec()))
    };

    let mut work: Vec<Tensor> = xs.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = Vec::new();
    for (ti, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = x.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let (fp, sp) = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let (fm, sm) = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            if sp != sm {
                skipped.push((ti, ei));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error, checked, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![0.8, -1.2, 1.5, -0.9]);
        let r = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq, None)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn relu_away_from_kinks() {
        let x = Tensor::from_vec(vec![0.5, -0.7, 1.3, -2.0]);
        let r = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2, None)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5);
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let r = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y, None)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.skipped, vec![(0, 0)]);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }
}
