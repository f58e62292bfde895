//! Central finite-difference gradient checking.
//!
//! The checker perturbs every input element by ±step and compares the
//! two-sided difference quotient of the scalar loss against the
//! gradient from [`Graph::backward`]. Only forward evaluations feed the
//! numeric side, so it is an independent oracle for every backward rule.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Tensor};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest normalized error |g_ad − g_fd| / max(1, |g_ad|, |g_fd|).
    pub max_err: f64,
    /// (parameter index, element index) where the largest error occurred.
    pub worst: (usize, usize),
}

impl FdReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_err < tol,
            "gradient mismatch: normalized error {} at param {} element {} (tolerance {tol})",
            self.max_err,
            self.worst.0,
            self.worst.1
        );
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences with the given step, over every element of every
/// parameter.
pub fn check_gradients<F>(params: &[Tensor], step: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let tracked: Vec<Tensor> = params.iter().map(|p| p.clone().with_grad()).collect();

    let mut g = Graph::new();
    let ids: Vec<NodeId> = tracked.iter().map(|p| g.leaf(p)).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| g.constant(p)).collect();
        let loss = build(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut report = FdReport {
        max_err: 0.0,
        worst: (0, 0),
    };
    for (pi, id) in ids.iter().enumerate() {
        // A tracked leaf the loss never touches has a zero gradient.
        let analytic = grads
            .get(*id)
            .map(|t| t.values().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for (ei, &ad) in analytic.iter().enumerate() {
            let mut plus: Vec<Tensor> = params.to_vec();
            plus[pi].values_mut()[ei] += step;
            let mut minus: Vec<Tensor> = params.to_vec();
            minus[pi].values_mut()[ei] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let err = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
            if err > report.max_err {
                report.max_err = err;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn agrees_on_a_smooth_function() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let report = check_gradients(&[x], 1e-5, |g, ids| {
            let e = g.exp(ids[0])?;
            g.sum(e)
        })
        .unwrap();
        assert!(
            report.max_err < 1e-9,
            "exp should check out: {}",
            report.max_err
        );
    }

    #[test]
    fn flags_detached_losses() {
        let x = Tensor::vector(vec![1.0]);
        let err = check_gradients(&[x], 1e-5, |g, _ids| {
            let c = g.constant(&Tensor::vector(vec![2.0]));
            g.sum(c)
        })
        .unwrap_err();
        assert!(matches!(err, Error::DetachedGraph));
    }
}
