//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state for a fixed list of parameters.
///
/// Moment buffers are aligned index-for-index with the parameter list
/// passed to [`AdamState::step`]; the step counter `t` advances by
/// exactly one per call.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// State for parameters of the given shapes, with β1=0.9, β2=0.999,
    /// ε=1e-8.
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&Tensor]) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        AdamState::new(lr, &shapes)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One bias-corrected update of every parameter in place.
    ///
    /// `grads[i]` may be `None` when parameter `i` received no gradient
    /// this step (treated as zero). Non-finite gradients are an error.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "expected {} parameters, got {} with {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if p.shape() != g.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(Error::NanGradient { index: i });
                }
            }
            if p.numel() != self.m[i].len() {
                return Err(Error::invalid(
                    "adam_step",
                    format!("parameter {i} does not match optimizer state"),
                ));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let gvals: Option<&[f64]> = grads[i].map(|g| g.values());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pv = p.values_mut();
            for j in 0..pv.len() {
                let g = gvals.map_or(0.0, |gs| gs[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pv[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
