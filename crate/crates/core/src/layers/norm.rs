//! The L2-normalize and scale layers.
//!
//! Together they pin each feature row to a hypersphere of radius alpha:
//! `y = x / ||x||`, `z = alpha * y`. Both backward passes are closed-form.
//! The normalize Jacobian is
//!
//! ```text
//! dy_i/dx_i = (||x||^2 - x_i^2) / ||x||^3
//! dy_j/dx_i = -x_i x_j / ||x||^3        (i != j)
//! ```
//!
//! which applied to an upstream gradient g collapses to
//! `(g - (g . y) y) / ||x||` per row — the radial component of g is
//! annihilated, so scaling the input never changes the output.

use crate::error::{Error, Result};
use crate::layers::{Layer, Parameter};
use crate::tensor::Tensor;

/// Threshold below which an input row counts as degenerate. No epsilon is
/// folded into the math itself: a silently perturbed norm would corrupt the
/// gradient checks, so near-zero rows are a hard error instead.
pub const NORM_EPSILON: f64 = 1e-12;

/// Normalizes each row of an `M x D` input to unit L2 norm.
pub struct L2Normalize {
    epsilon: f64,
    cached: Option<(Tensor, Vec<f64>)>,
}

impl L2Normalize {
    pub fn new() -> Self {
        Self {
            epsilon: NORM_EPSILON,
            cached: None,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for L2Normalize {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for L2Normalize {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "l2norm_forward",
                detail: format!("expected rank-2 input, got {:?}", input.shape()),
            });
        }
        let mut norms = Vec::with_capacity(input.rows());
        let mut out = input.clone();
        for r in 0..input.rows() {
            let norm = input.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= self.epsilon {
                return Err(Error::DegenerateInput {
                    op: "l2norm_forward",
                    row: r,
                    norm,
                });
            }
            for v in out.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.cached = Some((input.clone(), norms));
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (input, norms) = self
            .cached
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "l2norm" })?;
        if grad_output.shape() != input.shape() {
            return Err(Error::ShapeMismatch {
                op: "l2norm_backward",
                lhs: grad_output.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        let mut grad_input = Tensor::zeros(input.shape());
        for r in 0..input.rows() {
            let norm = norms[r];
            let x = input.row(r);
            let g = grad_output.row(r);
            // g . y with y = x / ||x||
            let dot: f64 = g.iter().zip(x).map(|(gi, xi)| gi * xi / norm).sum();
            for ((d, gi), xi) in grad_input.row_mut(r).iter_mut().zip(g).zip(x) {
                *d = (gi - dot * xi / norm) / norm;
            }
        }
        Ok(grad_input)
    }

    fn kind(&self) -> &'static str {
        "l2norm"
    }
}

/// Floor applied to alpha after every optimizer step.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// Multiplies the input by a single positive scalar alpha.
///
/// Alpha is the one parameter the head adds. `lr_mult = 1` trains it,
/// `lr_mult = 0` keeps it fixed; the decay multiplier zeroes weight decay
/// for it in both modes (it is a radius, not a weight).
pub struct Scale {
    alpha: Parameter,
    cached_input: Option<Tensor>,
}

impl Scale {
    pub fn new(name: &str, alpha: f64, trainable: bool) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                constraint: "alpha > 0",
            });
        }
        let lr_mult = if trainable { 1.0 } else { 0.0 };
        Ok(Self {
            alpha: Parameter::new(
                format!("{name}.alpha"),
                Tensor::new(&[1], vec![alpha])?,
                lr_mult,
                0.0,
            ),
            cached_input: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.value.data()[0]
    }

    pub fn is_trainable(&self) -> bool {
        self.alpha.lr_mult != 0.0
    }

    /// Keep alpha strictly positive after an update.
    pub fn project(&mut self) {
        let v = &mut self.alpha.value.data_mut()[0];
        if *v < ALPHA_FLOOR {
            *v = ALPHA_FLOOR;
        }
    }
}

impl Layer for Scale {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let alpha = self.alpha();
        if alpha <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                constraint: "alpha > 0",
            });
        }
        let mut out = input.clone();
        out.scale_in_place(alpha);
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "scale" })?;
        if grad_output.shape() != input.shape() {
            return Err(Error::ShapeMismatch {
                op: "scale_backward",
                lhs: grad_output.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        // dl/dalpha = sum over the whole batch of dl/dz . y
        let dalpha: f64 = grad_output
            .data()
            .iter()
            .zip(input.data())
            .map(|(g, y)| g * y)
            .sum();
        self.alpha.grad.data_mut()[0] += dalpha;
        let mut grad_input = grad_output.clone();
        grad_input.scale_in_place(self.alpha());
        Ok(grad_input)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.alpha]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.alpha]
    }

    fn kind(&self) -> &'static str {
        "scale"
    }
}
