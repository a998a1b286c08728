//! Forward/backward implementations of every layer in the training stack.
//!
//! Each layer caches what its backward pass needs during `forward`; a layer
//! instance is therefore single-threaded, and `backward` before `forward`
//! is a state error. Parameter gradients are *accumulated* (summed over the
//! batch) into [`Parameter::grad`]; the 1/M factor lives in the loss.

mod conv;
mod norm;

pub use conv::{Conv2d, MaxPool2d};
pub use norm::{L2Normalize, Scale};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// A trainable tensor: value, accumulated gradient, and the per-parameter
/// learning-rate / weight-decay multipliers. `lr_mult = 0` freezes the
/// parameter: the optimizer skips it entirely, so its value and velocity
/// stay bit-identical across steps.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub lr_mult: f64,
    pub decay_mult: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, lr_mult: f64, decay_mult: f64) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            lr_mult,
            decay_mult,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean Gaussian with std `sqrt(2 / fan_in)`.
    HeNormal,
    /// Zero-mean Gaussian with a fixed std (used for the classifier so the
    /// initial loss sits near ln C even when the head scales features).
    Gaussian(f64),
}

impl Init {
    fn draw(self, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
        let std = match self {
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
            Init::Gaussian(s) => s,
        };
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.next_gaussian(0.0, std)).collect())
            .expect("init shape")
    }
}

/// Common layer interface. `backward` returns the gradient with respect to
/// the layer input and accumulates parameter gradients as a side effect.
pub trait Layer {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;
    fn parameters(&self) -> Vec<&Parameter> {
        Vec::new()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        Vec::new()
    }
    fn kind(&self) -> &'static str;
}

/// Fully connected layer: `y = x W (+ b)` with `W` of shape `D_in x D_out`.
pub struct Dense {
    weight: Parameter,
    bias: Option<Parameter>,
    cached_input: Option<Tensor>,
}

impl Dense {
    pub fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        use_bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = Parameter::new(
            format!("{name}.weight"),
            init.draw(&[d_in, d_out], d_in, rng),
            1.0,
            1.0,
        );
        let bias = use_bias.then(|| {
            Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out]), 1.0, 1.0)
        });
        Self {
            weight,
            bias,
            cached_input: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }
}

impl Layer for Dense {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        if input.rank() != 2 || input.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                lhs: input.shape().to_vec(),
                rhs: self.weight.value.shape().to_vec(),
            });
        }
        let (m, k, n) = (input.rows(), self.input_dim(), self.output_dim());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            1.0,
            input.data(),
            false,
            self.weight.value.data(),
            false,
            0.0,
            out.data_mut(),
        );
        if let Some(b) = &self.bias {
            for row in 0..m {
                for (o, bv) in out.row_mut(row).iter_mut().zip(b.value.data()) {
                    *o += bv;
                }
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "dense" })?;
        let (m, k, n) = (input.rows(), self.input_dim(), self.output_dim());
        if grad_output.rank() != 2 || grad_output.rows() != m || grad_output.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "dense_backward",
                lhs: grad_output.shape().to_vec(),
                rhs: vec![m, n],
            });
        }
        // dW += x^T dy
        gemm(
            k,
            m,
            n,
            1.0,
            input.data(),
            true,
            grad_output.data(),
            false,
            1.0,
            self.weight.grad.data_mut(),
        );
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for row in 0..m {
                for (g, d) in grad_output.row(row).iter().zip(db.iter_mut()) {
                    *d += g;
                }
            }
        }
        // dx = dy W^T
        let mut grad_input = Tensor::zeros(&[m, k]);
        gemm(
            m,
            n,
            k,
            1.0,
            grad_output.data(),
            false,
            self.weight.value.data(),
            true,
            0.0,
            grad_input.data_mut(),
        );
        Ok(grad_input)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        let mut p = vec![&self.weight];
        if let Some(b) = &self.bias {
            p.push(b);
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }

    fn kind(&self) -> &'static str {
        "dense"
    }
}

/// PReLU with one slope per channel (axis 1 of the input).
pub struct PRelu {
    slopes: Parameter,
    cached_input: Option<Tensor>,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        // He et al. initialize the slopes at 0.25; they take no weight decay.
        let slopes = Parameter::new(
            format!("{name}.slopes"),
            Tensor::filled(&[channels], 0.25),
            1.0,
            0.0,
        );
        Self {
            slopes,
            cached_input: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.slopes.value.shape()[0]
    }

    fn channel_geometry(&self, t: &Tensor) -> Result<usize> {
        if t.rank() < 2 || t.shape()[1] != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "prelu",
                lhs: t.shape().to_vec(),
                rhs: vec![self.channels()],
            });
        }
        Ok(t.shape()[2..].iter().product())
    }
}

impl Layer for PRelu {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let inner = self.channel_geometry(input)?;
        let c = self.channels();
        let slopes = self.slopes.value.data();
        let mut out = input.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < 0.0 {
                *v *= slopes[(i / inner) % c];
            }
        }
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "prelu" })?;
        if grad_output.shape() != input.shape() {
            return Err(Error::ShapeMismatch {
                op: "prelu_backward",
                lhs: grad_output.shape().to_vec(),
                rhs: input.shape().to_vec(),
            });
        }
        let inner = self.channel_geometry(&input)?;
        let c = self.channels();
        let slopes = self.slopes.value.data();
        let dslopes = self.slopes.grad.data_mut();
        let mut grad_input = grad_output.clone();
        for (i, (g, &x)) in grad_input
            .data_mut()
            .iter_mut()
            .zip(input.data())
            .enumerate()
        {
            if x < 0.0 {
                let ch = (i / inner) % c;
                dslopes[ch] += *g * x;
                *g *= slopes[ch];
            }
        }
        Ok(grad_input)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.slopes]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.slopes]
    }

    fn kind(&self) -> &'static str {
        "prelu"
    }
}

/// Collapse everything after the batch axis into one dimension.
pub struct Flatten {
    cached_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self { cached_shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let n = input.shape()[0];
        let rest: usize = input.shape()[1..].iter().product();
        self.cached_shape = Some(input.shape().to_vec());
        input.clone().reshaped(&[n, rest])
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let shape = self
            .cached_shape
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "flatten" })?;
        grad_output.clone().reshaped(&shape)
    }

    fn kind(&self) -> &'static str {
        "flatten"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_weight_passes_input_through() {
        let mut rng = Rng::new(1);
        let mut layer = Dense::new("fc", 2, 2, true, Init::HeNormal, &mut rng);
        layer.weight.value = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[&[3.0, -4.0], &[0.5, 2.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_without_bias_has_single_parameter() {
        let mut rng = Rng::new(1);
        let layer = Dense::new("fc", 3, 2, false, Init::HeNormal, &mut rng);
        assert_eq!(layer.parameters().len(), 1);
    }

    #[test]
    fn dense_backward_before_forward_errors() {
        let mut rng = Rng::new(1);
        let mut layer = Dense::new("fc", 2, 2, false, Init::HeNormal, &mut rng);
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            layer.backward(&g),
            Err(Error::BackwardBeforeForward { .. })
        ));
    }

    #[test]
    fn dense_grads_accumulate_over_batch() {
        let mut rng = Rng::new(2);
        let mut layer = Dense::new("fc", 2, 1, true, Init::HeNormal, &mut rng);
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        layer.forward(&x).unwrap();
        let dy = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        layer.backward(&dy).unwrap();
        assert_eq!(layer.weight.grad.data(), &[2.0, 4.0]);
        assert_eq!(layer.bias.as_ref().unwrap().grad.data(), &[2.0]);
    }

    #[test]
    fn prelu_slope_one_is_identity_on_negatives() {
        let mut layer = PRelu::new("act", 3);
        layer.slopes.value.fill(1.0);
        let x = Tensor::from_rows(&[&[-1.0, -2.0, 3.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn prelu_scales_negative_side_per_channel() {
        let mut layer = PRelu::new("act", 2);
        layer.slopes.value = Tensor::new(&[2], vec![0.5, 0.1]).unwrap();
        let x = Tensor::from_rows(&[&[-2.0, -10.0], &[4.0, -1.0]]).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[-1.0, -1.0, 4.0, -0.1]);
    }

    #[test]
    fn flatten_round_trips_shape() {
        let mut layer = Flatten::new();
        let x = Tensor::zeros(&[2, 3, 4, 5]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 60]);
        let g = layer.backward(&y).unwrap();
        assert_eq!(g.shape(), &[2, 3, 4, 5]);
    }
}
