//! Convolution and max-pooling layers over the tensor-core kernels.

use crate::error::{Error, Result};
use crate::layers::{Init, Layer, Parameter};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// 2-D convolution layer (cross-correlation) with per-filter bias.
pub struct Conv2d {
    kernels: Parameter,
    bias: Parameter,
    stride: usize,
    pad: usize,
    threads: usize,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let kernels = Parameter::new(
            format!("{name}.weight"),
            Init::HeNormal.draw(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            1.0,
            1.0,
        );
        let bias = Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]), 1.0, 1.0);
        Self {
            kernels,
            bias,
            stride,
            pad,
            threads: 1,
            cached_input: None,
        }
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = threads.max(1);
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.value.shape()[0]
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut out =
            tensor::conv2d_threaded(input, &self.kernels.value, self.stride, self.pad, self.threads)?;
        let (f, area) = (out.shape()[1], out.shape()[2] * out.shape()[3]);
        let bias = self.bias.value.data();
        for chunk in out.data_mut().chunks_mut(f * area) {
            for (fi, plane) in chunk.chunks_mut(area).enumerate() {
                let b = bias[fi];
                for v in plane {
                    *v += b;
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
            .ok_or(Error::BackwardBeforeForward { layer: "conv2d" })?;
        let (grad_input, grad_kernels) = tensor::conv2d_backward(
            &input,
            &self.kernels.value,
            grad_output,
            self.stride,
            self.pad,
            self.threads,
        )?;
        self.kernels.grad.add_scaled(&grad_kernels, 1.0)?;
        let (f, area) = (
            grad_output.shape()[1],
            grad_output.shape()[2] * grad_output.shape()[3],
        );
        let db = self.bias.grad.data_mut();
        for chunk in grad_output.data().chunks(f * area) {
            for (fi, plane) in chunk.chunks(area).enumerate() {
                db[fi] += plane.iter().sum::<f64>();
            }
        }
        Ok(grad_input)
    }

    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.kernels, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.kernels, &mut self.bias]
    }

    fn kind(&self) -> &'static str {
        "conv2d"
    }
}

/// Max pooling; the forward argmax indices route gradients back.
pub struct MaxPool2d {
    window: usize,
    stride: usize,
    cached: Option<(Vec<usize>, Vec<usize>)>, // (input shape, argmax)
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            cached: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, argmax) = tensor::maxpool2d(input, self.window, self.stride)?;
        self.cached = Some((input.shape().to_vec(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (in_shape, argmax) = self
            .cached
            .take()
            .ok_or(Error::BackwardBeforeForward { layer: "maxpool" })?;
        if grad_output.len() != argmax.len() {
            return Err(Error::ShapeMismatch {
                op: "maxpool_backward",
                lhs: grad_output.shape().to_vec(),
                rhs: in_shape,
            });
        }
        let mut grad_input = Tensor::zeros(&in_shape);
        let gi = grad_input.data_mut();
        for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
            gi[idx] += g; // overlapping windows may share a winner
        }
        Ok(grad_input)
    }

    fn kind(&self) -> &'static str {
        "maxpool"
    }
}
