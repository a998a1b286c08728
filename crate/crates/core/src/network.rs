//! Declarative network description and the assembled runtime stack.
//!
//! A network is a backbone of standard layers ending in the feature layer
//! (a dense projection to `feature_dim`), one head, and a classifier. With
//! the constrained head, the normalize and scale layers sit immediately
//! after the feature layer and before the classifier, so every descriptor
//! entering the classifier has norm alpha by construction.

use crate::bounds::{alpha_lower_bound, BoundQuery};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Dense, Flatten, Init, L2Normalize, Layer, MaxPool2d, PRelu, Scale};
use crate::rng::Rng;
use crate::tensor::{conv_extent, Tensor};

/// One backbone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    PRelu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out: usize,
    },
}

/// How the scale parameter behaves during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    /// Learned alpha; `init` of `None` starts at the closed-form lower
    /// bound for p = 0.9 with the configured class count.
    Trainable { init: Option<f64> },
}

/// The classification head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadSpec {
    Softmax,
    L2Softmax(AlphaMode),
}

/// Declarative description of a full network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input sample shape as (channels, height, width).
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub classifier_bias: bool,
    pub head: HeadSpec,
}

/// Shape flowing between layers during validation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Feed {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl NetworkConfig {
    /// Check the layer stack end to end and return the channel count each
    /// layer sees (used to size PReLU slopes).
    fn check(&self) -> Result<Vec<usize>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("num_classes must be >= 2, got {}", self.num_classes),
            });
        }
        if self.input_shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidConfig {
                detail: format!("input shape extents must be >= 1, got {:?}", self.input_shape),
            });
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { out }) if *out == self.feature_dim => {}
            _ => {
                return Err(Error::InvalidConfig {
                    detail: format!(
                        "the layer stack must end in a dense feature layer of width {}",
                        self.feature_dim
                    ),
                })
            }
        }
        if let HeadSpec::L2Softmax(mode) = self.head {
            match mode {
                AlphaMode::Fixed(a) if a <= 0.0 => {
                    return Err(Error::InvalidConfig {
                        detail: format!("fixed alpha must be positive, got {a}"),
                    })
                }
                AlphaMode::Trainable { init: Some(a) } if a <= 0.0 => {
                    return Err(Error::InvalidConfig {
                        detail: format!("alpha init must be positive, got {a}"),
                    })
                }
                AlphaMode::Trainable { init: None } if self.num_classes < 3 => {
                    return Err(Error::InvalidConfig {
                        detail: "default alpha init needs num_classes >= 3; give an explicit init"
                            .into(),
                    })
                }
                _ => {}
            }
        }

        let mut feed = Feed::Spatial(self.input_shape[0], self.input_shape[1], self.input_shape[2]);
        let mut channels = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::InvalidConfig {
                detail: format!("layer {i}: {detail}"),
            };
            feed = match (*spec, feed) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    Feed::Spatial(_, h, w),
                ) => {
                    let oh = conv_extent(h, pad, kernel, stride)
                        .map_err(|e| bad(e.to_string()))?;
                    let ow = conv_extent(w, pad, kernel, stride)
                        .map_err(|e| bad(e.to_string()))?;
                    channels.push(out_channels);
                    Feed::Spatial(out_channels, oh, ow)
                }
                (LayerSpec::Conv { .. }, Feed::Flat(_)) => {
                    return Err(bad("conv after flatten".into()))
                }
                (LayerSpec::MaxPool { window, stride }, Feed::Spatial(c, h, w)) => {
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(bad(format!("pool window {window} invalid for {h}x{w}")));
                    }
                    channels.push(c);
                    Feed::Spatial(c, (h - window) / stride + 1, (w - window) / stride + 1)
                }
                (LayerSpec::MaxPool { .. }, Feed::Flat(_)) => {
                    return Err(bad("pool after flatten".into()))
                }
                (LayerSpec::PRelu, f) => {
                    channels.push(match f {
                        Feed::Spatial(c, _, _) => c,
                        Feed::Flat(d) => d,
                    });
                    f
                }
                (LayerSpec::Flatten, Feed::Spatial(c, h, w)) => {
                    channels.push(c);
                    Feed::Flat(c * h * w)
                }
                (LayerSpec::Flatten, Feed::Flat(d)) => {
                    channels.push(d);
                    Feed::Flat(d)
                }
                (LayerSpec::Dense { out }, Feed::Flat(d)) => {
                    channels.push(d);
                    Feed::Flat(out)
                }
                (LayerSpec::Dense { .. }, Feed::Spatial(..)) => {
                    return Err(bad("dense needs a flatten first".into()))
                }
            };
        }
        match feed {
            Feed::Flat(d) if d == self.feature_dim => Ok(channels),
            other => Err(Error::InvalidConfig {
                detail: format!(
                    "stack ends at {other:?}, expected flat width {}",
                    self.feature_dim
                ),
            }),
        }
    }

    /// Alpha value a fresh network starts from, if the head has one.
    pub fn initial_alpha(&self) -> Option<f64> {
        match self.head {
            HeadSpec::Softmax => None,
            HeadSpec::L2Softmax(AlphaMode::Fixed(a)) => Some(a),
            HeadSpec::L2Softmax(AlphaMode::Trainable { init: Some(a) }) => Some(a),
            HeadSpec::L2Softmax(AlphaMode::Trainable { init: None }) => Some(alpha_lower_bound(
                &BoundQuery::new(self.num_classes, 0.9).expect("validated"),
            )),
        }
    }

    /// Mode byte stored in checkpoints: 0 none, 1 fixed, 2 trainable.
    pub fn alpha_mode_byte(&self) -> u8 {
        match self.head {
            HeadSpec::Softmax => 0,
            HeadSpec::L2Softmax(AlphaMode::Fixed(_)) => 1,
            HeadSpec::L2Softmax(AlphaMode::Trainable { .. }) => 2,
        }
    }
}

enum Stage {
    Conv(Conv2d),
    PRelu(PRelu),
    Pool(MaxPool2d),
    Flatten(Flatten),
    Dense(Dense),
}

impl Stage {
    fn as_layer(&mut self) -> &mut dyn Layer {
        match self {
            Stage::Conv(l) => l,
            Stage::PRelu(l) => l,
            Stage::Pool(l) => l,
            Stage::Flatten(l) => l,
            Stage::Dense(l) => l,
        }
    }

    fn parameters(&self) -> Vec<&crate::layers::Parameter> {
        match self {
            Stage::Conv(l) => l.parameters(),
            Stage::PRelu(l) => l.parameters(),
            Stage::Pool(l) => l.parameters(),
            Stage::Flatten(l) => l.parameters(),
            Stage::Dense(l) => l.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut crate::layers::Parameter> {
        match self {
            Stage::Conv(l) => l.parameters_mut(),
            Stage::PRelu(l) => l.parameters_mut(),
            Stage::Pool(l) => l.parameters_mut(),
            Stage::Flatten(l) => l.parameters_mut(),
            Stage::Dense(l) => l.parameters_mut(),
        }
    }
}

/// Assembled, trainable network.
pub struct Network {
    backbone: Vec<Stage>,
    norm: Option<L2Normalize>,
    scale: Option<Scale>,
    classifier: Dense,
    config: NetworkConfig,
    last_constraint_gap: Option<f64>,
}

impl Network {
    /// Validate the config and initialize all parameters from `rng`.
    pub fn build(config: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        let channels = config.check()?;
        let mut backbone = Vec::with_capacity(config.layers.len());
        let mut feed = Feed::Spatial(config.input_shape[0], config.input_shape[1], config.input_shape[2]);
        for (i, spec) in config.layers.iter().enumerate() {
            let name = format!("l{i}");
            let stage = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (c, h, w) = match feed {
                        Feed::Spatial(c, h, w) => (c, h, w),
                        Feed::Flat(_) => unreachable!("validated"),
                    };
                    let oh = conv_extent(h, pad, kernel, stride)?;
                    let ow = conv_extent(w, pad, kernel, stride)?;
                    feed = Feed::Spatial(out_channels, oh, ow);
                    Stage::Conv(Conv2d::new(&name, c, out_channels, kernel, stride, pad, rng))
                }
                LayerSpec::PRelu => Stage::PRelu(PRelu::new(&name, channels[i])),
                LayerSpec::MaxPool { window, stride } => {
                    if let Feed::Spatial(c, h, w) = feed {
                        feed = Feed::Spatial(c, (h - window) / stride + 1, (w - window) / stride + 1);
                    }
                    Stage::Pool(MaxPool2d::new(window, stride))
                }
                LayerSpec::Flatten => {
                    if let Feed::Spatial(c, h, w) = feed {
                        feed = Feed::Flat(c * h * w);
                    }
                    Stage::Flatten(Flatten::new())
                }
                LayerSpec::Dense { out } => {
                    let d_in = match feed {
                        Feed::Flat(d) => d,
                        Feed::Spatial(..) => unreachable!("validated"),
                    };
                    feed = Feed::Flat(out);
                    Stage::Dense(Dense::new(&name, d_in, out, true, Init::HeNormal, rng))
                }
            };
            backbone.push(stage);
        }

        let (norm, scale) = match config.head {
            HeadSpec::Softmax => (None, None),
            HeadSpec::L2Softmax(mode) => {
                let alpha = config.initial_alpha().expect("l2 head has alpha");
                let trainable = matches!(mode, AlphaMode::Trainable { .. });
                (
                    Some(L2Normalize::new()),
                    Some(Scale::new("head", alpha, trainable)?),
                )
            }
        };

        // The classifier starts small (Caffe-style fixed std) rather than
        // He-scaled: with features pinned to norm alpha, He initialization
        // at fan_in = feature_dim would blow the initial logits far past
        // the near-uniform regime.
        let classifier = Dense::new(
            "classifier",
            config.feature_dim,
            config.num_classes,
            config.classifier_bias,
            Init::Gaussian(1e-3),
            rng,
        );

        Ok(Self {
            backbone,
            norm,
            scale,
            classifier,
            config: config.clone(),
            last_constraint_gap: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Run the backbone only: per-image feature descriptors, taken before
    /// the normalize/scale pair (the head is redundant at test time).
    pub fn features(&mut self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for stage in &mut self.backbone {
            x = stage.as_layer().forward(&x)?;
        }
        Ok(x)
    }

    /// Full forward pass to logits. With the constrained head this also
    /// records the worst deviation of a classifier-input norm from alpha.
    pub fn forward(&mut self, images: &Tensor) -> Result<Tensor> {
        let features = self.features(images)?;
        let classifier_input = match (&mut self.norm, &mut self.scale) {
            (Some(norm), Some(scale)) => {
                let z = scale.forward(&norm.forward(&features)?)?;
                let alpha = scale.alpha();
                let mut gap = 0.0f64;
                for r in 0..z.rows() {
                    let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    gap = gap.max((n - alpha).abs());
                }
                self.last_constraint_gap = Some(gap);
                z
            }
            _ => features,
        };
        self.classifier.forward(&classifier_input)
    }

    /// Backpropagate from logit gradients; parameter gradients accumulate
    /// into each layer. Returns the gradient at the input images.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let mut g = self.classifier.backward(dlogits)?;
        if let (Some(norm), Some(scale)) = (&mut self.norm, &mut self.scale) {
            g = norm.backward(&scale.backward(&g)?)?;
        }
        for stage in self.backbone.iter_mut().rev() {
            g = stage.as_layer().backward(&g)?;
        }
        Ok(g)
    }

    /// Worst `| ||z|| - alpha |` seen in the most recent forward pass, if
    /// the network has a constrained head.
    pub fn last_constraint_gap(&self) -> Option<f64> {
        self.last_constraint_gap
    }

    pub fn alpha(&self) -> Option<f64> {
        self.scale.as_ref().map(|s| s.alpha())
    }

    pub(crate) fn scale_mut(&mut self) -> Option<&mut Scale> {
        self.scale.as_mut()
    }

    /// Enable the optional batch-parallel convolution kernels. The default
    /// (1) is bit-deterministic; higher counts agree within 1e-9.
    pub fn set_parallelism(&mut self, threads: usize) {
        for stage in &mut self.backbone {
            if let Stage::Conv(conv) = stage {
                conv.set_threads(threads);
            }
        }
    }

    pub fn parameters(&self) -> Vec<&crate::layers::Parameter> {
        let mut params = Vec::new();
        for stage in &self.backbone {
            params.extend(stage.parameters());
        }
        if let Some(scale) = &self.scale {
            params.extend(scale.parameters());
        }
        params.extend(self.classifier.parameters());
        params
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut crate::layers::Parameter> {
        let mut params = Vec::new();
        for stage in &mut self.backbone {
            params.extend(stage.parameters_mut());
        }
        if let Some(scale) = &mut self.scale {
            params.extend(scale.parameters_mut());
        }
        params.extend(self.classifier.parameters_mut());
        params
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Feature descriptors for a whole image set, processed in batches.
    pub fn extract_features(&mut self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let sample: usize = images.shape()[1..].iter().product();
        let mut sample_shape = images.shape().to_vec();
        let mut out = Tensor::zeros(&[n, self.config.feature_dim]);
        let mut row = 0usize;
        for chunk in images.data().chunks(batch.max(1) * sample) {
            let count = chunk.len() / sample;
            sample_shape[0] = count;
            let batch_t = Tensor::new(&sample_shape, chunk.to_vec())?;
            let feats = self.features(&batch_t)?;
            out.data_mut()[row * self.config.feature_dim
                ..(row + count) * self.config.feature_dim]
                .copy_from_slice(feats.data());
            row += count;
        }
        Ok(out)
    }

    /// Classification accuracy over an image set.
    pub fn accuracy(&mut self, images: &Tensor, labels: &[usize], batch: usize) -> Result<f64> {
        let n = images.shape()[0];
        let sample: usize = images.shape()[1..].iter().product();
        let mut sample_shape = images.shape().to_vec();
        let mut correct = 0usize;
        let mut row = 0usize;
        for chunk in images.data().chunks(batch.max(1) * sample) {
            let count = chunk.len() / sample;
            sample_shape[0] = count;
            let batch_t = Tensor::new(&sample_shape, chunk.to_vec())?;
            let logits = self.forward(&batch_t)?;
            for r in 0..count {
                let scores = logits.row(r);
                let mut best = 0usize;
                for (c, &v) in scores.iter().enumerate() {
                    if v > scores[best] {
                        best = c;
                    }
                }
                if best == labels[row + r] {
                    correct += 1;
                }
            }
            row += count;
        }
        Ok(correct as f64 / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(head: HeadSpec) -> NetworkConfig {
        NetworkConfig {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::PRelu,
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 2 },
            ],
            feature_dim: 2,
            num_classes: 3,
            classifier_bias: true,
            head,
        }
    }

    #[test]
    fn build_and_forward_shapes() {
        let cfg = tiny_config(HeadSpec::L2Softmax(AlphaMode::Fixed(8.0)));
        let mut rng = Rng::new(1);
        let mut net = Network::build(&cfg, &mut rng).unwrap();
        let x = Tensor::filled(&[5, 1, 4, 4], 0.3);
        let logits = net.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[5, 3]);
        assert!(net.last_constraint_gap().unwrap() < 1e-9);
        let f = net.features(&x).unwrap();
        assert_eq!(f.shape(), &[5, 2]);
    }

    #[test]
    fn plain_head_reports_no_gap() {
        let cfg = tiny_config(HeadSpec::Softmax);
        let mut rng = Rng::new(1);
        let mut net = Network::build(&cfg, &mut rng).unwrap();
        let x = Tensor::filled(&[2, 1, 4, 4], 0.3);
        net.forward(&x).unwrap();
        assert!(net.last_constraint_gap().is_none());
        assert!(net.alpha().is_none());
    }

    #[test]
    fn trainable_alpha_defaults_to_bound() {
        let mut cfg = tiny_config(HeadSpec::L2Softmax(AlphaMode::Trainable { init: None }));
        cfg.num_classes = 10;
        let expect = alpha_lower_bound(&BoundQuery::new(10, 0.9).unwrap());
        assert!((cfg.initial_alpha().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_bad_stacks() {
        let mut cfg = tiny_config(HeadSpec::Softmax);
        cfg.layers.pop(); // no feature layer
        assert!(Network::build(&cfg, &mut Rng::new(1)).is_err());

        let mut cfg = tiny_config(HeadSpec::Softmax);
        cfg.feature_dim = 7; // mismatched feature width
        assert!(Network::build(&cfg, &mut Rng::new(1)).is_err());

        let mut cfg = tiny_config(HeadSpec::Softmax);
        cfg.layers.insert(0, LayerSpec::Dense { out: 4 }); // dense before flatten
        assert!(Network::build(&cfg, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn identical_images_give_identical_features() {
        let cfg = tiny_config(HeadSpec::Softmax);
        let mut net = Network::build(&cfg, &mut Rng::new(3)).unwrap();
        let mut x = Tensor::filled(&[2, 1, 4, 4], 0.0);
        for i in 0..16 {
            let v = (i as f64).sin();
            x.data_mut()[i] = v;
            x.data_mut()[16 + i] = v;
        }
        let f = net.extract_features(&x, 1).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn parameter_names_are_unique() {
        let cfg = tiny_config(HeadSpec::L2Softmax(AlphaMode::Fixed(4.0)));
        let net = Network::build(&cfg, &mut Rng::new(1)).unwrap();
        let mut names: Vec<String> = net.parameters().iter().map(|p| p.name.clone()).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }
}
