//! Mini-batch SGD training loop with momentum, a step learning-rate
//! schedule, and per-parameter multipliers.
//!
//! The update rule per parameter is
//!
//! ```text
//! v <- momentum * v - lr * lr_mult * (g + weight_decay * decay_mult * w)
//! w <- w + v
//! ```
//!
//! with `lr` read from the step schedule. A parameter with `lr_mult = 0` is
//! skipped entirely, so both its value and its velocity stay bit-identical.
//! The decay multiplier scales weight decay only; it does not touch
//! momentum handling.
//!
//! Batch composition is a pure function of `(seed, iteration)` — see
//! [`crate::rng::batch_rng`] — which is what makes checkpoint resume
//! bit-exact and keeps any prefetching pipeline incapable of changing
//! results.

use std::collections::BTreeMap;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::Parameter;
use crate::loss::{batch_accuracy, SoftmaxCrossEntropy};
use crate::network::Network;
use crate::rng::batch_rng;
use crate::tensor::Tensor;

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(iteration, multiplier)` pairs; from each iteration on, the
    /// learning rate is `base_lr * multiplier`. Iterations must be strictly
    /// increasing and multipliers in `(0, 1]`.
    pub lr_schedule: Vec<(u64, f64)>,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    /// Metrics are logged every `log_every` iterations (and at the final
    /// iteration).
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidConfig { detail });
        if self.base_lr <= 0.0 {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.log_every == 0 {
            return bad("batch_size, max_iters, and log_every must be >= 1".into());
        }
        let mut prev = None;
        for &(iter, mult) in &self.lr_schedule {
            if !(mult > 0.0 && mult <= 1.0) {
                return bad(format!("schedule multiplier must lie in (0, 1], got {mult}"));
            }
            if let Some(p) = prev {
                if iter <= p {
                    return bad(format!("schedule iterations must increase strictly at {iter}"));
                }
            }
            prev = Some(iter);
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let mut lr = self.base_lr;
        for &(start, mult) in &self.lr_schedule {
            if iteration >= start {
                lr = self.base_lr * mult;
            }
        }
        lr
    }
}

/// One metrics log row. `alpha` is empty for the plain-softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub alpha: Option<f64>,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "iter,loss,train_acc,alpha,lr"
    }

    pub fn to_csv(&self) -> String {
        let alpha = self.alpha.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iter, self.loss, self.train_acc, alpha, self.lr
        )
    }
}

/// Momentum buffers, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Tensor>,
}

/// One SGD step over the given parameters. Gradients must already be
/// accumulated; frozen parameters (`lr_mult == 0`) are untouched.
pub fn sgd_step(
    params: &mut [&mut Parameter],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for p in params.iter_mut() {
        if p.lr_mult == 0.0 {
            continue;
        }
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(p.value.shape()));
        let decay = weight_decay * p.decay_mult;
        let step = lr * p.lr_mult;
        let vd = v.data_mut();
        let wd = p.value.data_mut();
        let gd = p.grad.data();
        for i in 0..vd.len() {
            vd[i] = momentum * vd[i] - step * (gd[i] + decay * wd[i]);
            wd[i] += vd[i];
        }
    }
}

/// State carried across a checkpoint boundary.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub iteration: u64,
    pub sgd: SgdState,
    pub rng_state: u64,
}

/// Everything a finished run reports besides the trained network itself.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_iteration: u64,
    /// Worst `| ||z|| - alpha |` over every batch of the run (constrained
    /// head only).
    pub constraint_gap_max: Option<f64>,
    /// `(iteration, alpha)` at every logged row (constrained head only).
    pub alpha_trajectory: Vec<(u64, f64)>,
    pub sgd: SgdState,
    pub rng_state: u64,
}

/// Run (or resume) mini-batch SGD on `net`. `sink` sees each metrics row as
/// it is produced, so callers can stream the log to disk.
pub fn train(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    resume: Option<ResumeState>,
    mut sink: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData {
            detail: "training dataset is empty".into(),
        });
    }
    let classes = net.config().num_classes;
    if let Some((i, &label)) = data
        .labels
        .iter()
        .enumerate()
        .find(|(_, &label)| label >= classes)
    {
        return Err(Error::LabelOutOfRange {
            index: i,
            label,
            num_classes: classes,
        });
    }

    let (start_iter, mut sgd, rng_state) = match resume {
        Some(state) => (state.iteration, state.sgd, state.rng_state),
        None => (0, SgdState::default(), crate::rng::Rng::new(cfg.seed).state()),
    };

    let mut loss_fn = SoftmaxCrossEntropy::new();
    let mut metrics = Vec::new();
    let mut constraint_gap_max: Option<f64> = None;
    let mut alpha_trajectory = Vec::new();
    let mut indices = vec![0usize; cfg.batch_size];

    for iter in start_iter..cfg.max_iters {
        let mut rng = batch_rng(cfg.seed, iter);
        for slot in &mut indices {
            *slot = rng.next_below(data.len());
        }
        let (batch, labels) = data.gather(&indices);

        let logits = net.forward(&batch)?;
        let loss = loss_fn.forward(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                iteration: iter,
                detail: diagnostic_norms(net),
            });
        }
        if let Some(gap) = net.last_constraint_gap() {
            constraint_gap_max = Some(constraint_gap_max.unwrap_or(0.0).max(gap));
        }

        let acc = batch_accuracy(&logits, &labels);
        let dlogits = loss_fn.backward()?;
        net.zero_grads();
        net.backward(&dlogits)?;
        let lr = cfg.lr_at(iter);
        sgd_step(
            &mut net.parameters_mut(),
            &mut sgd,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        if let Some(scale) = net.scale_mut() {
            scale.project();
        }

        if iter % cfg.log_every == 0 || iter + 1 == cfg.max_iters {
            let row = MetricsRow {
                iter,
                loss,
                train_acc: acc,
                alpha: net.alpha(),
                lr,
            };
            if let Some(alpha) = row.alpha {
                alpha_trajectory.push((iter, alpha));
            }
            sink(&row);
            metrics.push(row);
        }
    }

    Ok(TrainOutcome {
        metrics,
        final_iteration: cfg.max_iters,
        constraint_gap_max,
        alpha_trajectory,
        sgd,
        rng_state,
    })
}

fn diagnostic_norms(net: &Network) -> String {
    let mut parts = Vec::new();
    for p in net.parameters() {
        parts.push(format!("{}={:.3e}", p.name, p.value.frob_norm()));
    }
    format!("parameter norms: {}", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AlphaMode, HeadSpec, LayerSpec, NetworkConfig};
    use crate::rng::Rng;

    fn param(name: &str, values: &[f64], lr_mult: f64, decay_mult: f64) -> Parameter {
        Parameter::new(
            name,
            Tensor::new(&[values.len()], values.to_vec()).unwrap(),
            lr_mult,
            decay_mult,
        )
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = param("w", &[0.0, 0.0], 1.0, 1.0);
        p.grad = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut state = SgdState::default();
        sgd_step(&mut [&mut p], &mut state, 1.0, 0.0, 0.0);
        assert_eq!(p.value.data(), &[-1.0, -1.0]);
    }

    #[test]
    fn zero_decay_mult_disables_weight_decay() {
        let mut p = param("alpha", &[10.0], 1.0, 0.0);
        p.grad = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut state = SgdState::default();
        sgd_step(&mut [&mut p], &mut state, 0.1, 0.0, 5e-4);
        assert_eq!(p.value.data(), &[10.0]);

        let mut q = param("w", &[10.0], 1.0, 1.0);
        q.grad = Tensor::new(&[1], vec![0.0]).unwrap();
        sgd_step(&mut [&mut q], &mut state, 0.1, 0.0, 5e-4);
        assert!(q.value.data()[0] < 10.0);
    }

    #[test]
    fn momentum_matches_hand_rolled_recurrence() {
        let mut p = param("w", &[1.0], 1.0, 0.0);
        let mut state = SgdState::default();
        let (lr, mu, g) = (0.1, 0.9, 0.5);
        let mut v_ref = 0.0;
        let mut w_ref = 1.0;
        for _ in 0..2 {
            p.grad = Tensor::new(&[1], vec![g]).unwrap();
            sgd_step(&mut [&mut p], &mut state, lr, mu, 0.0);
            v_ref = mu * v_ref - lr * g;
            w_ref += v_ref;
        }
        assert!((p.value.data()[0] - w_ref).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut p = param("alpha", &[16.0], 0.0, 0.0);
        p.grad = Tensor::new(&[1], vec![123.0]).unwrap();
        let mut state = SgdState::default();
        for _ in 0..5 {
            sgd_step(&mut [&mut p], &mut state, 0.5, 0.9, 1e-2);
        }
        assert_eq!(p.value.data()[0].to_bits(), 16.0f64.to_bits());
        assert!(state.velocity.is_empty());
    }

    #[test]
    fn schedule_is_stepwise() {
        let cfg = TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: vec![(10, 0.1), (20, 0.01)],
            batch_size: 4,
            max_iters: 30,
            seed: 1,
            log_every: 5,
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(9), 0.1);
        assert!((cfg.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(25) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn config_validation_catches_bad_schedules() {
        let mut cfg = TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: vec![(10, 0.1), (10, 0.01)],
            batch_size: 4,
            max_iters: 30,
            seed: 1,
            log_every: 5,
        };
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![(10, 1.5)];
        assert!(cfg.validate().is_err());
        cfg.lr_schedule = vec![(10, 0.5)];
        assert!(cfg.validate().is_ok());
    }

    fn blob_dataset(n_per_class: usize, seed: u64) -> LabeledDataset {
        // Two well-separated 2-D Gaussian blobs, stored as 1x1x2 images.
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            data.push(center + rng.next_gaussian(0.0, 0.5));
            data.push(-center + rng.next_gaussian(0.0, 0.5));
            labels.push(class);
        }
        LabeledDataset::new(
            Tensor::new(&[2 * n_per_class, 1, 1, 2], data).unwrap(),
            labels,
            "train",
        )
        .unwrap()
    }

    fn blob_net_config(head: HeadSpec) -> NetworkConfig {
        NetworkConfig {
            input_shape: [1, 1, 2],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 8 },
                LayerSpec::PRelu,
                LayerSpec::Dense { out: 2 },
            ],
            feature_dim: 2,
            num_classes: 2,
            classifier_bias: true,
            head,
        }
    }

    fn blob_train_config(max_iters: u64) -> TrainConfig {
        TrainConfig {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: vec![],
            batch_size: 16,
            max_iters,
            seed: 3,
            log_every: 50,
        }
    }

    #[test]
    fn separable_blobs_train_above_95_percent() {
        let data = blob_dataset(100, 5);
        let cfg = blob_train_config(200);
        let mut net = Network::build(&blob_net_config(HeadSpec::Softmax), &mut Rng::new(7)).unwrap();
        train(&mut net, &data, &cfg, None, |_| {}).unwrap();
        let acc = net.accuracy(&data.images, &data.labels, 64).unwrap();
        assert!(acc > 0.95, "train accuracy {acc}");
    }

    #[test]
    fn frozen_alpha_unchanged_over_training() {
        let data = blob_dataset(40, 5);
        let cfg = blob_train_config(60);
        let head = HeadSpec::L2Softmax(AlphaMode::Fixed(8.0));
        let mut net = Network::build(&blob_net_config(head), &mut Rng::new(7)).unwrap();
        assert_eq!(net.alpha(), Some(8.0));
        let out = train(&mut net, &data, &cfg, None, |_| {}).unwrap();
        assert_eq!(net.alpha().unwrap().to_bits(), 8.0f64.to_bits());
        assert!(out.constraint_gap_max.unwrap() < 1e-6);
    }

    #[test]
    fn trainable_alpha_moves() {
        let data = blob_dataset(40, 5);
        let cfg = blob_train_config(60);
        let head = HeadSpec::L2Softmax(AlphaMode::Trainable { init: Some(4.0) });
        let mut net = Network::build(&blob_net_config(head), &mut Rng::new(7)).unwrap();
        let out = train(&mut net, &data, &cfg, None, |_| {}).unwrap();
        assert!(net.alpha().unwrap() != 4.0);
        assert!(!out.alpha_trajectory.is_empty());
        assert!(net.alpha().unwrap() > 0.0);
    }

    #[test]
    fn first_batch_loss_near_ln_c() {
        let data = blob_dataset(60, 9);
        for head in [
            HeadSpec::Softmax,
            HeadSpec::L2Softmax(AlphaMode::Fixed(16.0)),
        ] {
            let mut net = Network::build(&blob_net_config(head), &mut Rng::new(11)).unwrap();
            let mut cfg = blob_train_config(1);
            cfg.log_every = 1;
            let out = train(&mut net, &data, &cfg, None, |_| {}).unwrap();
            let expect = 2.0f64.ln();
            let got = out.metrics[0].loss;
            assert!(
                (got - expect).abs() / expect < 0.10,
                "head {head:?}: first loss {got} vs ln C {expect}"
            );
        }
    }

    #[test]
    fn metrics_are_deterministic_across_runs() {
        let data = blob_dataset(40, 5);
        let cfg = blob_train_config(40);
        let run = || {
            let mut net =
                Network::build(&blob_net_config(HeadSpec::Softmax), &mut Rng::new(2)).unwrap();
            train(&mut net, &data, &cfg, None, |_| {}).unwrap().metrics
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.train_acc.to_bits(), y.train_acc.to_bits());
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut data = blob_dataset(10, 5);
        data.labels[3] = 9;
        let cfg = blob_train_config(5);
        let mut net = Network::build(&blob_net_config(HeadSpec::Softmax), &mut Rng::new(2)).unwrap();
        assert!(matches!(
            train(&mut net, &data, &cfg, None, |_| {}),
            Err(Error::LabelOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn metrics_row_csv_shape() {
        let row = MetricsRow {
            iter: 10,
            loss: 0.5,
            train_acc: 0.875,
            alpha: None,
            lr: 0.01,
        };
        assert_eq!(row.to_csv(), "10,0.5,0.875,,0.01");
        let row2 = MetricsRow {
            alpha: Some(16.0),
            ..row
        };
        assert_eq!(row2.to_csv(), "10,0.5,0.875,16,0.01");
    }
}
