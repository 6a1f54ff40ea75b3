//! SGD training with momentum, loss functions, and per-epoch curves.

use super::layer::LayerKind;
use super::network::Network;
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training loss. Both are computed on the network output; when the last
/// layer is softmax the gradient is taken directly with respect to the
/// logits for numerical stability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Mean over batch and outputs of (y - t)^2 against one-hot targets.
    MseOneHot,
    /// Mean negative log-likelihood; requires a softmax output layer.
    CrossEntropy,
}

impl Loss {
    /// Scalar loss for a batch of outputs and integer labels.
    pub fn value<T: Scalar>(self, out: &Tensor<T>, labels: &[usize]) -> f64 {
        let n = out.batch();
        let k = out.per_sample();
        match self {
            Loss::MseOneHot => {
                let mut acc = 0.0;
                for (row, &label) in labels.iter().enumerate() {
                    for (j, &y) in out.data[row * k..(row + 1) * k].iter().enumerate() {
                        let t = if j == label { 1.0 } else { 0.0 };
                        let d = y.to_f64() - t;
                        acc += d * d;
                    }
                }
                acc / (n * k) as f64
            }
            Loss::CrossEntropy => {
                let mut acc = 0.0;
                for (row, &label) in labels.iter().enumerate() {
                    let y = out.data[row * k + label].to_f64().max(1e-12);
                    acc -= y.ln();
                }
                acc / n as f64
            }
        }
    }

    /// Gradient with respect to the softmax input (logits), given the
    /// softmax output probabilities.
    pub fn grad_wrt_logits<T: Scalar>(self, probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
        let n = probs.batch();
        let k = probs.per_sample();
        let mut d = Tensor::zeros(&probs.shape);
        match self {
            Loss::MseOneHot => {
                // dL/dy = 2(y - t)/(n k), then through the softmax Jacobian.
                let scale = T::from_f64(2.0 / (n * k) as f64);
                let mut dy = Tensor::zeros(&probs.shape);
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let t = if j == label { T::ONE } else { T::ZERO };
                        dy.data[row * k + j] = scale * (probs.data[row * k + j] - t);
                    }
                }
                d = super::layer::softmax_backward(probs, &dy);
            }
            Loss::CrossEntropy => {
                let scale = T::from_f64(1.0 / n as f64);
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let t = if j == label { T::ONE } else { T::ZERO };
                        d.data[row * k + j] = scale * (probs.data[row * k + j] - t);
                    }
                }
            }
        }
        d
    }

    /// Gradient with respect to a linear (non-softmax) output.
    pub fn grad_wrt_linear<T: Scalar>(
        self,
        out: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Tensor<T>> {
        match self {
            Loss::MseOneHot => {
                let n = out.batch();
                let k = out.per_sample();
                let scale = T::from_f64(2.0 / (n * k) as f64);
                let mut d = Tensor::zeros(&out.shape);
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let t = if j == label { T::ONE } else { T::ZERO };
                        d.data[row * k + j] = scale * (out.data[row * k + j] - t);
                    }
                }
                Ok(d)
            }
            Loss::CrossEntropy => Err(Error::InvalidParameter(
                "cross-entropy loss requires a softmax output layer".into(),
            )),
        }
    }
}

/// Learning-rate step decay: multiply by `factor` from `at_epoch` onward
/// (epochs counted from zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub at_epoch: usize,
    pub factor: f64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_decay: Option<LrDecay>,
    pub loss: Loss,
    pub seed: u64,
    /// Stop once the epoch's training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: Some(LrDecay {
                at_epoch: 150,
                factor: 0.1,
            }),
            loss: Loss::MseOneHot,
            seed: 0,
            stop_at_train_accuracy: None,
        }
    }
}

/// A labeled batch: `x` is [n, ...per-sample shape], `labels[i]` is the
/// class index of sample i.
#[derive(Debug, Clone)]
pub struct TrainData<T: Scalar> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> TrainData<T> {
    pub fn new(x: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if x.batch() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} labels",
                x.batch(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidInput("empty training data".into()));
        }
        Ok(TrainData { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch's worth of curve data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Full training curve plus how the run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainingCurve {
    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,train_loss,train_accuracy,val_loss,val_accuracy\n");
        for e in &self.epochs {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.learning_rate,
                e.train_loss,
                e.train_accuracy,
                opt(e.val_loss),
                opt(e.val_accuracy)
            ));
        }
        out
    }
}

/// Fraction of rows whose argmax (first maximum on ties) equals the label.
pub fn batch_accuracy<T: Scalar>(out: &Tensor<T>, labels: &[usize]) -> f64 {
    let k = out.per_sample();
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &out.data[row * k..(row + 1) * k];
        let mut best = 0;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

fn gather_batch<T: Scalar>(data: &TrainData<T>, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let per = data.x.per_sample();
    let mut shape = data.x.shape.clone();
    shape[0] = idx.len();
    let mut x = Tensor::zeros(&shape);
    let mut labels = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        x.data[row * per..(row + 1) * per].copy_from_slice(&data.x.data[i * per..(i + 1) * per]);
        labels.push(data.labels[i]);
    }
    (x, labels)
}

/// Loss gradient entry point shared by training and gradient checking:
/// returns (loss, index of the layer whose output the gradient refers to,
/// that gradient).
pub fn loss_and_grad<T: Scalar>(
    net: &Network<T>,
    out: &Tensor<T>,
    labels: &[usize],
    loss: Loss,
) -> Result<(f64, usize, Tensor<T>)> {
    let value = loss.value(out, labels);
    let last = net.layers.len() - 1;
    if matches!(net.layers[last].spec.kind, LayerKind::Softmax) {
        if last == 0 {
            return Err(Error::InvalidParameter(
                "network cannot consist of a softmax layer alone".into(),
            ));
        }
        Ok((value, last - 1, loss.grad_wrt_logits(out, labels)))
    } else {
        Ok((value, last, loss.grad_wrt_linear(out, labels)?))
    }
}

fn validate<T: Scalar>(net: &Network<T>, data: &TrainData<T>, cfg: &TrainConfig) -> Result<()> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidParameter("epochs must be at least 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    if cfg.learning_rate < 0.0 || !cfg.learning_rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidParameter(format!(
            "momentum must be in [0, 1), got {}",
            cfg.momentum
        )));
    }
    if data.x.shape[1..] != net.input_shape[..] {
        return Err(Error::ShapeMismatch(format!(
            "training data per-sample shape {:?} does not match network input {:?}",
            &data.x.shape[1..],
            net.input_shape
        )));
    }
    let k = net.output_dim();
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {k} outputs"
        )));
    }
    Ok(())
}

/// Train the network in place with momentum SGD over shuffled minibatches.
/// Deterministic for a fixed (config seed, data order). Frozen layers and
/// any other non-trainable layers receive no updates.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &TrainData<T>,
    val: Option<&TrainData<T>>,
    cfg: &TrainConfig,
) -> Result<TrainingCurve> {
    validate(net, data, cfg)?;
    if let Some(v) = val {
        if v.x.shape[1..] != net.input_shape[..] {
            return Err(Error::ShapeMismatch(
                "validation data shape does not match network input".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Option<(Tensor<T>, Tensor<T>)>> = net
        .layers
        .iter()
        .map(|l| {
            (l.spec.trainable && l.weight.is_some()).then(|| {
                (
                    Tensor::zeros(&l.weight.as_ref().unwrap().shape),
                    Tensor::zeros(&l.bias.as_ref().unwrap().shape),
                )
            })
        })
        .collect();

    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut curve = TrainingCurve {
        epochs: Vec::with_capacity(cfg.epochs),
        stopped_early: false,
    };
    let momentum = T::from_f64(cfg.momentum);

    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_decay {
            Some(d) if epoch >= d.at_epoch => cfg.learning_rate * d.factor,
            _ => cfg.learning_rate,
        };
        let lr_t = T::from_f64(lr);
        indices.shuffle(&mut rng);

        let mut loss_acc = 0.0;
        let mut correct_acc = 0.0;
        for batch_idx in indices.chunks(cfg.batch_size) {
            let (bx, blabels) = gather_batch(data, batch_idx);
            let (out, caches) = net.forward_train(&bx, &mut rng)?;
            let (loss, last_idx, d) = loss_and_grad(net, &out, &blabels, cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became non-finite ({loss})"),
                });
            }
            loss_acc += loss * batch_idx.len() as f64;
            correct_acc += batch_accuracy(&out, &blabels) * batch_idx.len() as f64;

            let grads = net.backward_from(&caches, last_idx, d)?;
            for (i, grad) in grads.into_iter().enumerate() {
                let Some((dw, db)) = grad else { continue };
                let (vw, vb) = velocity[i].as_mut().expect("velocity for trainable layer");
                let layer = &mut net.layers[i];
                let w = layer.weight.as_mut().unwrap();
                for (v, g) in vw.data.iter_mut().zip(&dw.data) {
                    *v = momentum * *v - lr_t * *g;
                }
                for (p, v) in w.data.iter_mut().zip(&vw.data) {
                    *p += *v;
                }
                let b = layer.bias.as_mut().unwrap();
                for (v, g) in vb.data.iter_mut().zip(&db.data) {
                    *v = momentum * *v - lr_t * *g;
                }
                for (p, v) in b.data.iter_mut().zip(&vb.data) {
                    *p += *v;
                }
            }
        }

        let train_loss = loss_acc / data.len() as f64;
        let train_accuracy = correct_acc / data.len() as f64;
        let (val_loss, val_accuracy) = match val {
            Some(v) => {
                let (l, a) = evaluate(net, v, cfg.loss, cfg.batch_size)?;
                (Some(l), Some(a))
            }
            None => (None, None),
        };
        curve.epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
        if cfg.stop_at_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            curve.stopped_early = true;
            break;
        }
    }
    Ok(curve)
}

/// Inference-mode loss and accuracy over a labeled set, batched.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    data: &TrainData<T>,
    loss: Loss,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut loss_acc = 0.0;
    let mut correct_acc = 0.0;
    for batch_idx in indices.chunks(batch_size.max(1)) {
        let (bx, blabels) = gather_batch(data, batch_idx);
        let out = net.forward(&bx)?;
        loss_acc += loss.value(&out, &blabels) * batch_idx.len() as f64;
        correct_acc += batch_accuracy(&out, &blabels) * batch_idx.len() as f64;
    }
    Ok((loss_acc / data.len() as f64, correct_acc / data.len() as f64))
}
