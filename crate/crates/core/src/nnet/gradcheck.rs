//! Central finite-difference gradient verification, run in f64.
//!
//! Stochastic layers are handled by reseeding the forward rng identically
//! for every loss evaluation, so dropout masks are constant across the
//! perturbed evaluations and the loss is a deterministic function of the
//! parameters.

use super::network::Network;
use super::tensor::Tensor;
use super::train::{loss_and_grad, Loss};
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative error across all checked parameters.
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Relative error with a floor: gradients whose magnitudes are both below
/// 1e-6 are compared absolutely at 1e-8 (reported as 0 when they agree,
/// 1.0 when they do not), avoiding meaningless ratios of rounding noise.
fn rel_error(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs());
    if denom < 1e-6 {
        if (analytic - fd).abs() < 1e-8 {
            0.0
        } else {
            1.0
        }
    } else {
        (analytic - fd).abs() / denom
    }
}

fn loss_eval(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    loss: Loss,
    rng_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (out, _) = net.forward_train(x, &mut rng)?;
    Ok(loss.value(&out, labels))
}

/// Compare analytic gradients against central finite differences over
/// every trainable parameter of the network.
pub fn check_gradients(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    loss: Loss,
    rng_seed: u64,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let (out, caches) = net.forward_train(x, &mut rng)?;
        let (_, last_idx, d) = loss_and_grad(net, &out, labels, loss)?;
        net.backward_from(&caches, last_idx, d)?
    };

    let mut max_rel_error: f64 = 0.0;
    let mut params_checked = 0;
    for li in 0..net.layers.len() {
        let Some((dw, db)) = analytic[li].as_ref().map(|(w, b)| (w.clone(), b.clone())) else {
            continue;
        };
        for (slot, grad) in [(0, dw), (1, db)] {
            for j in 0..grad.numel() {
                let read = |net: &Network<f64>| {
                    let l = &net.layers[li];
                    let t = if slot == 0 {
                        l.weight.as_ref().unwrap()
                    } else {
                        l.bias.as_ref().unwrap()
                    };
                    t.data[j]
                };
                let write = |net: &mut Network<f64>, v: f64| {
                    let l = &mut net.layers[li];
                    let t = if slot == 0 {
                        l.weight.as_mut().unwrap()
                    } else {
                        l.bias.as_mut().unwrap()
                    };
                    t.data[j] = v;
                };
                let orig = read(net);
                write(net, orig + h);
                let plus = loss_eval(net, x, labels, loss, rng_seed)?;
                write(net, orig - h);
                let minus = loss_eval(net, x, labels, loss, rng_seed)?;
                write(net, orig);
                let fd = (plus - minus) / (2.0 * h);
                max_rel_error = max_rel_error.max(rel_error(grad.data[j], fd));
                params_checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        params_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::layer::{LayerKind, LayerSpec};
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_data(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0..k)).collect()
    }

    fn check(specs: Vec<LayerSpec>, input: &[usize], loss: Loss, seed: u64) -> f64 {
        let mut net = Network::<f64>::new(input, &specs, seed).unwrap();
        let batch = 3;
        let mut shape = vec![batch];
        shape.extend_from_slice(input);
        let x = random_input(&shape, seed + 50);
        let labels = random_labels(batch, net.output_dim(), seed + 90);
        check_gradients(&mut net, &x, &labels, loss, seed + 130, 1e-5)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..3 {
            let specs = vec![
                LayerSpec::trainable(LayerKind::Conv {
                    filters: 2,
                    kernel: (3, 3),
                    stride: 1,
                    pad: 1,
                }),
                LayerSpec::trainable(LayerKind::Fc { units: 3 }),
                LayerSpec::trainable(LayerKind::Softmax),
            ];
            let err = check(specs, &[2, 5, 5], Loss::MseOneHot, seed);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn strided_padded_conv_gradients_match() {
        let specs = vec![
            LayerSpec::trainable(LayerKind::Conv {
                filters: 3,
                kernel: (2, 2),
                stride: 2,
                pad: 1,
            }),
            LayerSpec::trainable(LayerKind::Fc { units: 2 }),
            LayerSpec::trainable(LayerKind::Softmax),
        ];
        let err = check(specs, &[1, 6, 6], Loss::MseOneHot, 11);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn relu_and_maxpool_gradients_match() {
        for seed in 0..3 {
            let specs = vec![
                LayerSpec::trainable(LayerKind::Conv {
                    filters: 2,
                    kernel: (3, 3),
                    stride: 1,
                    pad: 0,
                }),
                LayerSpec::trainable(LayerKind::Relu),
                LayerSpec::trainable(LayerKind::MaxPool { window: 2, stride: 2 }),
                LayerSpec::trainable(LayerKind::Fc { units: 3 }),
                LayerSpec::trainable(LayerKind::Softmax),
            ];
            let err = check(specs, &[1, 6, 6], Loss::MseOneHot, seed + 20);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn cross_entropy_gradients_match() {
        for seed in 0..3 {
            let specs = vec![
                LayerSpec::trainable(LayerKind::Fc { units: 4 }),
                LayerSpec::trainable(LayerKind::Softmax),
            ];
            let err = check(specs, &[6], Loss::CrossEntropy, seed + 40);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn dropout_gradients_match_with_pinned_masks() {
        let specs = vec![
            LayerSpec::trainable(LayerKind::Fc { units: 8 }),
            LayerSpec::trainable(LayerKind::Dropout { p: 0.4 }),
            LayerSpec::trainable(LayerKind::Fc { units: 3 }),
            LayerSpec::trainable(LayerKind::Softmax),
        ];
        let err = check(specs, &[5], Loss::MseOneHot, 60);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn maxpool_dropout_gradients_match_with_pinned_masks() {
        let specs = vec![
            LayerSpec::trainable(LayerKind::Conv {
                filters: 2,
                kernel: (3, 3),
                stride: 1,
                pad: 1,
            }),
            LayerSpec::trainable(LayerKind::MaxPoolDropout {
                window: 2,
                stride: 2,
                p: 0.3,
            }),
            LayerSpec::trainable(LayerKind::Fc { units: 2 }),
            LayerSpec::trainable(LayerKind::Softmax),
        ];
        let err = check(specs, &[1, 4, 4], Loss::MseOneHot, 70);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn frozen_prefix_is_not_checked() {
        let specs = vec![
            LayerSpec::frozen(LayerKind::Fc { units: 6 }),
            LayerSpec::trainable(LayerKind::Fc { units: 2 }),
            LayerSpec::trainable(LayerKind::Softmax),
        ];
        let mut net = Network::<f64>::new(&[4], &specs, 0).unwrap();
        let x = random_input(&[2, 4], 1);
        let report =
            check_gradients(&mut net, &x, &[0, 1], Loss::MseOneHot, 2, 1e-5).unwrap();
        // Only the second fc layer's 6*2 weights and 2 biases are swept.
        assert_eq!(report.params_checked, 14);
        assert!(report.max_rel_error < 1e-4);
    }
}
