//! Sequential networks: construction with seeded initialization, shape
//! inference, inference and training forward passes, and backpropagation
//! through the trainable suffix.

use super::layer::{Cache, Gradients, Layer, LayerKind, LayerSpec};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// An ordered stack of layers with a frozen prefix. Layers before
/// `frozen_prefix` are all non-trainable; their parameters never change
/// after construction or weight loading.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    /// Per-sample input shape, e.g. [3, 32, 32].
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer<T>>,
    pub frozen_prefix: usize,
    /// Per-sample output shape after each layer.
    pub shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Network<T> {
    /// Build a network, initializing trainable and frozen parameters alike
    /// from a ChaCha stream seeded with `seed`.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut cur = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let (layer, out) = Layer::build(i, *spec, &cur, &mut rng)?;
            layers.push(layer);
            shapes.push(out.clone());
            cur = out;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            frozen_prefix: leading_frozen(specs),
            shapes,
        })
    }

    /// Rebuild bookkeeping (shapes, frozen prefix) for layers that already
    /// carry parameters, validating parameter shapes against the geometry.
    pub fn from_parts(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            let out = super::layer::infer_shape(i, &layer.spec, &cur)?;
            let expect_params = matches!(
                layer.spec.kind,
                LayerKind::Conv { .. } | LayerKind::Fc { .. }
            );
            if expect_params != layer.weight.is_some() || expect_params != layer.bias.is_some() {
                return Err(Error::State(format!(
                    "layer {i} ({}): parameter presence mismatch",
                    layer.spec.kind.name()
                )));
            }
            if let (Some(w), LayerKind::Conv { filters, kernel: (kh, kw), .. }) =
                (&layer.weight, layer.spec.kind)
            {
                let want = vec![filters, cur[0], kh, kw];
                if w.shape != want {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: conv weight shape {:?}, expected {want:?}",
                        w.shape
                    )));
                }
            }
            if let (Some(w), LayerKind::Fc { units }) = (&layer.weight, layer.spec.kind) {
                let want = vec![units, cur.iter().product()];
                if w.shape != want {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: fc weight shape {:?}, expected {want:?}",
                        w.shape
                    )));
                }
            }
            shapes.push(out.clone());
            cur = out;
        }
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        Ok(Network {
            input_shape,
            layers,
            frozen_prefix: leading_frozen(&specs),
            shapes,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Per-sample output shape of the last layer.
    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("network has layers")
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.spec.trainable)
            .map(|l| {
                l.weight.as_ref().map_or(0, Tensor::numel) + l.bias.as_ref().map_or(0, Tensor::numel)
            })
            .sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "network input: batch of {:?} expected, got {:?}",
                self.input_shape, x.shape
            )));
        }
        Ok(())
    }

    /// Inference forward pass: dropout inactive, max-pooling dropout runs
    /// as plain max pooling.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward_infer(i, &cur)?;
        }
        Ok(cur)
    }

    /// Training forward pass. Stochastic layers draw from `rng`; caches are
    /// recorded for the trainable suffix only (the frozen prefix produces
    /// [`Cache::Skip`] entries and is never differentiated through).
    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i < self.frozen_prefix {
                let stochastic = matches!(
                    layer.spec.kind,
                    LayerKind::Dropout { .. } | LayerKind::MaxPoolDropout { .. }
                );
                cur = if stochastic {
                    layer.forward_train(i, &cur, rng)?.0
                } else {
                    layer.forward_infer(i, &cur)?
                };
                caches.push(Cache::Skip);
            } else {
                let (y, cache) = layer.forward_train(i, &cur, rng)?;
                caches.push(cache);
                cur = y;
            }
        }
        Ok((cur, caches))
    }

    /// Backpropagate `d` (the loss gradient with respect to the output of
    /// layer `last_idx`) down to the frozen boundary. Returns per-layer
    /// parameter gradients; frozen and parameterless layers hold None.
    pub fn backward_from(
        &self,
        caches: &[Cache<T>],
        last_idx: usize,
        d: Tensor<T>,
    ) -> Result<Gradients<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::State(
                "backward requires the cache vector from forward_train".into(),
            ));
        }
        let mut grads: Gradients<T> = vec![None; self.layers.len()];
        let mut cur = d;
        let mut i = last_idx;
        loop {
            if i < self.frozen_prefix {
                break;
            }
            let layer = &self.layers[i];
            let need_dx = i > self.frozen_prefix;
            let (dx, pg) = layer.backward(i, &caches[i], &cur, need_dx)?;
            if layer.spec.trainable {
                grads[i] = pg;
            }
            match dx {
                Some(dx) => cur = dx,
                None => break,
            }
            if i == 0 {
                break;
            }
            i -= 1;
        }
        Ok(grads)
    }

    /// Clone the half-open layer range `[start, end)` as a standalone
    /// network.
    pub fn subnet(&self, start: usize, end: usize) -> Result<Network<T>> {
        if start > end || end > self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "subnet range {start}..{end} outside 0..{}",
                self.layers.len()
            )));
        }
        let input_shape = if start == 0 {
            self.input_shape.clone()
        } else {
            self.shapes[start - 1].clone()
        };
        Network::from_parts(input_shape, self.layers[start..end].to_vec())
    }

    /// Copy parameters from `other` into layers `[offset, offset + n)`.
    /// Specs must match exactly; used to fold a separately trained head
    /// back into the full network.
    pub fn adopt_params(&mut self, other: &Network<T>, offset: usize) -> Result<()> {
        let n = other.layers.len();
        if offset + n > self.layers.len() {
            return Err(Error::InvalidParameter(format!(
                "adopt_params range {offset}..{} outside the network",
                offset + n
            )));
        }
        for (i, src) in other.layers.iter().enumerate() {
            let dst = &mut self.layers[offset + i];
            if dst.spec != src.spec {
                return Err(Error::State(format!(
                    "adopt_params: layer {i} spec mismatch ({:?} vs {:?})",
                    dst.spec, src.spec
                )));
            }
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
        }
        Ok(())
    }

    /// Convert the network to another precision (used to lift f32 networks
    /// into f64 for gradient checking).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            frozen_prefix: self.frozen_prefix,
            shapes: self.shapes.clone(),
        }
    }

    /// SHA-256 over the bit patterns of every non-trainable parameter, in
    /// layer order. Training must never change this digest.
    pub fn frozen_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            if layer.spec.trainable {
                continue;
            }
            for t in [layer.weight.as_ref(), layer.bias.as_ref()].into_iter().flatten() {
                for d in &t.shape {
                    hasher.update(d.to_le_bytes());
                }
                let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
                for &v in &t.data {
                    v.write_le(&mut bytes);
                }
                hasher.update(&bytes);
            }
        }
        hasher.finalize().into()
    }
}

fn leading_frozen(specs: &[LayerSpec]) -> usize {
    specs.iter().take_while(|s| !s.trainable).count()
}
