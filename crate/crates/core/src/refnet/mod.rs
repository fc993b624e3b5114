//! A small layered classifier with activation capture and input gradients.
//!
//! Layers are indexed from 1: activation `l` is the output of the `l`-th
//! layer and activation 0 is the input. The last layer is always a softmax
//! and the layer before it produces the logits.

mod layer;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::features::FeatureMatrix;
use crate::tensor_io::{read_tensor, write_tensor, FeatureTensor};

pub use layer::{Layer, LayerKind, ParamGrad};
pub use train::{train, TrainConfig, TrainHistory};

/// Activations of one probe point for a batch, leading dimension = batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer_index: usize,
    pub tensor: FeatureTensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: FeatureMatrix,
    pub probs: FeatureMatrix,
    pub activations: Vec<ActivationRecord>,
}

/// Architecture descriptor persisted next to the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
    #[serde(default)]
    pub probe_points: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefNet {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    probe_points: Vec<usize>,
    // shapes[l] is the per-sample shape of activation l
    shapes: Vec<Vec<usize>>,
}

/// Indices of the relu, pooling and dense layers, excluding the softmax.
pub fn default_probe_points(layers: &[LayerKind]) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, k)| k.is_default_probe())
        .map(|(i, _)| i + 1)
        .collect()
}

/// `softmax(logits / temperature)`.
pub fn softmax_probs(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Error::InvalidArgument(format!("temperature must be positive, got {temperature}"))
    );
    ensure!(
        !logits.is_empty(),
        Error::InvalidArgument("empty logit vector".into())
    );
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(layer::softmax(&scaled))
}

impl RefNet {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, probe_points: Vec<usize>) -> Result<Self> {
        ensure!(
            !input_shape.is_empty() && input_shape.iter().all(|&d| d >= 1),
            Error::Shape(format!("invalid input shape {input_shape:?}"))
        );
        ensure!(
            layers.len() >= 2,
            Error::Shape("a network needs a logits layer and a softmax".into())
        );
        ensure!(
            matches!(layers.last().unwrap().kind, LayerKind::Softmax),
            Error::Shape("the final layer must be a softmax".into())
        );
        ensure!(
            layers[..layers.len() - 1]
                .iter()
                .all(|l| !matches!(l.kind, LayerKind::Softmax)),
            Error::Shape("softmax is only allowed as the final layer".into())
        );
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(&shapes[i])
                .map_err(|e| Error::Shape(format!("layer {}: {e}", i + 1)))?;
            shapes.push(next);
        }
        ensure!(
            shapes.last().unwrap().len() == 1 && shapes.last().unwrap()[0] >= 1,
            Error::Shape("network must end in a class vector".into())
        );
        ensure!(
            probe_points.windows(2).all(|w| w[0] < w[1]),
            Error::InvalidArgument("probe points must be strictly increasing".into())
        );
        ensure!(
            probe_points.iter().all(|&p| p >= 1 && p <= layers.len()),
            Error::InvalidArgument(format!(
                "probe points {probe_points:?} outside [1, {}]",
                layers.len()
            ))
        );
        Ok(Self {
            input_shape,
            layers,
            probe_points,
            shapes,
        })
    }

    pub fn with_default_probes(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let kinds: Vec<LayerKind> = layers.iter().map(|l| l.kind.clone()).collect();
        Self::new(input_shape, layers, default_probe_points(&kinds))
    }

    /// Randomly initialised network for an architecture.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .map(|k| Layer::init(k.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let probes = arch
            .probe_points
            .clone()
            .unwrap_or_else(|| default_probe_points(&arch.layers));
        Self::new(arch.input_shape.clone(), layers, probes)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.kind.clone()).collect(),
            probe_points: Some(self.probe_points.clone()),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn probe_points(&self) -> &[usize] {
        &self.probe_points
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Per-sample shape of activation `l` (0 = input).
    pub fn activation_shape(&self, l: usize) -> &[usize] {
        &self.shapes[l]
    }

    /// Index of the layer producing the logits.
    pub fn logits_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Last probe point strictly before the logits layer, i.e. the
    /// penultimate representation.
    pub fn penultimate_probe(&self) -> Option<usize> {
        self.probe_points
            .iter()
            .rev()
            .copied()
            .find(|&p| p < self.logits_layer())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All activations of one sample; element `l` is the output of layer `l`.
    pub fn forward_sample(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n_in: usize = self.input_shape.iter().product();
        ensure!(
            x.len() == n_in,
            Error::Shape(format!("input has {} values, expected {n_in}", x.len()))
        );
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&acts[i], &self.shapes[i], &self.shapes[i + 1]);
            acts.push(out);
        }
        Ok(acts)
    }

    pub fn logits_sample(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acts = self.forward_sample(x)?;
        acts.truncate(self.layers.len());
        Ok(acts.pop().unwrap())
    }

    /// `log max_i softmax(logits(x))_i`.
    pub fn log_max_prob(&self, x: &[f64]) -> Result<f64> {
        let z = self.logits_sample(x)?;
        Ok(log_max_softmax(&z))
    }

    fn check_batch(&self, x: &FeatureTensor) -> Result<()> {
        ensure!(
            x.rank() == self.input_shape.len() + 1 && x.sample_shape() == &self.input_shape[..],
            Error::Shape(format!(
                "batch shape {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            ))
        );
        Ok(())
    }

    /// Batched inference capturing every probe point.
    pub fn forward(&self, x: &FeatureTensor) -> Result<ForwardOutput> {
        self.forward_capture(x, &self.probe_points.clone())
    }

    /// Batched inference capturing the given probe points only.
    pub fn forward_capture(&self, x: &FeatureTensor, capture: &[usize]) -> Result<ForwardOutput> {
        self.check_batch(x)?;
        for l in capture {
            ensure!(
                self.probe_points.contains(l),
                Error::InvalidArgument(format!("layer {l} is not a probe point"))
            );
        }
        let n = x.batch_len();
        let per_sample: Vec<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi: Vec<f64> = x.sample(i).iter().map(|&v| v as f64).collect();
                self.forward_sample(&xi)
            })
            .collect::<Result<_>>()?;

        let c = self.num_classes();
        let logit_l = self.logits_layer();
        let mut logits = Vec::with_capacity(n * c);
        let mut probs = Vec::with_capacity(n * c);
        for acts in &per_sample {
            logits.extend_from_slice(&acts[logit_l]);
            probs.extend_from_slice(&acts[logit_l + 1]);
        }
        ensure!(
            logits.iter().all(|v| v.is_finite()),
            Error::NonFinite("logits".into())
        );
        let mut activations = Vec::with_capacity(capture.len());
        for &l in capture {
            let mut shape = vec![n];
            shape.extend_from_slice(&self.shapes[l]);
            let mut data = Vec::with_capacity(shape.iter().product());
            for acts in &per_sample {
                data.extend(acts[l].iter().map(|&v| v as f32));
            }
            activations.push(ActivationRecord {
                layer_index: l,
                tensor: FeatureTensor::new(shape, data)?,
            });
        }
        Ok(ForwardOutput {
            logits: FeatureMatrix::new(n, c, logits)?,
            probs: FeatureMatrix::new(n, c, probs)?,
            activations,
        })
    }

    /// Backpropagates `grad_logits` from the logits to the input, optionally
    /// accumulating parameter gradients.
    pub(crate) fn backward_from_logits(
        &self,
        acts: &[Vec<f64>],
        grad_logits: Vec<f64>,
        mut grads: Option<&mut [ParamGrad]>,
    ) -> Vec<f64> {
        let mut g = grad_logits;
        for i in (0..self.logits_layer()).rev() {
            let pg = grads.as_deref_mut().map(|gs| &mut gs[i]);
            g = self.layers[i].backward(
                &acts[i],
                &self.shapes[i],
                &acts[i + 1],
                &self.shapes[i + 1],
                &g,
                pg,
            );
        }
        g
    }

    /// ∇ₓ log max_i Q_i(x) for one sample given as a flat slice.
    pub fn input_gradient_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        let acts = self.forward_sample(x)?;
        let probs = &acts[self.layers.len()];
        let k = argmax(probs);
        // d log p_k / dz = e_k - p
        let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
        g[k] += 1.0;
        let grad = self.backward_from_logits(&acts, g, None);
        ensure!(
            grad.iter().all(|v| v.is_finite()),
            Error::NonFinite("input gradient".into())
        );
        Ok(grad)
    }

    /// Input gradient of the log winning-class probability.
    ///
    /// Accepts a single sample shaped either like the network input or with a
    /// leading batch dimension of 1; the result has the same shape.
    pub fn input_gradient(&self, x: &FeatureTensor) -> Result<FeatureTensor> {
        let single = x.shape() == &self.input_shape[..];
        let batched = x.rank() == self.input_shape.len() + 1
            && x.shape()[0] == 1
            && x.sample_shape() == &self.input_shape[..];
        ensure!(
            single || batched,
            Error::Shape(format!(
                "expected a single sample of shape {:?}, got {:?}",
                self.input_shape,
                x.shape()
            ))
        );
        let xf: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let g = self.input_gradient_f64(&xf)?;
        FeatureTensor::from_f64(x.shape().to_vec(), &g)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let arch = serde_json::to_string_pretty(&self.architecture())?;
        let arch_path = dir.join("arch.json");
        fs::write(&arch_path, arch + "\n").map_err(|e| Error::io_at(&arch_path, e))?;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(shape) = layer.weight_shape() {
                write_tensor(
                    dir.join(format!("layer{:02}_weights.oodf", i + 1)),
                    &FeatureTensor::from_f64(shape, &layer.weights)?,
                )?;
                write_tensor(
                    dir.join(format!("layer{:02}_bias.oodf", i + 1)),
                    &FeatureTensor::from_f64(vec![layer.bias.len()], &layer.bias)?,
                )?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let arch_path = dir.join("arch.json");
        let text = fs::read_to_string(&arch_path).map_err(|e| Error::io_at(&arch_path, e))?;
        let arch: Architecture = serde_json::from_str(&text)?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, kind) in arch.layers.iter().enumerate() {
            let layer = match Layer::new(kind.clone(), Vec::new(), Vec::new()) {
                Ok(l) => l,
                Err(_) => {
                    let w = read_tensor(dir.join(format!("layer{:02}_weights.oodf", i + 1)))?;
                    let b = read_tensor(dir.join(format!("layer{:02}_bias.oodf", i + 1)))?;
                    Layer::new(
                        kind.clone(),
                        w.data().iter().map(|&v| v as f64).collect(),
                        b.data().iter().map(|&v| v as f64).collect(),
                    )?
                }
            };
            layers.push(layer);
        }
        let probes = arch
            .probe_points
            .unwrap_or_else(|| default_probe_points(&arch.layers));
        Self::new(arch.input_shape, layers, probes)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_max_softmax(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    m - lse
}
