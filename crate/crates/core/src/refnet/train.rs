use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, ParamGrad, RefNet};
use crate::error::{ensure, Error, Result};
use crate::tensor_io::Dataset;

/// Plain mini-batch gradient descent on the cross-entropy loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean cross-entropy over each epoch, measured during the pass.
    pub epoch_losses: Vec<f64>,
    /// Training accuracy of the returned parameters.
    pub final_accuracy: f64,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<ParamGrad>,
}

fn sample_grad(net: &RefNet, x: &[f64], label: usize) -> Result<SampleGrad> {
    let acts = net.forward_sample(x)?;
    let probs = &acts[net.num_layers()];
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    // d CE / dz = p - e_y
    let mut g = probs.clone();
    g[label] -= 1.0;
    let mut grads: Vec<ParamGrad> = net.layers().iter().map(ParamGrad::zeros_like).collect();
    net.backward_from_logits(&acts, g, Some(&mut grads));
    Ok(SampleGrad { loss, grads })
}

pub fn train(net: &RefNet, data: &Dataset, cfg: &TrainConfig) -> Result<(RefNet, TrainHistory)> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("dataset {} has no labels", data.name)))?;
    data.check_labels(net.num_classes())?;
    ensure!(
        cfg.batch_size >= 1,
        Error::InvalidArgument("batch size must be ≥ 1".into())
    );
    ensure!(
        cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite(),
        Error::InvalidArgument(format!("invalid learning rate {}", cfg.learning_rate))
    );
    ensure!(
        data.inputs.sample_shape() == net.input_shape(),
        Error::Shape(format!(
            "training inputs {:?} do not match network input {:?}",
            data.inputs.sample_shape(),
            net.input_shape()
        ))
    );
    let n = data.len();
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|i| data.inputs.sample(i).iter().map(|&v| v as f64).collect())
        .collect();

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| sample_grad(&net, &inputs[i], labels[i] as usize))
                .collect::<Result<_>>()?;
            // summed in batch order so results do not depend on scheduling
            let mut acc: Vec<ParamGrad> =
                net.layers().iter().map(ParamGrad::zeros_like).collect();
            for s in &per_sample {
                total += s.loss;
                for (a, g) in acc.iter_mut().zip(&s.grads) {
                    a.add_assign(g);
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            if step == 0.0 {
                continue;
            }
            for (layer, g) in net.layers_mut().iter_mut().zip(&acc) {
                layer
                    .weights
                    .iter_mut()
                    .zip(&g.weights)
                    .for_each(|(w, d)| *w -= step * d);
                layer
                    .bias
                    .iter_mut()
                    .zip(&g.bias)
                    .for_each(|(b, d)| *b -= step * d);
            }
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let correct = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| -> Result<usize> {
            let acts = net.forward_sample(x)?;
            Ok(usize::from(argmax(&acts[net.num_layers()]) == y as usize))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok((
        net,
        TrainHistory {
            epoch_losses,
            final_accuracy: correct as f64 / n.max(1) as f64,
        },
    ))
}
