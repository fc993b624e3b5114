//! Synthetic data and hand-built networks with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::refnet::{argmax, Layer, LayerKind, RefNet};
use crate::tensor_io::{Dataset, FeatureTensor, Role};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(m: usize, d: usize, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let data = (0..m * d).map(|_| StandardNormal.sample(&mut r)).collect();
    FeatureMatrix::new(m, d, data).expect("consistent shape")
}

/// Points on a circle of `radius` with isotropic Gaussian jitter.
pub fn ring(m: usize, radius: f64, noise: f64, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let jitter = Normal::new(0.0, noise).expect("noise ≥ 0");
    let rows: Vec<[f64; 2]> = (0..m)
        .map(|_| {
            let t = r.random_range(0.0..std::f64::consts::TAU);
            [
                radius * t.cos() + jitter.sample(&mut r),
                radius * t.sin() + jitter.sample(&mut r),
            ]
        })
        .collect();
    FeatureMatrix::from_rows(&rows).expect("consistent shape")
}

/// Isotropic Gaussian cluster around `center`.
pub fn cluster(m: usize, center: &[f64], std: f64, seed: u64) -> FeatureMatrix {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, std).expect("std ≥ 0");
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| center.iter().map(|c| c + noise.sample(&mut r)).collect())
        .collect();
    FeatureMatrix::from_rows(&rows).expect("consistent shape")
}

/// Two linearly separable 2-D blobs centred at (−2, −2) and (2, 2).
pub fn two_blobs(m: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(2 * m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let y = (i % 2) as u32;
        let c = if y == 0 { -2.0 } else { 2.0 };
        for _ in 0..2 {
            let z: f64 = StandardNormal.sample(&mut r);
            data.push((c + 0.7 * z) as f32);
        }
        labels.push(y);
    }
    Dataset {
        name: "blobs".into(),
        role: Role::Train,
        inputs: FeatureTensor::new(vec![m, 2], data).expect("consistent shape"),
        labels: Some(labels),
    }
}

/// Small random network with conv, pooling and dense layers on an
/// `h × w × c` input.
pub fn random_conv_net(seed: u64) -> RefNet {
    let mut r = rng(seed);
    let kinds = [
        LayerKind::Conv2d {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: 2,
            out_channels: 3,
            stride: 1,
        },
        LayerKind::Relu,
        LayerKind::MaxPool { size: 2 },
        LayerKind::Flatten,
        LayerKind::Dense { inputs: 12, outputs: 6 },
        LayerKind::Relu,
        LayerKind::Dense { inputs: 6, outputs: 4 },
        LayerKind::Softmax,
    ];
    let layers = kinds
        .into_iter()
        .map(|k| {
            let mut l = Layer::init(k, &mut r)?;
            l.bias.iter_mut().for_each(|b| *b = 0.1 * r.random_range(-1.0..1.0));
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()
        .expect("valid layers");
    RefNet::with_default_probes(vec![6, 6, 2], layers).expect("valid network")
}

/// Two-layer random dense network `d → hidden → classes`.
pub fn random_dense_net(d: usize, hidden: usize, classes: usize, seed: u64) -> RefNet {
    let mut r = rng(seed);
    let mut layers = vec![
        Layer::init(LayerKind::Dense { inputs: d, outputs: hidden }, &mut r).unwrap(),
        Layer::relu(),
        Layer::init(LayerKind::Dense { inputs: hidden, outputs: classes }, &mut r).unwrap(),
        Layer::softmax(),
    ];
    for l in &mut layers {
        l.bias.iter_mut().for_each(|b| *b = 0.1 * r.random_range(-1.0..1.0));
    }
    RefNet::with_default_probes(vec![d], layers).expect("valid network")
}

pub fn random_inputs(shape: &[usize], n: usize, seed: u64) -> FeatureTensor {
    let mut r = rng(seed);
    let per: usize = shape.iter().product();
    let data = (0..n * per)
        .map(|_| StandardNormal.sample(&mut r))
        .collect::<Vec<f32>>();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    FeatureTensor::new(full, data).expect("consistent shape")
}

/// How the first channel of an OOD image is drawn in the planted task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlantedOod {
    /// Unit-variance pixels with the mean shifted by the given amount.
    MeanShift(f64),
    /// Zero-mean pixels with the given standard deviation.
    Scaled(f64),
}

/// A network and datasets where, by construction, only the first channel of
/// the input distinguishes ID from OOD and only the first probe point sees
/// that channel.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub net: RefNet,
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood: Dataset,
    /// Probe point that separates ID from OOD.
    pub separating_layer: usize,
}

pub const PLANTED_SIDE: usize = 8;

/// Network over `8 × 8 × 2` images:
///
/// 1. 1×1 conv, identity on both channels
/// 2. relu (probe; sees both channels)
/// 3. 1×1 conv keeping channel 1 only
/// 4. relu (probe)
/// 5. 2×2 max pool (probe)
/// 6. flatten
/// 7. dense 16 → 8 (probe)
/// 8. relu (probe; penultimate)
/// 9. dense 8 → 3 logits (probe)
/// 10. softmax
pub fn planted_net(seed: u64) -> RefNet {
    let mut r = rng(seed);
    let dense = |r: &mut ChaCha8Rng, i: usize, o: usize| {
        let mut l = Layer::init(LayerKind::Dense { inputs: i, outputs: o }, r).unwrap();
        l.bias.iter_mut().for_each(|b| *b = 0.1 * r.random_range(-1.0..1.0));
        l
    };
    let layers = vec![
        Layer::conv2d((1, 1), (2, 2), 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap(),
        Layer::relu(),
        Layer::conv2d((1, 1), (2, 1), 1, vec![0.0, 1.0], vec![0.0]).unwrap(),
        Layer::relu(),
        Layer::max_pool(2),
        Layer::flatten(),
        dense(&mut r, 16, 8),
        Layer::relu(),
        dense(&mut r, 8, 3),
        Layer::softmax(),
    ];
    RefNet::with_default_probes(vec![PLANTED_SIDE, PLANTED_SIDE, 2], layers).expect("valid network")
}

fn planted_images(n: usize, ood: Option<PlantedOod>, seed: u64) -> FeatureTensor {
    let mut r = rng(seed);
    let px = PLANTED_SIDE * PLANTED_SIDE;
    let mut data = Vec::with_capacity(n * px * 2);
    for _ in 0..n {
        for _ in 0..px {
            let z0: f64 = StandardNormal.sample(&mut r);
            let z1: f64 = StandardNormal.sample(&mut r);
            let c0 = match ood {
                None => z0,
                Some(PlantedOod::MeanShift(mu)) => z0 + mu,
                Some(PlantedOod::Scaled(s)) => s * z0,
            };
            data.push(c0 as f32);
            data.push(z1 as f32);
        }
    }
    FeatureTensor::new(vec![n, PLANTED_SIDE, PLANTED_SIDE, 2], data).expect("consistent shape")
}

/// Labels are the planted network's own predictions.
fn predicted_labels(net: &RefNet, x: &FeatureTensor) -> Vec<u32> {
    let out = net.forward_capture(x, &[]).expect("valid input");
    out.probs.rows().map(|p| argmax(p) as u32).collect()
}

pub fn planted_task(n_train: usize, n_test: usize, ood: PlantedOod, seed: u64) -> PlantedTask {
    let net = planted_net(seed);
    let train_x = planted_images(n_train, None, seed.wrapping_add(1));
    let labels = predicted_labels(&net, &train_x);
    PlantedTask {
        train: Dataset {
            name: "planted-train".into(),
            role: Role::Train,
            inputs: train_x,
            labels: Some(labels),
        },
        id_test: Dataset {
            name: "planted-id".into(),
            role: Role::IdTest,
            inputs: planted_images(n_test, None, seed.wrapping_add(2)),
            labels: None,
        },
        ood: planted_ood(n_test, ood, seed.wrapping_add(3)),
        net,
        separating_layer: 2,
    }
}

pub fn planted_ood(n: usize, kind: PlantedOod, seed: u64) -> Dataset {
    let name = match kind {
        PlantedOod::MeanShift(_) => "planted-shift",
        PlantedOod::Scaled(_) => "planted-scale",
    };
    Dataset {
        name: name.into(),
        role: Role::OodTest,
        inputs: planted_images(n, Some(kind), seed),
        labels: None,
    }
}
