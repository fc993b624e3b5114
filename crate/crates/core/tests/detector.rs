mod common;

use oodl_core::detector::{
    calibrate_threshold, detect, find_oodl, preprocess_input, reduce_channel_mean, search_layers, sweep_epsilon_with,
    Decision, LayerFeatures, SearchOptions,
};
use oodl_core::ocsvm::OcsvmConfig;
use oodl_core::refnet::{Layer, RefNet};
use oodl_core::synthetic::{cluster, gaussian, planted_ood, planted_task, random_conv_net, random_dense_net, random_inputs, PlantedOod};
use oodl_core::FeatureTensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn map_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f32>)> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-10.0f32..10.0, h * w * c).prop_map(move |d| (vec![h, w, c], d))
    })
}

proptest! {
    #[test]
    fn channel_mean_ignores_spatial_order_and_signs((shape, data) in map_strategy(), seed in any::<u64>(), flips in any::<u64>()) {
        let (hw, c) = (shape[0] * shape[1], shape[2]);
        let mut pixels: Vec<usize> = (0..hw).collect();
        pixels.shuffle(&mut common::rng(seed));
        let mut moved = vec![0.0f32; data.len()];
        for (dst, &src) in pixels.iter().enumerate() {
            for ch in 0..c {
                let v = data[src * c + ch];
                let flip = (flips >> ((dst * c + ch) % 64)) & 1 == 1;
                moved[dst * c + ch] = if flip { -v } else { v };
            }
        }
        let a = reduce_channel_mean(&shape, &data).unwrap();
        let b = reduce_channel_mean(&shape, &moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn detect_partitions_the_line(score in -1e6f64..1e6, delta in -1e6f64..1e6) {
        let d = detect(score, delta);
        prop_assert_eq!(d == Decision::Ood, delta >= score);
    }

    #[test]
    fn calibration_reaches_the_target(scores in prop::collection::vec(-50.0f64..50.0, 1..200), tpr in 0.01f64..0.99) {
        let delta = calibrate_threshold(&scores, tpr).unwrap();
        let kept = scores.iter().filter(|&&s| s >= delta).count() as f64 / scores.len() as f64;
        prop_assert!(kept >= tpr - 1e-9);
    }
}

#[test]
fn small_perturbation_does_not_lower_confidence() {
    let nets: Vec<RefNet> = (0..5)
        .map(random_conv_net)
        .chain((0..5).map(|s| random_dense_net(8, 12, 5, s)))
        .collect();
    for (k, net) in nets.iter().enumerate() {
        let xs = random_inputs(net.input_shape(), 20, 50 + k as u64);
        for i in 0..xs.batch_len() {
            let x = xs.sample_tensor(i);
            let xp = preprocess_input(net, &x, 1e-4).unwrap();
            let f = |t: &FeatureTensor| net.log_max_prob(&t.data().iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
            assert!(f(&xp) >= f(&x) - 1e-6, "net {k} sample {i}: {} < {}", f(&xp), f(&x));
        }
    }
}

#[test]
fn zero_epsilon_and_constant_nets_leave_inputs_unchanged() {
    let net = random_conv_net(1);
    let x = random_inputs(net.input_shape(), 1, 2).sample_tensor(0);
    assert_eq!(preprocess_input(&net, &x, 0.0).unwrap(), x);

    let flat = RefNet::with_default_probes(
        vec![3],
        vec![Layer::dense(3, 2, vec![0.0; 6], vec![1.0, 0.0]).unwrap(), Layer::softmax()],
    )
    .unwrap();
    let x = FeatureTensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    assert_eq!(preprocess_input(&flat, &x, 0.1).unwrap(), x);
}

#[test]
fn search_on_constructed_features() {
    let id_train = gaussian(300, 2, 1);
    let id_test = gaussian(200, 2, 2);
    let far = cluster(200, &[40.0, 40.0], 1.0, 3);
    let inputs = vec![
        LayerFeatures {
            layer: 1,
            train: id_train.clone(),
            id_test: id_test.clone(),
            ood: far,
        },
        LayerFeatures {
            layer: 2,
            train: id_train,
            id_test: id_test.clone(),
            ood: id_test,
        },
    ];
    let r = search_layers(inputs, &OcsvmConfig::default(), &SearchOptions::default()).unwrap();
    assert_eq!(r.best_layer, 1);
    assert_eq!(r.errors[0], 0.025);
    assert!((r.errors[1] - 0.5).abs() < 1e-12, "{:?}", r.errors);
}

#[test]
fn equal_errors_pick_the_first_probe() {
    let train = gaussian(100, 3, 1);
    let id = gaussian(60, 3, 2);
    let ood = gaussian(60, 3, 3);
    let inputs = [4, 7, 9]
        .into_iter()
        .map(|layer| LayerFeatures {
            layer,
            train: train.clone(),
            id_test: id.clone(),
            ood: ood.clone(),
        })
        .collect();
    let r = search_layers(inputs, &OcsvmConfig::default(), &SearchOptions::default()).unwrap();
    assert!(r.errors.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(r.best_layer, 4);
}

#[test]
fn planted_search_picks_the_separating_layer_for_several_probes() {
    let task = planted_task(300, 200, PlantedOod::MeanShift(2.0), 21);
    let opts = SearchOptions::default();
    let cfg = OcsvmConfig::default();
    let first = find_oodl(&task.net, &task.train.inputs, &task.id_test.inputs, &task.ood.inputs, &cfg, &opts).unwrap();
    assert_eq!(first.best_layer, task.separating_layer);
    assert!(first.errors.iter().all(|e| (0.0..=1.0).contains(e)));
    let argmin = first
        .errors
        .iter()
        .enumerate()
        .fold(0, |b, (i, &e)| if e < first.errors[b] { i } else { b });
    assert_eq!(first.layers[argmin], first.best_layer);

    for (k, kind) in [PlantedOod::MeanShift(2.5), PlantedOod::Scaled(3.0)].into_iter().enumerate() {
        let other = planted_ood(200, kind, 900 + k as u64);
        let r = find_oodl(&task.net, &task.train.inputs, &task.id_test.inputs, &other.inputs, &cfg, &opts).unwrap();
        assert_eq!(r.best_layer, first.best_layer, "{kind:?}");
    }
}

#[test]
fn sweep_tie_and_singleton_rules() {
    let constant = |_: f64| Ok(((0..50).map(f64::from).collect(), (0..50).map(f64::from).collect()));
    let grid = oodl_core::detector::DEFAULT_EPSILON_GRID;
    assert_eq!(sweep_epsilon_with(&grid, 0.95, 0, constant).unwrap().best_epsilon, 0.0);
    assert_eq!(sweep_epsilon_with(&[0.0], 0.95, 0, constant).unwrap().best_epsilon, 0.0);
    // FPR falls as ε grows until 0.01, then rises again
    let shaped = |e: f64| {
        let shift = 100.0 - 10_000.0 * (e - 0.01).abs();
        Ok(((0..100).map(|v| f64::from(v) + shift).collect(), (0..100).map(f64::from).collect()))
    };
    assert_eq!(sweep_epsilon_with(&grid, 0.95, 0, shaped).unwrap().best_epsilon, 0.01);
}
