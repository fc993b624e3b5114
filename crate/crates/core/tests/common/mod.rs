//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use oodl_core::refnet::{LayerKind, RefNet};
use oodl_core::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pairwise-comparison AUROC, in percent.
pub fn auroc_pairwise(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    100.0 * wins / (id.len() * ood.len()) as f64
}

/// Average precision by enumerating every distinct threshold and counting
/// from scratch at each one. `pos` ranks first when its score is larger.
pub fn ap_enumerated(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count() as f64;
        let fp = neg.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / pos.len() as f64;
        if tp + fp > 0.0 {
            ap += (recall - prev_recall) * tp / (tp + fp);
        }
        prev_recall = recall;
    }
    100.0 * ap
}

pub fn aupr_in_oracle(id: &[f64], ood: &[f64]) -> f64 {
    ap_enumerated(id, ood)
}

pub fn aupr_out_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
    ap_enumerated(&neg(ood), &neg(id))
}

/// FPR at the smallest threshold in the ID scores that still keeps at least
/// `tpr` of them, found by scanning candidate thresholds.
pub fn fpr_scan(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let mut cands = id.to_vec();
    cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = id.len() as f64;
    let delta = cands
        .iter()
        .copied()
        .find(|&t| id.iter().filter(|&&s| s >= t).count() as f64 >= tpr * n - 1e-9)
        .unwrap();
    100.0 * ood.iter().filter(|&&s| s >= delta).count() as f64 / ood.len() as f64
}

pub fn rbf_gram(x: &FeatureMatrix, gamma: f64) -> Vec<Vec<f64>> {
    let m = x.n_rows();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-gamma * d2).exp()
                })
                .collect()
        })
        .collect()
}

/// Euclidean projection onto {0 ≤ a ≤ c, Σa = 1} by bisection on the shift.
fn project_capped_simplex(v: &[f64], c: f64) -> Vec<f64> {
    let mass = |t: f64| v.iter().map(|x| (x - t).clamp(0.0, c)).sum::<f64>();
    let (mut lo, mut hi) = (
        v.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0,
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0,
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    v.iter().map(|x| (x - t).clamp(0.0, c)).collect()
}

fn quad(k: &[Vec<f64>], a: &[f64]) -> f64 {
    let mut s = 0.0;
    for (i, ri) in k.iter().enumerate() {
        for (j, kij) in ri.iter().enumerate() {
            s += a[i] * a[j] * kij;
        }
    }
    0.5 * s
}

/// Minimum of ½αᵀKα over the capped simplex by accelerated projected
/// gradient descent.
pub fn ocsvm_dual_pg(k: &[Vec<f64>], c: f64, iters: usize) -> f64 {
    let m = k.len();
    // Gershgorin bound on the largest eigenvalue
    let l = k.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut x = project_capped_simplex(&vec![1.0 / m as f64; m], c);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = quad(k, &x);
    for _ in 0..iters {
        let g: Vec<f64> = (0..m).map(|i| k[i].iter().zip(&y).map(|(a, b)| a * b).sum()).collect();
        let step: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - gi / l).collect();
        let xn = project_capped_simplex(&step, c);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = xn.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / tn * (a - b)).collect();
        x = xn;
        t = tn;
        best = best.min(quad(k, &x));
    }
    best
}

/// Encodes which linear piece of the network `x` lies in: the sign of every
/// relu input, the argmax of every pooling window and the predicted class.
pub fn activation_pattern(net: &RefNet, x: &[f64]) -> Vec<i64> {
    let acts = net.forward_sample(x).unwrap();
    let mut pat = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        let input = &acts[i];
        let in_shape = net.activation_shape(i);
        match &layer.kind {
            LayerKind::Relu => pat.extend(input.iter().map(|&v| (v > 0.0) as i64)),
            LayerKind::MaxPool { size } => {
                let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                for oy in 0..h / size {
                    for ox in 0..w / size {
                        for ch in 0..c {
                            let mut best = (f64::NEG_INFINITY, 0i64);
                            for dy in 0..*size {
                                for dx in 0..*size {
                                    let v = input[((oy * size + dy) * w + ox * size + dx) * c + ch];
                                    if v > best.0 {
                                        best = (v, (dy * size + dx) as i64);
                                    }
                                }
                            }
                            pat.push(best.1);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let logits = &acts[net.logits_layer()];
    let cls = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    pat.push(cls as i64);
    pat
}

/// Central differences of log max softmax, or `None` when some ±h probe
/// leaves the linear piece containing `x`.
pub fn fd_gradient(net: &RefNet, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let base = activation_pattern(net, x);
    let mut g = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        if activation_pattern(net, &xp) != base {
            return None;
        }
        let fp = net.log_max_prob(&xp).unwrap();
        xp[k] = x[k] - h;
        if activation_pattern(net, &xp) != base {
            return None;
        }
        let fm = net.log_max_prob(&xp).unwrap();
        xp[k] = x[k];
        g.push((fp - fm) / (2.0 * h));
    }
    Some(g)
}

pub fn max_rel_err(g: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    g.iter().zip(reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Draws inputs until one sits strictly inside a linear piece.
pub fn fd_checked_input(net: &RefNet, seed: u64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let d: usize = net.input_shape().iter().product();
    let mut r = rng(seed);
    loop {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        if let Some(g) = fd_gradient(net, &x, h) {
            return (x, g);
        }
    }
}

/// Naive layer-by-layer evaluation written independently of the library's
/// forward pass; entry `l` is the output of layer `l`, entry 0 the input.
pub fn naive_activations(net: &RefNet, x: &[f64]) -> Vec<Vec<f64>> {
    let mut cur = x.to_vec();
    let mut shape = net.input_shape().to_vec();
    let mut all = vec![cur.clone()];
    for layer in net.layers() {
        match &layer.kind {
            LayerKind::Dense { inputs, outputs } => {
                // weights laid out [inputs, outputs]
                cur = (0..*outputs)
                    .map(|o| layer.bias[o] + (0..*inputs).map(|i| layer.weights[i * outputs + o] * cur[i]).sum::<f64>())
                    .collect();
                shape = vec![*outputs];
            }
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                stride,
            } => {
                let (h, w) = (shape[0], shape[1]);
                let oh = (h - kernel_h) / stride + 1;
                let ow = (w - kernel_w) / stride + 1;
                let mut out = vec![0.0; oh * ow * out_channels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for oc in 0..*out_channels {
                            let mut s = layer.bias[oc];
                            for ky in 0..*kernel_h {
                                for kx in 0..*kernel_w {
                                    for ic in 0..*in_channels {
                                        let iy = oy * stride + ky;
                                        let ix = ox * stride + kx;
                                        // weights laid out [kh, kw, in, out]
                                        let wi = ((ky * kernel_w + kx) * in_channels + ic) * out_channels + oc;
                                        s += layer.weights[wi] * cur[(iy * w + ix) * in_channels + ic];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * out_channels + oc] = s;
                        }
                    }
                }
                cur = out;
                shape = vec![oh, ow, *out_channels];
            }
            LayerKind::Relu => cur.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::MaxPool { size } => {
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / size, w / size);
                let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
                for y in 0..oh * size {
                    for x in 0..ow * size {
                        for ch in 0..c {
                            let o = &mut out[((y / size) * ow + x / size) * c + ch];
                            *o = o.max(cur[(y * w + x) * c + ch]);
                        }
                    }
                }
                cur = out;
                shape = vec![oh, ow, c];
            }
            LayerKind::Flatten => shape = vec![cur.len()],
            LayerKind::Softmax => {
                let m = cur.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = cur.iter().map(|v| (v - m).exp()).sum();
                cur = cur.iter().map(|v| (v - m).exp() / z).collect();
            }
        }
        all.push(cur.clone());
    }
    all
}
