//! SMO solver for the ν-one-class dual
//!
//! ```text
//! min ½ αᵀKα   s.t.  0 ≤ αᵢ ≤ 1/(νm),  Σαᵢ = 1
//! ```
//!
//! Each step moves mass between the maximal violating pair: the variable
//! with the smallest gradient that can still grow and the one with the
//! largest gradient that can still shrink.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub(crate) fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// On-demand kernel rows with least-recently-used eviction.
pub(crate) struct KernelCache<'a> {
    x: &'a FeatureMatrix,
    gamma: f64,
    capacity: usize,
    rows: HashMap<usize, (Rc<[f64]>, u64)>,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    pub(crate) fn new(x: &'a FeatureMatrix, gamma: f64, budget_bytes: usize) -> Self {
        let row_bytes = x.n_rows().max(1) * std::mem::size_of::<f64>();
        let capacity = (budget_bytes / row_bytes).clamp(2, x.n_rows().max(2));
        Self {
            x,
            gamma,
            capacity,
            rows: HashMap::new(),
            clock: 0,
        }
    }

    pub(crate) fn row(&mut self, i: usize) -> Rc<[f64]> {
        self.clock += 1;
        if let Some((row, stamp)) = self.rows.get_mut(&i) {
            *stamp = self.clock;
            return Rc::clone(row);
        }
        if self.rows.len() >= self.capacity {
            let oldest = self
                .rows
                .iter()
                .min_by_key(|(_, (_, s))| *s)
                .map(|(&k, _)| k)
                .unwrap();
            self.rows.remove(&oldest);
        }
        let xi = self.x.row(i);
        let row: Rc<[f64]> = self.x.rows().map(|xj| rbf(xi, xj, self.gamma)).collect();
        self.rows.insert(i, (Rc::clone(&row), self.clock));
        row
    }
}

pub(crate) struct Solution {
    pub alphas: Vec<f64>,
    /// Kα at the solution.
    pub gradient: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub objective: f64,
    pub residual: f64,
}

pub(crate) struct SolverParams {
    pub upper: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cache_bytes: usize,
}

const TAU: f64 = 1e-12;

pub(crate) fn solve(x: &FeatureMatrix, gamma: f64, p: &SolverParams) -> Result<Solution> {
    let m = x.n_rows();
    let c = p.upper;
    let mut cache = KernelCache::new(x, gamma, p.cache_bytes);

    // fill the first ⌊1/C⌋ variables to the bound, remainder on the next
    let mut alpha = vec![0.0; m];
    let mut remaining = 1.0;
    for a in alpha.iter_mut() {
        if remaining <= 0.0 {
            break;
        }
        *a = if remaining >= c { c } else { remaining };
        remaining -= *a;
    }

    let mut grad = vec![0.0; m];
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            let row = cache.row(i);
            grad.iter_mut().zip(row.iter()).for_each(|(g, k)| *g += a * k);
        }
    }

    let mut iterations = 0;
    let residual = loop {
        // i: may grow, smallest gradient; j: may shrink, largest gradient
        let mut i_best = None;
        let mut g_min = f64::INFINITY;
        let mut j_best = None;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..m {
            if alpha[t] < c && grad[t] < g_min {
                g_min = grad[t];
                i_best = Some(t);
            }
            if alpha[t] > 0.0 && grad[t] > g_max {
                g_max = grad[t];
                j_best = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i_best, j_best) else {
            break 0.0;
        };
        let gap = g_max - g_min;
        // measured on the Σα = νm scale, where gradients are O(1)
        let scaled_gap = gap / c;
        if scaled_gap < p.tol || i == j {
            break scaled_gap.max(0.0);
        }
        if iterations >= p.max_iter {
            return Err(Error::Convergence {
                iterations,
                residual: scaled_gap,
            });
        }
        iterations += 1;

        let ki = cache.row(i);
        let kj = cache.row(j);
        let eta = (ki[i] + kj[j] - 2.0 * ki[j]).max(TAU);
        let limit = (c - alpha[i]).min(alpha[j]);
        let mut step = gap / eta;
        if step >= limit {
            step = limit;
        }
        if step >= c - alpha[i] {
            alpha[i] = c;
        } else {
            alpha[i] += step;
        }
        if step >= alpha[j] {
            alpha[j] = 0.0;
        } else {
            alpha[j] -= step;
        }
        grad.iter_mut()
            .zip(ki.iter().zip(kj.iter()))
            .for_each(|(g, (a, b))| *g += step * (a - b));
    };

    let rho = offset(&alpha, &grad, c);
    let objective = 0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * g).sum::<f64>();
    Ok(Solution {
        alphas: alpha,
        gradient: grad,
        rho,
        iterations,
        objective,
        residual,
    })
}

/// Mean decision value over free support vectors, or the midpoint of the
/// feasible interval when every support vector sits at a bound.
fn offset(alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let (mut sum, mut n_free) = (0.0, 0usize);
    let mut lower = f64::NEG_INFINITY; // max over α = C
    let mut upper = f64::INFINITY; // min over α = 0
    for (&a, &g) in alpha.iter().zip(grad) {
        if a > 0.0 && a < c {
            sum += g;
            n_free += 1;
        } else if a >= c {
            lower = lower.max(g);
        } else {
            upper = upper.min(g);
        }
    }
    if n_free > 0 {
        sum / n_free as f64
    } else if lower.is_finite() && upper.is_finite() {
        0.5 * (lower + upper)
    } else if lower.is_finite() {
        lower
    } else {
        upper
    }
}
