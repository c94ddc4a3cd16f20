#![allow(dead_code)]

use plcp_kit::partition::{Arch, PartitionModel};
use plcp_kit::rule::QuantileVector;
use plcp_kit::score::ScoredSample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward pass written directly from the parameter layout: per layer a
/// row-major `out x in` weight block, then `out` biases.
pub fn naive_forward(widths: &[usize], params: &[f64], temperature: f64, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    for (l, w) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            z[o] = params[off + n_in * n_out + o];
            for i in 0..n_in {
                z[o] += params[off + o * n_in + i] * a[i];
            }
        }
        off += n_in * n_out + n_out;
        a = if l + 2 < widths.len() { z.iter().map(|v| v.max(0.0)).collect() } else { z };
    }
    let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| ((v - mx) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_pinball(q: f64, s: f64, alpha: f64) -> f64 {
    if s >= q {
        (1.0 - alpha) * (s - q)
    } else {
        alpha * (q - s)
    }
}

pub fn naive_objective(widths: &[usize], params: &[f64], temperature: f64, q: &[f64], data: &[ScoredSample], alpha: f64) -> f64 {
    let mut tot = 0.0;
    for d in data {
        let h = naive_forward(widths, params, temperature, &d.x);
        for (hi, qi) in h.iter().zip(q) {
            tot += hi * naive_pinball(*qi, d.s, alpha);
        }
    }
    tot / data.len() as f64
}

pub fn central_difference(widths: &[usize], params: &[f64], temperature: f64, q: &[f64], data: &[ScoredSample], alpha: f64, step: f64) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let mut p = params.to_vec();
            p[k] = params[k] + step;
            let up = naive_objective(widths, &p, temperature, q, data, alpha);
            p[k] = params[k] - step;
            let down = naive_objective(widths, &p, temperature, q, data, alpha);
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Random model, thresholds and scored batch. MLP instances are redrawn
/// until every hidden pre-activation is at least `margin` from zero.
pub fn gradient_instance(widths: &[usize], n: usize, seed: u64, margin: f64) -> (PartitionModel, QuantileVector, Vec<ScoredSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = if widths.len() == 2 {
        Arch::SoftmaxLinear { d: widths[0], m: widths[1] }
    } else {
        Arch::SoftmaxMlp { widths: widths.to_vec() }
    };
    loop {
        let params: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = PartitionModel::zeros(arch.clone()).with_params(params).unwrap();
        let data: Vec<ScoredSample> = (0..n)
            .map(|_| ScoredSample {
                x: (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect(),
                s: rng.random_range(0.0..3.0),
            })
            .collect();
        let safe = data.iter().all(|d| {
            model
                .hidden_preactivations(&d.x)
                .unwrap()
                .iter()
                .flatten()
                .all(|z| z.abs() > margin)
        });
        if safe {
            let m = *widths.last().unwrap();
            let q = QuantileVector::new((0..m).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
            return (model, q, data);
        }
    }
}
