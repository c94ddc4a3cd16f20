//! Parameterized soft partitions of the covariate space.
//!
//! A [`PartitionModel`] maps a covariate vector to a point on the
//! probability simplex over `m` groups: a stack of affine layers with ReLU
//! between them and a softmax on the final logits. Parameters live in one
//! flat vector, laid out layer by layer as the row-major weight matrix
//! (`out x in`) followed by the bias vector.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pinball::pinball;
use crate::rng;
use crate::rule::QuantileVector;
use crate::score::ScoredSample;

/// Default half-width of the uniform weight initializer, before the
/// `1/sqrt(fan_in)` factor.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Arch {
    SoftmaxLinear { d: usize, m: usize },
    /// Layer widths from input to output; hidden layers use ReLU.
    SoftmaxMlp { widths: Vec<usize> },
}

impl Arch {
    pub fn widths(&self) -> Vec<usize> {
        match self {
            Arch::SoftmaxLinear { d, m } => vec![*d, *m],
            Arch::SoftmaxMlp { widths } => widths.clone(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths()[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths().last().unwrap_or(&0)
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Same architecture with the input and output widths replaced.
    pub fn resized(&self, d: usize, m: usize) -> Arch {
        match self {
            Arch::SoftmaxLinear { .. } => Arch::SoftmaxLinear { d, m },
            Arch::SoftmaxMlp { widths } => {
                let mut widths = widths.clone();
                if let Some(first) = widths.first_mut() {
                    *first = d;
                }
                if let Some(last) = widths.last_mut() {
                    *last = m;
                }
                Arch::SoftmaxMlp { widths }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid architecture widths {widths:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionModel {
    pub arch: Arch,
    pub seed: u64,
    pub params: Vec<f64>,
    /// Logits are divided by this before the softmax.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

/// Reusable buffers for forward and backward passes.
pub(crate) struct Workspace {
    layers: Vec<Layer>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(model: &PartitionModel) -> Self {
        let layers = model.layers();
        let acts: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.n_out]).collect();
        Self {
            deltas: acts.clone(),
            probs: vec![0.0; model.m()],
            layers,
            acts,
        }
    }
}

impl PartitionModel {
    /// Weights uniform in `[-0.1/sqrt(fan_in), 0.1/sqrt(fan_in)]`, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        Self::init_scaled(arch, seed, INIT_SCALE)
    }

    pub fn init_scaled(arch: Arch, seed: u64, scale: f64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for w in arch.widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = scale / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(if bound > 0.0 {
                    rng.random_range(-bound..=bound)
                } else {
                    0.0
                });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            arch,
            seed,
            params,
            temperature: 1.0,
        })
    }

    /// All-zero parameters: the uniform assignment everywhere.
    pub fn zeros(arch: Arch) -> Self {
        let params = vec![0.0; arch.param_count()];
        Self {
            arch,
            seed: 0,
            params,
            temperature: 1.0,
        }
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn m(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn d(&self) -> usize {
        self.arch.input_dim()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: self.d(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Group membership probabilities at `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.run(x, &mut ws);
        Ok(ws.probs)
    }

    /// Assignments for many inputs, reusing one set of buffers.
    pub fn forward_many<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<Vec<f64>>> {
        let mut ws = Workspace::new(self);
        xs.into_iter()
            .map(|x| {
                self.check_input(x)?;
                self.run(x, &mut ws);
                Ok(ws.probs.clone())
            })
            .collect()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut offset = 0;
        self.arch
            .widths()
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    n_in: w[0],
                    n_out: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    /// Fills `ws.acts` (layer outputs, post-ReLU for hidden layers, logits
    /// last) and `ws.probs`.
    fn run(&self, x: &[f64], ws: &mut Workspace) {
        let n_layers = ws.layers.len();
        for l in 0..n_layers {
            let Layer { n_in, n_out, offset } = ws.layers[l];
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let (done, rest) = ws.acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
            let out = &mut rest[0];
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let z = row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + bias[o];
                out[o] = if l + 1 < n_layers { z.max(0.0) } else { z };
            }
        }
        softmax_into(&ws.acts[n_layers - 1], self.temperature, &mut ws.probs);
    }

    /// `true` for weight entries of the parameter vector, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for l in self.layers() {
            mask.extend(std::iter::repeat_n(true, l.n_in * l.n_out));
            mask.extend(std::iter::repeat_n(false, l.n_out));
        }
        mask
    }

    /// Hidden-layer pre-activations at `x`, in layer order.
    pub fn hidden_preactivations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let layers = self.layers();
        let mut pre = Vec::new();
        let mut a = x.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let Layer { n_in, n_out, offset } = *layer;
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &self.params[offset + o * n_in..offset + (o + 1) * n_in];
                    row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + self.params[offset + n_in * n_out + o]
                })
                .collect();
            if l + 1 < layers.len() {
                a = z.iter().map(|v| v.max(0.0)).collect();
                pre.push(z);
            }
        }
        Ok(pre)
    }

    /// Gradient of the empirical objective in the parameters at fixed `q`.
    pub fn objective_gradient(&self, q: &QuantileVector, batch: &[ScoredSample], alpha: f64) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Empty("gradient batch"));
        }
        if q.m() != self.m() {
            return Err(Error::DimensionMismatch {
                expected: self.m(),
                got: q.m(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut costs = vec![0.0; self.m()];
        let mut ws = Workspace::new(self);
        let scale = 1.0 / batch.len() as f64;
        for smp in batch {
            self.check_input(&smp.x)?;
            for (c, &qi) in costs.iter_mut().zip(q.values()) {
                *c = pinball(qi, smp.s, alpha);
            }
            self.accumulate_gradient(&smp.x, &costs, scale, &mut grad, &mut ws);
        }
        Ok(grad)
    }

    /// Adds `scale * d/dparams sum_i h^i(x) costs[i]` into `grad`.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], costs: &[f64], scale: f64, grad: &mut [f64], ws: &mut Workspace) {
        self.run(x, ws);
        let n_layers = ws.layers.len();
        let h = &ws.probs;
        let mean_cost: f64 = h.iter().zip(costs).map(|(p, c)| p * c).sum();
        {
            let delta = &mut ws.deltas[n_layers - 1];
            for ((d, p), c) in delta.iter_mut().zip(h).zip(costs) {
                *d = scale * p * (c - mean_cost) / self.temperature;
            }
        }
        for l in (0..n_layers).rev() {
            let Layer { n_in, n_out, offset } = ws.layers[l];
            let input: &[f64] = if l == 0 { x } else { &ws.acts[l - 1] };
            let delta = &ws.deltas[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[offset + o * n_in..offset + (o + 1) * n_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
                grad[offset + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.params[offset..offset + n_in * n_out];
                let (lower, upper) = ws.deltas.split_at_mut(l);
                let back = &mut lower[l - 1];
                let delta = &upper[0];
                back.fill(0.0);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (b, w) in back.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                        *b += d * w;
                    }
                }
                // ReLU subgradient at 0 is 0
                for (b, &a) in back.iter_mut().zip(&ws.acts[l - 1]) {
                    if a <= 0.0 {
                        *b = 0.0;
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.arch.validate()?;
        if model.params.len() != model.arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: model.arch.param_count(),
                got: model.params.len(),
            });
        }
        Ok(model)
    }
}

/// Max-subtracted softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    out
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        total += *o;
    }
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// Free-function form of [`PartitionModel::init`].
pub fn init_params(arch: Arch, seed: u64) -> Result<PartitionModel> {
    PartitionModel::init(arch, seed)
}
