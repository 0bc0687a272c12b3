//! The conditional noise predictor: a small feed-forward network over the
//! latent, a fixed sinusoidal time embedding and a learned concept embedding
//! table whose last row is the null (unconditional) token.
//!
//! Gradients are hand-rolled; every tensor is checked against central finite
//! differences in the test suites.

mod lora;
mod train;

pub use lora::{init_adapter, merge_adapter, LoraAdapter, LoraPair};
pub use train::{train_base, BaseTrainConfig, BaseTrainLog};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{mix, stream};
use crate::sampler::EpsModel;
use crate::types::Condition;

pub const NUM_DENSE_LAYERS: usize = 4;
pub const LAYER_NAMES: [&str; NUM_DENSE_LAYERS] = ["input", "hidden1", "hidden2", "output"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    /// Latent dimension D.
    pub dim: usize,
    /// Hidden width H of the three intermediate activations.
    pub hidden: usize,
    /// Sinusoidal time-embedding size (even).
    pub time_embed_dim: usize,
    /// Learned concept-embedding size.
    pub concept_embed_dim: usize,
    /// Number of labeled concepts K; the embedding table has K + 1 rows.
    pub num_concepts: usize,
}

impl DenoiserArch {
    /// Default experiment architecture: width 128, 16-dim time features,
    /// 8-dim concept embeddings.
    pub fn default_for(dim: usize, num_concepts: usize) -> Self {
        DenoiserArch { dim, hidden: 128, time_embed_dim: 16, concept_embed_dim: 8, num_concepts }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArch("latent dimension must be positive".into()));
        }
        if self.hidden < 8 {
            return Err(Error::InvalidArch(format!("hidden width {} below 8", self.hidden)));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArch(format!(
                "time embedding dim {} must be even and at least 2",
                self.time_embed_dim
            )));
        }
        if self.concept_embed_dim < 2 {
            return Err(Error::InvalidArch(format!(
                "concept embedding dim {} below 2",
                self.concept_embed_dim
            )));
        }
        if self.num_concepts == 0 {
            return Err(Error::InvalidArch("need at least one concept".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dim + self.time_embed_dim + self.concept_embed_dim
    }

    /// The embedding row used by a condition; the null token is row K.
    pub fn condition_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Concept(k) if k < self.num_concepts => Ok(k),
            Condition::Concept(k) => Err(Error::UnknownConcept(k)),
            Condition::Null => Ok(self.num_concepts),
        }
    }

    /// (rows, cols) of each dense matrix, in layer order.
    pub fn layer_shapes(&self) -> [(usize, usize); NUM_DENSE_LAYERS] {
        [
            (self.hidden, self.input_dim()),
            (self.hidden, self.hidden),
            (self.hidden, self.hidden),
            (self.dim, self.hidden),
        ]
    }

    /// Total trainable scalar count (weights, biases, embedding table).
    pub fn param_count(&self) -> usize {
        let dense: usize =
            self.layer_shapes().iter().map(|(r, c)| r * c + r).sum();
        dense + (self.num_concepts + 1) * self.concept_embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub layers: [DenseLayer; NUM_DENSE_LAYERS],
    /// (K + 1) x concept_embed_dim; row K is the null token.
    pub concept_embed: Mat,
}

/// Fixed sinusoidal features of the integer timestep.
pub fn time_embedding(dim: usize, t: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Deterministically initialize a network: fan-scaled uniform weights, zero
/// biases, unit-scale concept embeddings.
pub fn init_denoiser(arch: DenoiserArch, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut rng = stream(mix(seed, 0x1d1), 0);
    let layers = arch.layer_shapes().map(|(rows, cols)| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weight = Mat::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit));
        DenseLayer { weight, bias: vec![0.0; rows] }
    });
    let concept_embed = Mat::from_fn(arch.num_concepts + 1, arch.concept_embed_dim, |_, _| {
        rng.random_range(-1.0..1.0)
    });
    Ok(DenoiserParams { arch, layers, concept_embed })
}

/// Activations recorded during a forward pass, enough to backpropagate.
pub(crate) struct ForwardCache {
    cond_row: usize,
    /// Input of each dense layer: concat vector, then the three activations.
    layer_inputs: [Vec<f64>; NUM_DENSE_LAYERS],
    /// Pre-activations of the three silu layers.
    pre: [Vec<f64>; 3],
    /// Adapter bottleneck vectors (down * input) per layer, when present.
    adapter_mid: Option<[Vec<f64>; NUM_DENSE_LAYERS]>,
}

impl DenoiserParams {
    /// Noise prediction with an optional low-rank adapter applied to every
    /// dense matrix. The unconditional prediction is the null-token one.
    pub fn predict(
        &self,
        adapter: Option<&LoraAdapter>,
        z: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<Vec<f64>> {
        Ok(self.forward_cached(adapter, z, t, cond)?.0)
    }

    pub(crate) fn forward_cached(
        &self,
        adapter: Option<&LoraAdapter>,
        z: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if z.len() != self.arch.dim {
            return Err(Error::DimMismatch { expected: self.arch.dim, got: z.len() });
        }
        if let Some(ad) = adapter {
            ad.check_compatible(&self.arch)?;
        }
        let cond_row = self.arch.condition_row(cond)?;

        let mut x = Vec::with_capacity(self.arch.input_dim());
        x.extend_from_slice(z);
        x.extend(time_embedding(self.arch.time_embed_dim, t));
        x.extend_from_slice(self.concept_embed.row(cond_row));

        let mut layer_inputs: [Vec<f64>; NUM_DENSE_LAYERS] = Default::default();
        let mut pre: [Vec<f64>; 3] = Default::default();
        let mut mids: [Vec<f64>; NUM_DENSE_LAYERS] = Default::default();

        let mut cur = x;
        for i in 0..NUM_DENSE_LAYERS {
            layer_inputs[i] = cur.clone();
            let layer = &self.layers[i];
            let mut y = layer.weight.matvec(&cur);
            for (yo, b) in y.iter_mut().zip(&layer.bias) {
                *yo += b;
            }
            if let Some(ad) = adapter {
                let pair = &ad.pairs[i];
                let mid = pair.down.matvec(&cur);
                let up = pair.up.matvec(&mid);
                let f = ad.factor(i);
                for (yo, u) in y.iter_mut().zip(&up) {
                    *yo += f * u;
                }
                mids[i] = mid;
            }
            if i < NUM_DENSE_LAYERS - 1 {
                pre[i] = y.clone();
                cur = y.into_iter().map(silu).collect();
            } else {
                cur = y;
            }
        }

        let cache = ForwardCache {
            cond_row,
            layer_inputs,
            pre,
            adapter_mid: adapter.map(|_| mids),
        };
        Ok((cur, cache))
    }

    /// `W_effᵀ d` for one layer.
    fn effective_matvec_t(
        &self,
        layer: usize,
        adapter: Option<&LoraAdapter>,
        d: &[f64],
    ) -> Vec<f64> {
        let mut g = self.layers[layer].weight.matvec_t(d);
        if let Some(ad) = adapter {
            let pair = &ad.pairs[layer];
            let f = ad.factor(layer);
            let bt = pair.up.matvec_t(d);
            let at = pair.down.matvec_t(&bt);
            for (gi, a) in g.iter_mut().zip(&at) {
                *gi += f * a;
            }
        }
        g
    }

    /// Pre-activation gradients for every layer given the output cotangent.
    pub(crate) fn layer_deltas(
        &self,
        adapter: Option<&LoraAdapter>,
        cache: &ForwardCache,
        d_out: &[f64],
    ) -> [Vec<f64>; NUM_DENSE_LAYERS] {
        let mut deltas: [Vec<f64>; NUM_DENSE_LAYERS] = Default::default();
        deltas[3] = d_out.to_vec();
        for i in (0..3).rev() {
            let upstream = self.effective_matvec_t(i + 1, adapter, &deltas[i + 1]);
            deltas[i] = upstream
                .iter()
                .zip(&cache.pre[i])
                .map(|(g, a)| g * silu_prime(*a))
                .collect();
        }
        deltas
    }

    /// Accumulate gradients of all base tensors into `grads`.
    pub(crate) fn accumulate_base_grads(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        grads: &mut BaseGrads,
    ) {
        let deltas = self.layer_deltas(None, cache, d_out);
        for i in 0..NUM_DENSE_LAYERS {
            grads.layers[i].weight.add_outer(&deltas[i], &cache.layer_inputs[i], 1.0);
            for (b, d) in grads.layers[i].bias.iter_mut().zip(&deltas[i]) {
                *b += d;
            }
        }
        let input_grad = self.effective_matvec_t(0, None, &deltas[0]);
        let offset = self.arch.dim + self.arch.time_embed_dim;
        let row = cache.cond_row;
        for j in 0..self.arch.concept_embed_dim {
            let cur = grads.concept_embed.get(row, j);
            grads.concept_embed.set(row, j, cur + input_grad[offset + j]);
        }
    }

    /// Accumulate gradients of the adapter tensors only; base tensors stay
    /// untouched, which is the frozen-base contract of erasure training.
    pub(crate) fn accumulate_adapter_grads(
        &self,
        adapter: &LoraAdapter,
        cache: &ForwardCache,
        d_out: &[f64],
        grads: &mut AdapterGrads,
    ) {
        let deltas = self.layer_deltas(Some(adapter), cache, d_out);
        let mids = cache
            .adapter_mid
            .as_ref()
            .expect("cache was built with the same adapter");
        for i in 0..NUM_DENSE_LAYERS {
            let f = adapter.factor(i);
            let bt = adapter.pairs[i].up.matvec_t(&deltas[i]);
            grads.pairs[i].up.add_outer(&deltas[i], &mids[i], f);
            grads.pairs[i].down.add_outer(&bt, &cache.layer_inputs[i], f);
        }
    }

    /// In-place gradient step on all base tensors.
    pub(crate) fn sgd_step(&mut self, grads: &BaseGrads, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weight.add_scaled(&g.weight, -lr);
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        self.concept_embed.add_scaled(&grads.concept_embed, -lr);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
            && self.concept_embed.is_finite()
    }
}

/// Gradient buffers matching the base tensors.
pub struct BaseGrads {
    pub layers: [DenseLayer; NUM_DENSE_LAYERS],
    pub concept_embed: Mat,
}

impl BaseGrads {
    pub fn zeros(arch: &DenoiserArch) -> Self {
        let layers = arch
            .layer_shapes()
            .map(|(r, c)| DenseLayer { weight: Mat::zeros(r, c), bias: vec![0.0; r] });
        BaseGrads {
            layers,
            concept_embed: Mat::zeros(arch.num_concepts + 1, arch.concept_embed_dim),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            for w in layer.weight.data_mut() {
                *w *= s;
            }
            for b in &mut layer.bias {
                *b *= s;
            }
        }
        for v in self.concept_embed.data_mut() {
            *v *= s;
        }
    }
}

/// Gradient buffers matching an adapter's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub pairs: [LoraPair; NUM_DENSE_LAYERS],
}

impl AdapterGrads {
    pub fn zeros(adapter: &LoraAdapter) -> Self {
        AdapterGrads {
            pairs: [0, 1, 2, 3].map(|i| LoraPair {
                down: Mat::zeros(adapter.pairs[i].down.rows(), adapter.pairs[i].down.cols()),
                up: Mat::zeros(adapter.pairs[i].up.rows(), adapter.pairs[i].up.cols()),
            }),
        }
    }

    pub fn add_scaled(&mut self, other: &AdapterGrads, s: f64) {
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            a.down.add_scaled(&b.down, s);
            a.up.add_scaled(&b.up, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for pair in &mut self.pairs {
            for v in pair.down.data_mut() {
                *v *= s;
            }
            for v in pair.up.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pairs.iter().all(|p| p.down.is_finite() && p.up.is_finite())
    }
}

/// Free-function form of [`DenoiserParams::predict`].
pub fn predict_eps(
    params: &DenoiserParams,
    adapter: Option<&LoraAdapter>,
    z: &[f64],
    t: usize,
    cond: Condition,
) -> Result<Vec<f64>> {
    params.predict(adapter, z, t, cond)
}

/// A (base, optional adapter) pair viewed as an effective predictor.
#[derive(Clone, Copy)]
pub struct DenoiserModel<'a> {
    pub params: &'a DenoiserParams,
    pub adapter: Option<&'a LoraAdapter>,
}

impl EpsModel for DenoiserModel<'_> {
    fn dim(&self) -> usize {
        self.params.arch.dim
    }

    fn predict(&self, z: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        self.params.predict(self.adapter, z, t, cond)
    }
}
