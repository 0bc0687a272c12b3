//! Low-rank adapters: the only tensors that change during erasure training.
//!
//! Each dense matrix `W` (out x in) gets a pair `up` (out x r) and `down`
//! (r x in); the effective weight is `W + (scale / r) * up * down`. `up`
//! starts at zero so a fresh adapter is an exact no-op. The requested rank is
//! clamped per host matrix to its smaller dimension (the output matrix of a
//! 2-D network is 2 x H, so a rank-4 request yields a rank-2 pair there).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::{mix, stream};

use super::{AdapterGrads, DenoiserArch, DenoiserParams, NUM_DENSE_LAYERS};
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// r x in
    pub down: Mat,
    /// out x r
    pub up: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// Requested rank before per-host clamping.
    pub rank: usize,
    pub scale: f64,
    pub pairs: [LoraPair; NUM_DENSE_LAYERS],
}

impl LoraAdapter {
    /// Effective rank of one pair (after clamping).
    pub fn pair_rank(&self, layer: usize) -> usize {
        self.pairs[layer].down.rows()
    }

    pub(crate) fn factor(&self, layer: usize) -> f64 {
        self.scale / self.pair_rank(layer) as f64
    }

    /// The dense delta `(scale / r) * up * down` contributed to one layer.
    pub fn delta(&self, layer: usize) -> Mat {
        let mut d = self.pairs[layer].up.matmul(&self.pairs[layer].down);
        let f = self.factor(layer);
        for v in d.data_mut() {
            *v *= f;
        }
        d
    }

    /// Frobenius norm of the full weight delta across layers.
    pub fn delta_norm(&self) -> f64 {
        (0..NUM_DENSE_LAYERS)
            .map(|i| {
                let d = self.delta(i);
                let n = d.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn check_compatible(&self, arch: &DenoiserArch) -> Result<()> {
        for (i, (rows, cols)) in arch.layer_shapes().iter().enumerate() {
            let pair = &self.pairs[i];
            let r = pair.down.rows();
            if pair.up.shape() != (*rows, r) || pair.down.shape() != (r, *cols) {
                return Err(Error::AdapterShapeMismatch(format!(
                    "layer {i}: host {rows}x{cols}, pair up {:?} down {:?}",
                    pair.up.shape(),
                    pair.down.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.pairs.iter().all(|p| p.down.is_finite() && p.up.is_finite())
    }

    /// In-place gradient step on the adapter tensors only.
    pub(crate) fn sgd_step(&mut self, grads: &AdapterGrads, lr: f64) {
        for (pair, g) in self.pairs.iter_mut().zip(&grads.pairs) {
            pair.down.add_scaled(&g.down, -lr);
            pair.up.add_scaled(&g.up, -lr);
        }
    }
}

/// Create a fresh adapter for a network: `down` small random, `up` zero, so
/// predictions are untouched until training moves `up` off zero.
pub fn init_adapter(
    params: &DenoiserParams,
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(Error::InvalidArch("adapter rank must be at least 1".into()));
    }
    if rank > params.arch.hidden {
        return Err(Error::RankTooLarge { rank, max: params.arch.hidden });
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArch(format!("adapter scale must be positive, got {scale}")));
    }
    let mut rng = stream(mix(seed, 0x10a), 1);
    let pairs = params.arch.layer_shapes().map(|(rows, cols)| {
        let r = rank.min(rows).min(cols);
        let limit = 1.0 / (cols as f64).sqrt();
        LoraPair {
            down: Mat::from_fn(r, cols, |_, _| rng.random_range(-limit..limit)),
            up: Mat::zeros(rows, r),
        }
    });
    Ok(LoraAdapter { rank, scale, pairs })
}

/// Fold an adapter into a standalone set of base weights. The original
/// parameters are left untouched.
pub fn merge_adapter(params: &DenoiserParams, adapter: &LoraAdapter) -> Result<DenoiserParams> {
    adapter.check_compatible(&params.arch)?;
    let mut merged = params.clone();
    for i in 0..NUM_DENSE_LAYERS {
        let delta = adapter.delta(i);
        merged.layers[i].weight.add_scaled(&delta, 1.0);
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_denoiser, tests::tiny_arch};
    use crate::rng::standard_normal;
    use crate::types::Condition;

    #[test]
    fn fresh_adapter_is_identity() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        let adapter = init_adapter(&params, 4, 4.0, 2).unwrap();
        let mut rng = stream(3, 0);
        for _ in 0..20 {
            let z = standard_normal(&mut rng, 2);
            let base = params.predict(None, &z, 5, Condition::Concept(0)).unwrap();
            let adapted = params.predict(Some(&adapter), &z, 5, Condition::Concept(0)).unwrap();
            assert_eq!(base, adapted);
        }
    }

    #[test]
    fn merge_of_fresh_adapter_changes_nothing() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        let adapter = init_adapter(&params, 4, 4.0, 2).unwrap();
        let merged = merge_adapter(&params, &adapter).unwrap();
        assert_eq!(params, merged);
    }

    #[test]
    fn adapter_path_equals_merged_path() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        let mut adapter = init_adapter(&params, 4, 4.0, 2).unwrap();
        // Give the adapter a non-trivial delta.
        let mut rng = stream(4, 0);
        for pair in &mut adapter.pairs {
            for v in pair.up.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let merged = merge_adapter(&params, &adapter).unwrap();
        for i in 0..100 {
            let z = standard_normal(&mut rng, 2);
            let t = (i % 31) as usize;
            let cond = if i % 4 == 0 { Condition::Null } else { Condition::Concept(i % 3) };
            let a = params.predict(Some(&adapter), &z, t, cond).unwrap();
            let b = merged.predict(None, &z, t, cond).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "adapter vs merged: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rank_is_clamped_on_narrow_layers() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        let adapter = init_adapter(&params, 4, 4.0, 2).unwrap();
        assert_eq!(adapter.pair_rank(0), 4);
        assert_eq!(adapter.pair_rank(1), 4);
        // Output matrix is 2 x 16, so the pair rank saturates at 2.
        assert_eq!(adapter.pair_rank(3), 2);
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        assert!(matches!(
            init_adapter(&params, 17, 4.0, 2),
            Err(Error::RankTooLarge { rank: 17, max: 16 })
        ));
        assert!(init_adapter(&params, 0, 4.0, 2).is_err());
    }

    #[test]
    fn default_configuration_is_rank_4_scale_4() {
        let params = init_denoiser(tiny_arch(), 1).unwrap();
        let adapter = init_adapter(&params, 4, 4.0, 2).unwrap();
        assert_eq!(adapter.rank, 4);
        assert_eq!(adapter.scale, 4.0);
        assert_eq!(adapter.delta_norm(), 0.0);
    }
}
