//! Property tests for the algebraic invariants: guidance compositions are
//! affine and homogeneous, schedules stay monotone or fail construction,
//! checkpoints round-trip bit-exactly.

use proptest::prelude::*;

use erasure_core::checkpoint::{AdapterCheckpoint, ModelCheckpoint};
use erasure_core::denoiser::{init_adapter, init_denoiser, DenoiserArch};
use erasure_core::{
    cfg_compose, cond_erase_target, uncond_erase_target, uncond_erase_target_with_prior,
    NoiseSchedule, ScheduleKind,
};

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2)
}

proptest! {
    #[test]
    fn guidance_is_homogeneous(
        u in vec2(),
        c in vec2(),
        p in vec2(),
        s in -4.0f64..4.0,
        omega in -10.0f64..10.0,
        eta in 0.0f64..10.0,
        gamma in 0.0f64..2.0,
    ) {
        let su: Vec<f64> = u.iter().map(|v| s * v).collect();
        let sc: Vec<f64> = c.iter().map(|v| s * v).collect();
        let sp: Vec<f64> = p.iter().map(|v| s * v).collect();

        let direct = cfg_compose(&su, &sc, omega).unwrap();
        let scaled: Vec<f64> = cfg_compose(&u, &c, omega).unwrap().iter().map(|v| s * v).collect();
        for (a, b) in direct.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-12, "cfg: {a} vs {b}");
        }

        let direct = uncond_erase_target_with_prior(&su, &sc, &sp, eta, eta, gamma).unwrap();
        let scaled: Vec<f64> = uncond_erase_target_with_prior(&u, &c, &p, eta, eta, gamma)
            .unwrap()
            .iter()
            .map(|v| s * v)
            .collect();
        for (a, b) in direct.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-12, "prior-corrected: {a} vs {b}");
        }
    }

    #[test]
    fn erase_targets_mirror_around_uncond(u in vec2(), c in vec2(), eta in 0.0f64..10.0) {
        let away = cond_erase_target(&u, &c, eta).unwrap();
        let toward = uncond_erase_target(&u, &c, eta).unwrap();
        for i in 0..2 {
            let lhs = toward[i] - u[i];
            let rhs = -(away[i] - u[i]);
            prop_assert!((lhs - rhs).abs() < 1e-12, "mirror: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn guidance_is_affine_in_each_argument(
        u in vec2(),
        c1 in vec2(),
        c2 in vec2(),
        w in 0.0f64..1.0,
        omega in -10.0f64..10.0,
    ) {
        // cfg(u, w*c1 + (1-w)*c2) == w*cfg(u, c1) + (1-w)*cfg(u, c2)
        let blend: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| w * a + (1.0 - w) * b).collect();
        let lhs = cfg_compose(&u, &blend, omega).unwrap();
        let r1 = cfg_compose(&u, &c1, omega).unwrap();
        let r2 = cfg_compose(&u, &c2, omega).unwrap();
        for i in 0..2 {
            let rhs = w * r1[i] + (1.0 - w) * r2[i];
            prop_assert!((lhs[i] - rhs).abs() < 1e-10, "affine: {} vs {}", lhs[i], rhs);
        }
    }

    #[test]
    fn linear_beta_schedules_hold_invariants(
        steps in 2usize..64,
        beta_start in 1e-6f64..0.3,
        beta_end in 1e-6f64..0.3,
    ) {
        match NoiseSchedule::build(steps, ScheduleKind::LinearBeta { beta_start, beta_end }) {
            Ok(s) => {
                prop_assert_eq!(s.alpha_bar(0), 1.0);
                for t in 1..=steps {
                    prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < s.alpha_bar(t - 1));
                    prop_assert!(s.sigma(t) > s.sigma(t - 1));
                    prop_assert!(s.beta(t) - s.beta(t - 1) > 0.0);
                }
            }
            Err(_) => prop_assert!(false, "valid linear schedule failed to build"),
        }
    }

    #[test]
    fn model_checkpoints_roundtrip_bit_exactly(seed in 0u64..500) {
        let arch = DenoiserArch {
            dim: 2,
            hidden: 8,
            time_embed_dim: 4,
            concept_embed_dim: 2,
            num_concepts: 2,
        };
        let params = init_denoiser(arch, seed).unwrap();
        let json = serde_json::to_string(&ModelCheckpoint::from_params(&params)).unwrap();
        let restored: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = restored.into_params().unwrap();
        for (a, b) in params.layers.iter().zip(&restored.layers) {
            let eq = a.weight.data().iter().zip(b.weight.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(eq);
        }
        let emb_eq = params.concept_embed.data().iter()
            .zip(restored.concept_embed.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert!(emb_eq);
    }

    #[test]
    fn adapter_checkpoints_roundtrip_bit_exactly(seed in 0u64..500) {
        let arch = DenoiserArch {
            dim: 2,
            hidden: 8,
            time_embed_dim: 4,
            concept_embed_dim: 2,
            num_concepts: 2,
        };
        let params = init_denoiser(arch, 1).unwrap();
        let adapter = init_adapter(&params, 3, 4.0, seed).unwrap();
        let json = serde_json::to_string(&AdapterCheckpoint::from_adapter(&adapter)).unwrap();
        let restored: AdapterCheckpoint = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(restored.into_adapter().unwrap(), adapter);
    }
}
