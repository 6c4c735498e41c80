//! Shared helpers for the integration oracle tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqflow::model::{GlobalLocalFlow, ModelGeometry};
use seqflow::numerics::{standard_normal, ParamStore};

/// A small geometry for exact-oracle tests.
pub fn small_geometry(n_frames: usize, frame_size: usize, channels: usize) -> ModelGeometry {
    ModelGeometry {
        n_frames,
        frame_size,
        channels,
        deep_layers: 1,
        deep_width: 8,
        shallow_blocks: 2,
        shallow_layers: 1,
        shallow_width: 8,
        n_heads: 2,
        d_cond: 4,
        n_classes: 3,
        denoiser_layers: 2,
        denoiser_width: 8,
        denoiser_heads: 2,
    }
}

/// Build a model and knock every parameter away from the identity init so
/// the flow is a real (but well-conditioned) transformation.
pub fn perturbed_model(
    geometry: ModelGeometry,
    seed: u64,
    scale: f64,
) -> (ParamStore, GlobalLocalFlow) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GlobalLocalFlow::new(&mut store, geometry, &mut rng);
    let mut prng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data.iter_mut() {
            *v += scale * standard_normal(&mut prng);
        }
    }
    (store, model)
}

/// log|det A| by LU decomposition with partial pivoting; independent of
/// any flow code.
pub fn lu_log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut log_det = 0.0;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if m[i * n + k].abs() > m[piv * n + k].abs() {
                piv = i;
            }
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
        }
        let d = m[k * n + k];
        assert!(d.abs() > 1e-300, "singular matrix");
        log_det += d.abs().ln();
        for i in k + 1..n {
            let f = m[i * n + k] / d;
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
        }
    }
    log_det
}
