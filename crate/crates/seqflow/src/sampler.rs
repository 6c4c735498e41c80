//! Sequential sampling with key/value caches, classifier-free guidance,
//! prefix conditioning, and the optional denoiser correction pass.

use rand_chacha::ChaCha8Rng;

use crate::denoiser::{tweedie_correct, DenoiserNet};
use crate::error::{Error, Result};
use crate::flow::{FrameLayout, LOG_SIGMA_CLAMP};
use crate::model::{Condition, GlobalLocalFlow, TokenSequence};
use crate::numerics::{standard_normal, KvCache, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    /// Scale on the prior draw.
    pub temperature: f64,
    /// Guidance weight w; 1.0 reproduces the purely conditional model.
    pub guidance: f64,
    /// Noise level assumed by the denoiser correction.
    pub sigma_test: f64,
    /// Apply the denoiser correction to the finished sample.
    pub correct: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts { temperature: 1.0, guidance: 1.0, sigma_test: 0.1, correct: false }
    }
}

/// Incremental deep-flow state across committed positions.
pub struct StepCache {
    pub cond_cache: KvCache,
    pub uncond_cache: Option<KvCache>,
    pub committed: usize,
    pub prev_u: Option<Vec<f64>>,
}

impl StepCache {
    pub fn new(model: &GlobalLocalFlow, with_guidance: bool) -> Self {
        StepCache {
            cond_cache: model.deep.fresh_cache(),
            uncond_cache: with_guidance.then(|| model.deep.fresh_cache()),
            committed: 0,
            prev_u: None,
        }
    }
}

/// Guided affine parameters: extrapolate from unconditional toward
/// conditional by weight w, in mu and log-sigma space.
pub fn guided_params(
    mu_c: &[f64],
    ls_c: &[f64],
    mu_u: &[f64],
    ls_u: &[f64],
    w: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mu = mu_u.iter().zip(mu_c).map(|(&u, &c)| u + w * (c - u)).collect();
    let ls = ls_u
        .iter()
        .zip(ls_c)
        .map(|(&u, &c)| (u + w * (c - u)).clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
        .collect();
    (mu, ls)
}

/// Prior draw in raster order, one value per channel per position.
pub fn draw_latents(layout: FrameLayout, temperature: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..layout.numel()).map(|_| temperature * standard_normal(rng)).collect()
}

/// Invert the deep flow one position at a time, committing into the cache.
/// `z` covers the positions after `cache.committed`.
pub fn deep_inverse_guided(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    cache: &mut StepCache,
    z: &[f64],
    cond: Condition,
    w: f64,
) -> Result<Vec<f64>> {
    let d = model.geometry.channels;
    if z.len() % d != 0 {
        return Err(Error::ShapeMismatch {
            op: "deep_inverse_guided",
            detail: format!("{} values not divisible by {d} channels", z.len()),
        });
    }
    let m = z.len() / d;
    if m == 0 {
        return Ok(Vec::new());
    }
    let cvec = model.embed_condition(store, cond);
    let null_vec = model.embed_condition(store, Condition::Null);
    let mut u = vec![0.0; z.len()];
    for i in 0..m {
        let input = match (&cache.prev_u, i) {
            (_, 1..) => u[(i - 1) * d..i * d].to_vec(),
            (Some(p), 0) => p.clone(),
            (None, 0) => model.deep.start_values(store).to_vec(),
        };
        let (mu_c, ls_c) =
            model.deep.cond_params_range(store, &mut cache.cond_cache, &input, 1, &cvec, true)?;
        let (mu, ls) = match &mut cache.uncond_cache {
            Some(uc) => {
                let (mu_u, ls_u) =
                    model.deep.cond_params_range(store, uc, &input, 1, &null_vec, true)?;
                guided_params(&mu_c, &ls_c, &mu_u, &ls_u, w)
            }
            None => (mu_c, ls_c),
        };
        for c in 0..d {
            u[i * d + c] = ls[c].exp() * z[i * d + c] + mu[c];
        }
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "deep_inverse_guided" });
    }
    cache.committed += m;
    cache.prev_u = Some(u[(m - 1) * d..].to_vec());
    Ok(u)
}

/// Generate a full sequence from given latents (deterministic core).
pub fn sample_from_latents(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    z: &[f64],
    layout: FrameLayout,
    cond: Condition,
    opts: &SampleOpts,
) -> Result<TokenSequence> {
    let mut cache = StepCache::new(model, opts.guidance != 1.0);
    let u = deep_inverse_guided(model, store, &mut cache, z, cond, opts.guidance)?;
    let cvec = model.embed_condition(store, cond);
    let x = model.shallow_inverse(store, &u, layout, &cvec)?;
    TokenSequence::new(layout, x)
}

/// Draw latents and generate, with the optional correction pass.
#[allow(clippy::too_many_arguments)]
pub fn sample_sequential(
    model: &GlobalLocalFlow,
    denoiser: Option<&DenoiserNet>,
    store: &ParamStore,
    n_frames: usize,
    cond: Condition,
    opts: &SampleOpts,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    let g = &model.geometry;
    if n_frames == 0 || n_frames > g.n_frames {
        return Err(Error::Config(format!(
            "n_frames {n_frames} outside [1, {}]",
            g.n_frames
        )));
    }
    let layout = FrameLayout::new(n_frames, g.frame_size, g.channels);
    let z = draw_latents(layout, opts.temperature, rng);
    let x = sample_from_latents(model, store, &z, layout, cond, opts)?;
    if opts.correct {
        let net = denoiser.ok_or_else(|| Error::Config("correction requires a denoiser".into()))?;
        let cvec = model.embed_condition(store, cond);
        return tweedie_correct(net, store, &x, &cvec, opts.sigma_test);
    }
    Ok(x)
}

/// Teacher-force a data prefix into the deep cache: run the shallow stack
/// on each prefix frame, then commit the resulting u rows. Returns the
/// primed cache and the prefix in u-space.
pub fn prefix_encode(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    x_prefix: &TokenSequence,
    cond: Condition,
    with_guidance: bool,
) -> Result<(StepCache, Vec<f64>)> {
    let layout = x_prefix.layout;
    let d = model.geometry.channels;
    let cvec = model.embed_condition(store, cond);
    let u = model.shallow_forward(store, &x_prefix.data, layout, &cvec)?;
    let l = layout.len();
    let mut cache = StepCache::new(model, with_guidance);
    let shifted = model.deep.shifted_rows(store, None, &u, l);
    model.deep.cond_params_range(store, &mut cache.cond_cache, &shifted, l, &cvec, true)?;
    if let Some(uc) = &mut cache.uncond_cache {
        let null_vec = model.embed_condition(store, Condition::Null);
        model.deep.cond_params_range(store, uc, &shifted, l, &null_vec, true)?;
    }
    cache.committed = l;
    cache.prev_u = Some(u[(l - 1) * d..].to_vec());
    Ok((cache, u))
}

/// Continue from an encoded prefix: invert the remaining positions of the
/// deep flow against the primed cache, then invert the shallow stack over
/// the new frames only (it never crosses frame boundaries).
pub fn sample_continuation(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    cache: &mut StepCache,
    z_rest: &[f64],
    n_new_frames: usize,
    cond: Condition,
    opts: &SampleOpts,
) -> Result<TokenSequence> {
    let g = &model.geometry;
    let rem_layout = FrameLayout::new(n_new_frames, g.frame_size, g.channels);
    if z_rest.len() != rem_layout.numel() {
        return Err(Error::ShapeMismatch {
            op: "sample_continuation",
            detail: format!("expected {} latents, got {}", rem_layout.numel(), z_rest.len()),
        });
    }
    let u = deep_inverse_guided(model, store, cache, z_rest, cond, opts.guidance)?;
    let cvec = model.embed_condition(store, cond);
    let x = model.shallow_inverse(store, &u, rem_layout, &cvec)?;
    TokenSequence::new(rem_layout, x)
}
