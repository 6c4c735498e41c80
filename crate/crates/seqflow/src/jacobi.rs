//! Block-wise Jacobi fixed-point inversion of the deep flow.
//!
//! Instead of one conditioner pass per position, a block of positions is
//! iterated in parallel: each sweep refreshes every position's affine
//! parameters from the previous guess. Because the dependency is strictly
//! triangular, the first k positions are exact after k sweeps, so a block
//! of length m converges in at most m sweeps and typically in far fewer.
//! Later blocks can be larger, and a video-aware warm start seeds a block
//! with the last committed frame.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::FrameLayout;
use crate::model::{Condition, GlobalLocalFlow, TokenSequence};
use crate::numerics::KvCache;
use crate::numerics::ParamStore;
use crate::sampler::guided_params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStart {
    Zeros,
    /// Tile the last committed frame across the block.
    PrevFrame,
}

#[derive(Debug, Clone, Copy)]
pub struct JacobiPlan {
    /// Length of the first block, clipped to the sequence length.
    pub first_block_size: usize,
    /// Later blocks are this multiple of the first block's length.
    pub later_block_factor: usize,
    /// Convergence threshold on the scale-normalized residual.
    pub tau: f64,
    /// Sweep budget per block; `None` means the block length, which
    /// guarantees exactness.
    pub max_iters: Option<usize>,
    pub warm_start: WarmStart,
    /// Stabilizer in the residual denominator.
    pub epsilon: f64,
}

impl Default for JacobiPlan {
    fn default() -> Self {
        JacobiPlan {
            first_block_size: 64,
            later_block_factor: 4,
            tau: 1e-3,
            max_iters: None,
            warm_start: WarmStart::PrevFrame,
            epsilon: 1e-8,
        }
    }
}

impl JacobiPlan {
    /// (start, len) pairs covering `l` positions.
    pub fn partition(&self, l: usize) -> Vec<(usize, usize)> {
        assert!(self.first_block_size >= 1 && self.later_block_factor >= 1);
        let mut out = Vec::new();
        let mut s = 0;
        let b1 = self.first_block_size.min(l);
        while s < l {
            let want = if s == 0 { b1 } else { b1 * self.later_block_factor };
            let len = want.min(l - s);
            out.push((s, len));
            s += len;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub start: usize,
    pub len: usize,
    pub iters: usize,
    pub residuals: Vec<f64>,
    /// Conditioner passes spent on this block, polish and commit included.
    pub passes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct JacobiTrace {
    pub blocks: Vec<BlockTrace>,
    pub total_passes: usize,
    pub wall_ms: f64,
}

/// ||u_new - u_old||^2 / (||u_new||^2 + eps).
pub fn scale_normalized_residual(u_new: &[f64], u_old: &[f64], eps: f64) -> f64 {
    let num: f64 = u_new.iter().zip(u_old).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let den: f64 = u_new.iter().map(|&a| a * a).sum::<f64>() + eps;
    num / den
}

/// Initial guess for a block in u-space.
fn warm_init(
    plan: &JacobiPlan,
    committed: &[f64],
    start: usize,
    len: usize,
    layout: FrameLayout,
) -> Vec<f64> {
    let d = layout.channels;
    let s = layout.frame_size;
    let frames_done = start / s;
    if plan.warm_start == WarmStart::Zeros || frames_done == 0 || start % s != 0 {
        return vec![0.0; len * d];
    }
    // tile the last fully committed frame, phase-aligned within each frame
    let frame = &committed[(frames_done - 1) * s * d..frames_done * s * d];
    let mut out = Vec::with_capacity(len * d);
    for p in 0..len {
        let within = (start + p) % s;
        out.extend_from_slice(&frame[within * d..(within + 1) * d]);
    }
    out
}

/// Invert the deep flow over the whole sequence using block-wise Jacobi
/// sweeps with classifier-free guidance weight `w` (1.0 disables it).
pub fn jacobi_invert_deep(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    z: &[f64],
    layout: FrameLayout,
    cond: Condition,
    w: f64,
    plan: &JacobiPlan,
) -> Result<(Vec<f64>, JacobiTrace)> {
    let d = layout.channels;
    let l = layout.len();
    if z.len() != layout.numel() {
        return Err(Error::ShapeMismatch {
            op: "jacobi_invert_deep",
            detail: format!("expected {} latents, got {}", layout.numel(), z.len()),
        });
    }
    let guided = w != 1.0;
    let cvec = model.embed_condition(store, cond);
    let null_vec = model.embed_condition(store, Condition::Null);
    let mut cache = model.deep.fresh_cache();
    let mut ucache: Option<KvCache> = guided.then(|| model.deep.fresh_cache());

    let clock = Instant::now();
    let mut u = vec![0.0; l * d];
    let mut trace = JacobiTrace::default();

    for (bi, (start, len)) in plan.partition(l).into_iter().enumerate() {
        let zb = &z[start * d..(start + len) * d];
        let mut guess = warm_init(plan, &u[..start * d], start, len, layout);
        let budget = plan.max_iters.unwrap_or(len).max(1);
        let mut residuals = Vec::new();
        let mut passes = 0usize;
        let mut iters = 0usize;
        let mut stall = 0usize;
        let mut best = f64::INFINITY;

        let prev_row: Option<Vec<f64>> =
            (start > 0).then(|| u[(start - 1) * d..start * d].to_vec());
        loop {
            // shifted conditioner inputs for the block under the current guess
            let mut shifted = Vec::with_capacity(len * d);
            match &prev_row {
                Some(p) => shifted.extend_from_slice(p),
                None => shifted.extend_from_slice(model.deep.start_values(store)),
            }
            shifted.extend_from_slice(&guess[..(len - 1) * d]);

            let (mu, ls) = block_params(
                model, store, &mut cache, ucache.as_mut(), &shifted, len, &cvec, &null_vec, w,
                false,
            )?;
            passes += 1;
            iters += 1;
            let mut next = vec![0.0; len * d];
            for i in 0..len * d {
                next[i] = ls[i].exp() * zb[i] + mu[i];
            }
            let r = scale_normalized_residual(&next, &guess, plan.epsilon);
            residuals.push(r);
            guess = next;
            if r < plan.tau || iters >= budget {
                break;
            }
            if r >= best {
                stall += 1;
                if stall >= 10 {
                    return Err(Error::Divergence { block: bi, stalled: stall, residual: r });
                }
            } else {
                stall = 0;
                best = r;
            }
        }

        // polish sweep: the residual bounds the last update, not the error,
        // so apply the fixed-point map once more after convergence
        let shifted_for = |guess: &[f64]| {
            let mut s = Vec::with_capacity(len * d);
            match &prev_row {
                Some(p) => s.extend_from_slice(p),
                None => s.extend_from_slice(model.deep.start_values(store)),
            }
            s.extend_from_slice(&guess[..(len - 1) * d]);
            s
        };
        for _ in 0..2 {
            let shifted = shifted_for(&guess);
            let (mu, ls) = block_params(
                model, store, &mut cache, ucache.as_mut(), &shifted, len, &cvec, &null_vec, w,
                false,
            )?;
            passes += 1;
            for i in 0..len * d {
                guess[i] = ls[i].exp() * zb[i] + mu[i];
            }
        }

        // commit pass: append the block's keys/values to both caches, and
        // reuse its parameters as one final free refinement
        let shifted = shifted_for(&guess);
        let (mu, ls) = block_params(
            model, store, &mut cache, ucache.as_mut(), &shifted, len, &cvec, &null_vec, w, true,
        )?;
        passes += 1;
        for i in 0..len * d {
            guess[i] = ls[i].exp() * zb[i] + mu[i];
        }

        u[start * d..(start + len) * d].copy_from_slice(&guess);
        trace.total_passes += passes;
        trace.blocks.push(BlockTrace { start, len, iters, residuals, passes });
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "jacobi_invert_deep" });
    }
    trace.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok((u, trace))
}

#[allow(clippy::too_many_arguments)]
fn block_params(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    cache: &mut KvCache,
    ucache: Option<&mut KvCache>,
    shifted: &[f64],
    len: usize,
    cvec: &[f64],
    null_vec: &[f64],
    w: f64,
    commit: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let save = cache.len;
    let (mu_c, ls_c) = model.deep.cond_params_range(store, cache, shifted, len, cvec, commit)?;
    debug_assert!(commit || cache.len == save);
    match ucache {
        Some(uc) => {
            let (mu_u, ls_u) =
                model.deep.cond_params_range(store, uc, shifted, len, null_vec, commit)?;
            Ok(guided_params(&mu_c, &ls_c, &mu_u, &ls_u, w))
        }
        None => Ok((mu_c, ls_c)),
    }
}

/// Full decode through the Jacobi deep inverse plus the shallow inverse.
pub fn jacobi_decode(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    z: &TokenSequence,
    cond: Condition,
    w: f64,
    plan: &JacobiPlan,
) -> Result<(TokenSequence, JacobiTrace)> {
    let (u, trace) = jacobi_invert_deep(model, store, &z.data, z.layout, cond, w, plan)?;
    let cvec = model.embed_condition(store, cond);
    let x = model.shallow_inverse(store, &u, z.layout, &cvec)?;
    Ok((TokenSequence::new(z.layout, x)?, trace))
}

/// One CSV row per (block size, warm start, frame) for the benchmark sweep.
pub struct SweepRow {
    pub block_size: usize,
    pub warm_start: WarmStart,
    pub frame_index: usize,
    pub iters: usize,
    pub passes: usize,
    pub wall_ms: f64,
}

/// Frame-sized-block sweep over warm-start policies and block sizes.
pub fn bench_sweep(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    z: &TokenSequence,
    cond: Condition,
    block_sizes: &[usize],
    tau: f64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &bs in block_sizes {
        for ws in [WarmStart::Zeros, WarmStart::PrevFrame] {
            let plan = JacobiPlan {
                first_block_size: bs,
                later_block_factor: 1,
                tau,
                warm_start: ws,
                ..JacobiPlan::default()
            };
            let (_, trace) = jacobi_invert_deep(model, store, &z.data, z.layout, cond, 1.0, &plan)?;
            for b in &trace.blocks {
                rows.push(SweepRow {
                    block_size: bs,
                    warm_start: ws,
                    frame_index: b.start / z.layout.frame_size,
                    iters: b.iters,
                    passes: b.passes,
                    wall_ms: trace.wall_ms / trace.blocks.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_covers_sequence_with_asymmetric_blocks() {
        let plan = JacobiPlan { first_block_size: 16, later_block_factor: 4, ..JacobiPlan::default() };
        let parts = plan.partition(128);
        assert_eq!(parts, vec![(0, 16), (16, 64), (80, 48)]);
        let total: usize = parts.iter().map(|&(_, l)| l).sum();
        assert_eq!(total, 128);
        assert_eq!(plan.partition(8), vec![(0, 8)]);
    }

    #[test]
    fn residual_algebra() {
        let r = scale_normalized_residual(&[3.0, 4.0], &[3.0, 4.0], 1e-8);
        assert_eq!(r, 0.0);
        let r = scale_normalized_residual(&[2.0], &[1.0], 0.0);
        assert!((r - 0.25).abs() < 1e-15);
        // eps keeps a zero target well-defined
        let r = scale_normalized_residual(&[0.0], &[1.0], 1e-8);
        assert!(r.is_finite());
    }

    #[test]
    fn warm_init_tiles_previous_frame() {
        let layout = FrameLayout::new(4, 3, 2);
        let plan = JacobiPlan::default();
        let committed: Vec<f64> = (0..6).map(|i| i as f64).collect(); // one frame
        let init = warm_init(&plan, &committed, 3, 6, layout);
        assert_eq!(init.len(), 12);
        assert_eq!(&init[..6], &committed[..]);
        assert_eq!(&init[6..], &committed[..]);
        // zeros policy and first block fall back to zeros
        let z1 = warm_init(&JacobiPlan { warm_start: WarmStart::Zeros, ..plan }, &committed, 3, 3, layout);
        assert!(z1.iter().all(|&v| v == 0.0));
        let z2 = warm_init(&plan, &[], 0, 3, layout);
        assert!(z2.iter().all(|&v| v == 0.0));
    }
}
