//! Masked affine autoregressive flow blocks.
//!
//! Each block predicts a per-position shift and positive scale from a
//! causal conditioner under a self-exclusive mask (realized by feeding the
//! conditioner a one-position-shifted sequence that starts with a learned
//! start token). Forward maps data to latents with an exact triangular
//! log-determinant; the inverse reconstructs positions one at a time.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Conditioner, KvCache, MaskKind, ParamId, ParamStore, Tape, Tensor, VarId};
use std::rc::Rc;

/// Scale clamp in log space; keeps sigma in [e^-5, e^5].
pub const LOG_SIGMA_CLAMP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    SequenceWide,
    WithinFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Attention scope of a flow block. Self-exclusivity is structural: the
/// conditioner never sees the position it is predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskSpec {
    pub scope: Scope,
    pub direction: Direction,
    pub self_exclusive: bool,
}

impl MaskSpec {
    pub fn sequence_wide() -> Self {
        MaskSpec { scope: Scope::SequenceWide, direction: Direction::Forward, self_exclusive: true }
    }

    pub fn within_frame(direction: Direction) -> Self {
        MaskSpec { scope: Scope::WithinFrame, direction, self_exclusive: true }
    }
}

/// Frame geometry of a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub n_frames: usize,
    pub frame_size: usize,
    pub channels: usize,
}

impl FrameLayout {
    pub fn new(n_frames: usize, frame_size: usize, channels: usize) -> Self {
        FrameLayout { n_frames, frame_size, channels }
    }

    /// Number of token positions (frames x positions-per-frame).
    pub fn len(&self) -> usize {
        self.n_frames * self.frame_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numel(&self) -> usize {
        self.len() * self.channels
    }
}

/// Per-position affine parameters predicted by a conditioner.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

/// One masked affine autoregressive block.
#[derive(Debug, Clone)]
pub struct FlowBlock {
    pub conditioner: Conditioner,
    pub mask: MaskSpec,
    pub start_token: ParamId,
    pub channels: usize,
}

/// Tape-side outputs of a block forward pass, all in original token order.
pub struct BlockTapeOut {
    pub z: VarId,
    pub mu: VarId,
    pub log_sigma: VarId,
}

impl FlowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mask: MaskSpec,
        channels: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_cond: usize,
        max_pos: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conditioner = Conditioner::new(
            store,
            &format!("{prefix}.cond"),
            channels,
            d_model,
            2 * channels,
            d_cond,
            n_heads,
            max_pos,
            vec![MaskKind::Causal; n_layers],
            rng,
        );
        let start_token = store.alloc_normal(format!("{prefix}.start"), vec![1, channels], 0.05, rng);
        FlowBlock { conditioner, mask, start_token, channels }
    }

    pub fn fresh_cache(&self) -> KvCache {
        KvCache::new(self.conditioner.n_layers(), self.conditioner.d_model)
    }

    pub fn start_values<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.values(self.start_token)
    }

    /// Within-frame processing order of one frame under this block's mask.
    pub fn frame_order(&self, frame_size: usize) -> Vec<usize> {
        match self.mask.direction {
            Direction::Forward => (0..frame_size).collect(),
            Direction::Reverse => (0..frame_size).rev().collect(),
        }
    }

    /// Global permutation mapping processing position -> original index.
    pub fn order(&self, layout: FrameLayout) -> Vec<usize> {
        match self.mask.scope {
            Scope::SequenceWide => (0..layout.len()).collect(),
            Scope::WithinFrame => {
                let fo = self.frame_order(layout.frame_size);
                let mut out = Vec::with_capacity(layout.len());
                for f in 0..layout.n_frames {
                    out.extend(fo.iter().map(|&s| f * layout.frame_size + s));
                }
                out
            }
        }
    }

    // ── teacher-forced forward, tape path ────────────────────────────

    /// z = (x - mu) / sigma in one parallel pass; outputs in original order.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        layout: FrameLayout,
        cond: VarId,
    ) -> Result<BlockTapeOut> {
        match self.mask.scope {
            Scope::SequenceWide => self.forward_tape_span(tape, store, x, layout.len(), cond),
            Scope::WithinFrame => {
                let s = layout.frame_size;
                let fo = self.frame_order(s);
                let mut zs = Vec::new();
                let mut mus = Vec::new();
                let mut lss = Vec::new();
                for f in 0..layout.n_frames {
                    let idx: Vec<usize> = fo.iter().map(|&p| f * s + p).collect();
                    let xf = tape.gather_rows(x, Rc::new(idx))?;
                    let out = self.forward_tape_span(tape, store, xf, s, cond)?;
                    zs.push(out.z);
                    mus.push(out.mu);
                    lss.push(out.log_sigma);
                }
                let z_perm = tape.concat_rows(&zs)?;
                let mu_perm = tape.concat_rows(&mus)?;
                let ls_perm = tape.concat_rows(&lss)?;
                // invert the global permutation to restore original order
                let perm = self.order(layout);
                let mut inv = vec![0usize; perm.len()];
                for (pos, &orig) in perm.iter().enumerate() {
                    inv[orig] = pos;
                }
                let inv = Rc::new(inv);
                Ok(BlockTapeOut {
                    z: tape.gather_rows(z_perm, inv.clone())?,
                    mu: tape.gather_rows(mu_perm, inv.clone())?,
                    log_sigma: tape.gather_rows(ls_perm, inv)?,
                })
            }
        }
    }

    fn forward_tape_span(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        len: usize,
        cond: VarId,
    ) -> Result<BlockTapeOut> {
        let d = self.channels;
        let start = tape.param(store, self.start_token);
        let shifted = if len == 1 {
            start
        } else {
            let idx: Vec<usize> = (0..len - 1).collect();
            let prev = tape.gather_rows(x, Rc::new(idx))?;
            tape.concat_rows(&[start, prev])?
        };
        let out = self.conditioner.forward_tape(tape, store, shifted, cond)?;
        let mu = tape.slice_cols(out, 0, d)?;
        let ls_raw = tape.slice_cols(out, d, d)?;
        let log_sigma = tape.clamp(ls_raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
        let sigma = tape.exp(log_sigma)?;
        let diff = tape.sub(x, mu)?;
        let z = tape.div(diff, sigma)?;
        Ok(BlockTapeOut { z, mu, log_sigma })
    }

    // ── no-grad paths ────────────────────────────────────────────────

    /// Conditioner inputs for block positions, shifted by one: row 0 is the
    /// previous committed token (or the start token), rows 1.. are the
    /// block's own tokens except the last.
    pub fn shifted_rows(&self, store: &ParamStore, prev: Option<&[f64]>, tokens: &[f64], m: usize) -> Vec<f64> {
        let d = self.channels;
        let mut out = Vec::with_capacity(m * d);
        match prev {
            Some(p) => out.extend_from_slice(&p[..d]),
            None => out.extend_from_slice(self.start_values(store)),
        }
        if m > 1 {
            out.extend_from_slice(&tokens[..(m - 1) * d]);
        }
        out
    }

    /// Affine parameters for the next `m` positions given the cache.
    /// `tokens` are already-shifted conditioner inputs. Returns clamped
    /// (mu, log_sigma), each `m * channels` long.
    pub fn cond_params_range(
        &self,
        store: &ParamStore,
        cache: &mut KvCache,
        tokens: &[f64],
        m: usize,
        cond: &[f64],
        commit: bool,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.channels;
        let out = self.conditioner.nograd_range(store, cache, tokens, m, cond, commit)?;
        let mut mu = Vec::with_capacity(m * d);
        let mut ls = Vec::with_capacity(m * d);
        for i in 0..m {
            let row = &out[i * 2 * d..(i + 1) * 2 * d];
            mu.extend_from_slice(&row[..d]);
            ls.extend(row[d..].iter().map(|v| v.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)));
        }
        Ok((mu, ls))
    }

    /// Teacher-forced forward without gradients. Returns (z, log_sigma) in
    /// original order.
    pub fn forward_nograd(
        &self,
        store: &ParamStore,
        x: &[f64],
        layout: FrameLayout,
        cond: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.channels;
        match self.mask.scope {
            Scope::SequenceWide => {
                let l = layout.len();
                let mut cache = self.fresh_cache();
                let shifted = self.shifted_rows(store, None, x, l);
                let (mu, ls) = self.cond_params_range(store, &mut cache, &shifted, l, cond, false)?;
                let z = affine_forward(x, &mu, &ls);
                check_finite(&z)?;
                Ok((z, ls))
            }
            Scope::WithinFrame => {
                let s = layout.frame_size;
                let fo = self.frame_order(s);
                let mut z = vec![0.0; layout.numel()];
                let mut ls_all = vec![0.0; layout.numel()];
                for f in 0..layout.n_frames {
                    let mut xf = Vec::with_capacity(s * d);
                    for &p in &fo {
                        let g = f * s + p;
                        xf.extend_from_slice(&x[g * d..(g + 1) * d]);
                    }
                    let mut cache = self.fresh_cache();
                    let shifted = self.shifted_rows(store, None, &xf, s);
                    let (mu, ls) = self.cond_params_range(store, &mut cache, &shifted, s, cond, false)?;
                    let zf = affine_forward(&xf, &mu, &ls);
                    for (i, &p) in fo.iter().enumerate() {
                        let g = f * s + p;
                        z[g * d..(g + 1) * d].copy_from_slice(&zf[i * d..(i + 1) * d]);
                        ls_all[g * d..(g + 1) * d].copy_from_slice(&ls[i * d..(i + 1) * d]);
                    }
                }
                check_finite(&z)?;
                Ok((z, ls_all))
            }
        }
    }

    /// Sequential inverse: positions produced one at a time in mask order.
    /// For sequence-wide blocks an external cache may be supplied (prefix
    /// conditioning); `prev` must then hold the token preceding position
    /// `cache.len` in u-space.
    pub fn inverse_sequential(
        &self,
        store: &ParamStore,
        z: &[f64],
        layout: FrameLayout,
        cond: &[f64],
        cache: Option<(&mut KvCache, Option<&[f64]>)>,
    ) -> Result<Vec<f64>> {
        let d = self.channels;
        match self.mask.scope {
            Scope::SequenceWide => {
                let l = layout.len();
                let mut own_cache;
                let (cache, prev_row): (&mut KvCache, Option<Vec<f64>>) = match cache {
                    Some((c, p)) => {
                        let pv = p.map(|s| s.to_vec());
                        if c.len > 0 && pv.is_none() {
                            return Err(Error::CacheMismatch { expected: c.len, found: 0 });
                        }
                        (c, pv)
                    }
                    None => {
                        own_cache = self.fresh_cache();
                        (&mut own_cache, None)
                    }
                };
                let offset = cache.len;
                if offset + l > self.conditioner.max_pos {
                    return Err(Error::Domain {
                        op: "inverse_sequential",
                        detail: format!("{} positions exceed max_pos", offset + l),
                    });
                }
                let mut x = vec![0.0; l * d];
                for i in 0..l {
                    let input = match (&prev_row, i) {
                        (Some(p), 0) => p.clone(),
                        (None, 0) => self.start_values(store).to_vec(),
                        _ => x[(i - 1) * d..i * d].to_vec(),
                    };
                    let (mu, ls) = self.cond_params_range(store, cache, &input, 1, cond, true)?;
                    for c in 0..d {
                        x[i * d + c] = ls[c].exp() * z[i * d + c] + mu[c];
                    }
                }
                check_finite(&x)?;
                Ok(x)
            }
            Scope::WithinFrame => {
                let s = layout.frame_size;
                let fo = self.frame_order(s);
                let mut x = vec![0.0; layout.numel()];
                for f in 0..layout.n_frames {
                    let mut cache = self.fresh_cache();
                    let mut xf = vec![0.0; s * d];
                    for (i, &p) in fo.iter().enumerate() {
                        let g = f * s + p;
                        let input = if i == 0 {
                            self.start_values(store).to_vec()
                        } else {
                            xf[(i - 1) * d..i * d].to_vec()
                        };
                        let (mu, ls) = self.cond_params_range(store, &mut cache, &input, 1, cond, true)?;
                        for c in 0..d {
                            xf[i * d + c] = ls[c].exp() * z[g * d + c] + mu[c];
                        }
                    }
                    for (i, &p) in fo.iter().enumerate() {
                        let g = f * s + p;
                        x[g * d..(g + 1) * d].copy_from_slice(&xf[i * d..(i + 1) * d]);
                    }
                }
                check_finite(&x)?;
                Ok(x)
            }
        }
    }
}

/// z = (x - mu) * exp(-log_sigma), elementwise.
pub fn affine_forward(x: &[f64], mu: &[f64], log_sigma: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mu)
        .zip(log_sigma)
        .map(|((&xv, &m), &ls)| (xv - m) * (-ls).exp())
        .collect()
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "flow_block" })
    }
}

/// Stack of within-frame blocks with alternating directions
/// (forward, reverse, forward, ...).
#[allow(clippy::too_many_arguments)]
pub fn make_shallow_stack(
    store: &mut ParamStore,
    t_s: usize,
    channels: usize,
    frame_size: usize,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    d_cond: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<FlowBlock> {
    assert!(t_s >= 1, "at least one shallow block required");
    (0..t_s)
        .map(|i| {
            let dir = if i % 2 == 0 { Direction::Forward } else { Direction::Reverse };
            FlowBlock::new(
                store,
                &format!("shallow{i}"),
                MaskSpec::within_frame(dir),
                channels,
                d_model,
                n_heads,
                n_layers,
                d_cond,
                frame_size,
                rng,
            )
        })
        .collect()
}
