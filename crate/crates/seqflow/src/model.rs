//! The global–local composed flow and exact likelihood accounting.
//!
//! A deep sequence-wide causal block f_D is composed with a stack of
//! within-frame shallow blocks f_S (alternating direction). Only the deep
//! block moves information across frames, so the composition stays causal
//! frame-to-frame and the likelihood factorizes over frames exactly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{make_shallow_stack, FlowBlock, FrameLayout, MaskSpec};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, VarId};

pub const LOG_2PI: f64 = 1.8378770664093453;

/// A sequence of N frames, S positions per frame, D channels per position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub layout: FrameLayout,
    pub data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(layout: FrameLayout, data: Vec<f64>) -> Result<Self> {
        if layout.numel() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "TokenSequence::new",
                detail: format!("layout implies {} values, got {}", layout.numel(), data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "TokenSequence::new" });
        }
        Ok(TokenSequence { layout, data })
    }

    pub fn zeros(layout: FrameLayout) -> Self {
        TokenSequence { layout, data: vec![0.0; layout.numel()] }
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        let fl = self.layout.frame_size * self.layout.channels;
        &self.data[n * fl..(n + 1) * fl]
    }

    /// Drop the leading frame, re-stamping the layout.
    pub fn drop_first_frame(&self) -> Result<TokenSequence> {
        if self.layout.n_frames < 2 {
            return Err(Error::Domain {
                op: "drop_first_frame",
                detail: "sequence has a single frame".into(),
            });
        }
        let fl = self.layout.frame_size * self.layout.channels;
        TokenSequence::new(
            FrameLayout { n_frames: self.layout.n_frames - 1, ..self.layout },
            self.data[fl..].to_vec(),
        )
    }
}

/// Model geometry and conditioner sizes; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelGeometry {
    pub n_frames: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub deep_layers: usize,
    pub deep_width: usize,
    pub shallow_blocks: usize,
    pub shallow_layers: usize,
    pub shallow_width: usize,
    pub n_heads: usize,
    pub d_cond: usize,
    pub n_classes: usize,
    pub denoiser_layers: usize,
    pub denoiser_width: usize,
    pub denoiser_heads: usize,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        ModelGeometry {
            n_frames: 8,
            frame_size: 16,
            channels: 4,
            deep_layers: 4,
            deep_width: 64,
            shallow_blocks: 3,
            shallow_layers: 1,
            shallow_width: 32,
            n_heads: 4,
            d_cond: 16,
            n_classes: 3,
            denoiser_layers: 8,
            denoiser_width: 16,
            denoiser_heads: 2,
        }
    }
}

impl ModelGeometry {
    pub fn layout(&self) -> FrameLayout {
        FrameLayout::new(self.n_frames, self.frame_size, self.channels)
    }
}

/// Condition signal: a class id standing in for text, or the learned
/// unconditional token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Class(usize),
    Null,
}

/// The composed model: deep sequence-wide flow, shallow per-frame stack,
/// standard normal prior, and a learned condition embedding table.
#[derive(Debug, Clone)]
pub struct GlobalLocalFlow {
    pub deep: FlowBlock,
    pub shallow: Vec<FlowBlock>,
    pub cond_table: ParamId,
    pub geometry: ModelGeometry,
}

impl GlobalLocalFlow {
    pub fn new(store: &mut ParamStore, geometry: ModelGeometry, rng: &mut ChaCha8Rng) -> Self {
        let g = &geometry;
        let deep = FlowBlock::new(
            store,
            "deep",
            MaskSpec::sequence_wide(),
            g.channels,
            g.deep_width,
            g.n_heads,
            g.deep_layers,
            g.d_cond,
            g.n_frames * g.frame_size,
            rng,
        );
        let shallow = make_shallow_stack(
            store,
            g.shallow_blocks,
            g.channels,
            g.frame_size,
            g.shallow_width,
            g.n_heads.min(g.shallow_width / 4).max(1),
            g.shallow_layers,
            g.d_cond,
            rng,
        );
        // one learned row per class plus a distinguished null row
        let cond_table =
            store.alloc_normal("cond_table", vec![g.n_classes + 1, g.d_cond], 0.05, rng);
        GlobalLocalFlow { deep, shallow, cond_table, geometry }
    }

    pub fn embed_condition(&self, store: &ParamStore, cond: Condition) -> Vec<f64> {
        let d = self.geometry.d_cond;
        let table = store.values(self.cond_table);
        let row = match cond {
            Condition::Class(c) => {
                assert!(c < self.geometry.n_classes, "class id out of range");
                c
            }
            Condition::Null => self.geometry.n_classes,
        };
        table[row * d..(row + 1) * d].to_vec()
    }

    pub fn cond_var(&self, tape: &mut Tape, store: &ParamStore, cond: Condition) -> Result<VarId> {
        let table = tape.param(store, self.cond_table);
        let row = match cond {
            Condition::Class(c) => c,
            Condition::Null => self.geometry.n_classes,
        };
        tape.gather_rows(table, std::rc::Rc::new(vec![row]))
    }

    /// x -> (u, z, logdet_S, logdet_D), teacher-forced, no gradients.
    pub fn encode(
        &self,
        store: &ParamStore,
        x: &TokenSequence,
        cond: Condition,
    ) -> Result<(TokenSequence, TokenSequence, f64, f64)> {
        let cvec = self.embed_condition(store, cond);
        let layout = x.layout;
        let mut cur = x.data.clone();
        let mut logdet_s = 0.0;
        for block in &self.shallow {
            let (z, ls) = block.forward_nograd(store, &cur, layout, &cvec)?;
            logdet_s -= ls.iter().sum::<f64>();
            cur = z;
        }
        let u = TokenSequence::new(layout, cur.clone())?;
        let (z, ls_d) = self.deep.forward_nograd(store, &cur, layout, &cvec)?;
        let logdet_d = -ls_d.iter().sum::<f64>();
        Ok((u, TokenSequence::new(layout, z)?, logdet_s, logdet_d))
    }

    /// z -> x: deep inverse over the global order, then shallow inverses
    /// per frame (innermost block last).
    pub fn decode(&self, store: &ParamStore, z: &TokenSequence, cond: Condition) -> Result<TokenSequence> {
        let cvec = self.embed_condition(store, cond);
        let layout = z.layout;
        let u = self.deep.inverse_sequential(store, &z.data, layout, &cvec, None)?;
        let x = self.shallow_inverse(store, &u, layout, &cvec)?;
        TokenSequence::new(layout, x)
    }

    /// f_S^{-1}: invert the shallow stack in reverse composition order.
    pub fn shallow_inverse(
        &self,
        store: &ParamStore,
        u: &[f64],
        layout: FrameLayout,
        cvec: &[f64],
    ) -> Result<Vec<f64>> {
        let mut cur = u.to_vec();
        for block in self.shallow.iter().rev() {
            cur = block.inverse_sequential(store, &cur, layout, cvec, None)?;
        }
        Ok(cur)
    }

    /// f_S: shallow forward only (x -> u), frame-independent.
    pub fn shallow_forward(
        &self,
        store: &ParamStore,
        x: &[f64],
        layout: FrameLayout,
        cvec: &[f64],
    ) -> Result<Vec<f64>> {
        let mut cur = x.to_vec();
        for block in &self.shallow {
            let (z, _) = block.forward_nograd(store, &cur, layout, &cvec.to_vec())?;
            cur = z;
        }
        Ok(cur)
    }

    /// Exact log-likelihood and its frame factorization.
    ///
    /// total = sum_i log N(z_i; 0, 1) + logdet_D + logdet_S;
    /// per_frame[n] = log p_D(u_n | u_<n) + log|det J_{f_S}(x_n)|.
    pub fn log_likelihood(
        &self,
        store: &ParamStore,
        x: &TokenSequence,
        cond: Condition,
    ) -> Result<(f64, Vec<f64>)> {
        let cvec = self.embed_condition(store, cond);
        let layout = x.layout;
        let fl = layout.frame_size * layout.channels;

        let mut cur = x.data.clone();
        let mut shallow_ls_per_frame = vec![0.0; layout.n_frames];
        let mut logdet_s = 0.0;
        for block in &self.shallow {
            let (z, ls) = block.forward_nograd(store, &cur, layout, &cvec)?;
            logdet_s -= ls.iter().sum::<f64>();
            for n in 0..layout.n_frames {
                shallow_ls_per_frame[n] += ls[n * fl..(n + 1) * fl].iter().sum::<f64>();
            }
            cur = z;
        }
        let (z, ls_d) = self.deep.forward_nograd(store, &cur, layout, &cvec)?;
        let logdet_d = -ls_d.iter().sum::<f64>();

        let prior: f64 = z.iter().map(|&v| -0.5 * (v * v + LOG_2PI)).sum();
        let total = prior + logdet_d + logdet_s;

        let mut per_frame = Vec::with_capacity(layout.n_frames);
        for n in 0..layout.n_frames {
            let zf = &z[n * fl..(n + 1) * fl];
            let lsf = &ls_d[n * fl..(n + 1) * fl];
            let log_p_d: f64 = zf.iter().map(|&v| -0.5 * (v * v + LOG_2PI)).sum::<f64>()
                - lsf.iter().sum::<f64>();
            per_frame.push(log_p_d - shallow_ls_per_frame[n]);
        }
        Ok((total, per_frame))
    }

    /// Negative log-likelihood (sum over all entries) on the tape; also
    /// returns the latent var for downstream inspection.
    pub fn nll_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        layout: FrameLayout,
        cond: Condition,
    ) -> Result<(VarId, VarId)> {
        let cvar = self.cond_var(tape, store, cond)?;
        let mut cur = x;
        let mut ls_sums = Vec::new();
        for block in &self.shallow {
            let out = block.forward_tape(tape, store, cur, layout, cvar)?;
            ls_sums.push(tape.sum_all(out.log_sigma)?);
            cur = out.z;
        }
        let out = self.deep.forward_tape(tape, store, cur, layout, cvar)?;
        ls_sums.push(tape.sum_all(out.log_sigma)?);
        let z = out.z;

        let sq = tape.mul(z, z)?;
        let half_sq = tape.sum_all(sq)?;
        let mut nll = tape.scale(half_sq, 0.5)?;
        for s in ls_sums {
            nll = tape.add(nll, s)?;
        }
        let numel = layout.numel() as f64;
        let nll = tape.add_scalar(nll, 0.5 * numel * LOG_2PI)?;
        Ok((nll, z))
    }

    /// Leaf constructor for a sequence on the tape.
    pub fn sequence_leaf(tape: &mut Tape, x: &TokenSequence, requires_grad: bool) -> Result<VarId> {
        let mut t = Tensor::from_rows(x.layout.len(), x.layout.channels, x.data.clone())?;
        t.requires_grad = requires_grad;
        Ok(tape.leaf(t))
    }
}
