//! Causal denoiser trained on the flow's own score (flow-score matching).
//!
//! The denoiser is a small attention network over noisy frames whose first
//! layer may look one frame ahead; deeper layers are frame-causal, so the
//! output at frame n depends on frames up to n + 1 and nothing later. Its
//! regression target is sigma times the model score of the noisy input,
//! which the trainer extracts for free from the likelihood backward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FrameLayout;
use crate::model::{Condition, GlobalLocalFlow, TokenSequence};
use crate::numerics::{Conditioner, MaskKind, ParamStore, Tape, Tensor, VarId};

/// Attention network predicting a per-token score estimate from noisy input.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub conditioner: Conditioner,
    pub frame_size: usize,
    pub channels: usize,
}

impl DenoiserNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        frame_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_cond: usize,
        max_pos: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(n_layers >= 1);
        // Only the first layer sees one frame ahead; stacking look-ahead in
        // deeper layers would compound the receptive field beyond n + 1.
        let mut masks = vec![MaskKind::FrameBlock { frame_size, lookahead: 1 }];
        masks.extend(vec![MaskKind::FrameBlock { frame_size, lookahead: 0 }; n_layers - 1]);
        let conditioner = Conditioner::new(
            store,
            "denoiser",
            channels,
            d_model,
            channels,
            d_cond,
            n_heads,
            max_pos,
            masks,
            rng,
        );
        DenoiserNet { conditioner, frame_size, channels }
    }

    /// s_phi(x_tilde): score estimate, one row per token position.
    pub fn forward(
        &self,
        store: &ParamStore,
        x_tilde: &[f64],
        layout: FrameLayout,
        cond: &[f64],
    ) -> Result<Vec<f64>> {
        if x_tilde.len() != layout.numel() {
            return Err(Error::ShapeMismatch {
                op: "denoiser",
                detail: format!("expected {} values, got {}", layout.numel(), x_tilde.len()),
            });
        }
        self.conditioner.nograd_full(store, x_tilde, layout.len(), cond)
    }

    /// Tape forward for training the denoiser parameters.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_tilde: VarId,
        cond: VarId,
    ) -> Result<VarId> {
        self.conditioner.forward_tape(tape, store, x_tilde, cond)
    }

    /// Mean-squared error between the prediction and a fixed target,
    /// averaged over every entry.
    pub fn fsm_loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_tilde: &TokenSequence,
        target: &[f64],
        cond: VarId,
    ) -> Result<VarId> {
        let layout = x_tilde.layout;
        let x = GlobalLocalFlow::sequence_leaf(tape, x_tilde, false)?;
        let pred = self.forward_tape(tape, store, x, cond)?;
        let t = tape.constant(Tensor::from_rows(layout.len(), layout.channels, target.to_vec())?);
        let diff = tape.sub(pred, t)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq)?;
        tape.scale(sum, 1.0 / layout.numel() as f64)
    }
}

/// sigma * grad_{x_tilde} log p_theta(x_tilde): the regression target for
/// flow-score matching, computed from the exact likelihood gradient and
/// detached from the flow parameters.
pub fn fsm_target(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    x_tilde: &TokenSequence,
    cond: Condition,
    sigma: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = GlobalLocalFlow::sequence_leaf(&mut tape, x_tilde, true)?;
    let (nll, _) = model.nll_tape(&mut tape, store, x, x_tilde.layout, cond)?;
    tape.backward(nll)?;
    let g = tape
        .grad(x)
        .ok_or_else(|| Error::Backward("no input gradient recorded".into()))?;
    Ok(g.iter().map(|&v| -sigma * v).collect())
}

/// Tweedie correction with the learned denoiser:
/// x_hat = x_tilde + sigma_test * s_phi(x_tilde).
pub fn tweedie_correct(
    denoiser: &DenoiserNet,
    store: &ParamStore,
    x_tilde: &TokenSequence,
    cond: &[f64],
    sigma_test: f64,
) -> Result<TokenSequence> {
    let s = denoiser.forward(store, &x_tilde.data, x_tilde.layout, cond)?;
    let data = x_tilde.data.iter().zip(&s).map(|(&x, &sv)| x + sigma_test * sv).collect();
    TokenSequence::new(x_tilde.layout, data)
}

/// Raw-score baseline using the flow's own gradient, no learned network:
/// x_hat = x_tilde + sigma^2 * grad log p(x_tilde).
pub fn score_denoise_raw(
    model: &GlobalLocalFlow,
    store: &ParamStore,
    x_tilde: &TokenSequence,
    cond: Condition,
    sigma: f64,
) -> Result<TokenSequence> {
    let target = fsm_target(model, store, x_tilde, cond, sigma)?;
    let data = x_tilde.data.iter().zip(&target).map(|(&x, &t)| x + sigma * t).collect();
    TokenSequence::new(x_tilde.layout, data)
}
