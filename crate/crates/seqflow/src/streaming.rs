//! Bounded-memory streaming generation.
//!
//! Frames are produced one at a time: the deep flow is inverted over the
//! frame's positions, the shallow stack decodes it to data space, and the
//! frame is immediately re-encoded through the shallow stack so the deep
//! key/value cache is refreshed from a forward pass rather than from the
//! inversion's intermediate state. The cache holds at most a window of W
//! frames; when full, it restarts as a chunk of the last W/2 frames. The
//! denoiser correction, when enabled, runs one frame behind so each
//! corrected frame can use its one-frame look-ahead.

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;

use crate::denoiser::DenoiserNet;
use crate::error::{Error, Result};
use crate::flow::FrameLayout;
use crate::model::{Condition, GlobalLocalFlow};
use crate::numerics::KvCache;
use crate::numerics::ParamStore;
use crate::sampler::{draw_latents, SampleOpts};

/// Sliding-window state of a generation stream.
#[derive(Debug)]
pub struct StreamState {
    /// Window size W in frames.
    pub window: usize,
    pub cache: KvCache,
    prev_u: Option<Vec<f64>>,
    /// Re-encoded u rows of the last <= W frames.
    u_hist: VecDeque<Vec<f64>>,
    /// Emitted-space frames of the last <= W frames (for the corrector).
    x_hist: VecDeque<Vec<f64>>,
    pub frames_generated: usize,
    /// Frames currently represented in the cache.
    frames_in_cache: usize,
}

impl StreamState {
    pub fn new(model: &GlobalLocalFlow, window: usize) -> Result<Self> {
        if window == 0 || window > model.geometry.n_frames {
            return Err(Error::Config(format!(
                "window {window} outside [1, {}]",
                model.geometry.n_frames
            )));
        }
        Ok(StreamState {
            window,
            cache: model.deep.fresh_cache(),
            prev_u: None,
            u_hist: VecDeque::new(),
            x_hist: VecDeque::new(),
            frames_generated: 0,
            frames_in_cache: 0,
        })
    }

    pub fn frame_layout(&self, model: &GlobalLocalFlow) -> FrameLayout {
        FrameLayout::new(1, model.geometry.frame_size, model.geometry.channels)
    }

    /// Rebuild the deep cache from the last `keep` retained frames,
    /// re-based to position zero (a chunk restart).
    pub fn rebuild_cache(
        &mut self,
        model: &GlobalLocalFlow,
        store: &ParamStore,
        cvec: &[f64],
        keep: usize,
    ) -> Result<()> {
        let d = model.geometry.channels;
        while self.u_hist.len() > keep {
            self.u_hist.pop_front();
        }
        self.cache = model.deep.fresh_cache();
        self.frames_in_cache = self.u_hist.len();
        if self.u_hist.is_empty() {
            return Ok(());
        }
        let mut u = Vec::new();
        for f in &self.u_hist {
            u.extend_from_slice(f);
        }
        let m = u.len() / d;
        let shifted = model.deep.shifted_rows(store, None, &u, m);
        model.deep.cond_params_range(store, &mut self.cache, &shifted, m, cvec, true)?;
        self.prev_u = Some(u[(m - 1) * d..].to_vec());
        Ok(())
    }

    /// Generate one frame from its latents. Returns the raw (uncorrected)
    /// frame; emission ordering is the driver's job.
    pub fn step(
        &mut self,
        model: &GlobalLocalFlow,
        store: &ParamStore,
        cond: Condition,
        z_frame: &[f64],
    ) -> Result<Vec<f64>> {
        let g = &model.geometry;
        let s = g.frame_size;
        let d = g.channels;
        if z_frame.len() != s * d {
            return Err(Error::ShapeMismatch {
                op: "stream_step",
                detail: format!("expected {} latents per frame, got {}", s * d, z_frame.len()),
            });
        }
        let cvec = model.embed_condition(store, cond);
        if self.frames_in_cache >= self.window {
            let keep = (self.window / 2).max(1).min(self.window - 1);
            self.rebuild_cache(model, store, &cvec, keep)?;
        }

        // invert the deep flow over this frame, committing position by position
        let before = self.cache.len;
        let mut u = vec![0.0; s * d];
        for i in 0..s {
            let input = match (&self.prev_u, i) {
                (_, 1..) => u[(i - 1) * d..i * d].to_vec(),
                (Some(p), 0) => p.clone(),
                (None, 0) => model.deep.start_values(store).to_vec(),
            };
            let (mu, ls) =
                model.deep.cond_params_range(store, &mut self.cache, &input, 1, &cvec, true)?;
            for c in 0..d {
                u[i * d + c] = ls[c].exp() * z_frame[i * d + c] + mu[c];
            }
        }

        // decode to data space, then re-encode with a forward pass and
        // refresh the cache entries for this frame from the re-encoding
        let frame_layout = self.frame_layout(model);
        let x = model.shallow_inverse(store, &u, frame_layout, &cvec)?;
        let u_hat = model.shallow_forward(store, &x, frame_layout, &cvec)?;
        self.cache.truncate(before);
        let prev = self.prev_u.clone();
        let shifted = model.deep.shifted_rows(store, prev.as_deref(), &u_hat, s);
        model.deep.cond_params_range(store, &mut self.cache, &shifted, s, &cvec, true)?;
        self.prev_u = Some(u_hat[(s - 1) * d..].to_vec());

        self.u_hist.push_back(u_hat);
        self.x_hist.push_back(x.clone());
        while self.u_hist.len() > self.window {
            self.u_hist.pop_front();
        }
        while self.x_hist.len() > self.window {
            self.x_hist.pop_front();
        }
        self.frames_in_cache += 1;
        self.frames_generated += 1;
        Ok(x)
    }

    /// Denoiser correction for the frame at offset `back` from the newest
    /// retained frame, using every retained frame as context.
    fn corrected_frame(
        &self,
        model: &GlobalLocalFlow,
        denoiser: &DenoiserNet,
        store: &ParamStore,
        cond: Condition,
        sigma_test: f64,
        back: usize,
    ) -> Result<Vec<f64>> {
        let g = &model.geometry;
        let h = self.x_hist.len();
        assert!(back < h);
        let layout = FrameLayout::new(h, g.frame_size, g.channels);
        let mut xs = Vec::with_capacity(layout.numel());
        for f in &self.x_hist {
            xs.extend_from_slice(f);
        }
        let cvec = model.embed_condition(store, cond);
        let score = denoiser.forward(store, &xs, layout, &cvec)?;
        let fl = g.frame_size * g.channels;
        let at = h - 1 - back;
        Ok(xs[at * fl..(at + 1) * fl]
            .iter()
            .zip(&score[at * fl..(at + 1) * fl])
            .map(|(&x, &sc)| x + sigma_test * sc)
            .collect())
    }
}

/// Drive a stream end to end, delivering frames to `sink` in order. With
/// correction enabled each frame is emitted one step late so the denoiser
/// can see its following frame.
#[allow(clippy::too_many_arguments)]
pub fn stream_generate(
    model: &GlobalLocalFlow,
    denoiser: Option<&DenoiserNet>,
    store: &ParamStore,
    total_frames: usize,
    window: usize,
    cond: Condition,
    opts: &SampleOpts,
    rng: &mut ChaCha8Rng,
    sink: &mut dyn FnMut(usize, &[f64]) -> std::io::Result<()>,
) -> Result<StreamState> {
    let mut state = StreamState::new(model, window)?;
    if opts.correct && window < 2 {
        return Err(Error::Config("correction requires a window of at least 2 frames".into()));
    }
    let net = if opts.correct {
        Some(denoiser.ok_or_else(|| Error::Config("correction requires a denoiser".into()))?)
    } else {
        None
    };
    let frame_layout = state.frame_layout(model);
    for t in 0..total_frames {
        let z = draw_latents(frame_layout, opts.temperature, rng);
        let x = state.step(model, store, cond, &z)?;
        match net {
            None => {
                sink(t, &x).map_err(|e| Error::Sink { frame: t, source: e })?;
            }
            Some(net) => {
                if t > 0 {
                    let fixed =
                        state.corrected_frame(model, net, store, cond, opts.sigma_test, 1)?;
                    sink(t - 1, &fixed).map_err(|e| Error::Sink { frame: t - 1, source: e })?;
                }
                if t + 1 == total_frames {
                    let fixed =
                        state.corrected_frame(model, net, store, cond, opts.sigma_test, 0)?;
                    sink(t, &fixed).map_err(|e| Error::Sink { frame: t, source: e })?;
                }
            }
        }
    }
    Ok(state)
}
