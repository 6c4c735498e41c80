//! Multi-head self-attention blocks used by every conditioner network,
//! with two evaluation paths: a tape-recorded forward for training and a
//! plain-f64 forward with a key/value cache for incremental decoding.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tape::{matmul_raw, Tape, VarId};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// Attention scope for one layer, materialized per sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Position i attends positions <= i.
    Causal,
    /// Position in frame n attends every position of frames <= n + lookahead.
    FrameBlock { frame_size: usize, lookahead: usize },
}

impl MaskKind {
    pub fn allows(&self, query: usize, key: usize) -> bool {
        match *self {
            MaskKind::Causal => key <= query,
            MaskKind::FrameBlock { frame_size, lookahead } => {
                key / frame_size <= query / frame_size + lookahead
            }
        }
    }

    pub fn materialize(&self, len: usize) -> Rc<Vec<bool>> {
        let mut m = vec![false; len * len];
        for i in 0..len {
            for j in 0..len {
                m[i * len + j] = self.allows(i, j);
            }
        }
        Rc::new(m)
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
    pub n_heads: usize,
}

const INIT_STD: f64 = 0.05;

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % n_heads == 0, "d_model must be divisible by n_heads");
        let d_ff = 4 * d_model;
        let p = |s: &str| format!("{prefix}.{s}");
        AttentionLayer {
            ln1_g: store.alloc_ones(p("ln1_g"), vec![d_model]),
            ln1_b: store.alloc_zeros(p("ln1_b"), vec![d_model]),
            wq: store.alloc_normal(p("wq"), vec![d_model, d_model], INIT_STD, rng),
            bq: store.alloc_zeros(p("bq"), vec![d_model]),
            wk: store.alloc_normal(p("wk"), vec![d_model, d_model], INIT_STD, rng),
            bk: store.alloc_zeros(p("bk"), vec![d_model]),
            wv: store.alloc_normal(p("wv"), vec![d_model, d_model], INIT_STD, rng),
            bv: store.alloc_zeros(p("bv"), vec![d_model]),
            wo: store.alloc_normal(p("wo"), vec![d_model, d_model], INIT_STD, rng),
            bo: store.alloc_zeros(p("bo"), vec![d_model]),
            ln2_g: store.alloc_ones(p("ln2_g"), vec![d_model]),
            ln2_b: store.alloc_zeros(p("ln2_b"), vec![d_model]),
            w1: store.alloc_normal(p("w1"), vec![d_model, d_ff], INIT_STD, rng),
            b1: store.alloc_zeros(p("b1"), vec![d_ff]),
            w2: store.alloc_normal(p("w2"), vec![d_ff, d_model], INIT_STD, rng),
            b2: store.alloc_zeros(p("b2"), vec![d_model]),
            d_model,
            n_heads,
        }
    }

    /// Pre-norm residual block on the tape: x + Attn(LN(x)), then + FFN(LN(.)).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
        mask: Rc<Vec<bool>>,
    ) -> Result<VarId> {
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let g1 = tape.param(store, self.ln1_g);
        let b1 = tape.param(store, self.ln1_b);
        let h1 = tape.layer_norm(x, g1, b1)?;

        let (wq, bq) = (tape.param(store, self.wq), tape.param(store, self.bq));
        let (wk, bk) = (tape.param(store, self.wk), tape.param(store, self.bk));
        let (wv, bv) = (tape.param(store, self.wv), tape.param(store, self.bv));
        let q = tape.matmul(h1, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(h1, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(h1, wv)?;
        let v = tape.add_row(v, bv)?;

        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_tb(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.masked_softmax(scores, mask.clone())?;
            heads.push(tape.matmul(p, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let (wo, bo) = (tape.param(store, self.wo), tape.param(store, self.bo));
        let o = tape.matmul(cat, wo)?;
        let o = tape.add_row(o, bo)?;
        let x2 = tape.add(x, o)?;

        let g2 = tape.param(store, self.ln2_g);
        let b2 = tape.param(store, self.ln2_b);
        let h2 = tape.layer_norm(x2, g2, b2)?;
        let (w1, b1f) = (tape.param(store, self.w1), tape.param(store, self.b1));
        let (w2, b2f) = (tape.param(store, self.w2), tape.param(store, self.b2));
        let f = tape.matmul(h2, w1)?;
        let f = tape.add_row(f, b1f)?;
        let f = tape.tanh(f)?;
        let f2 = tape.matmul(f, w2)?;
        let f2 = tape.add_row(f2, b2f)?;
        tape.add(x2, f2)
    }
}

// ── plain-f64 helpers ───────────────────────────────────────────────

fn linear_rows(x: &[f64], rows: usize, d_in: usize, w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let mut out = matmul_raw(x, w, rows, d_in, d_out);
    if let Some(b) = b {
        for i in 0..rows {
            for j in 0..d_out {
                out[i * d_out + j] += b[j];
            }
        }
    }
    out
}

fn layer_norm_rows(x: &[f64], rows: usize, n: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + 1e-6).sqrt();
        for j in 0..n {
            out[i * n + j] = g[j] * (row[j] - mean) * inv_std + b[j];
        }
    }
    out
}

/// Per-layer cached keys and values for committed positions.
#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Cached attention state of committed positions for one conditioner.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub len: usize,
    d_model: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, d_model: usize) -> Self {
        KvCache { layers: vec![LayerKv::default(); n_layers], len: 0, d_model }
    }

    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.len);
        for l in &mut self.layers {
            l.k.truncate(len * self.d_model);
            l.v.truncate(len * self.d_model);
        }
        self.len = len;
    }
}

/// A conditioner network: token embedding + positional embedding +
/// condition injection, a stack of attention layers, and a linear head.
#[derive(Debug, Clone)]
pub struct Conditioner {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub pos_emb: ParamId,
    pub cond_w: ParamId,
    pub layers: Vec<AttentionLayer>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d_in: usize,
    pub d_model: usize,
    pub d_out: usize,
    pub d_cond: usize,
    pub max_pos: usize,
    /// One mask per layer.
    pub masks: Vec<MaskKind>,
}

impl Conditioner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_model: usize,
        d_out: usize,
        d_cond: usize,
        n_heads: usize,
        max_pos: usize,
        masks: Vec<MaskKind>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let layers = (0..masks.len())
            .map(|i| AttentionLayer::new(store, &format!("{prefix}.layer{i}"), d_model, n_heads, rng))
            .collect();
        Conditioner {
            in_w: store.alloc_normal(p("in_w"), vec![d_in, d_model], INIT_STD, rng),
            in_b: store.alloc_zeros(p("in_b"), vec![d_model]),
            pos_emb: store.alloc_normal(p("pos_emb"), vec![max_pos, d_model], INIT_STD, rng),
            cond_w: store.alloc_normal(p("cond_w"), vec![d_cond, d_model], INIT_STD, rng),
            layers,
            lnf_g: store.alloc_ones(p("lnf_g"), vec![d_model]),
            lnf_b: store.alloc_zeros(p("lnf_b"), vec![d_model]),
            // zero-initialized head: the enclosing block starts as identity
            out_w: store.alloc_zeros(p("out_w"), vec![d_model, d_out]),
            out_b: store.alloc_zeros(p("out_b"), vec![d_out]),
            d_in,
            d_model,
            d_out,
            d_cond,
            max_pos,
            masks,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn embed_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: VarId,
        cond: VarId,
        abs_start: usize,
    ) -> Result<VarId> {
        let len = tape.value(tokens).rows();
        if abs_start + len > self.max_pos {
            return Err(Error::Domain {
                op: "conditioner",
                detail: format!(
                    "positions [{abs_start}, {}) exceed max_pos {}",
                    abs_start + len,
                    self.max_pos
                ),
            });
        }
        let in_w = tape.param(store, self.in_w);
        let in_b = tape.param(store, self.in_b);
        let x = tape.matmul(tokens, in_w)?;
        let x = tape.add_row(x, in_b)?;
        let pos = tape.param(store, self.pos_emb);
        let idx: Vec<usize> = (abs_start..abs_start + len).collect();
        let pos_rows = tape.gather_rows(pos, Rc::new(idx))?;
        let x = tape.add(x, pos_rows)?;
        let cond_w = tape.param(store, self.cond_w);
        let crow = tape.matmul(cond, cond_w)?; // [1, d_model]
        tape.add_row(x, crow)
    }

    /// Full-sequence teacher-forced forward on the tape.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: VarId,
        cond: VarId,
    ) -> Result<VarId> {
        let len = tape.value(tokens).rows();
        let mut x = self.embed_tape(tape, store, tokens, cond, 0)?;
        for (layer, kind) in self.layers.iter().zip(&self.masks) {
            let mask = kind.materialize(len);
            x = layer.forward_tape(tape, store, x, mask)?;
        }
        let g = tape.param(store, self.lnf_g);
        let b = tape.param(store, self.lnf_b);
        let h = tape.layer_norm(x, g, b)?;
        let ow = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let y = tape.matmul(h, ow)?;
        tape.add_row(y, ob)
    }

    /// Full-sequence forward without gradient tracking; supports every mask.
    pub fn nograd_full(&self, store: &ParamStore, tokens: &[f64], len: usize, cond: &[f64]) -> Result<Vec<f64>> {
        if len > self.max_pos {
            return Err(Error::Domain {
                op: "conditioner",
                detail: format!("sequence length {len} exceeds max_pos {}", self.max_pos),
            });
        }
        let dm = self.d_model;
        let mut x = self.embed_plain(store, tokens, len, 0, cond);
        for (layer, kind) in self.layers.iter().zip(&self.masks) {
            x = self.layer_plain(store, layer, &x, len, |q, k| kind.allows(q, k));
        }
        self.head_plain(store, &x, len, dm)
    }

    /// Evaluate conditioner positions [cache.len, cache.len + m) given the
    /// cache. Attention is causal within the range; only valid when every
    /// layer mask is causal. With `commit` the new keys/values are appended.
    pub fn nograd_range(
        &self,
        store: &ParamStore,
        cache: &mut KvCache,
        tokens: &[f64],
        m: usize,
        cond: &[f64],
        commit: bool,
    ) -> Result<Vec<f64>> {
        debug_assert!(self.masks.iter().all(|k| *k == MaskKind::Causal));
        if cache.layers.len() != self.n_layers() {
            return Err(Error::CacheMismatch { expected: self.n_layers(), found: cache.layers.len() });
        }
        let start = cache.len;
        if start + m > self.max_pos {
            return Err(Error::Domain {
                op: "conditioner",
                detail: format!("positions [{start}, {}) exceed max_pos {}", start + m, self.max_pos),
            });
        }
        let dm = self.d_model;
        let mut x = self.embed_plain(store, tokens, m, start, cond);
        let mut new_kv: Vec<LayerKv> = Vec::with_capacity(self.n_layers());
        for (li, layer) in self.layers.iter().enumerate() {
            let (out, kv) = self.layer_plain_cached(store, layer, &x, m, &cache.layers[li]);
            new_kv.push(kv);
            x = out;
        }
        if commit {
            for (li, kv) in new_kv.into_iter().enumerate() {
                cache.layers[li].k.extend_from_slice(&kv.k);
                cache.layers[li].v.extend_from_slice(&kv.v);
            }
            cache.len += m;
        }
        self.head_plain(store, &x, m, dm)
    }

    fn embed_plain(&self, store: &ParamStore, tokens: &[f64], rows: usize, abs_start: usize, cond: &[f64]) -> Vec<f64> {
        let dm = self.d_model;
        let mut x = linear_rows(tokens, rows, self.d_in, store.values(self.in_w), Some(store.values(self.in_b)), dm);
        let pos = store.values(self.pos_emb);
        for i in 0..rows {
            for j in 0..dm {
                x[i * dm + j] += pos[(abs_start + i) * dm + j];
            }
        }
        let crow = linear_rows(cond, 1, self.d_cond, store.values(self.cond_w), None, dm);
        for i in 0..rows {
            for j in 0..dm {
                x[i * dm + j] += crow[j];
            }
        }
        x
    }

    fn head_plain(&self, store: &ParamStore, x: &[f64], rows: usize, dm: usize) -> Result<Vec<f64>> {
        let h = layer_norm_rows(x, rows, dm, store.values(self.lnf_g), store.values(self.lnf_b));
        let out = linear_rows(&h, rows, dm, store.values(self.out_w), Some(store.values(self.out_b)), self.d_out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite { op: "conditioner" })
        }
    }

    /// One pre-norm block, arbitrary mask over in-range positions only.
    fn layer_plain(
        &self,
        store: &ParamStore,
        layer: &AttentionLayer,
        x: &[f64],
        rows: usize,
        allows: impl Fn(usize, usize) -> bool,
    ) -> Vec<f64> {
        let dm = self.d_model;
        let nh = layer.n_heads;
        let dh = dm / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let h1 = layer_norm_rows(x, rows, dm, store.values(layer.ln1_g), store.values(layer.ln1_b));
        let q = linear_rows(&h1, rows, dm, store.values(layer.wq), Some(store.values(layer.bq)), dm);
        let k = linear_rows(&h1, rows, dm, store.values(layer.wk), Some(store.values(layer.bk)), dm);
        let v = linear_rows(&h1, rows, dm, store.values(layer.wv), Some(store.values(layer.bv)), dm);
        let mut att = vec![0.0; rows * dm];
        let mut scores = vec![0.0; rows];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..rows {
                let qrow = &q[i * dm + off..i * dm + off + dh];
                let mut hi = f64::NEG_INFINITY;
                for j in 0..rows {
                    if allows(i, j) {
                        let krow = &k[j * dm + off..j * dm + off + dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        if s > hi {
                            hi = s;
                        }
                    }
                }
                let mut z = 0.0;
                for j in 0..rows {
                    if allows(i, j) {
                        scores[j] = (scores[j] - hi).exp();
                        z += scores[j];
                    }
                }
                for j in 0..rows {
                    if allows(i, j) {
                        let p = scores[j] / z;
                        let vrow = &v[j * dm + off..j * dm + off + dh];
                        for d in 0..dh {
                            att[i * dm + off + d] += p * vrow[d];
                        }
                    }
                }
            }
        }
        self.finish_layer(store, layer, x, rows, &att)
    }

    /// One pre-norm block with cached context; causal within the range.
    fn layer_plain_cached(
        &self,
        store: &ParamStore,
        layer: &AttentionLayer,
        x: &[f64],
        rows: usize,
        cached: &LayerKv,
    ) -> (Vec<f64>, LayerKv) {
        let dm = self.d_model;
        let nh = layer.n_heads;
        let dh = dm / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let clen = cached.k.len() / dm.max(1);
        let h1 = layer_norm_rows(x, rows, dm, store.values(layer.ln1_g), store.values(layer.ln1_b));
        let q = linear_rows(&h1, rows, dm, store.values(layer.wq), Some(store.values(layer.bq)), dm);
        let k = linear_rows(&h1, rows, dm, store.values(layer.wk), Some(store.values(layer.bk)), dm);
        let v = linear_rows(&h1, rows, dm, store.values(layer.wv), Some(store.values(layer.bv)), dm);
        let mut att = vec![0.0; rows * dm];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..rows {
                let total = clen + i + 1; // cached context plus in-range causal prefix
                let qrow = &q[i * dm + off..i * dm + off + dh];
                let mut s = vec![0.0; total];
                let mut hi = f64::NEG_INFINITY;
                for j in 0..total {
                    let krow = if j < clen {
                        &cached.k[j * dm + off..j * dm + off + dh]
                    } else {
                        let jj = j - clen;
                        &k[jj * dm + off..jj * dm + off + dh]
                    };
                    let sc: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    s[j] = sc;
                    if sc > hi {
                        hi = sc;
                    }
                }
                let mut z = 0.0;
                for sj in s.iter_mut() {
                    *sj = (*sj - hi).exp();
                    z += *sj;
                }
                for (j, &sj) in s.iter().enumerate() {
                    let p = sj / z;
                    let vrow = if j < clen {
                        &cached.v[j * dm + off..j * dm + off + dh]
                    } else {
                        let jj = j - clen;
                        &v[jj * dm + off..jj * dm + off + dh]
                    };
                    for d in 0..dh {
                        att[i * dm + off + d] += p * vrow[d];
                    }
                }
            }
        }
        let out = self.finish_layer(store, layer, x, rows, &att);
        (out, LayerKv { k, v })
    }

    fn finish_layer(
        &self,
        store: &ParamStore,
        layer: &AttentionLayer,
        x: &[f64],
        rows: usize,
        att: &[f64],
    ) -> Vec<f64> {
        let dm = self.d_model;
        let o = linear_rows(att, rows, dm, store.values(layer.wo), Some(store.values(layer.bo)), dm);
        let mut x2 = x.to_vec();
        for (a, b) in x2.iter_mut().zip(&o) {
            *a += b;
        }
        let h2 = layer_norm_rows(&x2, rows, dm, store.values(layer.ln2_g), store.values(layer.ln2_b));
        let d_ff = 4 * dm;
        let mut f = linear_rows(&h2, rows, dm, store.values(layer.w1), Some(store.values(layer.b1)), d_ff);
        for vv in f.iter_mut() {
            *vv = vv.tanh();
        }
        let f2 = linear_rows(&f, rows, d_ff, store.values(layer.w2), Some(store.values(layer.b2)), dm);
        for (a, b) in x2.iter_mut().zip(&f2) {
            *a += b;
        }
        x2
    }
}

/// Standalone tape entry point for a single attention block, matching the
/// contract that output at position i depends only on mask-permitted inputs.
pub fn attention_block_tape(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AttentionLayer,
    x: VarId,
    mask: MaskKind,
) -> Result<VarId> {
    let len = tape.value(x).rows();
    layer.forward_tape(tape, store, x, mask.materialize(len))
}

/// Leaf constructor convenience for tests and callers.
pub fn tensor_leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<VarId> {
    let mut t = Tensor::from_rows(rows, cols, data)?;
    t.requires_grad = requires_grad;
    Ok(tape.leaf(t))
}
