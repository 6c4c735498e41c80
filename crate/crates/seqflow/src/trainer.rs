//! Joint maximum-likelihood training of the flow and its denoiser.
//!
//! Each step noise-augments a batch, runs the exact NLL backward pass, and
//! reuses the input gradient from that same pass as the denoiser's
//! regression target (detached). Optimization is AdamW with a cosine
//! learning-rate schedule and global-norm gradient skipping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserNet;
use crate::error::{Error, Result};
use crate::model::{Condition, GlobalLocalFlow, ModelGeometry, TokenSequence};
use crate::numerics::{standard_normal, ParamStore, Tape};

const CKPT_MAGIC: &[u8; 4] = b"SFLW";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Skip the update when the global gradient norm exceeds this...
    pub grad_skip_threshold: f64,
    /// ...but only after this many steps have run.
    pub grad_skip_warmup: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Noise level used for augmentation during training.
    pub sigma: f64,
    /// Weight on the denoiser loss.
    pub lambda_denoiser: f64,
    /// Probability of replacing the class condition with the null token.
    pub cond_dropout: f64,
    /// Probability of dropping the first frame of a training sequence.
    pub first_frame_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_skip_threshold: 1.0,
            grad_skip_warmup: 100,
            total_steps: 500,
            batch_size: 16,
            sigma: 0.1,
            lambda_denoiser: 1.0,
            cond_dropout: 0.1,
            first_frame_dropout: 0.1,
        }
    }
}

/// Scalars produced by one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub nll_per_token: f64,
    pub fsm_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub skipped: bool,
}

pub struct Trainer {
    pub model: GlobalLocalFlow,
    pub denoiser: DenoiserNet,
    pub store: ParamStore,
    pub cfg: TrainConfig,
    pub step: u64,
    pub skipped_steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    rng_seed: u64,
}

fn build_nets(
    geometry: &ModelGeometry,
    seed: u64,
) -> (ParamStore, GlobalLocalFlow, DenoiserNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GlobalLocalFlow::new(&mut store, geometry.clone(), &mut rng);
    let denoiser = DenoiserNet::new(
        &mut store,
        geometry.channels,
        geometry.frame_size,
        geometry.denoiser_width,
        geometry.denoiser_heads,
        geometry.denoiser_layers,
        geometry.d_cond,
        geometry.n_frames * geometry.frame_size,
        &mut rng,
    );
    (store, model, denoiser)
}

impl Trainer {
    pub fn new(geometry: ModelGeometry, cfg: TrainConfig, seed: u64) -> Self {
        let (store, model, denoiser) = build_nets(&geometry, seed);
        let m = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        // offset keeps the training stream independent of the init stream
        let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
        Trainer {
            model,
            denoiser,
            store,
            cfg,
            step: 0,
            skipped_steps: 0,
            m,
            v,
            rng,
            rng_seed: seed,
        }
    }

    /// Cosine schedule from lr down to min_lr over total_steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = (step as f64 / self.cfg.total_steps.max(1) as f64).min(1.0);
        self.cfg.min_lr
            + 0.5 * (self.cfg.lr - self.cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn train_step(&mut self, batch: &[(TokenSequence, usize)]) -> Result<StepStats> {
        self.train_step_scaled(batch, 1.0)
    }

    /// Test hook: multiply the accumulated gradient by `grad_scale` before
    /// the norm check, simulating a loss spike.
    pub fn train_step_scaled(
        &mut self,
        batch: &[(TokenSequence, usize)],
        grad_scale: f64,
    ) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let sigma = self.cfg.sigma;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> =
            self.store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let mut nll_sum = 0.0;
        let mut fsm_sum = 0.0;
        let mut finite = true;

        for (clean, class) in batch {
            let cond = if self.rng.gen::<f64>() < self.cfg.cond_dropout {
                Condition::Null
            } else {
                Condition::Class(*class)
            };
            let drop_first = clean.layout.n_frames > 1
                && self.rng.gen::<f64>() < self.cfg.first_frame_dropout;
            let seq = if drop_first { clean.drop_first_frame()? } else { clean.clone() };
            let noisy: Vec<f64> =
                seq.data.iter().map(|&x| x + sigma * standard_normal(&mut self.rng)).collect();
            let x_tilde = TokenSequence::new(seq.layout, noisy)?;
            let numel = seq.layout.numel() as f64;

            // exact NLL pass; its input gradient doubles as the denoiser target
            let mut tape = Tape::new();
            let x = GlobalLocalFlow::sequence_leaf(&mut tape, &x_tilde, true)?;
            let target;
            match self.model.nll_tape(&mut tape, &self.store, x, x_tilde.layout, cond) {
                Ok((nll, _)) => {
                    let loss = tape.scale(nll, 1.0 / numel)?;
                    nll_sum += tape.value(loss).data[0] * inv_b;
                    if tape.backward(loss).is_err() {
                        finite = false;
                        continue;
                    }
                    for (pid, g) in tape.param_grads() {
                        let acc = &mut grads[pid.0];
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv * inv_b;
                        }
                    }
                    // sigma * grad log p of the unnormalized NLL, detached
                    let gx = tape
                        .grad(x)
                        .ok_or_else(|| Error::Backward("missing input gradient".into()))?;
                    target = gx.iter().map(|&g| -sigma * numel * g).collect::<Vec<f64>>();
                }
                Err(Error::NonFinite { .. }) => {
                    finite = false;
                    continue;
                }
                Err(e) => return Err(e),
            }

            // denoiser regression on its own tape
            let mut dtape = Tape::new();
            let cvar = self.model.cond_var(&mut dtape, &self.store, cond)?;
            match self.denoiser.fsm_loss_tape(&mut dtape, &self.store, &x_tilde, &target, cvar) {
                Ok(dl) => {
                    fsm_sum += dtape.value(dl).data[0] * inv_b;
                    if dtape.backward(dl).is_err() {
                        finite = false;
                        continue;
                    }
                    let w = self.cfg.lambda_denoiser * inv_b;
                    for (pid, g) in dtape.param_grads() {
                        let acc = &mut grads[pid.0];
                        for (a, &gv) in acc.iter_mut().zip(g) {
                            *a += gv * w;
                        }
                    }
                }
                Err(Error::NonFinite { .. }) => finite = false,
                Err(e) => return Err(e),
            }
        }

        if grad_scale != 1.0 {
            for g in &mut grads {
                for gv in g.iter_mut() {
                    *gv *= grad_scale;
                }
            }
        }
        let mut sq = 0.0;
        for g in &grads {
            for &gv in g {
                sq += gv * gv;
            }
        }
        let grad_norm = sq.sqrt();
        finite &= grad_norm.is_finite();

        let lr = self.lr_at(self.step);
        let skip = !finite
            || (self.step >= self.cfg.grad_skip_warmup && grad_norm > self.cfg.grad_skip_threshold);
        if skip {
            self.skipped_steps += 1;
        } else {
            self.adamw_update(&grads, lr);
        }
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            nll_per_token: nll_sum,
            fsm_loss: fsm_sum,
            grad_norm,
            lr,
            skipped: skip,
        })
    }

    fn adamw_update(&mut self, grads: &[Vec<f64>], lr: f64) {
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let entry = self.store.get_mut(crate::numerics::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let p = &mut entry.data[j];
                *p -= lr * wd * *p; // decoupled weight decay
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Mean per-token NLL over noise-augmented samples with a fixed seed,
    /// so successive evaluations are comparable.
    pub fn eval_nll(&self, samples: &[(TokenSequence, usize)], eval_seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let mut total = 0.0;
        let mut tokens = 0.0;
        for (clean, class) in samples {
            let noisy: Vec<f64> = clean
                .data
                .iter()
                .map(|&x| x + self.cfg.sigma * standard_normal(&mut rng))
                .collect();
            let x = TokenSequence::new(clean.layout, noisy)?;
            let (ll, _) = self.model.log_likelihood(&self.store, &x, Condition::Class(*class))?;
            total -= ll;
            tokens += clean.layout.numel() as f64;
        }
        Ok(total / tokens)
    }

    // ── checkpointing ────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            geometry: self.model.geometry.clone(),
            config: self.cfg.clone(),
            step: self.step,
            skipped_steps: self.skipped_steps,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            params: self
                .store
                .iter()
                .map(|(_, e)| CkptParam { name: e.name.clone(), shape: e.shape.clone() })
                .collect(),
        };
        let hbytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(hbytes.len() as u32).to_le_bytes())?;
        w.write_all(&hbytes)?;
        for (i, (_, e)) in self.store.iter().enumerate() {
            write_f32s(&mut w, &e.data)?;
            write_f32s(&mut w, &self.m[i])?;
            write_f32s(&mut w, &self.v[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        ck_read(&mut r, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        ck_read(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        ck_read(&mut r, &mut b4)?;
        let hlen = u32::from_le_bytes(b4) as usize;
        let mut hbytes = vec![0u8; hlen];
        ck_read(&mut r, &mut hbytes)?;
        let header: CkptHeader =
            serde_json::from_slice(&hbytes).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let (mut store, model, denoiser) = build_nets(&header.geometry, header.rng_seed);
        if store.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "geometry mismatch: expected {} parameter tensors, checkpoint has {}",
                store.len(),
                header.params.len()
            )));
        }
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            let entry = store.get_mut(crate::numerics::ParamId(i));
            let spec = &header.params[i];
            if spec.name != entry.name || spec.shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at index {i}: expected {} {:?}, found {} {:?}",
                    entry.name, entry.shape, spec.name, spec.shape
                )));
            }
            entry.data = read_f32s(&mut r, entry.data.len())?;
            m.push(read_f32s(&mut r, entry.data.len())?);
            v.push(read_f32s(&mut r, entry.data.len())?);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
        }
        let word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(header.rng_seed.wrapping_add(0x5EED));
        rng.set_word_pos(word_pos);
        Ok(Trainer {
            model,
            denoiser,
            store,
            cfg: header.config,
            step: header.step,
            skipped_steps: header.skipped_steps,
            m,
            v,
            rng,
            rng_seed: header.rng_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    geometry: ModelGeometry,
    config: TrainConfig,
    step: u64,
    skipped_steps: u64,
    rng_seed: u64,
    rng_word_pos: String,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

fn write_f32s(w: &mut impl IoWrite, data: &[f64]) -> Result<()> {
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl IoRead, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    ck_read(r, &mut buf)?;
    let out: Vec<f64> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Checkpoint("non-finite value in checkpoint".into()))
    }
}

fn ck_read(r: &mut impl IoRead, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

/// Deterministic train/held-out index split by seeded shuffle.
pub fn split_holdout(count: usize, holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_hold = ((count as f64 * holdout_frac).round() as usize).clamp(1, count.saturating_sub(1).max(1));
    let holdout = idx[..n_hold].to_vec();
    let train = idx[n_hold..].to_vec();
    (train, holdout)
}

/// Batch indices for a given step: a deterministic function of the step so
/// training resumes exactly from a checkpoint.
pub fn batch_indices(train: &[usize], step: u64, batch_size: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|j| train[(step as usize * batch_size + j) % train.len().max(1)])
        .collect()
}
