//! Synthetic video-like sequences and their on-disk container.
//!
//! Three motion classes over a square grid of channels: exact integer
//! circular translation, a bouncing blob, and a rotating phase pattern.
//! Clean values stay inside [-3, 3]; noise augmentation is the trainer's
//! job, but a seeded noisy view is provided for tests and ablations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FrameLayout;
use crate::model::TokenSequence;
use crate::numerics::standard_normal;

const MAGIC: &[u8; 4] = b"SFDV";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Translate,
    Bounce,
    RotatePhase,
}

pub const NUM_CLASSES: usize = 3;

impl MotionClass {
    pub fn to_u8(self) -> u8 {
        match self {
            MotionClass::Translate => 0,
            MotionClass::Bounce => 1,
            MotionClass::RotatePhase => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MotionClass::Translate),
            1 => Ok(MotionClass::Bounce),
            2 => Ok(MotionClass::RotatePhase),
            _ => Err(Error::Dataset(format!("unknown motion class {v}"))),
        }
    }

    pub fn class_id(self) -> usize {
        self.to_u8() as usize
    }
}

/// Generation recipe for a synthetic dataset.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticVideoSpec {
    pub n_frames: usize,
    pub frame_size: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl SyntheticVideoSpec {
    pub fn layout(&self) -> FrameLayout {
        FrameLayout::new(self.n_frames, self.frame_size, self.channels)
    }

    fn side(&self) -> usize {
        let side = (self.frame_size as f64).sqrt().round() as usize;
        assert_eq!(side * side, self.frame_size, "frame_size must be a perfect square");
        side
    }
}

/// An in-memory dataset: clean sequences plus their motion-class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub layout: FrameLayout,
    pub seed: u64,
    pub labels: Vec<u8>,
    pub frames: Vec<Vec<f64>>,
}

/// splitmix64 step; decorrelates per-sample streams from (seed, index).
fn mix(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x1234_5678_9ABC_DEF0);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dataset {
    pub fn generate(spec: &SyntheticVideoSpec) -> Dataset {
        let layout = spec.layout();
        let mut labels = Vec::with_capacity(spec.count);
        let mut frames = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, i as u64));
            let class = match i % NUM_CLASSES {
                0 => MotionClass::Translate,
                1 => MotionClass::Bounce,
                _ => MotionClass::RotatePhase,
            };
            let data = generate_sample(spec, class, &mut rng);
            debug_assert!(data.iter().all(|&v| (-3.0..=3.0).contains(&v)));
            labels.push(class.to_u8());
            frames.push(data);
        }
        Dataset { layout, seed: spec.seed, labels, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<(TokenSequence, MotionClass)> {
        let seq = TokenSequence::new(self.layout, self.frames[i].clone())?;
        Ok((seq, MotionClass::from_u8(self.labels[i])?))
    }

    /// Clean sample plus a seeded noisy view at the given noise level.
    pub fn get_noisy(
        &self,
        i: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TokenSequence, TokenSequence, MotionClass)> {
        let (clean, class) = self.get(i)?;
        let noisy: Vec<f64> = clean.data.iter().map(|&v| v + sigma * standard_normal(rng)).collect();
        let noisy = TokenSequence::new(self.layout, noisy)?;
        Ok((clean, noisy, class))
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [
            self.layout.n_frames as u32,
            self.layout.frame_size as u32,
            self.layout.channels as u32,
            self.frames.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.labels)?;
        for sample in &self.frames {
            for &v in sample {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Dataset("bad magic; not a dataset file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Dataset(format!("unsupported dataset version {version}")));
        }
        let n_frames = read_u32(&mut r)? as usize;
        let frame_size = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut seed_b = [0u8; 8];
        read_exact(&mut r, &mut seed_b)?;
        let seed = u64::from_le_bytes(seed_b);
        let layout = FrameLayout::new(n_frames, frame_size, channels);
        if layout.numel() == 0 || count == 0 {
            return Err(Error::Dataset("empty geometry or sample count".into()));
        }
        let mut labels = vec![0u8; count];
        read_exact(&mut r, &mut labels)?;
        for &l in &labels {
            MotionClass::from_u8(l)?;
        }
        let mut frames = Vec::with_capacity(count);
        let mut buf = vec![0u8; layout.numel() * 4];
        for _ in 0..count {
            read_exact(&mut r, &mut buf)?;
            let sample: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if !sample.iter().all(|v| v.is_finite()) {
                return Err(Error::Dataset("non-finite value in dataset".into()));
            }
            frames.push(sample);
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Dataset("trailing bytes after final sample".into()));
        }
        Ok(Dataset { layout, seed, labels, frames })
    }
}

fn read_exact(r: &mut impl IoRead, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Dataset(format!("truncated dataset file: {e}")))
}

fn read_u32(r: &mut impl IoRead) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn generate_sample(spec: &SyntheticVideoSpec, class: MotionClass, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match class {
        MotionClass::Translate => translate_sample(spec, rng),
        MotionClass::Bounce => bounce_sample(spec, rng),
        MotionClass::RotatePhase => rotate_phase_sample(spec, rng),
    }
}

/// Exact integer-velocity circular shift of a random base frame.
fn translate_sample(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.side();
    let d = spec.channels;
    let base: Vec<f64> = (0..spec.frame_size * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let mut vx: i64 = 0;
    let mut vy: i64 = 0;
    while vx == 0 && vy == 0 {
        vx = rng.gen_range(-2i64..=2);
        vy = rng.gen_range(-2i64..=2);
    }
    let mut out = Vec::with_capacity(spec.n_frames * spec.frame_size * d);
    for t in 0..spec.n_frames as i64 {
        for r in 0..side as i64 {
            for c in 0..side as i64 {
                let sr = (r - t * vy).rem_euclid(side as i64) as usize;
                let sc = (c - t * vx).rem_euclid(side as i64) as usize;
                let src = sr * side + sc;
                out.extend_from_slice(&base[src * d..(src + 1) * d]);
            }
        }
    }
    out
}

/// A Gaussian blob bouncing off the grid walls with per-channel amplitude.
fn bounce_sample(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.side() as i64;
    let d = spec.channels;
    let amp: Vec<f64> = (0..d).map(|_| rng.gen_range(0.8..2.0)).collect();
    let mut px = rng.gen_range(0..side);
    let mut py = rng.gen_range(0..side);
    let mut vx = if rng.gen::<bool>() { 1i64 } else { -1 };
    let mut vy = if rng.gen::<bool>() { 1i64 } else { -1 };
    let width = 1.2;
    let mut out = Vec::with_capacity(spec.n_frames * spec.frame_size * d);
    for _ in 0..spec.n_frames {
        for r in 0..side {
            for c in 0..side {
                let dist2 = ((r - py) * (r - py) + (c - px) * (c - px)) as f64;
                let g = (-dist2 / (2.0 * width * width)).exp();
                for ch in 0..d {
                    out.push(amp[ch] * g - 0.5);
                }
            }
        }
        px += vx;
        py += vy;
        if px <= 0 || px >= side - 1 {
            vx = -vx;
            px = px.clamp(0, side - 1);
        }
        if py <= 0 || py >= side - 1 {
            vy = -vy;
            py = py.clamp(0, side - 1);
        }
    }
    out
}

/// A spatial sinusoid whose phase advances by a fixed amount per frame.
fn rotate_phase_sample(spec: &SyntheticVideoSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = spec.side();
    let d = spec.channels;
    let tau = std::f64::consts::TAU;
    let phase0: f64 = rng.gen_range(0.0..tau);
    let omega: f64 = rng.gen_range(0.3..1.2);
    let amp: Vec<f64> = (0..d).map(|_| rng.gen_range(0.5..1.8)).collect();
    let kx: f64 = rng.gen_range(0.5..1.5);
    let ky: f64 = rng.gen_range(0.5..1.5);
    let mut out = Vec::with_capacity(spec.n_frames * spec.frame_size * d);
    for t in 0..spec.n_frames {
        let phase = phase0 + omega * t as f64;
        for r in 0..side {
            for c in 0..side {
                let s = (tau * (kx * c as f64 + ky * r as f64) / side as f64 + phase).sin();
                for ch in 0..d {
                    out.push(amp[ch] * s * (0.4 + 0.6 * (ch as f64 / d.max(1) as f64)));
                }
            }
        }
    }
    out
}
