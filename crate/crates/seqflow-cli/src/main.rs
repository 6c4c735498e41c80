//! Command-line front end: dataset generation, training, sampling,
//! streaming, likelihood reports, latent encoding, the Jacobi benchmark,
//! and the denoiser ablation. Every command is deterministic given its
//! seed and writes a reproducibility manifest next to its output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use seqflow::config::RunConfig;
use seqflow::data::Dataset;
use seqflow::denoiser::{score_denoise_raw, tweedie_correct};
use seqflow::flow::FrameLayout;
use seqflow::jacobi::{bench_sweep, WarmStart};
use seqflow::model::{Condition, TokenSequence};
use seqflow::sampler::sample_sequential;
use seqflow::streaming::stream_generate;
use seqflow::trainer::{batch_indices, split_holdout, Trainer};

#[derive(Parser)]
#[command(name = "seqflow", about = "Autoregressive flow over frame sequences", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (wins over the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the flow and denoiser, writing a checkpoint, a loss log, and
    /// a reproducibility manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Step-count override.
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample sequences from a checkpoint into a dataset file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Also render channel 0 of each frame as PGM files here.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Stream frames through a sliding window into a dataset file.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a dataset into intermediate and final latents (u and z),
    /// for prefix-conditioning workflows.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for u.sfdv and z.sfdv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample and per-frame log-likelihood report (CSV).
    Loglik {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Jacobi inversion sweep over block sizes and warm starts (CSV).
    BenchJacobi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare denoising strategies on held-out data (CSV).
    DenoiseAblate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Samples to evaluate.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    let ds = match data {
        Some(p) => Dataset::read_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => Dataset::generate(&cfg.data_spec()),
    };
    let expect = cfg.model.layout();
    if ds.layout != expect {
        bail!(
            "dataset geometry {:?} does not match model geometry {:?}",
            ds.layout,
            expect
        );
    }
    Ok(ds)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Reproducibility manifest written as `<out>.manifest.json`. The output
/// hash is omitted for artifacts that contain wall-clock measurements.
fn write_manifest(
    command: &str,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    hash_output: bool,
) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    let manifest = serde_json::json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_toml()?,
        "checkpoint_sha256": match checkpoint {
            Some(p) => Some(sha256_file(p)?),
            None => None,
        },
        "output_sha256": if hash_output { Some(sha256_file(out)?) } else { None },
    });
    fs::write(out.with_file_name(name), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::generate(&cfg.data_spec());
            ds.write_file(&out)?;
            write_manifest("gen-data", &cfg, None, &out, true)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { common, data, out, steps, resume } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            train(&cfg, data, &out, resume)?;
        }
        Command::Sample { common, checkpoint, out, count, pgm } => {
            let cfg = load_config(&common)?;
            sample(&cfg, &checkpoint, &out, count, pgm)?;
        }
        Command::Stream { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            stream(&cfg, &checkpoint, &out)?;
        }
        Command::Encode { common, checkpoint, data, out } => {
            let cfg = load_config(&common)?;
            encode(&cfg, &checkpoint, &data, &out)?;
        }
        Command::Loglik { common, checkpoint, data, out } => {
            let cfg = load_config(&common)?;
            loglik(&cfg, &checkpoint, &data, &out)?;
        }
        Command::BenchJacobi { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            bench_jacobi(&cfg, &checkpoint, &out)?;
        }
        Command::DenoiseAblate { common, checkpoint, data, out, count } => {
            let cfg = load_config(&common)?;
            denoise_ablate(&cfg, &checkpoint, data, &out, count)?;
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, data: Option<PathBuf>, out: &Path, resume: Option<PathBuf>) -> Result<()> {
    fs::create_dir_all(out)?;
    let dataset = load_dataset(cfg, &data)?;
    let (train_idx, hold_idx) = split_holdout(dataset.len(), cfg.data.holdout_frac, cfg.seed ^ 0xD5);

    let mut trainer = match &resume {
        Some(p) => {
            let t = Trainer::load(p).with_context(|| format!("loading {}", p.display()))?;
            if t.model.geometry != cfg.model {
                bail!("checkpoint geometry does not match the configured model");
            }
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.seed),
    };
    let total = cfg.train.total_steps;
    if trainer.step >= total {
        bail!("checkpoint is already at step {} of {total}", trainer.step);
    }

    let mut log = String::from("step,nll,fsm,lr,skipped\n");
    while trainer.step < total {
        let idx = batch_indices(&train_idx, trainer.step, cfg.train.batch_size);
        let batch: Vec<(TokenSequence, usize)> = idx
            .iter()
            .map(|&i| {
                let (seq, class) = dataset.get(i)?;
                Ok((seq, class.class_id()))
            })
            .collect::<Result<_, seqflow::Error>>()?;
        let stats = trainer.train_step(&batch)?;
        log.push_str(&format!(
            "{},{:.6},{:.6},{:.3e},{}\n",
            stats.step,
            stats.nll_per_token,
            stats.fsm_loss,
            stats.lr,
            stats.skipped as u8
        ));
        if stats.step % 50 == 0 || stats.step == total {
            println!(
                "step {}/{total} nll {:.4} fsm {:.5} lr {:.2e}{}",
                stats.step,
                stats.nll_per_token,
                stats.fsm_loss,
                stats.lr,
                if stats.skipped { " [skipped]" } else { "" }
            );
        }
    }

    let holdout: Vec<(TokenSequence, usize)> = hold_idx
        .iter()
        .map(|&i| {
            let (seq, class) = dataset.get(i)?;
            Ok((seq, class.class_id()))
        })
        .collect::<Result<_, seqflow::Error>>()?;
    let eval = trainer.eval_nll(&holdout, cfg.seed ^ 0xE7A1)?;
    println!("held-out nll per token: {eval:.4}");

    let ckpt = out.join("checkpoint.sflw");
    trainer.save(&ckpt)?;
    fs::write(out.join("loss_log.csv"), log)?;

    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "steps": trainer.step,
        "skipped_steps": trainer.skipped_steps,
        "holdout_nll_per_token": eval,
        "config": cfg.to_toml()?,
        "checkpoint_sha256": sha256_file(&ckpt)?,
        "dataset_samples": dataset.len(),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    count: usize,
    pgm: Option<PathBuf>,
) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let g = trainer.model.geometry.clone();
    let frames = if cfg.sample.frames == 0 { g.n_frames } else { cfg.sample.frames };
    let opts = cfg.sample.opts();
    let cond = cfg.sample.condition();
    if let Condition::Class(c) = cond {
        if c >= g.n_classes {
            bail!("class {c} out of range");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames_out = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let x = sample_sequential(
            &trainer.model,
            Some(&trainer.denoiser),
            &trainer.store,
            frames,
            cond,
            &opts,
            &mut rng,
        )?;
        frames_out.push(x.data);
        labels.push(match cond {
            Condition::Class(c) => c as u8,
            Condition::Null => 0,
        });
    }
    let layout = FrameLayout::new(frames, g.frame_size, g.channels);
    let ds = Dataset { layout, seed: cfg.seed, labels, frames: frames_out };
    ds.write_file(out)?;
    write_manifest("sample", cfg, Some(checkpoint), out, true)?;
    if let Some(dir) = pgm {
        write_pgms(&ds, &dir)?;
    }
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn stream(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let g = trainer.model.geometry.clone();
    let opts = cfg.sample.opts();
    let cond = cfg.sample.condition();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Vec::new();
    let mut latency = String::from("frame,ms\n");
    let mut last = std::time::Instant::now();
    stream_generate(
        &trainer.model,
        Some(&trainer.denoiser),
        &trainer.store,
        cfg.stream.frames,
        cfg.stream.window,
        cond,
        &opts,
        &mut rng,
        &mut |t, x| {
            data.extend_from_slice(x);
            latency.push_str(&format!("{t},{:.3}\n", last.elapsed().as_secs_f64() * 1e3));
            last = std::time::Instant::now();
            Ok(())
        },
    )?;
    let layout = FrameLayout::new(cfg.stream.frames, g.frame_size, g.channels);
    let ds = Dataset {
        layout,
        seed: cfg.seed,
        labels: vec![match cond {
            Condition::Class(c) => c as u8,
            Condition::Null => 0,
        }],
        frames: vec![data],
    };
    ds.write_file(out)?;
    fs::write(out.with_extension("latency.csv"), latency)?;
    write_manifest("stream", cfg, Some(checkpoint), out, true)?;
    println!(
        "streamed {} frames (window {}) to {}",
        cfg.stream.frames,
        cfg.stream.window,
        out.display()
    );
    Ok(())
}

fn encode(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let dataset = load_dataset(cfg, &Some(data.to_path_buf()))?;
    fs::create_dir_all(out)?;
    let mut u_frames = Vec::with_capacity(dataset.len());
    let mut z_frames = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let (seq, class) = dataset.get(i)?;
        let (u, z, _, _) =
            trainer.model.encode(&trainer.store, &seq, Condition::Class(class.class_id()))?;
        u_frames.push(u.data);
        z_frames.push(z.data);
    }
    for (name, frames) in [("u.sfdv", u_frames), ("z.sfdv", z_frames)] {
        let path = out.join(name);
        let ds = Dataset {
            layout: dataset.layout,
            seed: dataset.seed,
            labels: dataset.labels.clone(),
            frames,
        };
        ds.write_file(&path)?;
        write_manifest("encode", cfg, Some(checkpoint), &path, true)?;
    }
    println!("encoded {} samples into {}", dataset.len(), out.display());
    Ok(())
}

fn loglik(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let dataset = load_dataset(cfg, &Some(data.to_path_buf()))?;
    let n = dataset.layout.n_frames;
    let mut csv = String::from("sample,class,total");
    for f in 0..n {
        csv.push_str(&format!(",frame{f}"));
    }
    csv.push('\n');
    for i in 0..dataset.len() {
        let (seq, class) = dataset.get(i)?;
        let (total, per_frame) =
            trainer
                .model
                .log_likelihood(&trainer.store, &seq, Condition::Class(class.class_id()))?;
        csv.push_str(&format!("{i},{},{total:.6}", class.class_id()));
        for v in per_frame {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    fs::write(out, csv)?;
    write_manifest("loglik", cfg, Some(checkpoint), out, true)?;
    println!("wrote log-likelihoods for {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn bench_jacobi(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let g = trainer.model.geometry.clone();
    let layout = g.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = TokenSequence::new(layout, seqflow::sampler::draw_latents(layout, 1.0, &mut rng))?;
    let s = g.frame_size;
    let sizes: Vec<usize> = [s / 2, s, 2 * s, 4 * s, layout.len()]
        .into_iter()
        .filter(|&b| b >= 1 && b <= layout.len())
        .collect();
    let rows = bench_sweep(
        &trainer.model,
        &trainer.store,
        &z,
        cfg.sample.condition(),
        &sizes,
        cfg.jacobi.tau,
    )?;
    let mut csv = String::from("block_size,warm_start,frame_index,iters,passes,ms\n");
    for r in rows {
        let ws = match r.warm_start {
            WarmStart::Zeros => "zeros",
            WarmStart::PrevFrame => "prev_frame",
        };
        csv.push_str(&format!(
            "{},{ws},{},{},{},{:.3}\n",
            r.block_size, r.frame_index, r.iters, r.passes, r.wall_ms
        ));
    }
    fs::write(out, csv)?;
    // the CSV carries wall-clock times, so its hash is not reproducible
    write_manifest("bench-jacobi", cfg, Some(checkpoint), out, false)?;
    println!("wrote jacobi sweep to {}", out.display());
    Ok(())
}

fn denoise_ablate(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<PathBuf>,
    out: &Path,
    count: usize,
) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let dataset = load_dataset(cfg, &data)?;
    let count = count.min(dataset.len());
    if count == 0 {
        bail!("no samples to evaluate");
    }
    let sigma = trainer.cfg.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xAB1A7E);
    let mut mse = [0.0f64; 3]; // no-denoise, raw-score, learned-fsm
    let mut total = 0.0;
    for i in 0..count {
        let (clean, noisy, class) = dataset.get_noisy(i, sigma, &mut rng)?;
        let cond = Condition::Class(class.class_id());
        let cvec = trainer.model.embed_condition(&trainer.store, cond);
        let raw = score_denoise_raw(&trainer.model, &trainer.store, &noisy, cond, sigma)?;
        let learned = tweedie_correct(&trainer.denoiser, &trainer.store, &noisy, &cvec, sigma)?;
        for (k, est) in [&noisy, &raw, &learned].into_iter().enumerate() {
            mse[k] += est
                .data
                .iter()
                .zip(&clean.data)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total += clean.layout.numel() as f64;
    }
    let mut csv = String::from("method,mse,psnr\n");
    for (name, sum) in ["no-denoise", "raw-score", "learned-fsm"].iter().zip(mse) {
        let m = sum / total;
        // data range [-3, 3] mapped to [0, 1]
        let psnr = 10.0 * (36.0 / m).log10();
        csv.push_str(&format!("{name},{m:.8},{psnr:.3}\n"));
    }
    fs::write(out, csv)?;
    write_manifest("denoise-ablate", cfg, Some(checkpoint), out, true)?;
    println!("wrote denoising ablation over {count} samples to {}", out.display());
    Ok(())
}

fn write_pgms(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let side = (ds.layout.frame_size as f64).sqrt().round() as usize;
    let d = ds.layout.channels;
    for (si, sample) in ds.frames.iter().enumerate() {
        for f in 0..ds.layout.n_frames {
            let mut body = format!("P5\n{side} {side}\n255\n").into_bytes();
            for p in 0..ds.layout.frame_size {
                let v = sample[(f * ds.layout.frame_size + p) * d];
                let px = (((v + 3.0) / 6.0).clamp(0.0, 1.0) * 255.0).round() as u8;
                body.push(px);
            }
            fs::write(dir.join(format!("s{si:03}_f{f:03}.pgm")), &body)?;
        }
    }
    Ok(())
}
