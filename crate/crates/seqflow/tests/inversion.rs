//! Round-trip and parallel-inversion oracles: the sequential inverse is
//! the ground truth, and every other path (full encode, Jacobi, cached
//! prefix continuation) must agree with it.

mod common;

use common::{perturbed_model, small_geometry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqflow::flow::FrameLayout;
use seqflow::jacobi::{jacobi_invert_deep, JacobiPlan, WarmStart};
use seqflow::model::{Condition, GlobalLocalFlow, TokenSequence};
use seqflow::numerics::{max_abs_diff, standard_normal, Tape};
use seqflow::sampler::{prefix_encode, sample_continuation, sample_from_latents, SampleOpts};

fn randn(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| standard_normal(&mut rng)).collect()
}

#[test]
fn encode_decode_roundtrip() {
    let layout = FrameLayout::new(3, 4, 2);
    let (store, model) = perturbed_model(small_geometry(3, 4, 2), 7, 0.05);
    let x = TokenSequence::new(layout, randn(layout.numel(), 1)).unwrap();
    let (_, z, _, _) = model.encode(&store, &x, Condition::Class(0)).unwrap();
    let back = model.decode(&store, &z, Condition::Class(0)).unwrap();
    assert!(max_abs_diff(&back.data, &x.data) < 1e-5);

    // and the other direction: decode then encode
    let z0 = TokenSequence::new(layout, randn(layout.numel(), 2)).unwrap();
    let x1 = model.decode(&store, &z0, Condition::Class(2)).unwrap();
    let (_, z1, _, _) = model.encode(&store, &x1, Condition::Class(2)).unwrap();
    assert!(max_abs_diff(&z1.data, &z0.data) < 1e-5);
}

#[test]
fn tape_forward_matches_nograd_forward() {
    let layout = FrameLayout::new(2, 4, 2);
    let (store, model) = perturbed_model(small_geometry(2, 4, 2), 13, 0.05);
    let x = TokenSequence::new(layout, randn(layout.numel(), 3)).unwrap();
    let cond = Condition::Class(1);

    let mut tape = Tape::new();
    let xv = GlobalLocalFlow::sequence_leaf(&mut tape, &x, false).unwrap();
    let (nll_var, z_var) = model.nll_tape(&mut tape, &store, xv, layout, cond).unwrap();
    let z_tape = tape.value(z_var).data.clone();
    let nll_tape_val = tape.value(nll_var).data[0];

    let (_, z, _, _) = model.encode(&store, &x, cond).unwrap();
    assert!(max_abs_diff(&z_tape, &z.data) < 1e-10);
    let (ll, _) = model.log_likelihood(&store, &x, cond).unwrap();
    assert!((nll_tape_val + ll).abs() < 1e-8, "tape NLL {nll_tape_val} vs -ll {}", -ll);
}

#[test]
fn incremental_inverse_matches_prefix_continuation() {
    let layout = FrameLayout::new(4, 4, 2);
    let (store, model) = perturbed_model(small_geometry(4, 4, 2), 19, 0.05);
    let cond = Condition::Class(0);
    let opts = SampleOpts::default();
    let z = randn(layout.numel(), 4);

    // full generation in one pass
    let full = sample_from_latents(&model, &store, &z, layout, cond, &opts).unwrap();

    // teacher-force the first 2 generated frames, then continue from the cache
    let fl = layout.frame_size * layout.channels;
    let prefix = TokenSequence::new(
        FrameLayout::new(2, layout.frame_size, layout.channels),
        full.data[..2 * fl].to_vec(),
    )
    .unwrap();
    let (mut cache, _) = prefix_encode(&model, &store, &prefix, cond, false).unwrap();
    assert_eq!(cache.committed, 2 * layout.frame_size);
    let rest =
        sample_continuation(&model, &store, &mut cache, &z[2 * fl..], 2, cond, &opts).unwrap();
    assert!(max_abs_diff(&rest.data, &full.data[2 * fl..]) < 1e-5);
}

#[test]
fn jacobi_matches_sequential_at_both_tolerances() {
    let layout = FrameLayout::new(4, 4, 2);
    let (store, model) = perturbed_model(small_geometry(4, 4, 2), 29, 0.05);
    let cond = Condition::Class(1);
    let z = randn(layout.numel(), 5);
    let cvec = model.embed_condition(&store, cond);
    let seq = model.deep.inverse_sequential(&store, &z, layout, &cvec, None).unwrap();

    let loose = JacobiPlan { first_block_size: 8, tau: 1e-3, ..JacobiPlan::default() };
    let (u, trace) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &loose).unwrap();
    assert!(max_abs_diff(&u, &seq) < 1e-3, "loose tolerance diff {}", max_abs_diff(&u, &seq));
    assert!(trace.total_passes > 0);

    let tight = JacobiPlan { first_block_size: 8, tau: 1e-8, ..JacobiPlan::default() };
    let (u, _) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &tight).unwrap();
    assert!(max_abs_diff(&u, &seq) < 1e-6, "tight tolerance diff {}", max_abs_diff(&u, &seq));
}

#[test]
fn jacobi_is_exact_by_prefix() {
    // after k sweeps of a single block the first k positions are exact,
    // because the dependency structure is strictly triangular
    let layout = FrameLayout::new(2, 4, 2);
    let (store, model) = perturbed_model(small_geometry(2, 4, 2), 31, 0.08);
    let cond = Condition::Null;
    let z = randn(layout.numel(), 6);
    let cvec = model.embed_condition(&store, cond);
    let seq = model.deep.inverse_sequential(&store, &z, layout, &cvec, None).unwrap();
    let d = layout.channels;
    for k in 1..=4usize {
        let plan = JacobiPlan {
            first_block_size: layout.len(),
            tau: 0.0,
            max_iters: Some(k),
            warm_start: WarmStart::Zeros,
            ..JacobiPlan::default()
        };
        let (u, trace) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &plan).unwrap();
        assert_eq!(trace.blocks[0].iters, k);
        assert!(
            max_abs_diff(&u[..k * d], &seq[..k * d]) < 1e-12,
            "prefix of length {k} not exact"
        );
    }
}

#[test]
fn pass_accounting_is_deterministic_and_iteration_bounded() {
    let layout = FrameLayout::new(4, 4, 2);
    let (store, model) = perturbed_model(small_geometry(4, 4, 2), 37, 0.05);
    let cond = Condition::Class(2);
    let z = randn(layout.numel(), 7);
    let plan = JacobiPlan { first_block_size: 4, later_block_factor: 2, ..JacobiPlan::default() };
    let (_, t1) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &plan).unwrap();
    let (_, t2) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &plan).unwrap();
    let i1: Vec<usize> = t1.blocks.iter().map(|b| b.iters).collect();
    let i2: Vec<usize> = t2.blocks.iter().map(|b| b.iters).collect();
    assert_eq!(i1, i2);
    assert_eq!(t1.total_passes, t2.total_passes);
    for b in &t1.blocks {
        assert!(b.iters <= b.len, "block of {} used {} sweeps", b.len, b.iters);
        assert_eq!(b.passes, b.iters + 3); // sweeps, two polish passes, commit
        assert_eq!(b.residuals.len(), b.iters);
    }
    let covered: usize = t1.blocks.iter().map(|b| b.len).sum();
    assert_eq!(covered, layout.len());
}

#[test]
fn warm_start_never_needs_more_sweeps_on_repetitive_input() {
    let layout = FrameLayout::new(4, 4, 2);
    let (store, model) = perturbed_model(small_geometry(4, 4, 2), 43, 0.05);
    let cond = Condition::Class(0);
    // identical latents for every frame: the tiled warm start is close
    let frame = randn(layout.frame_size * layout.channels, 8);
    let mut z = Vec::new();
    for _ in 0..layout.n_frames {
        z.extend_from_slice(&frame);
    }
    let run = |ws: WarmStart| {
        let plan = JacobiPlan {
            first_block_size: layout.frame_size,
            later_block_factor: 1,
            warm_start: ws,
            ..JacobiPlan::default()
        };
        let (_, trace) = jacobi_invert_deep(&model, &store, &z, layout, cond, 1.0, &plan).unwrap();
        trace.blocks.iter().map(|b| b.iters).collect::<Vec<usize>>()
    };
    let warm = run(WarmStart::PrevFrame);
    let cold = run(WarmStart::Zeros);
    assert_eq!(warm[0], cold[0], "first block has no frame to tile");
    for f in 1..warm.len() {
        assert!(warm[f] <= cold[f], "frame {f}: warm {} vs cold {}", warm[f], cold[f]);
    }
    assert!(
        warm[1..].iter().sum::<usize>() <= cold[1..].iter().sum::<usize>(),
        "warm start should not cost extra sweeps overall"
    );
}

#[test]
fn jacobi_guided_matches_guided_sequential() {
    let layout = FrameLayout::new(3, 4, 2);
    let (store, model) = perturbed_model(small_geometry(3, 4, 2), 47, 0.05);
    let cond = Condition::Class(1);
    let z = randn(layout.numel(), 9);
    let w = 1.8;

    let mut cache = seqflow::sampler::StepCache::new(&model, true);
    let seq =
        seqflow::sampler::deep_inverse_guided(&model, &store, &mut cache, &z, cond, w).unwrap();
    let plan = JacobiPlan { first_block_size: 6, tau: 1e-10, ..JacobiPlan::default() };
    let (u, _) = jacobi_invert_deep(&model, &store, &z, layout, cond, w, &plan).unwrap();
    assert!(max_abs_diff(&u, &seq) < 1e-6);
}
