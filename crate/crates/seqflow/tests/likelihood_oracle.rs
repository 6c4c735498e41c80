//! Independent oracles for the exact likelihood: a dense finite-difference
//! Jacobian determinant, Gaussian entropy, quadrature normalization, and a
//! sampling histogram cross-checked against the density.

mod common;

use common::{lu_log_abs_det, perturbed_model, small_geometry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqflow::flow::FrameLayout;
use seqflow::model::{Condition, GlobalLocalFlow, TokenSequence};
use seqflow::numerics::{standard_normal, ParamStore};
use seqflow::sampler::{draw_latents, sample_from_latents, SampleOpts};

fn encode_z(model: &GlobalLocalFlow, store: &ParamStore, x: &[f64], layout: FrameLayout) -> Vec<f64> {
    let seq = TokenSequence::new(layout, x.to_vec()).unwrap();
    let (_, z, _, _) = model.encode(store, &seq, Condition::Class(0)).unwrap();
    z.data
}

#[test]
fn logdet_matches_dense_fd_jacobian() {
    // 2 frames x 3 positions x 2 channels = 12-dimensional transformation
    let layout = FrameLayout::new(2, 3, 2);
    let (store, model) = perturbed_model(small_geometry(2, 3, 2), 17, 0.05);
    let n = layout.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();

    let h = 1e-5;
    let mut jac = vec![0.0; n * n]; // row i = dz_i / dx_j
    for j in 0..n {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p[j] += h;
        m[j] -= h;
        let zp = encode_z(&model, &store, &p, layout);
        let zm = encode_z(&model, &store, &m, layout);
        for i in 0..n {
            jac[i * n + j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    let fd_logdet = lu_log_abs_det(&jac, n);

    let seq = TokenSequence::new(layout, x0).unwrap();
    let (_, _, logdet_s, logdet_d) = model.encode(&store, &seq, Condition::Class(0)).unwrap();
    let model_logdet = logdet_s + logdet_d;
    let denom = fd_logdet.abs().max(model_logdet.abs()).max(1e-3);
    assert!(
        (fd_logdet - model_logdet).abs() / denom < 1e-3,
        "fd {fd_logdet} vs model {model_logdet}"
    );
}

#[test]
fn per_frame_terms_sum_to_total() {
    let layout = FrameLayout::new(4, 4, 3);
    let (store, model) = perturbed_model(small_geometry(4, 4, 3), 23, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Vec<f64> = (0..layout.numel()).map(|_| standard_normal(&mut rng)).collect();
    let seq = TokenSequence::new(layout, x).unwrap();
    let (total, per_frame) = model.log_likelihood(&store, &seq, Condition::Class(1)).unwrap();
    assert_eq!(per_frame.len(), 4);
    let sum: f64 = per_frame.iter().sum();
    assert!((sum - total).abs() < 1e-8, "sum {sum} vs total {total}");
}

#[test]
fn identity_flow_reports_gaussian_entropy() {
    // zero-initialized heads make the whole flow the identity, so the mean
    // log-likelihood per dimension of standard normal data must approach
    // -0.5 (1 + ln 2 pi) = -1.4189
    let geometry = small_geometry(8, 16, 4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = GlobalLocalFlow::new(&mut store, geometry, &mut rng);
    let layout = model.geometry.layout();
    let mut data_rng = ChaCha8Rng::seed_from_u64(31);
    let mut total = 0.0;
    let mut dims = 0.0;
    for _ in 0..20 {
        let x: Vec<f64> = (0..layout.numel()).map(|_| standard_normal(&mut data_rng)).collect();
        let seq = TokenSequence::new(layout, x).unwrap();
        let (ll, _) = model.log_likelihood(&store, &seq, Condition::Null).unwrap();
        total += ll;
        dims += layout.numel() as f64;
    }
    assert!(dims >= 1e4);
    let per_dim = total / dims;
    assert!((per_dim + 1.4189).abs() < 0.05, "per-dim log-likelihood {per_dim}");
}

#[test]
fn density_integrates_to_one() {
    // 1 frame x 3 positions x 1 channel: a genuinely autoregressive
    // 3-dimensional density, integrated on a grid
    let layout = FrameLayout::new(1, 3, 1);
    let (store, model) = perturbed_model(small_geometry(1, 3, 1), 41, 0.08);
    let lo = -6.0;
    let hi = 6.0;
    let steps = 41usize;
    let hgrid = (hi - lo) / (steps - 1) as f64;
    let mut mass = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            for k in 0..steps {
                let x = vec![
                    lo + hgrid * i as f64,
                    lo + hgrid * j as f64,
                    lo + hgrid * k as f64,
                ];
                let wt = |idx: usize| if idx == 0 || idx == steps - 1 { 0.5 } else { 1.0 };
                let seq = TokenSequence::new(layout, x).unwrap();
                let (ll, _) = model.log_likelihood(&store, &seq, Condition::Class(2)).unwrap();
                mass += ll.exp() * wt(i) * wt(j) * wt(k);
            }
        }
    }
    mass *= hgrid * hgrid * hgrid;
    assert!((mass - 1.0).abs() < 0.02, "integrated mass {mass}");
}

#[test]
fn sampling_histogram_matches_density() {
    // second-position marginal: histogram of samples against the density
    // obtained by integrating out the first position
    let layout = FrameLayout::new(1, 2, 1);
    let (store, model) = perturbed_model(small_geometry(1, 2, 1), 55, 0.1);
    let cond = Condition::Class(0);
    let opts = SampleOpts::default();

    let n_samples = 200_000usize;
    let bin_w = 0.25;
    let lo = -8.0;
    let n_bins = 64usize;
    let mut hist = vec![0usize; n_bins];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..n_samples {
        let z = draw_latents(layout, 1.0, &mut rng);
        let x = sample_from_latents(&model, &store, &z, layout, cond, &opts).unwrap();
        let b = ((x.data[1] - lo) / bin_w).floor();
        if (0.0..n_bins as f64).contains(&b) {
            hist[b as usize] += 1;
        }
    }
    let mode = hist.iter().enumerate().max_by_key(|&(_, c)| *c).unwrap().0;

    // analytic mass of the mode bin: 2-d quadrature of p(x0, x1)
    let marginal_mass = |b: usize| -> f64 {
        let x1_lo = lo + b as f64 * bin_w;
        let inner = 41usize;
        let outer = 9usize; // x1 sub-grid inside the bin
        let mut mass = 0.0;
        let h0 = 12.0 / (inner - 1) as f64;
        let h1 = bin_w / (outer - 1) as f64;
        for a in 0..inner {
            let x0 = -6.0 + h0 * a as f64;
            let w0 = if a == 0 || a == inner - 1 { 0.5 } else { 1.0 };
            for c in 0..outer {
                let x1 = x1_lo + h1 * c as f64;
                let w1 = if c == 0 || c == outer - 1 { 0.5 } else { 1.0 };
                let seq = TokenSequence::new(layout, vec![x0, x1]).unwrap();
                let (ll, _) = model.log_likelihood(&store, &seq, cond).unwrap();
                mass += ll.exp() * w0 * w1;
            }
        }
        mass * h0 * h1
    };
    let expected = marginal_mass(mode);
    let observed = hist[mode] as f64 / n_samples as f64;
    assert!(
        (observed - expected).abs() / expected < 0.10,
        "mode bin {mode}: observed {observed} vs analytic {expected}"
    );
}
