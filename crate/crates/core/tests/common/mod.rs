//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use dualdomain::kspace::{apply_mask, compute_complex_norm_stats, compute_norm_stats, make_gaussian_mask, zero_filled_recon};
use dualdomain::nets::{bridge_backward, bridge_forward, HybridModel, UNetConfig};
use dualdomain::synthdata::{gen_phantom_image, simulate_kspace, PhantomSpec};
use dualdomain::training::dual_domain_loss_with_grad;
use dualdomain::{ComplexKSpace, NormStats};
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `|a − b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_array3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Central-difference check of the bridge at `points` random coordinates of
/// a random `(2, n, n)` input. Returns the worst relative error.
pub fn bridge_gradient_check(n: usize, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = NormStats::new(0.01, 0.7).unwrap();
    let is = NormStats::new(0.3, 1.3).unwrap();
    let x = random_array3((2, n, n), &mut rng);
    let weights = random_array3((1, n, n), &mut rng);
    let loss = |x: &Array3<f64>| -> f64 {
        let (out, _) = bridge_forward(x, &ks, &is).unwrap();
        (&out * &weights).sum()
    };
    let (_, tape) = bridge_forward(&x, &ks, &is).unwrap();
    let analytic = bridge_backward(&tape, &weights, &ks, &is);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for flat in sample(&mut rng, 2 * n * n, points) {
        let idx = (flat / (n * n), (flat / n) % n, flat % n);
        let mut plus = x.clone();
        plus[idx] += h;
        let mut minus = x.clone();
        minus[idx] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max(relative_error(analytic[idx], numeric));
    }
    worst
}

/// One undersampled 16×16-or-larger phantom slice with its targets.
pub struct ToyProblem {
    pub undersampled: ComplexKSpace,
    pub kspace_target: Array3<f64>,
    pub image_target: Array2<f64>,
    pub kspace_stats: NormStats,
    pub image_stats: NormStats,
}

pub fn toy_problem(n: usize, seed: u64) -> ToyProblem {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let full = simulate_kspace(&gen_phantom_image(n, n, &spec).unwrap(), 0.01, seed).unwrap();
    let mask = make_gaussian_mask(n, n, 4.0, 0.08, seed).unwrap();
    let undersampled = apply_mask(&full, &mask).unwrap();
    let kspace_stats = compute_complex_norm_stats(std::slice::from_ref(&undersampled)).unwrap();
    let zero_filled = zero_filled_recon(&undersampled).unwrap().into_data();
    let image_stats = compute_norm_stats(&[zero_filled]).unwrap();
    let kspace_target = dualdomain::kspace::complex_to_channels(&dualdomain::kspace::normalize_complex(
        full.data(),
        &kspace_stats,
    ));
    ToyProblem {
        undersampled,
        kspace_target,
        image_target: zero_filled_recon(&full).unwrap().into_data(),
        kspace_stats,
        image_stats,
    }
}

/// Hybrid whose every parameter (including the zero-initialized heads) is
/// perturbed, so no gradient vanishes by construction.
pub fn randomized_hybrid(levels: usize, base: usize, problem: &ToyProblem, seed: u64) -> HybridModel {
    let mut model = HybridModel::new(
        UNetConfig::frequency(levels, base),
        UNetConfig::image(levels, base, false),
        problem.kspace_stats,
        problem.image_stats,
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model
        .freq_net
        .params_mut()
        .iter_mut()
        .chain(model.image_net.params_mut().iter_mut())
    {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    model
}

pub fn hybrid_loss(model: &HybridModel, problem: &ToyProblem, w1: f64, w2: f64) -> f64 {
    let out = model.forward(&problem.undersampled).unwrap();
    dualdomain::training::dual_domain_loss(
        &out.kspace_norm,
        &problem.kspace_target,
        &out.image_raw,
        &problem.image_target,
        w1,
        w2,
    )
    .unwrap()
    .total
}

/// Relative errors between analytic and central-difference gradients of
/// the dual-domain loss at `points` randomly chosen parameters.
pub fn hybrid_gradient_errors(model: &HybridModel, problem: &ToyProblem, points: usize, seed: u64) -> Vec<f64> {
    let (w1, w2) = (0.001, 0.999);
    let (out, tape) = model.forward_train(&problem.undersampled).unwrap();
    let (_, gk, gi) = dual_domain_loss_with_grad(
        &out.kspace_norm,
        &problem.kspace_target,
        &out.image_raw,
        &problem.image_target,
        w1,
        w2,
    )
    .unwrap();
    let nf = model.freq_net.num_params();
    let mut grad_f = vec![0.0; nf];
    let mut grad_i = vec![0.0; model.image_net.num_params()];
    model.backward(&tape, &gk, &gi, &mut grad_f, &mut grad_i);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = model.num_params();
    let h = 1e-6;
    sample(&mut rng, total, points)
        .into_iter()
        .map(|k| {
            let eval = |delta: f64| {
                let mut m = model.clone();
                if k < nf {
                    m.freq_net.params_mut()[k] += delta;
                } else {
                    m.image_net.params_mut()[k - nf] += delta;
                }
                hybrid_loss(&m, problem, w1, w2)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = if k < nf { grad_f[k] } else { grad_i[k - nf] };
            relative_error(analytic, numeric)
        })
        .collect()
}
