//! Reverse samplers: shared structure, guidance gradients, batch filter.

mod common;

use common::{normal_vec, overfit_model, rms_error, CompositeFixture, CoordinateCost, LinearGaussianTestbed};
use kcgg_core::demos::Style;
use kcgg_core::diffusion::{GaussianScore, NoiseSchedule};
use kcgg_core::sampling::{
    argmin_first, kcgg_gradient, projection_gradient, sample_batch, Condition, GuidanceCost, Method, SamplerConfig,
    StrikeGuidance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(method: Method, steps: usize, batch: usize, eta: f64, seed: u64) -> SamplerConfig {
    SamplerConfig {
        guidance_scale: eta,
        seed,
        ..SamplerConfig::new(method, steps, batch)
    }
}

#[test]
fn zero_guidance_reduces_to_unconstrained() {
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(30).unwrap();
    for clip in [false, true] {
        let run = |m: Method| {
            let c = SamplerConfig { clip_denoised: clip, ..cfg(m, 30, 4, 0.0, 3) };
            sample_batch(&bed.prior, &schedule, &c, Condition::Label(0), Some(&bed.cost)).unwrap().samples
        };
        let u = run(Method::Unconstrained);
        let p = run(Method::Projection);
        let k = run(Method::Kcgg);
        assert_eq!(u, p, "projection with η = 0 must be the plain step");
        // the posterior-mean form is algebraically the same step
        assert!(rms_error(&u, &k) < 1e-9, "kcgg with η = 0 differs by {}", rms_error(&u, &k));
    }
}

#[test]
fn zero_guidance_equivalence_on_a_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fx = CompositeFixture::new(&mut rng, (1, 3));
    let schedule = NoiseSchedule::cosine(20).unwrap();
    let guidance = StrikeGuidance { constraint: &fx.constraint, arm: &fx.arm, normalizer: &fx.normalizer, rows: fx.rows, dt: 0.02 };
    let run = |m: Method| sample_batch(&fx.network, &schedule, &cfg(m, 20, 3, 0.0, 1), Condition::Label(0), Some(&guidance)).unwrap();
    let u = run(Method::Unconstrained);
    let k = run(Method::Kcgg);
    assert!(rms_error(&u.samples, &k.samples) < 1e-9);
    assert_eq!(u.samples, run(Method::Projection).samples);
}

#[test]
fn single_element_batch_ignores_the_filter() {
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    for m in [Method::Unconstrained, Method::Projection, Method::Kcgg] {
        let on = sample_batch(&bed.prior, &schedule, &cfg(m, 20, 1, 0.3, 5), Condition::Label(0), Some(&bed.cost)).unwrap();
        let off = SamplerConfig { batch_filter: false, ..cfg(m, 20, 1, 0.3, 5) };
        let off = sample_batch(&bed.prior, &schedule, &off, Condition::Label(0), Some(&bed.cost)).unwrap();
        assert_eq!(on.samples, off.samples);
        assert_eq!(on.best(), off.best());
    }
}

#[test]
fn filter_returns_the_cheapest_element() {
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    for seed in 0..10 {
        let out = sample_batch(&bed.prior, &schedule, &cfg(Method::Projection, 20, 6, 0.3, seed), Condition::Label(0), Some(&bed.cost))
            .unwrap();
        let costs = bed.cost.values(&out.samples, 6).unwrap();
        assert_eq!(out.diagnostics.costs, costs);
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(costs[out.chosen], min);
        assert!(costs[..out.chosen].iter().all(|&c| c > min), "ties go to the lowest index");
        assert_eq!(out.best(), out.element(out.chosen));
        let off = SamplerConfig { batch_filter: false, ..cfg(Method::Projection, 20, 6, 0.3, seed) };
        let off = sample_batch(&bed.prior, &schedule, &off, Condition::Label(0), Some(&bed.cost)).unwrap();
        assert_eq!(off.chosen, 0);
    }
    assert_eq!(argmin_first(&[2.0, 1.0, 1.0, 3.0]), 1);
    assert_eq!(argmin_first(&[0.5]), 0);
}

#[test]
fn guided_methods_need_a_cost() {
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(10).unwrap();
    for m in [Method::Projection, Method::Kcgg] {
        assert!(sample_batch(&bed.prior, &schedule, &cfg(m, 10, 2, 1.0, 0), Condition::Label(0), None).is_err());
    }
    assert!(sample_batch(&bed.prior, &schedule, &cfg(Method::Unconstrained, 1, 2, 1.0, 0), Condition::Label(0), None).is_err());
    assert!(sample_batch(&bed.prior, &schedule, &cfg(Method::Unconstrained, 10, 0, 1.0, 0), Condition::Label(0), None).is_err());
    assert!(sample_batch(&bed.prior, &schedule, &cfg(Method::Unconstrained, 10, 1, 1.0, 0), Condition::Label(3), None).is_err());
}

/// Positions of the strike timestep's joint angles in a flat sample.
fn strike_coordinates(fx: &CompositeFixture, sample: &[f64]) -> Vec<usize> {
    let traj = fx.normalizer.decode(sample, fx.rows, 0.02).unwrap();
    let (_, t) = fx.constraint.evaluate(&fx.arm, &traj).unwrap();
    let d = 2 * fx.arm.joints();
    (0..fx.arm.joints()).map(|j| t * d + j).collect()
}

#[test]
fn projection_gradient_touches_only_the_strike_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let fx = CompositeFixture::new(&mut rng, (0, 3));
        let guidance = StrikeGuidance { constraint: &fx.constraint, arm: &fx.arm, normalizer: &fx.normalizer, rows: fx.rows, dt: 0.02 };
        let x = normal_vec(&mut rng, fx.dim(), 0.5);
        let grad = projection_gradient(&guidance, &x, 1).unwrap().to_vec();
        let allowed = strike_coordinates(&fx, &x);
        for (k, g) in grad.iter().enumerate() {
            if !allowed.contains(&k) {
                assert_eq!(*g, 0.0, "entry {k} outside the strike positions");
            }
        }
        assert!(allowed.iter().any(|&k| grad[k] != 0.0));
    }
}

#[test]
fn kcgg_gradient_is_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let schedule = NoiseSchedule::cosine(20).unwrap();
    for _ in 0..10 {
        let fx = CompositeFixture::new(&mut rng, (0, 3));
        let guidance = StrikeGuidance { constraint: &fx.constraint, arm: &fx.arm, normalizer: &fx.normalizer, rows: fx.rows, dt: 0.02 };
        let x = normal_vec(&mut rng, fx.dim(), 0.5);
        let i = rng.random_range(1..20);
        let dense = kcgg_gradient(&fx.network, &schedule, &x, 1, i, &[0], &guidance).unwrap().to_vec();
        let sparse = projection_gradient(&guidance, &x, 1).unwrap().to_vec();
        let nz = |v: &[f64]| v.iter().filter(|g| g.abs() > 1e-12).count() as f64 / v.len() as f64;
        assert!(nz(&dense) > 0.9, "kcgg density {}", nz(&dense));
        assert!(nz(&sparse) <= fx.arm.joints() as f64 / fx.dim() as f64);
    }
}

#[test]
fn single_point_prior_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let point = normal_vec(&mut rng, 10, 0.5);
    let model = GaussianScore::single_point(point.clone());
    let schedule = NoiseSchedule::cosine(100).unwrap();
    let scale = (point.iter().map(|p| p * p).sum::<f64>() / 10.0).sqrt();
    for steps in [10, 50, 100] {
        let c = SamplerConfig { clip_denoised: false, ..cfg(Method::Unconstrained, steps, 4, 0.0, 2) };
        let out = sample_batch(&model, &schedule, &c, Condition::Label(0), None).unwrap();
        for k in 0..4 {
            let e = rms_error(out.element(k), &point);
            assert!(e < 0.02 * scale, "T={steps} element {k}: rms {e}");
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    for m in [Method::Unconstrained, Method::Projection, Method::Kcgg] {
        let run = |seed| sample_batch(&bed.prior, &schedule, &cfg(m, 20, 3, 0.5, seed), Condition::Marginal, Some(&bed.cost)).unwrap();
        let (a, b, c) = (run(9), run(9), run(10));
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.diagnostics.labels, b.diagnostics.labels);
        assert_ne!(a.samples, c.samples);
    }
}

#[test]
fn batch_elements_use_independent_streams() {
    // element k of a batch matches element k of any larger batch
    let bed = LinearGaussianTestbed::new();
    let schedule = NoiseSchedule::cosine(20).unwrap();
    let small = sample_batch(&bed.prior, &schedule, &cfg(Method::Unconstrained, 20, 2, 0.0, 4), Condition::Label(0), None).unwrap();
    let large = sample_batch(&bed.prior, &schedule, &cfg(Method::Unconstrained, 20, 5, 0.0, 4), Condition::Label(0), None).unwrap();
    assert_eq!(small.element(1), large.element(1));
}

#[test]
fn guidance_moves_the_constrained_coordinate() {
    let bed = LinearGaussianTestbed::with(1.0, 1.0);
    let exact = bed.conditional_mean();
    let free = bed.sample_mean(Method::Unconstrained, 20, 0.0, 400, 3);
    for m in [Method::Projection, Method::Kcgg] {
        let guided = bed.sample_mean(m, 20, 0.2, 400, 3);
        let k = bed.cost.k;
        assert!((guided[k] - exact[k]).abs() < (free[k] - exact[k]).abs(), "{m:?}");
    }
    // sanity of the cost helper itself
    let c = CoordinateCost { dim: 3, k: 1, target: 1.0, weight: 2.0 };
    assert_eq!(c.values(&[0.0, 0.0, 0.0, 5.0, 3.0, 5.0], 2).unwrap(), vec![2.0, 8.0]);
}

#[test]
fn overfit_model_reproduces_its_demo() {
    let (model, demo) = overfit_model();
    let schedule = model.noise_schedule().unwrap();
    let c = SamplerConfig { batch_filter: false, ..cfg(Method::Unconstrained, 100, 8, 0.0, 0) };
    let label = Style::SweepLow.label() as usize;
    let out = sample_batch(&model.network, &schedule, &c, Condition::Label(label), None).unwrap();
    let d = demo.state_dim();
    for k in 0..8 {
        let traj = model.decode(out.element(k)).unwrap();
        for j in 0..d {
            // dims the demo holds constant get a range of only the fit margin,
            // so the demo's own RMS magnitude is the scale there
            let magnitude = ((0..demo.rows()).map(|t| demo.state(t)[j].powi(2)).sum::<f64>() / demo.rows() as f64).sqrt();
            let range = (model.normalizer.hi[j] - model.normalizer.lo[j]).max(magnitude);
            let rms = ((0..demo.rows()).map(|t| (traj.state(t)[j] - demo.state(t)[j]).powi(2)).sum::<f64>()
                / demo.rows() as f64)
                .sqrt();
            assert!(rms <= 0.05 * range, "element {k} dim {j}: rms {rms} vs range {range}");
        }
    }
}
