use l12refit::blocks::{dot, norm};
use l12refit::experiments::{add_gaussian_noise, synthetic_color_squares};
use l12refit::solvers::{
    joint_solve, posterior_model, refit_with_model, solve_biased_observed, PrimalDualParams,
    SupportRule,
};
use l12refit::{AnalysisOperator, BlockPenalty, ForwardOperator, ImageGrid, PenaltyTag};
use proptest::prelude::*;

fn noisy_squares(size: usize, std: f64, seed: u64) -> ImageGrid {
    let clean = synthetic_color_squares(size, size, seed).unwrap();
    add_gaussian_noise(&clean, std, seed + 100).unwrap()
}

fn off_support_ratio(tag: PenaltyTag) -> f64 {
    let y = noisy_squares(16, 10.0, 2);
    let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
    let params = PrimalDualParams::for_noise(10.0).with_iterations(4000);
    let penalty = BlockPenalty::new(tag, params.lambda).unwrap();
    let out = joint_solve(&ForwardOperator::Identity, &gamma, &y, &params, &penalty, SupportRule::Strict)
        .unwrap();
    let g = gamma.apply(out.xtilde()).unwrap();
    let off = (0..g.m())
        .filter(|&i| !out.support.contains(i))
        .map(|i| g.block_norm(i))
        .fold(0.0, f64::max);
    off / g.max_block_norm()
}

#[test]
fn joint_refit_preserves_co_support() {
    for tag in PenaltyTag::ALL {
        let ratio = off_support_ratio(tag);
        assert!(ratio < 1e-3, "{tag}: {ratio}");
    }
}

#[test]
fn hard_orientation_refit_follows_reference_directions() {
    let y = noisy_squares(16, 10.0, 5);
    let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
    let params = PrimalDualParams::for_noise(10.0).with_iterations(40000);
    let phi = ForwardOperator::Identity;
    let biased = solve_biased_observed(&phi, &gamma, &y, &params, &mut |_| {}).unwrap();
    let model = posterior_model(&gamma, &params, biased.xhat(), biased.zhat()).unwrap();
    let penalty = BlockPenalty::new(PenaltyTag::Ho, params.lambda).unwrap();
    let state = refit_with_model(&phi, &gamma, &y, &params, &penalty, &model).unwrap();
    let g = gamma.apply(&state.x).unwrap();
    let scale = g.max_block_norm();
    for i in model.support.indices() {
        let (gi, ri) = (g.block(i), model.reference.block(i));
        let unit: Vec<f64> = ri.iter().map(|v| v / norm(ri)).collect();
        let along = dot(gi, &unit);
        let across: f64 = gi
            .iter()
            .zip(&unit)
            .map(|(a, u)| (a - along * u).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(across <= 1e-3 * scale, "block {i}: {across} scale {scale}");
    }
}

#[test]
fn sd_refit_is_closer_to_data_than_biased() {
    let y = noisy_squares(24, 15.0, 9);
    let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
    let params = PrimalDualParams::for_noise(15.0).with_iterations(1500);
    let penalty = BlockPenalty::new(PenaltyTag::Sd, params.lambda).unwrap();
    let out = joint_solve(&ForwardOperator::Identity, &gamma, &y, &params, &penalty, SupportRule::Strict)
        .unwrap();
    assert!(out.xtilde().distance(&y) < out.xhat().distance(&y));
    let tv = |x: &ImageGrid| gamma.apply(x).unwrap().l12_norm();
    assert!(tv(out.xtilde()) > tv(out.xhat()));
}

#[test]
fn without_extrapolation_the_biased_solve_still_converges() {
    let y = noisy_squares(16, 10.0, 3);
    let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
    let phi = ForwardOperator::Identity;
    let reference = solve_biased_observed(
        &phi,
        &gamma,
        &y,
        &PrimalDualParams::for_noise(10.0).with_iterations(6000),
        &mut |_| {},
    )
    .unwrap();
    let mut params = PrimalDualParams::for_noise(10.0).with_iterations(6000);
    params.theta = 0.0;
    let damped = solve_biased_observed(&phi, &gamma, &y, &params, &mut |_| {}).unwrap();
    let rel = damped.xhat().distance(reference.xhat()) / reference.xhat().norm();
    assert!(rel < 1e-3, "{rel}");
}

fn image_strategy() -> impl Strategy<Value = (ImageGrid, f64)> {
    (2usize..7, 2usize..7, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        (
            proptest::collection::vec(-50.0f64..50.0, h * w * c)
                .prop_map(move |data| ImageGrid::new(h, w, c, data).unwrap()),
            0.5f64..40.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dual_iterates_stay_feasible((y, lambda) in image_strategy()) {
        let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
        let params = PrimalDualParams::new(lambda).with_iterations(200);
        let mut worst: f64 = 0.0;
        solve_biased_observed(&ForwardOperator::Identity, &gamma, &y, &params, &mut |info| {
            worst = worst.max(info.max_dual_norm);
        })
        .unwrap();
        prop_assert!(worst <= lambda * (1.0 + 1e-12), "{worst} vs {lambda}");
    }

    #[test]
    fn denoising_preserves_the_mean((y, lambda) in image_strategy()) {
        let gamma = AnalysisOperator::isotropic_for(&y).unwrap();
        let params = PrimalDualParams::new(lambda).with_iterations(400);
        let out = solve_biased_observed(&ForwardOperator::Identity, &gamma, &y, &params, &mut |_| {})
            .unwrap();
        for c in 0..y.channels() {
            let n = y.channel(c).len() as f64;
            let mean_y: f64 = y.channel(c).iter().sum::<f64>() / n;
            let mean_x: f64 = out.xhat().channel(c).iter().sum::<f64>() / n;
            prop_assert!((mean_x - mean_y).abs() <= 1e-8 * (1.0 + mean_y.abs()));
        }
    }

    #[test]
    fn noise_is_reproducible(seed in any::<u64>(), std in 0.0f64..30.0) {
        let x = ImageGrid::filled(4, 5, 3, 100.0);
        prop_assert_eq!(
            add_gaussian_noise(&x, std, seed).unwrap(),
            add_gaussian_noise(&x, std, seed).unwrap()
        );
    }
}
