use ered_core::denoiser::LinearShrink;
use ered_core::equivariant::{equivariant_denoise, EquivariantConfig};
use ered_core::forward::{ForwardModel, ForwardModelSpec, KernelSpec};
use ered_core::prior::GmmPrior;
use ered_core::transform::TransformSpec;
use ered_core::{Image, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(shape: Shape, rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn linear_spec() -> impl Strategy<Value = TransformSpec> {
    prop_oneof![
        Just(TransformSpec::Identity),
        Just(TransformSpec::Rot90),
        Just(TransformSpec::Flip),
        (1usize..3).prop_map(|max_shift| TransformSpec::CircularTranslation { max_shift }),
        (0.05f64..1.5).prop_map(|max_angle| TransformSpec::SubpixelRotation { max_angle }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jacobian_transpose_is_adjoint(spec in linear_spec(), n in 5usize..12, color in any::<bool>(), seed in any::<u64>()) {
        let shape = Shape::new(n, n, if color { 3 } else { 1 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(shape, &mut rng);
        let v = random_image(shape, &mut rng);
        let g = spec.sample(shape, 0.1, &mut rng);
        let lhs = g.apply(&x).unwrap().dot(&v);
        let rhs = x.dot(&g.jtvp(&x, &v).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn permutations_are_undone_by_their_transpose(n in 2usize..9, seed in any::<u64>()) {
        let shape = Shape::new(n, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(shape, &mut rng);
        for spec in [TransformSpec::Rot90, TransformSpec::Flip, TransformSpec::CircularTranslation { max_shift: 2 }] {
            let g = spec.sample(shape, 0.1, &mut rng);
            let back = g.jtvp(&x, &g.apply(&x).unwrap()).unwrap();
            prop_assert_eq!(back, x.clone());
        }
    }

    #[test]
    fn forward_operators_pass_dot_product_test(
        size in 1usize..4,
        std in 0.3f64..2.0,
        factor in 1usize..4,
        blocks in 3usize..6,
        seed in any::<u64>(),
    ) {
        let n = factor * blocks.max(2 * size + 1);
        let shape = Shape::new(n, n, 1);
        let kernel = KernelSpec::Gaussian { size: 2 * size + 1, std };
        let spec = if factor == 1 {
            ForwardModelSpec::Deblur { kernel, sigma_y: 0.1 }
        } else {
            ForwardModelSpec::SuperResolution { kernel, factor, sigma_y: 0.1 }
        };
        let model = ForwardModel::new(&spec, shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(shape, &mut rng);
        let ax = model.apply(&x).unwrap();
        let y = random_image(ax.shape(), &mut rng);
        let lhs = ax.dot(&y);
        let rhs = x.dot(&model.adjoint(&y).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        // the clean forward image has zero data misfit
        prop_assert!(model.fidelity(&x, &ax).unwrap().abs() < 1e-20);
    }

    #[test]
    fn mmse_residual_is_the_score(dim in 1usize..8, k in 1usize..5, sigma in 0.05f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = GmmPrior::random(&mut rng, dim, k).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d = prior.mmse_denoise(sigma, &x).unwrap();
        let s = prior.score(sigma, &x).unwrap();
        let scale = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        for i in 0..dim {
            let tweedie = (d[i] - x[i]) / (sigma * sigma);
            prop_assert!((tweedie - s[i]).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn shrinkage_is_fixed_by_permutation_averaging(n in 2usize..8, c in 0.0f64..1.0, seed in any::<u64>()) {
        let shape = Shape::new(n, n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(shape, &mut rng);
        let den = LinearShrink::new(c).unwrap();
        for spec in [TransformSpec::Rot90, TransformSpec::Flip] {
            let cfg = EquivariantConfig::new(spec, 0.1, 1.0);
            let d = equivariant_denoise(&den, &cfg, &x, &mut rng).unwrap();
            prop_assert!(d.max_abs_diff(&x.scale(c)) < 1e-14);
        }
    }
}
