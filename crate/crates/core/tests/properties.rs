use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use lad_core::detect::{
    apply_threshold, gft_transform, inverse_gft, lad_p_score, lad_s_score, lad_score, TruncationPolicy,
};
use lad_core::graph::{
    build_laplacian, cauchy_weights, eigendecompose, spatial_spectral_weights, Alpha, Connectivity, LaplacianVariant,
    Topology, WeightMatrix,
};
use lad_core::linalg::{quadratic_form, symmetric_eigen_ascending};
use lad_core::stats::{center_pixel, estimate_background_stats};
use lad_core::{Dims, ImageCube, ScoreMap};

fn cube_strategy(max_pixels: usize, max_bands: usize) -> impl Strategy<Value = ImageCube> {
    (2..=max_pixels, 1..=max_bands).prop_flat_map(|(n, m)| {
        prop::collection::vec(-50.0f64..50.0, n * m)
            .prop_map(move |data| ImageCube::new(Dims::d2(1, n).unwrap(), m, data).unwrap())
    })
}

fn weights_strategy(max_n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (2..=max_n).prop_flat_map(|n| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..4.0], n * (n - 1) / 2).prop_map(move |upper| {
            let mut w = DMatrix::zeros(n, n);
            let mut k = 0;
            for a in 0..n {
                for b in a + 1..n {
                    w[(a, b)] = upper[k];
                    w[(b, a)] = upper[k];
                    k += 1;
                }
            }
            w
        })
    })
}

fn variant_strategy() -> impl Strategy<Value = LaplacianVariant> {
    prop_oneof![Just(LaplacianVariant::Combinatorial), Just(LaplacianVariant::SymmetricNormalized)]
}

fn means_strategy(max_m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1.0f64..500.0, 2..=max_m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_positive_semidefinite(cube in cube_strategy(40, 8)) {
        let stats = estimate_background_stats(&cube, false, 0.0).unwrap();
        let (values, _) = symmetric_eigen_ascending(&stats.covariance).unwrap();
        let scale = 1.0 + stats.covariance.amax();
        prop_assert!(values[0] >= -1e-10 * scale, "min eigenvalue {}", values[0]);
    }

    #[test]
    fn centered_pixels_sum_to_zero(cube in cube_strategy(40, 6)) {
        let stats = estimate_background_stats(&cube, false, 0.0).unwrap();
        let mut total = vec![0.0; cube.bands()];
        for px in cube.pixels() {
            for (t, v) in total.iter_mut().zip(center_pixel(px, &stats).unwrap()) {
                *t += v;
            }
        }
        let bound = 1e-9 * cube.num_pixels() as f64 * 50.0;
        prop_assert!(total.iter().all(|t| t.abs() <= bound), "{total:?}");
    }

    #[test]
    fn stats_ignore_pixel_order(cube in cube_strategy(30, 5), rot in 0usize..30) {
        let n = cube.num_pixels();
        let m = cube.bands();
        let k = rot % n;
        let mut data = cube.data()[k * m..].to_vec();
        data.extend_from_slice(&cube.data()[..k * m]);
        let rotated = ImageCube::new(cube.dims().clone(), m, data).unwrap();
        let a = estimate_background_stats(&cube, false, 0.0).unwrap();
        let b = estimate_background_stats(&rotated, false, 0.0).unwrap();
        prop_assert!((a.mean - b.mean).amax() <= 1e-12);
        prop_assert!((a.covariance - b.covariance).amax() <= 1e-10);
    }

    #[test]
    fn combinatorial_form_matches_pairwise_sum(w in weights_strategy(12), seed in prop::collection::vec(-5.0f64..5.0, 12)) {
        let n = w.nrows();
        let s = &seed[..n];
        let weights = WeightMatrix::new(w.clone(), Topology::SpectralOnly).unwrap();
        let model = build_laplacian(weights, LaplacianVariant::Combinatorial, DVector::zeros(n)).unwrap();
        let mut want = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                want += w[(a, b)] * (s[a] - s[b]).powi(2);
            }
        }
        let got = quadratic_form(&model.laplacian, s);
        prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want));
        let ones = DVector::from_element(n, 1.0);
        prop_assert!((&model.laplacian * ones).amax() <= 1e-10);
    }

    #[test]
    fn normalized_spectrum_is_bounded(w in weights_strategy(16)) {
        let n = w.nrows();
        let weights = WeightMatrix::new(w, Topology::SpectralOnly).unwrap();
        let model = build_laplacian(weights, LaplacianVariant::SymmetricNormalized, DVector::zeros(n)).unwrap();
        let (values, _) = symmetric_eigen_ascending(&model.laplacian).unwrap();
        prop_assert!(values[0] >= -1e-9 && values[n - 1] <= 2.0 + 1e-9, "{values}");
    }

    #[test]
    fn cauchy_weights_are_scale_covariant(mean in means_strategy(10), alpha in 0.5f64..100.0, c in 0.01f64..100.0) {
        let a = cauchy_weights(&mean, Alpha::Fixed(alpha)).unwrap();
        let scaled: Vec<f64> = mean.iter().map(|v| v * c).collect();
        let b = cauchy_weights(&scaled, Alpha::Fixed(alpha * c)).unwrap();
        prop_assert!((a.matrix() - b.matrix()).amax() <= 1e-12);
        // The automatic scale follows the means, so it is scale-free too.
        let a = cauchy_weights(&mean, Alpha::Auto).unwrap();
        let b = cauchy_weights(&scaled, Alpha::Auto).unwrap();
        prop_assert!((a.matrix() - b.matrix()).amax() <= 1e-12);
    }

    #[test]
    fn gft_round_trip_and_parseval(w in weights_strategy(10), variant in variant_strategy(), sig in prop::collection::vec(-10.0f64..10.0, 10)) {
        let n = w.nrows();
        let weights = WeightMatrix::new(w, Topology::SpectralOnly).unwrap();
        let model = eigendecompose(build_laplacian(weights, variant, DVector::zeros(n)).unwrap()).unwrap();
        let s = &sig[..n];
        let coeffs = gft_transform(s, &model).unwrap();
        let back = inverse_gft(&coeffs, &model).unwrap();
        let energy: f64 = s.iter().map(|v| v * v).sum();
        let spectral: f64 = coeffs.0.iter().map(|v| v * v).sum();
        prop_assert!(back.iter().zip(s).all(|(a, b)| (a - b).abs() <= 1e-9));
        prop_assert!((energy - spectral).abs() <= 1e-9 * (1.0 + energy));
    }

    #[test]
    fn truncated_scores_grow_with_p(w in weights_strategy(8), variant in variant_strategy(), data in prop::collection::vec(-10.0f64..10.0, 8 * 6)) {
        let n = w.nrows();
        let weights = WeightMatrix::new(w, Topology::SpectralOnly).unwrap();
        let model = eigendecompose(build_laplacian(weights, variant, DVector::zeros(n)).unwrap()).unwrap();
        let cube = ImageCube::new(Dims::d2(1, 6).unwrap(), n, data[..6 * n].to_vec()).unwrap();
        let mut prev = vec![0.0; 6];
        for p in 1..=n {
            let scores = lad_p_score(&cube, &model, &TruncationPolicy::fixed(p)).unwrap().scores;
            for (s, q) in scores.scores().iter().zip(&prev) {
                prop_assert!(*s >= q - 1e-9);
            }
            prev = scores.scores().to_vec();
        }
        let direct = lad_score(&cube, &model).unwrap();
        for (a, b) in direct.scores().iter().zip(&prev) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }

    #[test]
    fn threshold_masks_shrink(scores in prop::collection::vec(0.0f64..10.0, 1..50), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let map = ScoreMap::new(Dims::d2(1, scores.len()).unwrap(), scores).unwrap();
        let a = apply_threshold(&map, lo).unwrap();
        let b = apply_threshold(&map, hi).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| *x || !*y));
    }
}

/// With no spatial links the spatial graph splits into independent copies
/// of the spectral graph, so the score is the sum of per-block scores.
#[test]
fn zero_spatial_weight_decouples_blocks() {
    let mean = [10.0, 12.0, 9.0];
    let dims = Dims::d2(3, 4).unwrap();
    let data: Vec<f64> = (0..dims.num_pixels() * 3).map(|i| ((i * 7919) % 23) as f64).collect();
    let cube = ImageCube::new(dims.clone(), 3, data).unwrap();
    let spectral = cauchy_weights(&mean, Alpha::Auto).unwrap();
    for variant in [LaplacianVariant::Combinatorial, LaplacianVariant::SymmetricNormalized] {
        let spectral_model = build_laplacian(spectral.clone(), variant, DVector::from_row_slice(&mean)).unwrap();
        let per_pixel = lad_score(&cube, &spectral_model).unwrap();
        let spatial = spatial_spectral_weights(&spectral, 0.0, Connectivity::Four).unwrap();
        let model = build_laplacian(spatial, variant, DVector::from_row_slice(&mean)).unwrap();
        let joint = lad_s_score(&cube, &model).unwrap();
        for i in 0..dims.num_pixels() {
            let want: f64 = std::iter::once(i)
                .chain(dims.clamped_neighbors(i))
                .map(|j| per_pixel.scores()[j])
                .sum();
            let got = joint.scores()[i];
            assert!((got - want).abs() <= 1e-10 * (1.0 + want), "pixel {i}: {got} vs {want}");
        }
    }
}
