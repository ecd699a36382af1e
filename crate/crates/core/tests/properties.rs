use ndarray::{Array1, Array2, Array3};
use noisegrid_core::classifier::{forward, init, predict_map, MlpArchitecture};
use noisegrid_core::features::{histogram_field, kmeans, lloyd, FeatureMatrix, ReinterpretationField};
use noisegrid_core::img::{to_grayscale, RgbImage};
use noisegrid_core::ocsvm::{decision, fit, OcSvmParams};
use noisegrid_core::residuals::{
    conv_residual, default_steganalytic_kernels, median_filter, median_residual, wavelet_residual, Kernel,
};
use noisegrid_core::synth::{synth_blur, synth_removal, synth_splice, Rect, SpliceMode};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, h * w).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

fn image(h: usize, w: usize) -> impl Strategy<Value = RgbImage> {
    prop::collection::vec(0u8..=255, h * w * 3).prop_map(move |v| {
        RgbImage::new(Array3::from_shape_vec((h, w, 3), v.into_iter().map(|b| f64::from(b) / 255.0).collect()).unwrap())
            .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_sum_kernels_zero_constants(c in 0.0f64..1.0, h in 3usize..20, w in 3usize..20) {
        let img = Array2::from_elem((h, w), c);
        for k in default_steganalytic_kernels() {
            prop_assert!(k.is_zero_sum());
            prop_assert!(conv_residual(img.view(), &k).unwrap().data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn convolution_is_linear(x in matrix(5..16, 5..16), a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let y = x.mapv(|v| ((v * 977.0 + seed as f64).sin() + 1.0) / 2.0);
        for k in default_steganalytic_kernels() {
            let lhs = conv_residual((&x * a + &y * b).view(), &k).unwrap().data;
            let rhs = conv_residual(x.view(), &k).unwrap().data * a + conv_residual(y.view(), &k).unwrap().data * b;
            prop_assert!(lhs.iter().zip(rhs.iter()).all(|(p, q)| (p - q).abs() <= 1e-9));
        }
    }

    #[test]
    fn median_residual_plus_filter_is_identity(x in matrix(4..20, 4..20)) {
        let r = median_residual(x.view(), 3).unwrap().data;
        let f = median_filter(x.view(), 3).unwrap();
        prop_assert!((r + f - &x).iter().all(|d| d.abs() <= 1e-15));
    }

    #[test]
    fn generators_are_deterministic(x in matrix(16..24, 16..24)) {
        let k = Kernel::new("k", default_steganalytic_kernels()[3].weights().clone()).unwrap();
        prop_assert_eq!(conv_residual(x.view(), &k).unwrap(), conv_residual(x.view(), &k).unwrap());
        prop_assert_eq!(wavelet_residual(x.view()).unwrap(), wavelet_residual(x.view()).unwrap());
    }

    #[test]
    fn ocsvm_dual_feasible_and_lipschitz(
        pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..30),
        nu in 0.05f64..1.0,
        gamma in 0.05f64..2.0,
        probes in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 3), prop::collection::vec(-3.0f64..3.0, 3)), 10),
    ) {
        let n = pts.len();
        let x = Array2::from_shape_vec((n, 3), pts.concat()).unwrap();
        let params = OcSvmParams { nu, gamma, ..Default::default() };
        let model = fit(x.view(), &params).unwrap();
        let sum: f64 = model.alpha().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-8);
        let ub = 1.0 / (nu * n as f64);
        prop_assert!(model.alpha().iter().all(|&a| a >= 0.0 && a <= ub + 1e-12));
        prop_assert_eq!(&model, &fit(x.view(), &params).unwrap());
        let lip = (2.0 * gamma / std::f64::consts::E).sqrt() * sum;
        for (p, q) in &probes {
            let (p, q) = (Array1::from(p.clone()), Array1::from(q.clone()));
            let dist = (&p - &q).mapv(|v| v * v).sum().sqrt();
            let diff = (decision(&model, p.view()).unwrap() - decision(&model, q.view()).unwrap()).abs();
            prop_assert!(diff <= lip * dist + 1e-12);
        }
    }

    #[test]
    fn histograms_normalized_and_permutation_invariant(
        v in matrix(4..30, 2..12),
        bins in 2usize..20,
        seed in any::<u64>(),
    ) {
        let field = ReinterpretationField { rows: 1, cols: v.nrows(), v: v.clone() };
        let hf = histogram_field(&field, bins).unwrap();
        prop_assert!(hf.vh.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!(hf.vh.iter().any(|&x| x == 1.0));
        let mut permuted = v.clone();
        for (r, mut row) in permuted.rows_mut().into_iter().enumerate() {
            let shift = (seed as usize).wrapping_add(r) % row.len();
            let vals: Vec<f64> = (0..row.len()).map(|i| row[(i + shift) % row.len()]).collect();
            row.assign(&Array1::from(vals));
        }
        let hp = histogram_field(&ReinterpretationField { v: permuted, ..field }, bins).unwrap();
        prop_assert_eq!(hp, hf);
    }

    #[test]
    fn kmeans_best_restart_and_lloyd_monotone(x in matrix(3..25, 1..4), k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(x.nrows());
        let km = kmeans(x.view(), k, 10, 300, seed).unwrap();
        prop_assert!(km.restart_wcss.iter().all(|&w| km.wcss <= w));
        let init = x.slice(ndarray::s![..k, ..]).to_owned();
        let run = lloyd(x.view(), init, 300);
        prop_assert!(run.wcss_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn softmax_positive_and_normalized(
        input in prop::collection::vec(-50.0f64..50.0, 1..8),
        hidden in prop::collection::vec(1usize..8, 1..3),
        seed in any::<u64>(),
    ) {
        let model = init(&MlpArchitecture { input_dim: input.len(), hidden }, seed).unwrap();
        let [p0, p1] = forward(&model, Array1::from(input).view()).unwrap();
        prop_assert!(p0 > 0.0 && p1 > 0.0);
        prop_assert!((p0 + p1 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn predict_map_ignores_patch_order(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let model = init(&MlpArchitecture { input_dim: 4, hidden: vec![5] }, seed).unwrap();
        let data = Array2::from_shape_fn((rows * cols, 4), |(p, j)| ((p * 7 + j * 3) as f64 * 0.37).sin());
        let map = predict_map(&model, &FeatureMatrix { rows, cols, data: data.clone(), layout: vec![] }).unwrap();
        for p in (0..rows * cols).rev() {
            let [_, t] = forward(&model, data.row(p)).unwrap();
            prop_assert_eq!(map[[p / cols, p % cols]], t);
        }
        prop_assert!(map.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synth_changes_only_masked_pixels(img in image(64, 72), fg in image(70, 80), seed in any::<u64>()) {
        let removal = Rect { x: 3, y: 4, width: 20, height: 15 };
        let sample = Rect { x: 40, y: 30, width: 12, height: 12 };
        let mut outputs = synth_removal(&img, removal, sample, seed).unwrap();
        outputs.push(synth_splice(&img, &fg, seed, SpliceMode::Jpeg).unwrap());
        outputs.push(synth_splice(&img, &fg, seed, SpliceMode::Sharpen).unwrap());
        outputs.push(synth_blur(&img, seed).unwrap());
        for out in &outputs {
            for ((r, c, ch), &v) in img.data().indexed_iter() {
                if out.mask.data()[[r, c]] == 0 {
                    prop_assert_eq!(out.image.data()[[r, c, ch]], v);
                }
            }
        }
        let again = synth_splice(&img, &fg, seed, SpliceMode::Jpeg).unwrap();
        prop_assert_eq!(&again.image, &outputs[4].image);
        prop_assert_eq!(synth_blur(&img, seed).unwrap().image, outputs[6].image.clone());
        let gray = |i: &RgbImage| to_grayscale(i).into_inner();
        let m0 = gray(&outputs[0].image).slice(ndarray::s![4..19, 3..23]).mean().unwrap();
        let sd = outputs[0].record.params.sample_sd.unwrap();
        for v in &outputs[1..4] {
            let m = gray(&v.image).slice(ndarray::s![4..19, 3..23]).mean().unwrap();
            let c = v.record.params.sigma_multiplier.unwrap();
            prop_assert!((m - m0).abs() <= 5.0 * c * sd / (300f64).sqrt() + 1e-12);
        }
    }
}
