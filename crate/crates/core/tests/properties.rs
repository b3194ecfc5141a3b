use proptest::prelude::*;

use varin::codec::{downsample_blockmean, upsample_replicate, Codebook, Codec, FeatureGrid, ScaleSchedule, TokenMap, TokenPyramid};
use varin::editing::{edit_varin, edit_with_noise, ContextMode, EditConfig, LambdaKind};
use varin::inversion::{reconstruct, varin_invert, InversionKind};
use varin::metrics::{mse, psnr, ssim, RegionMask, SsimParams, PSNR_CAP};
use varin::predictor::{Execution, Predictor, PredictorParams};
use varin::rng::{standard_normal, Purpose, RngKey};

const SCALES: usize = 4;
const SIDE: usize = 8;
const LABELS: [&str; 4] = ["a red box on a lawn", "a blue box on a lawn", "", "sand"];

fn predictor(model_seed: u64) -> Predictor {
    let codec = Codec::new(Codebook::seeded(4, 64, 1).unwrap(), ScaleSchedule::dyadic(SCALES).unwrap());
    let params = PredictorParams {
        model_seed,
        ..Default::default()
    };
    Predictor::new(params, codec).unwrap()
}

fn grid(seed: u64, scale: f64) -> FeatureGrid {
    let key = RngKey::new(seed, Purpose::AUX);
    FeatureGrid::from_fn(4, SIDE, SIDE, |c, y, x| scale * standard_normal(key.at(c as u32, y as u32, x as u32))).unwrap()
}

fn random_pyramid(seed: u64) -> TokenPyramid {
    let key = RngKey::new(seed, Purpose::AUX);
    let maps = ScaleSchedule::dyadic(SCALES)
        .unwrap()
        .resolutions()
        .iter()
        .enumerate()
        .map(|(k, &(h, w))| {
            let tokens = (0..h * w).map(|i| (key.at(k as u32, 0, i as u32).raw() % 64) as u16).collect();
            TokenMap::new(h, w, tokens).unwrap()
        })
        .collect();
    TokenPyramid::new(maps)
}

fn config(start: usize, tau: f64, lambda: LambdaKind, seed: u64) -> EditConfig {
    EditConfig {
        source_label: LABELS[0].into(),
        target_label: LABELS[1].into(),
        start_scale: start,
        tau,
        lambda,
        seed,
        context: ContextMode::GeneratedPrefix,
        kind: InversionKind::Lai,
    }
}

fn mean_change(p: &Predictor, src: &FeatureGrid, tau: f64, lambda: LambdaKind) -> f64 {
    (0..32).map(|seed| edit_varin(p, src, &config(2, tau, lambda, seed)).unwrap().overall_change()).sum::<f64>() / 32.0
}

fn kind() -> impl Strategy<Value = InversionKind> {
    prop_oneof![Just(InversionKind::Lai), Just(InversionKind::Oai)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_pyramid_is_reconstructed_from_its_noise(
        pyramid_seed: u64,
        model_seed in 0u64..1000,
        label in 0usize..LABELS.len(),
        kind in kind(),
        tau in 0.0f64..8.0,
        seed: u64,
    ) {
        let p = predictor(model_seed);
        let pyramid = random_pyramid(pyramid_seed);
        let cond = p.condition(LABELS[label]);
        let noise = varin_invert(&p, &pyramid, &cond, kind, tau, seed, Execution::Serial).unwrap();
        prop_assert_eq!(reconstruct(&p, &noise, &cond).unwrap(), pyramid);
    }

    #[test]
    fn encoded_grids_are_reconstructed(grid_seed: u64, kind in kind(), tau in 0.0f64..8.0, seed: u64) {
        let p = predictor(0x5eed);
        let pyramid = p.codec().encode(&grid(grid_seed, 0.8)).unwrap();
        let cond = p.condition(LABELS[1]);
        let noise = varin_invert(&p, &pyramid, &cond, kind, tau, seed, Execution::Parallel).unwrap();
        prop_assert_eq!(reconstruct(&p, &noise, &cond).unwrap(), pyramid);
    }

    #[test]
    fn edits_keep_the_prefix(
        grid_seed: u64,
        start in 1usize..=SCALES,
        tau in 0.0f64..6.0,
        lambda in prop_oneof![Just(LambdaKind::Linear), (0.0f64..=1.0).prop_map(LambdaKind::Constant)],
        seed: u64,
    ) {
        let p = predictor(0x5eed);
        let src = grid(grid_seed, 0.8);
        let source = p.codec().encode(&src).unwrap();
        let result = edit_varin(&p, &src, &config(start, tau, lambda, seed)).unwrap();
        prop_assert_eq!(result.pyramid.prefix(start), source.prefix(start));
        prop_assert!(result.change_fraction[..start - 1].iter().all(|&f| f == 0.0));
        prop_assert!(result.lambdas[..start - 1].iter().all(Option::is_none));
        prop_assert!(result.lambdas[start - 1..].iter().all(Option::is_some));
    }

    #[test]
    fn full_lambda_under_the_inversion_prompt_reproduces_the_source(grid_seed: u64, start in 1usize..=SCALES, tau in 0.0f64..6.0, seed: u64) {
        let p = predictor(0x5eed);
        let source = p.codec().encode(&grid(grid_seed, 0.8)).unwrap();
        let cond = p.condition(LABELS[0]);
        let noise = varin_invert(&p, &source, &cond, InversionKind::Lai, tau, seed, Execution::Parallel).unwrap();
        let mut cfg = config(start, tau, LambdaKind::Constant(1.0), seed);
        cfg.target_label = cfg.source_label.clone();
        let result = edit_with_noise(&p, &source, &noise, &cfg).unwrap();
        prop_assert_eq!(result.pyramid, source);
    }

    #[test]
    fn codec_shapes_follow_the_schedule(grid_seed: u64, scale in 0.0f64..3.0) {
        let p = predictor(0x5eed);
        let codec = p.codec();
        let g = grid(grid_seed, scale);
        let pyramid = codec.encode(&g).unwrap();
        prop_assert!(pyramid.validate(&codec.schedule, codec.vocab()).is_ok());
        for k in 0..=SCALES {
            prop_assert_eq!(codec.decode_partial(pyramid.prefix(k + 1)).unwrap().shape(), g.shape());
        }
        prop_assert_eq!(codec.decode(&pyramid).unwrap(), codec.decode_partial(&pyramid.maps).unwrap());
    }

    #[test]
    fn replicate_then_blockmean_is_identity(grid_seed: u64, factor in 1usize..4) {
        let g = grid(grid_seed, 1.0);
        let up = upsample_replicate(&g, (SIDE * factor, SIDE * factor)).unwrap();
        let back = downsample_blockmean(&up, (SIDE, SIDE)).unwrap();
        for (a, b) in back.values().iter().zip(g.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn metrics_are_symmetric(a_seed: u64, b_seed: u64, peak in 0.5f64..10.0) {
        let (a, b) = (grid(a_seed, 1.0), grid(b_seed, 1.0));
        prop_assert_eq!(mse(&a, &b, None).unwrap(), mse(&b, &a, None).unwrap());
        prop_assert_eq!(psnr(&a, &b, peak, None).unwrap(), psnr(&b, &a, peak, None).unwrap());
        let params = SsimParams::fitting(SIDE, SIDE, peak);
        prop_assert!((ssim(&a, &b, params).unwrap() - ssim(&b, &a, params).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        prop_assert_eq!(psnr(&a, &a, peak, None).unwrap(), PSNR_CAP);
        prop_assert!((ssim(&a, &a, params).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn masked_metrics_partition_the_grid(a_seed: u64, b_seed: u64, cells in proptest::collection::vec(any::<bool>(), SIDE * SIDE)) {
        let (a, b) = (grid(a_seed, 1.0), grid(b_seed, 1.0));
        let empty = RegionMask::new(SIDE, SIDE, vec![false; SIDE * SIDE]).unwrap();
        prop_assert_eq!(mse(&a, &b, Some(&empty)).unwrap(), mse(&a, &b, None).unwrap());
        let mask = RegionMask::new(SIDE, SIDE, cells.clone()).unwrap();
        let inverse = RegionMask::new(SIDE, SIDE, cells.iter().map(|c| !c).collect()).unwrap();
        let (bg, fg) = (mask.background_cells(), mask.edit_cells());
        match (bg, fg) {
            (0, _) => prop_assert!(mse(&a, &b, Some(&mask)).is_err()),
            (_, 0) => prop_assert!(mse(&a, &b, Some(&inverse)).is_err()),
            _ => {
                let joined = (bg as f64 * mse(&a, &b, Some(&mask)).unwrap() + fg as f64 * mse(&a, &b, Some(&inverse)).unwrap())
                    / (SIDE * SIDE) as f64;
                prop_assert!((joined - mse(&a, &b, None).unwrap()).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn preservation_grows_with_lambda_and_tau(grid_seed: u64) {
        let p = predictor(0x5eed);
        let src = grid(grid_seed, 0.8);
        let by_lambda: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&l| mean_change(&p, &src, 4.5, LambdaKind::Constant(l))).collect();
        prop_assert!(by_lambda.windows(2).all(|w| w[1] <= w[0]), "lambda: {:?}", by_lambda);
        let by_tau: Vec<f64> = [0.0, 3.0, 6.0].iter().map(|&t| mean_change(&p, &src, t, LambdaKind::Linear)).collect();
        prop_assert!(by_tau.windows(2).all(|w| w[1] <= w[0]), "tau: {:?}", by_tau);
    }
}
