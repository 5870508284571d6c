//! Property tests against brute-force oracles.

use fer_core::augment::{augment, AugmentConfig};
use fer_core::dataset::{parse_fer_csv, split, write_fer_csv, LabeledImage};
use fer_core::gate::{sad, GateState, SceneType};
use fer_core::imgproc::{flip_horizontal, gaussian3x3, GrayImage};
use fer_core::metrics::ConfusionMatrix;
use fer_core::nn;
use fer_core::pgm::{decode_pgm, encode_pgm};
use fer_core::{EmotionLabel, FerError, RngState, Tensor};
use proptest::prelude::*;

fn gray(max_side: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<u8>(), w * h)
            .prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

fn face() -> impl Strategy<Value = GrayImage> {
    proptest::collection::vec(any::<u8>(), 48 * 48).prop_map(|px| GrayImage::new(48, 48, px).unwrap())
}

/// Direct sum over the padded neighbourhood.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, ks) = (k.shape()[0], k.shape()[2]);
    let pad = (ks / 2) as isize;
    Tensor::from_fn(&[c_out, h, w], |i| {
        let (co, y, xx) = (i / (h * w), (i / w) % h, i % w);
        let mut s = b.data()[co];
        for ci in 0..c_in {
            for ki in 0..ks {
                for kj in 0..ks {
                    let (sy, sx) = (y as isize + ki as isize - pad, xx as isize + kj as isize - pad);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        s += k.data()[((co * c_in + ci) * ks + ki) * ks + kj]
                            * x.data()[(ci * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        s
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_sum(seed in any::<u64>(), c_in in 1usize..3, c_out in 1usize..3,
                               h in 1usize..7, w in 1usize..7, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = RngState::new(seed);
        let x = Tensor::from_fn(&[c_in, h, w], |_| rng.normal());
        let kern = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.normal());
        let b = Tensor::from_fn(&[c_out], |_| rng.normal());
        let y = nn::conv2d_forward(&x, &kern, &b).unwrap();
        let oracle = conv_oracle(&x, &kern, &b);
        for (a, o) in y.data().iter().zip(oracle.data()) {
            prop_assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = RngState::new(seed);
        let x1 = Tensor::from_fn(&[2, 5, 5], |_| rng.normal());
        let x2 = Tensor::from_fn(&[2, 5, 5], |_| rng.normal());
        let kern = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.normal());
        let zero = Tensor::zeros(&[3]);
        let mixed = x1.zip_map(&x2, |a, b| alpha * a + b).unwrap();
        let lhs = nn::conv2d_forward(&mixed, &kern, &zero).unwrap();
        let y1 = nn::conv2d_forward(&x1, &kern, &zero).unwrap();
        let y2 = nn::conv2d_forward(&x2, &kern, &zero).unwrap();
        let rhs = y1.zip_map(&y2, |a, b| alpha * a + b).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn centred_delta_kernel_is_identity(seed in any::<u64>(), h in 1usize..8, w in 1usize..8) {
        let mut rng = RngState::new(seed);
        let x = Tensor::from_fn(&[1, h, w], |_| rng.normal());
        let kern = Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 });
        let y = nn::conv2d_forward(&x, &kern, &Tensor::zeros(&[1])).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn maxpool_matches_brute_force(seed in any::<u64>(), c in 1usize..3, h in 1usize..9, w in 1usize..9) {
        let mut rng = RngState::new(seed);
        let x = Tensor::from_fn(&[c, h, w], |_| rng.normal());
        let result = nn::maxpool2x2_forward(&x);
        if h < 2 || w < 2 {
            prop_assert!(result.is_err());
            return Ok(());
        }
        let (y, _) = result.unwrap();
        let (oh, ow) = (h / 2, w / 2);
        prop_assert_eq!(y.shape(), &[c, oh, ow]);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let window = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(di, dj)| x.data()[(ch * h + 2 * i + di) * w + 2 * j + dj]);
                    let m = window.into_iter().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(y.data()[(ch * oh + i) * ow + j], m);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), b in 1usize..6, scale in 0.1f64..50.0) {
        let mut rng = RngState::new(seed);
        let logits = Tensor::from_fn(&[b, 7], |_| scale * rng.normal());
        let p = nn::softmax(&logits).unwrap();
        for row in p.data().chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let labels: Vec<usize> = (0..b).map(|i| i % 7).collect();
        let (loss, _) = nn::softmax_cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 10usize..80, seed in any::<u64>()) {
        let data: Vec<LabeledImage> = (0..n)
            .map(|i| {
                // encode the sample index in the first two pixels
                let mut img = GrayImage::filled(48, 48, 0);
                img.set(0, 0, (i / 256) as u8);
                img.set(1, 0, (i % 256) as u8);
                LabeledImage::new(img, EmotionLabel::from_index(i % 7).unwrap()).unwrap()
            })
            .collect();
        let s = split(data, (8, 1, 1), seed).unwrap();
        prop_assert_eq!(s.train.len(), n * 8 / 10);
        prop_assert_eq!(s.validate.len(), n / 10);
        prop_assert_eq!(s.test.len(), n - n * 8 / 10 - n / 10);
        let mut ids: Vec<usize> = s.train.iter().chain(&s.validate).chain(&s.test)
            .map(|d| d.image.get(0, 0) as usize * 256 + d.image.get(1, 0) as usize)
            .collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_keeps_shape_and_range(img in face(), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let out = augment(&img, &cfg, &mut RngState::new(seed));
        prop_assert_eq!((out.width(), out.height()), (48, 48));
        let again = augment(&img, &cfg, &mut RngState::new(seed));
        prop_assert_eq!(out, again);
    }

    #[test]
    fn identity_augmentation_is_noop(img in face(), seed in any::<u64>()) {
        let out = augment(&img, &AugmentConfig::identity(), &mut RngState::new(seed));
        prop_assert_eq!(out, img);
    }

    #[test]
    fn gaussian_commutes_with_flip(img in gray(12)) {
        prop_assert_eq!(gaussian3x3(&flip_horizontal(&img)), flip_horizontal(&gaussian3x3(&img)));
    }

    #[test]
    fn gaussian_keeps_constant_images(w in 1usize..10, h in 1usize..10, v in any::<u8>()) {
        let img = GrayImage::filled(w, h, v);
        prop_assert_eq!(gaussian3x3(&img), img);
    }

    #[test]
    fn sad_is_a_metric(a in gray(6), seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let b = GrayImage::from_fn(a.width(), a.height(), |_, _| rng.below(256) as u8);
        prop_assert_eq!(sad(&a, &a).unwrap(), 0);
        prop_assert_eq!(sad(&a, &b).unwrap(), sad(&b, &a).unwrap());
        let brute: u64 = a.pixels().iter().zip(b.pixels())
            .map(|(&x, &y)| (x as i64 - y as i64).unsigned_abs()).sum();
        prop_assert_eq!(sad(&a, &b).unwrap(), brute);
    }

    #[test]
    fn gate_invokes_once_per_change(values in proptest::collection::vec(0u8..4, 1..40), tau in 0.0f64..3.0) {
        // frames are constant images; SAD is 16·|difference|
        let frames: Vec<GrayImage> = values.iter().map(|&v| GrayImage::filled(4, 4, v * 40)).collect();
        let thr = tau * 16.0;
        let mut gate = GateState::new(thr).unwrap();
        let mut calls = 0u64;
        let mut expected = 1u64;
        for (t, f) in frames.iter().enumerate() {
            let d = gate.step(f, |_| -> Result<_, FerError> { calls += 1; Ok(EmotionLabel::Happy) }).unwrap();
            if t > 0 {
                let s = sad(f, &frames[t - 1]).unwrap();
                prop_assert_eq!(d.sad, Some(s));
                let change = s as f64 > thr;
                expected += change as u64;
                prop_assert_eq!(d.scene == SceneType::Change, change);
                prop_assert_eq!(d.model_invoked, change);
            } else {
                prop_assert!(d.model_invoked);
            }
        }
        prop_assert_eq!(calls, expected);
        prop_assert_eq!(gate.invocations(), expected);
        prop_assert_eq!(gate.frames_seen(), frames.len() as u64);
    }

    #[test]
    fn gate_degenerate_thresholds(values in proptest::collection::vec(any::<u8>(), 1..30)) {
        let frames: Vec<GrayImage> = values.iter().map(|&v| GrayImage::filled(3, 3, v)).collect();
        let mut never = GateState::new(f64::INFINITY).unwrap();
        let mut zero = GateState::new(0.0).unwrap();
        for f in &frames {
            never.step(f, |_| -> Result<_, FerError> { Ok(EmotionLabel::Sad) }).unwrap();
            zero.step(f, |_| -> Result<_, FerError> { Ok(EmotionLabel::Sad) }).unwrap();
        }
        prop_assert_eq!(never.invocations(), 1);
        let changes = values.windows(2).filter(|w| w[0] != w[1]).count() as u64;
        prop_assert_eq!(zero.invocations(), 1 + changes);
    }

    #[test]
    fn metrics_invariants(rows in proptest::collection::vec(proptest::collection::vec(0u64..20, 4), 4)) {
        let m = ConfusionMatrix::from_rows(&rows).unwrap();
        let total = m.total();
        prop_assume!(total > 0);
        // accuracy is the support-weighted mean recall
        let weighted: f64 = (0..4)
            .filter_map(|i| m.recall(i).map(|r| r * m.row_sum(i) as f64 / total as f64))
            .sum();
        prop_assert!((weighted - m.accuracy().unwrap()).abs() < 1e-12);
        for i in 0..4 {
            prop_assert_eq!(m.recall(i).is_none(), m.row_sum(i) == 0);
            prop_assert_eq!(m.precision(i).is_none(), m.column_sum(i) == 0);
        }

        // relabelling classes permutes the per-class metrics
        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![vec![0u64; 4]; 4];
        for a in 0..4 {
            for p in 0..4 {
                permuted[perm[a]][perm[p]] = rows[a][p];
            }
        }
        let pm = ConfusionMatrix::from_rows(&permuted).unwrap();
        prop_assert_eq!(pm.accuracy().unwrap(), m.accuracy().unwrap());
        for i in 0..4 {
            prop_assert_eq!(pm.recall(perm[i]), m.recall(i));
            prop_assert_eq!(pm.precision(perm[i]), m.precision(i));
        }

        // recall depends only on its row, precision only on its column
        let mut bumped = rows.clone();
        bumped[0][1] += 5;
        let bm = ConfusionMatrix::from_rows(&bumped).unwrap();
        for i in 1..4 {
            prop_assert_eq!(bm.recall(i), m.recall(i));
        }
        for i in [0usize, 2, 3] {
            prop_assert_eq!(bm.precision(i), m.precision(i));
        }
    }

    #[test]
    fn fer_csv_round_trips(pixels in proptest::collection::vec(face(), 1..4), labels in proptest::collection::vec(0usize..7, 4)) {
        let data: Vec<LabeledImage> = pixels.into_iter().zip(&labels)
            .map(|(img, &l)| LabeledImage { image: img, label: EmotionLabel::from_index(l).unwrap(), usage: Some("PublicTest".into()) })
            .collect();
        let mut buf = Vec::new();
        write_fer_csv(&mut buf, &data).unwrap();
        let back = parse_fer_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn pgm_round_trips(img in gray(20)) {
        prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }
}
