use proptest::prelude::*;

use uie::formation::{reconstruct_revised, ComponentSet};
use uie::gbl::{estimate_background_light_detailed, LIGHT_MAX, LIGHT_MIN};
use uie::io::{decode_ppm, encode_ppm, quantize, resize_bilinear};
use uie::losses::{edge_loss, l2_loss, ssim_index};
use uie::metrics::{cumulative_histogram, uciqe, uiqm_parts, Histogram};
use uie::ssm::{scan_chunked, scan_recurrent, SsmParams, StateMatrix};
use uie::ImageTensor;

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |d| ImageTensor::new(h, w, d).unwrap())
}

fn sized_image(max: usize) -> impl Strategy<Value = ImageTensor> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| image(h, w))
}

fn rotate_180(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    ImageTensor::from_fn(h, w, |c, y, x| img.get(c, h - 1 - y, w - 1 - x)).unwrap()
}

fn reverse_pixels(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    ImageTensor::from_fn(h, w, |c, y, x| img.channel(c)[n - 1 - (y * w + x)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_scan_matches_recurrence(
        modes in prop::collection::vec((-3.0f64..-0.01, -1.0f64..1.0, -1.0f64..1.0), 1..6),
        x in prop::collection::vec(-1.0f64..1.0, 1..80),
        chunk in 1usize..90,
        delta in 0.01f64..1.0,
    ) {
        let a = modes.iter().map(|m| m.0).collect();
        let b = modes.iter().map(|m| m.1).collect();
        let c = modes.iter().map(|m| m.2).collect();
        let sys = SsmParams::new(StateMatrix::Diagonal(a), b, c, 0.3, delta).unwrap().discretize().unwrap();
        let r = scan_recurrent(&sys, &x);
        let k = scan_chunked(&sys, &x, chunk);
        for (p, q) in r.iter().zip(&k) {
            prop_assert!((p - q).abs() <= 1e-10);
        }
    }

    #[test]
    fn pairwise_losses_are_symmetric(a in image(12, 13), b in image(12, 13)) {
        prop_assert_eq!(l2_loss(&a, &b).unwrap(), l2_loss(&b, &a).unwrap());
        let (s1, s2) = (ssim_index(&a, &b).unwrap(), ssim_index(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() <= 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12);
    }

    #[test]
    fn edge_loss_of_identical_images_is_eps(a in sized_image(10), eps in 1e-6f64..1e-2) {
        prop_assert_eq!(edge_loss(&a, &a, eps).unwrap(), eps);
    }

    #[test]
    fn histogram_counts_every_pixel(a in sized_image(9), b in sized_image(9)) {
        let merged = cumulative_histogram(&[a.clone(), b.clone()]).unwrap();
        let mut sum = Histogram::of(&a);
        sum.merge(&Histogram::of(&b));
        prop_assert_eq!(&merged, &sum);
        let n = (a.pixels() + b.pixels()) as u64;
        prop_assert_eq!(merged.totals(), [n; 3]);
        let mut oracle = [[0u64; 256]; 3];
        for img in [&a, &b] {
            for c in 0..3 {
                for v in img.channel(c) {
                    oracle[c][(v * 255.0).round() as usize] += 1;
                }
            }
        }
        prop_assert_eq!(merged.counts, oracle);
    }

    // With dimensions that are multiples of the block size the block grid
    // maps onto itself under a half turn, and the wrapped Sobel magnitude
    // is unchanged.
    #[test]
    fn uiqm_is_invariant_under_half_turn(img in image(16, 24)) {
        let p = uiqm_parts(&img, 8).unwrap();
        let q = uiqm_parts(&rotate_180(&img), 8).unwrap();
        prop_assert!((p.uicm - q.uicm).abs() <= 1e-9);
        prop_assert!((p.uism - q.uism).abs() <= 1e-9);
        prop_assert!((p.uiconm - q.uiconm).abs() <= 1e-9);
    }

    #[test]
    fn pixel_order_does_not_change_uciqe_or_colorfulness(img in image(16, 16)) {
        let r = reverse_pixels(&img);
        prop_assert!((uciqe(&img) - uciqe(&r)).abs() <= 1e-9);
        let (p, q) = (uiqm_parts(&img, 8).unwrap(), uiqm_parts(&r, 8).unwrap());
        prop_assert!((p.uicm - q.uicm).abs() <= 1e-9);
        let (la, lb) = (
            estimate_background_light_detailed(&img).unwrap(),
            estimate_background_light_detailed(&r).unwrap(),
        );
        prop_assert_eq!(la.clamped, lb.clamped);
    }

    #[test]
    fn background_light_stays_in_bounds(img in (4usize..12, 4usize..12).prop_flat_map(|(h, w)| image(h, w))) {
        let est = estimate_background_light_detailed(&img).unwrap();
        prop_assert!(est.clamped.iter().all(|v| (LIGHT_MIN..=LIGHT_MAX).contains(v)));
    }

    #[test]
    fn ppm_round_trip_is_exact_after_quantization(img in sized_image(7)) {
        let q = ImageTensor::new(
            img.height(),
            img.width(),
            img.data().iter().map(|&v| quantize(v) as f64 / 255.0).collect(),
        )
        .unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), q);
    }

    #[test]
    fn resize_to_own_size_is_identity(img in sized_image(9)) {
        let r = resize_bilinear(&img, img.height(), img.width()).unwrap();
        for (p, q) in r.data().iter().zip(img.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_stays_within_input_range(img in sized_image(6), h in 1usize..12, w in 1usize..12) {
        let r = resize_bilinear(&img, h, w).unwrap();
        for c in 0..3 {
            let lo = img.channel(c).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.channel(c).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.channel(c).iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }

    #[test]
    fn opaque_water_shows_only_background_light(j in image(5, 6), a in prop::array::uniform3(0.0f64..=1.0)) {
        let zero = ImageTensor::uniform(5, 6, [0.0; 3]).unwrap();
        let r = reconstruct_revised(&ComponentSet { j, t_d: zero.clone(), t_b: zero, a }).unwrap();
        for c in 0..3 {
            prop_assert!(r.image.channel(c).iter().all(|v| *v == a[c]));
        }
    }
}
