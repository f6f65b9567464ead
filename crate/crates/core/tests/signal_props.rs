use blendvoice::signal::{align_frames, mel_spectrogram, resample_audio, savgol_smooth, AudioClip};
use ndarray::Array2;
use proptest::prelude::*;

fn polynomial(t: usize, coeffs: &[[f64; 3]]) -> Array2<f64> {
    Array2::from_shape_fn((t, coeffs.len()), |(i, k)| {
        let x = i as f64 / t as f64;
        coeffs[k].iter().rev().fold(0.0, |acc, c| acc * x + c)
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn savgol_keeps_quadratics_on_interior(
        t in 5usize..60,
        coeffs in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 1..4),
    ) {
        let y = polynomial(t, &coeffs);
        let s = savgol_smooth(&y, 5, 2).unwrap();
        for i in 2..t - 2 {
            for k in 0..coeffs.len() {
                prop_assert!((s[[i, k]] - y[[i, k]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn savgol_keeps_polynomials_up_to_its_order(
        half in 1usize..5,
        order in 0usize..4,
        t in 12usize..40,
        c in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let window = 2 * half + 1;
        prop_assume!(order < window);
        let y = Array2::from_shape_fn((t, 1), |(i, _)| {
            let x = i as f64 / t as f64;
            (0..=order).map(|p| c[p] * x.powi(p as i32)).sum::<f64>()
        });
        let s = savgol_smooth(&y, window, order).unwrap();
        for i in half..t.saturating_sub(half) {
            prop_assert!((s[[i, 0]] - y[[i, 0]]).abs() < 1e-9);
        }
    }

    #[test]
    fn align_frames_endpoints_and_identity(
        f in 1usize..40,
        target in 1usize..40,
        seed in prop::collection::vec(-3.0f64..3.0, 120),
    ) {
        let x = Array2::from_shape_fn((f, 3), |(i, k)| seed[(3 * i + k) % seed.len()] + i as f64);
        let y = align_frames(&x, target);
        prop_assert_eq!(y.nrows(), target);
        prop_assert_eq!(y.row(0), x.row(0));
        if target > 1 {
            prop_assert_eq!(y.row(target - 1), x.row(f - 1));
        }
        prop_assert_eq!(align_frames(&x, f), x);
    }

    #[test]
    fn resample_at_equal_rate_is_identity(
        samples in prop::collection::vec(-1.0f64..1.0, 600..3000),
        rate in prop::sample::select(vec![8000u32, 16000, 22050, 44100]),
    ) {
        let clip = AudioClip::new(samples, rate).unwrap();
        prop_assert_eq!(&resample_audio(&clip, rate).unwrap(), &clip);
    }

    #[test]
    fn mel_of_silence_is_zero(len in 400usize..20000, n_mels in 8usize..81) {
        let clip = AudioClip::new(vec![0.0; len], 16000).unwrap();
        let mel = mel_spectrogram(&clip, n_mels, 400, 160).unwrap();
        prop_assert!(mel.frames.iter().all(|&v| v == 0.0));
        prop_assert_eq!(mel.frames.ncols(), n_mels);
    }
}
