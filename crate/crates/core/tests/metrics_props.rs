use blendvoice::decoder::{BlendshapeSequence, NUM_CHANNELS};
use blendvoice::metrics::{
    beat_alignment, beat_alignment_times, blendshape_metrics, vertex_metrics, RegionConfig,
};
use blendvoice::signal::{mel_spectrogram, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WINDOW};
use blendvoice::synthdata::{generate_in_memory, CorpusSpec};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

/// Values in [lo, hi); sequences clamp to [0, 1], so perturbed tracks stay inside.
fn track(t: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, t * NUM_CHANNELS)
        .prop_map(move |v| Array2::from_shape_vec((t, NUM_CHANNELS), v).unwrap())
}

fn seq(a: Array2<f64>) -> BlendshapeSequence {
    BlendshapeSequence::new(a).unwrap()
}

fn vertex_regions(v: usize) -> RegionConfig {
    RegionConfig {
        lip_vertices: (0..v / 2).collect(),
        eye_forehead_vertices: (v / 2..v).collect(),
        upper_face_vertices: (v / 3..v).collect(),
        ..RegionConfig::default()
    }
}

fn traj(t: usize, v: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(-1.0f64..1.0, t * v * 3)
        .prop_map(move |x| Array3::from_shape_vec((t, v, 3), x).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blendshape_errors_vanish_iff_region_matches(
        gt in track(6, 0.25, 0.75),
        k in 0usize..NUM_CHANNELS,
        f in 0usize..6,
        d in 0.01f64..0.25,
    ) {
        let regions = RegionConfig::default();
        let same = blendshape_metrics(&seq(gt.clone()), &seq(gt.clone()), &regions).unwrap();
        prop_assert_eq!((same.lbe, same.pbe, same.mbe), (0.0, 0.0, 0.0));

        let mut pred = gt.clone();
        pred[[f, k]] += d;
        let m = blendshape_metrics(&seq(pred), &seq(gt), &regions).unwrap();
        prop_assert!(m.mbe > 0.0);
        prop_assert_eq!(m.lbe > 0.0, regions.lip_channels.contains(&k));
        prop_assert_eq!(m.pbe > 0.0, regions.pronunciation_channels.contains(&k));
    }

    #[test]
    fn blendshape_errors_scale_linearly(gt in track(5, 0.25, 0.75), e in track(5, -0.25, 0.25), s in 0.0f64..1.0) {
        let regions = RegionConfig::default();
        let base = blendshape_metrics(&seq(&gt + &e), &seq(gt.clone()), &regions).unwrap();
        let scaled = blendshape_metrics(&seq(&gt + &(&e * s)), &seq(gt), &regions).unwrap();
        prop_assert!((scaled.lbe - s * base.lbe).abs() <= 1e-9 * (1.0 + s));
        prop_assert!((scaled.pbe - s * base.pbe).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn mbe_bounds_every_channel_mean(pred in track(7, 0.0, 1.0), gt in track(7, 0.0, 1.0)) {
        let m = blendshape_metrics(&seq(pred.clone()), &seq(gt.clone()), &RegionConfig::default()).unwrap();
        for k in 0..NUM_CHANNELS {
            let mean = (0..7).map(|t| (pred[[t, k]] - gt[[t, k]]).abs()).sum::<f64>() / 7.0;
            prop_assert!(m.mbe >= mean - 1e-12, "channel {k}: {} < {mean}", m.mbe);
        }
    }

    #[test]
    fn vertex_errors_vanish_iff_region_matches(
        gt in traj(4, 9),
        v in 0usize..9,
        f in 0usize..4,
        d in 0.01f64..0.5,
    ) {
        let regions = vertex_regions(9);
        let same = vertex_metrics(&gt, &gt, &regions).unwrap();
        prop_assert_eq!((same.lve, same.eve, same.fdd), (0.0, 0.0, 0.0));

        let mut pred = gt.clone();
        pred[[f, v, 0]] += d;
        let m = vertex_metrics(&pred, &gt, &regions).unwrap();
        prop_assert_eq!(m.lve > 0.0, regions.lip_vertices.contains(&v));
        prop_assert_eq!(m.eve > 0.0, regions.eye_forehead_vertices.contains(&v));
    }

    #[test]
    fn vertex_errors_scale_linearly(gt in traj(4, 8), e in traj(4, 8), s in 0.0f64..4.0) {
        let regions = vertex_regions(8);
        let base = vertex_metrics(&(&gt + &e), &gt, &regions).unwrap();
        let scaled = vertex_metrics(&(&gt + &(&e * s)), &gt, &regions).unwrap();
        prop_assert!((scaled.lve - s * base.lve).abs() <= 1e-9 * (1.0 + s));
        prop_assert!((scaled.eve - s * base.eve).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn ba_in_unit_interval_and_ignores_far_motion(
        audio in prop::collection::vec(0.0f64..5.0, 1..12),
        motion in prop::collection::vec(0.0f64..5.0, 1..12),
        far in prop::collection::vec(0.0f64..5.0, 0..6),
        sigma in 0.02f64..0.3,
    ) {
        let ba = beat_alignment_times(&audio, &motion, sigma).unwrap();
        prop_assert!(ba > 0.0 && ba <= 1.0);
        // Beyond 10 sigma of every audio beat.
        let offset = 5.0 + 10.0 * sigma + 1e-6;
        let mut more = motion.clone();
        more.extend(far.iter().map(|x| x + offset));
        prop_assert_eq!(beat_alignment_times(&audio, &more, sigma).unwrap(), ba);
    }
}

/// Beat alignment recomputed from scratch on top of the shared mel front end.
fn scripted_ba(
    samples_per_frame: usize,
    sr: f64,
    mel: &Array2<f64>,
    motion: &Array2<f64>,
    lip: &[usize],
    sigma: f64,
) -> Option<f64> {
    let n = mel.nrows();
    let mut flux = vec![0.0; n];
    for f in 1..n {
        for b in 0..mel.ncols() {
            let d = mel[[f, b]] - mel[[f - 1, b]];
            if d > 0.0 {
                flux[f] += d;
            }
        }
    }
    let mean = flux.iter().sum::<f64>() / n as f64;
    let mut audio = Vec::new();
    for f in 0..n {
        let mut is_peak = flux[f] > mean;
        for j in f.saturating_sub(5)..f {
            is_peak &= flux[j] < flux[f];
        }
        for j in f + 1..(f + 6).min(n) {
            is_peak &= flux[j] <= flux[f];
        }
        if is_peak {
            audio.push((f * DEFAULT_HOP) as f64 / sr + DEFAULT_HOP as f64 / (2.0 * sr));
        }
    }
    if audio.is_empty() {
        return None;
    }

    let t = motion.nrows();
    let mut speed = vec![0.0; t];
    for i in 0..t {
        let (a, b, h) = if i == 0 {
            (0, 1, 1.0)
        } else if i == t - 1 {
            (t - 2, t - 1, 1.0)
        } else {
            (i - 1, i + 1, 2.0)
        };
        let mut s2 = 0.0;
        for &k in lip {
            let d = (motion[[b, k]] - motion[[a, k]]) / h;
            s2 += d * d;
        }
        speed[i] = s2.sqrt();
    }
    let mut beats = Vec::new();
    for i in 1..t - 1 {
        if speed[i] < speed[i - 1] && speed[i] <= speed[i + 1] {
            beats.push((i as f64 + 0.5) * samples_per_frame as f64 / sr);
        }
    }

    let mut total = 0.0;
    for a in &audio {
        let mut best = f64::INFINITY;
        for m in &beats {
            best = best.min((a - m).powi(2));
        }
        total += (-best / (2.0 * sigma * sigma)).exp();
    }
    Some(total / audio.len() as f64)
}

#[test]
fn ba_matches_scripted_reimplementation_on_corpus_clips() {
    let spec = CorpusSpec {
        speakers: 2,
        emotions: 2,
        clips_per_pair: 2,
        min_frames: 45,
        max_frames: 75,
        seed: 19,
        ..CorpusSpec::default()
    };
    let regions = RegionConfig::default();
    let mut compared = 0;
    for (r, clip) in generate_in_memory(&spec).unwrap() {
        let got = beat_alignment(&clip.audio, &clip.blendshapes, &regions).unwrap();
        let mel =
            mel_spectrogram(&clip.audio, DEFAULT_N_MELS, DEFAULT_WINDOW, DEFAULT_HOP).unwrap();
        let want = scripted_ba(
            clip.audio.samples_per_frame(),
            clip.audio.sample_rate() as f64,
            &mel.frames,
            clip.blendshapes.coeffs(),
            &regions.lip_channels,
            regions.ba_sigma,
        );
        match (got, want) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() <= 1e-9, "{}: {a} vs {b}", r.clip_id);
                assert!(a > 0.0 && a <= 1.0);
                compared += 1;
            }
            (None, None) => {}
            other => panic!("{}: {other:?}", r.clip_id),
        }
    }
    assert!(compared >= 6, "only {compared} clips had audio beats");
}
