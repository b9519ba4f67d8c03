use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tripool::featurization::{
    assemble_image_patches, assemble_temporal_patches, log_mel_fbank, split_image_patches, split_spectrogram_patches,
    AcousticPatchMode, Fbank, FbankConfig, ImageGeometry, Modality, PatchEmbed, Spectrogram, TextEmbed, VisualInput,
    SQUARE_PATCH,
};
use tripool::numerics::{ParamStore, Tape, Tensor, LOG_FLOOR};

fn oracle_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn oracle_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn sine(freq: f64, sr: u32, len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin() as f32)
        .collect()
}

proptest! {
    #[test]
    fn visual_token_count_and_round_trip(j in 1usize..5, hp in 1usize..5, wp in 1usize..5, p in 1usize..6,
                                         rgb in any::<bool>(), seed in 0u64..1000) {
        let g = ImageGeometry { count: j, height: hp * p, width: wp * p, channels: if rgb { 3 } else { 1 }, patch: p };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<f32> = (0..g.pixel_count()).map(|_| rng.random()).collect();
        let input = VisualInput::new(g, pixels).unwrap();
        let patches = split_image_patches::<f64>(&input);
        prop_assert_eq!(patches.shape(), &[j * g.height * g.width / (p * p), p * p * g.channels][..]);
        prop_assert_eq!(assemble_image_patches(&patches, g).unwrap(), input);
    }

    #[test]
    fn temporal_token_count_and_round_trip(frames in 2usize..300, bins in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..bins * frames).map(|_| rng.random()).collect();
        let spec = Spectrogram::new(values.clone(), bins, frames, 0.01).unwrap();
        let patches = split_spectrogram_patches::<f64>(&spec, AcousticPatchMode::Temporal).unwrap();
        prop_assert_eq!(patches.shape()[0], frames / 2);
        let back = assemble_temporal_patches(&patches, bins, frames, f64::NAN).unwrap();
        for f in 0..bins {
            for t in 0..2 * (frames / 2) {
                prop_assert_eq!(back[f * frames + t], values[f * frames + t]);
            }
        }
    }

    #[test]
    fn frame_count_formula(len in 200usize..40_000, sr in prop::sample::select(vec![8000u32, 16_000, 22_050, 44_100])) {
        let win = (0.025 * sr as f64).round() as usize;
        let hop = (0.010 * sr as f64).round() as usize;
        let expect = (len >= win).then(|| 1 + (len - win) / hop);
        prop_assert_eq!(FbankConfig::default().frame_count(len, sr), expect);
    }
}

#[test]
fn two_geometries_with_576_patches() {
    let nine = ImageGeometry {
        count: 9,
        height: 128,
        width: 128,
        channels: 3,
        patch: 16,
    };
    assert_eq!(nine.patch_count(), 576);
    let sixty_four = ImageGeometry {
        count: 64,
        height: 48,
        width: 48,
        channels: 3,
        patch: 16,
    };
    assert_eq!(sixty_four.patch_count(), 576);
    let bad = ImageGeometry {
        count: 1,
        height: 30,
        width: 32,
        channels: 1,
        patch: 16,
    };
    assert!(bad.validate().is_err());
}

#[test]
fn one_second_at_16k_has_98_frames() {
    let s = log_mel_fbank(&vec![0.1; 16_000], 16_000).unwrap();
    assert_eq!((s.bins, s.frames), (128, 98));
    assert!(log_mel_fbank(&[0.0; 100], 16_000).is_err());
}

#[test]
fn spectrogram_patch_counts() {
    let spec = |frames: usize| Spectrogram::new(vec![0.0; 128 * frames], 128, frames, 0.01).unwrap();
    let count = |frames, mode| split_spectrogram_patches::<f64>(&spec(frames), mode).unwrap().shape()[0];
    assert_eq!(count(1000, AcousticPatchMode::Temporal), 500);
    assert_eq!(count(2, AcousticPatchMode::Temporal), 1);
    assert_eq!(count(33, AcousticPatchMode::Square), (128 / SQUARE_PATCH) * 2);
    assert!(split_spectrogram_patches::<f64>(&spec(1), AcousticPatchMode::Temporal).is_err());
}

#[test]
pub fn thousand_hertz_sine_peaks_at_the_nearest_mel_centre() {
    for sr in [8000u32, 16_000] {
        let nyquist = sr as f64 / 2.0;
        let top = oracle_mel(nyquist);
        let centres: Vec<f64> = (1..=128).map(|i| oracle_hz(top * i as f64 / 129.0)).collect();
        let expect = centres
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (oracle_mel(*a.1) - oracle_mel(1000.0))
                    .abs()
                    .total_cmp(&(oracle_mel(*b.1) - oracle_mel(1000.0)).abs())
            })
            .unwrap()
            .0;
        let fbank = Fbank::new(FbankConfig::default(), sr).unwrap();
        for (got, want) in fbank.centers_hz().iter().zip(&centres) {
            assert!((got - want).abs() < 1e-9);
        }
        let s = fbank.compute(&sine(1000.0, sr, sr as usize)).unwrap();
        for t in 0..s.frames {
            assert_eq!(s.peak_bin(t), expect, "sr {sr} frame {t}");
        }
    }
}

#[test]
fn silence_sits_on_the_log_floor() {
    let s = log_mel_fbank(&[0.0; 8000], 8000).unwrap();
    assert!(s.values.iter().all(|&v| v == LOG_FLOOR.ln()));
}

#[test]
fn one_hop_shift_moves_frames_by_one() {
    let sr = 16_000;
    let hop = 160;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let wave: Vec<f32> = (0..sr + hop).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = log_mel_fbank(&wave[hop..], sr as u32).unwrap();
    let b = log_mel_fbank(&wave, sr as u32).unwrap();
    assert_eq!(b.frames, a.frames + 1);
    for f in 0..a.bins {
        for t in 0..a.frames {
            assert!((a.at(f, t) - b.at(f, t + 1)).abs() <= 1e-6);
        }
    }
    assert_eq!(log_mel_fbank(&wave, sr as u32).unwrap().values, b.values);
}

#[test]
fn patch_embedding_matches_loop_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, pd, d) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..7));
        let mut store = ParamStore::<f64>::new();
        let embed = PatchEmbed::new(&mut store, "e", Modality::Visual, pd, d, &mut rng);
        let b = Tensor::randn([d], 1.0, &mut rng);
        *store.get_mut(embed.bias) = b.clone();
        let x = Tensor::<f64>::randn([n, pd], 1.0, &mut rng);
        let w = store.get(embed.weight).clone();
        let mut tape = Tape::with_params(&store);
        let xv = tape.constant(x.clone());
        let out = embed.embed(&mut tape, xv).unwrap();
        assert_eq!(out.len, n);
        let got = tape.value(out.tokens);
        for i in 0..n {
            for j in 0..d {
                let mut s = b.data()[j];
                for k in 0..pd {
                    s += x.at(i, k) * w.at(k, j);
                }
                assert!((got[i * d + j] - s).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn text_embedding_reads_table_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let embed = TextEmbed::new(&mut store, "t", 10, 4, 3, &mut rng);
    let ids = [7, 7, 2];
    let mut tape = Tape::with_params(&store);
    let out = embed.embed(&mut tape, &ids).unwrap();
    let got = tape.value(out.tokens).to_vec();
    let (tok, pos, seg) = (
        store.get(embed.token),
        store.get(embed.position),
        store.get(embed.segment),
    );
    for (i, &id) in ids.iter().enumerate() {
        for j in 0..3 {
            assert_eq!(got[i * 3 + j], tok.at(id, j) + pos.at(i, j) + seg.at(0, j));
        }
    }
    assert_ne!(got[0..3], got[3..6]);
    assert!(embed.embed(&mut tape, &[10]).is_err());
    assert!(embed.embed(&mut tape, &[0; 5]).is_err());
}
