use super::*;
use crate::rng::SeedRng;

fn tone(freq: f64, secs: f64, amp: f32, sample_rate: u32) -> Waveform {
    let n = (secs * sample_rate as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            amp * libm::sin(2.0 * core::f64::consts::PI * freq * t) as f32
        })
        .collect();
    Waveform::new(samples, sample_rate)
}

/// Random mixtures of two tones, mimicking the synthetic corpus distribution.
fn corpus_frames(rng: &mut SeedRng, count: usize, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let f1 = rng.range_f32(2.0, 10.0);
        let f2 = rng.range_f32(10.0, 30.0);
        let a2 = rng.range_f32(0.0, 0.8);
        let phase = rng.range_f32(0.0, 6.28);
        let mut frame: Vec<f32> = (0..dim)
            .map(|i| {
                let t = i as f32 / dim as f32;
                libm::sinf(6.2832 * f1 * t + phase) + a2 * libm::sinf(6.2832 * f2 * t)
            })
            .collect();
        let mean = frame.iter().sum::<f32>() / dim as f32;
        let rms = libm::sqrtf(frame.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / dim as f32);
        for v in frame.iter_mut() {
            *v = (*v - mean) / rms;
        }
        out.extend_from_slice(&frame);
    }
    out
}

#[test]
fn two_seconds_at_50hz_gives_100_frames() {
    let w = tone(440.0, 2.0, 0.5, 16_000);
    let framed = frame_features(&w, 50).unwrap();
    assert_eq!(framed.frames(), 100);
    assert_eq!(framed.frame_len, 320);
}

#[test]
fn silent_waveform_gives_zero_features_and_scales() {
    let w = Waveform::new(alloc::vec![0.0; 16_000], 16_000);
    let framed = frame_features(&w, 50).unwrap();
    assert!(framed.features.iter().all(|&v| v == 0.0));
    assert!(framed.scales.iter().all(|&s| s == 0.0));
}

#[test]
fn waveform_shorter_than_one_frame_is_rejected() {
    let w = Waveform::new(alloc::vec![0.1; 100], 16_000);
    assert!(matches!(
        frame_features(&w, 50),
        Err(CodecError::TooShort { .. })
    ));
}

#[test]
fn normalized_frames_have_unit_rms_and_zero_mean() {
    let w = tone(523.0, 0.5, 0.4, 16_000);
    let framed = frame_features(&w, 50).unwrap();
    for i in 0..framed.frames() {
        let f = framed.frame(i);
        let mean = f.iter().sum::<f32>() / f.len() as f32;
        let rms = libm::sqrtf(f.iter().map(|&v| v * v).sum::<f32>() / f.len() as f32);
        assert!(mean.abs() < 1e-5);
        assert!((rms - 1.0).abs() < 1e-4);
    }
}

#[test]
fn fewer_frames_than_k_is_a_training_error() {
    let mut rng = SeedRng::new(1);
    let frames = corpus_frames(&mut rng, 10, 16);
    let config = RvqConfig {
        n_q: 2,
        k: 64,
        iterations: 5,
        sample_rate: 16_000,
        frame_rate: 1_000,
    };
    assert!(matches!(
        train_rvq(&frames, 16, &config, 3),
        Err(CodecError::TooFewFrames { .. })
    ));
}

#[test]
fn paper_scale_config_is_accepted() {
    let config = RvqConfig {
        n_q: 8,
        k: 1024,
        ..RvqConfig::default()
    };
    assert_eq!(config.n_q, 8);
    assert_eq!(config.k, 1024);
    // Desk default stays small.
    let desk = RvqConfig::default();
    assert_eq!((desk.n_q, desk.k, desk.frame_rate), (4, 64, 50));
}

#[test]
fn centroid_frame_is_exactly_representable() {
    let mut rng = SeedRng::new(2);
    let dim = 16;
    let frames = corpus_frames(&mut rng, 128, dim);
    let config = RvqConfig {
        n_q: 3,
        k: 8,
        iterations: 12,
        sample_rate: 16_000,
        frame_rate: 1_000,
    };
    let set = train_rvq(&frames, dim, &config, 11).unwrap();
    // Feed a frame that IS a stage-1 centroid.
    let target_code = 5usize;
    let framed = FramedClip {
        frame_len: dim,
        frame_rate: 1_000,
        features: set.centroid(0, target_code).to_vec(),
        scales: alloc::vec![0.2],
    };
    let enc = encode_frames(&framed, &set).unwrap();
    assert_eq!(enc.grid.get(0, 0) as usize, target_code);
    // Residual entering stage 2 is zero, so later stages pick the pinned
    // zero centroid and reconstruction is exact.
    let energies = residual_energies(&framed, &set);
    assert_eq!(energies[0][1], 0.0);
    let recon = decode(&enc.grid, &set, Some(&enc.scales), None).unwrap();
    for (a, b) in recon.samples.iter().zip(framed.features.iter()) {
        assert!((a - b * 0.2).abs() < 1e-7);
    }
}

#[test]
fn duration_maps_to_frame_count() {
    let mut rng = SeedRng::new(3);
    let dim = 320;
    let train = corpus_frames(&mut rng, 200, dim);
    let config = RvqConfig {
        n_q: 4,
        k: 16,
        iterations: 10,
        sample_rate: 16_000,
        frame_rate: 50,
    };
    let set = train_rvq(&train, dim, &config, 5).unwrap();
    let w = tone(330.0, 1.5, 0.5, 16_000);
    let enc = encode(&w, &set).unwrap();
    assert_eq!(enc.grid.len(), 75); // d * f_r = 1.5 * 50
}

#[test]
fn encode_decode_encode_is_idempotent_on_codes() {
    let mut rng = SeedRng::new(3);
    let dim = 320;
    let train = corpus_frames(&mut rng, 200, dim);
    let config = RvqConfig {
        n_q: 4,
        k: 16,
        iterations: 10,
        sample_rate: 16_000,
        frame_rate: 50,
    };
    let set = train_rvq(&train, dim, &config, 5).unwrap();
    // Fixture whose frames are scaled stage-1 centroids: every frame is
    // exactly representable, so the code grid must be a fixed point.
    let mut samples = Vec::new();
    for f in 0..40 {
        let code = (f * 7) % config.k;
        let scale = 0.05 + 0.005 * f as f32;
        samples.extend(set.centroid(0, code).iter().map(|&v| v * scale));
    }
    let fixture = Waveform::new(samples, 16_000);
    let enc = encode(&fixture, &set).unwrap();
    let recon = decode(&enc.grid, &set, Some(&enc.scales), None).unwrap();
    let enc2 = encode(&recon, &set).unwrap();
    assert_eq!(enc.grid, enc2.grid);
    let recon2 = decode(&enc2.grid, &set, Some(&enc2.scales), None).unwrap();
    let enc3 = encode(&recon2, &set).unwrap();
    assert_eq!(enc2.grid, enc3.grid);
}

#[test]
fn k_distinct_unit_frames_quantize_with_zero_error() {
    // Balanced +-1 patterns: zero mean, exactly unit RMS.
    let dim = 8;
    let k = 4;
    let patterns: [[f32; 8]; 4] = [
        [1., 1., 1., 1., -1., -1., -1., -1.],
        [1., -1., 1., -1., 1., -1., 1., -1.],
        [1., 1., -1., -1., 1., 1., -1., -1.],
        [1., -1., -1., 1., 1., -1., -1., 1.],
    ];
    let mut frames = Vec::new();
    for rep in 0..4 {
        for p in &patterns {
            let _ = rep;
            frames.extend_from_slice(p);
        }
    }
    let config = RvqConfig {
        n_q: 1,
        k,
        iterations: 10,
        sample_rate: 16_000,
        frame_rate: 2_000,
    };
    let set = train_rvq(&frames, dim, &config, 17).unwrap();
    let framed = FramedClip {
        frame_len: dim,
        frame_rate: 2_000,
        features: patterns.iter().flatten().copied().collect(),
        scales: alloc::vec![1.0; k],
    };
    let energies = residual_energies(&framed, &set);
    for e in &energies {
        assert_eq!(e[1], 0.0, "quantization error should be exactly zero");
    }
}

#[test]
fn residual_energy_non_increasing_per_frame_and_on_average() {
    let mut rng = SeedRng::new(4);
    let dim = 32;
    let train = corpus_frames(&mut rng, 600, dim);
    let held_out = corpus_frames(&mut rng, 200, dim);
    let config = RvqConfig {
        n_q: 4,
        k: 16,
        iterations: 15,
        sample_rate: 16_000,
        frame_rate: 500,
    };
    let set = train_rvq(&train, dim, &config, 9).unwrap();
    let framed = FramedClip {
        frame_len: dim,
        frame_rate: 500,
        features: held_out,
        scales: alloc::vec![1.0; 200],
    };
    let energies = residual_energies(&framed, &set);
    let mut means = alloc::vec![0.0f64; config.n_q + 1];
    for frame in &energies {
        // Stages >= 2 are pinned with a zero centroid, so monotonicity holds
        // frame by frame from stage 1 onward.
        for s in 1..config.n_q {
            assert!(
                frame[s + 1] <= frame[s] + 1e-9,
                "stage {s} residual grew: {} -> {}",
                frame[s],
                frame[s + 1]
            );
        }
        for (m, &e) in means.iter_mut().zip(frame.iter()) {
            *m += e;
        }
    }
    for s in 0..config.n_q {
        assert!(means[s + 1] <= means[s], "mean residual grew at stage {s}");
    }
}

#[test]
fn decode_mse_non_increasing_in_stage_count() {
    let mut rng = SeedRng::new(6);
    let dim = 32;
    let train = corpus_frames(&mut rng, 500, dim);
    let held = corpus_frames(&mut rng, 100, dim);
    let config = RvqConfig {
        n_q: 4,
        k: 16,
        iterations: 15,
        sample_rate: 16_000,
        frame_rate: 500,
    };
    let set = train_rvq(&train, dim, &config, 13).unwrap();
    let framed = FramedClip {
        frame_len: dim,
        frame_rate: 500,
        features: held,
        scales: alloc::vec![1.0; 100],
    };
    let mut prev = f64::INFINITY;
    for stages in 1..=config.n_q {
        let mse = reconstruction_mse(&framed, &set, stages);
        assert!(mse <= prev + 1e-12);
        prev = mse;
    }
}

#[test]
fn empty_grid_decodes_to_empty_waveform() {
    let mut rng = SeedRng::new(7);
    let dim = 16;
    let train = corpus_frames(&mut rng, 64, dim);
    let config = RvqConfig {
        n_q: 2,
        k: 4,
        iterations: 5,
        sample_rate: 16_000,
        frame_rate: 1_000,
    };
    let set = train_rvq(&train, dim, &config, 2).unwrap();
    let grid = TokenGrid::new(2, 0, 4, 1_000, alloc::vec![]).unwrap();
    let w = decode(&grid, &set, None, None).unwrap();
    assert!(w.samples.is_empty());
}

#[test]
fn encode_is_deterministic() {
    let mut rng = SeedRng::new(8);
    let dim = 320;
    let train = corpus_frames(&mut rng, 150, dim);
    let config = RvqConfig {
        n_q: 2,
        k: 8,
        iterations: 8,
        sample_rate: 16_000,
        frame_rate: 50,
    };
    let set = train_rvq(&train, dim, &config, 21).unwrap();
    let w = tone(261.0, 1.0, 0.3, 16_000);
    let a = encode(&w, &set).unwrap();
    let b = encode(&w, &set).unwrap();
    assert_eq!(a, b);
}

#[test]
fn token_grid_rejects_out_of_range_codes() {
    assert!(TokenGrid::new(2, 2, 4, 50, alloc::vec![0, 1, 2, 4]).is_err());
    let g = TokenGrid::new(2, 2, 4, 50, alloc::vec![0, 1, 2, 3]).unwrap();
    assert_eq!(g.column(1), alloc::vec![1, 3]);
}

#[test]
fn mix_clips_and_sums() {
    let a = Waveform::new(alloc::vec![0.8, -0.5], 16_000);
    let b = Waveform::new(alloc::vec![0.5, -0.9], 16_000);
    let m = a.mix(&b);
    assert_eq!(m.samples, alloc::vec![1.0, -1.0]);
}
