use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wingbeat::audio::write_wav;
use wingbeat::dataset::{
    build_features, class_weights, leaking_groups, load_manifest, plan_folds, weighted_batches, write_manifest,
};
use wingbeat::dsp::stft_magnitude;
use wingbeat::synth::{
    mix_at_snr, synth_dataset, synth_noise, synth_wingbeat, DatasetRecipe, NoiseKind, WingbeatProfile,
};
use wingbeat::{AudioBuffer, FeatureSet, Label, ManifestEntry, PipelineConfig, StftConfig};

fn rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64).sqrt()
}

/// Labels only; every feature is its own group unless `groups` is given.
fn labeled(pos: usize, neg: usize) -> FeatureSet {
    let n = pos + neg;
    FeatureSet {
        bins: 1,
        frames: 1,
        fft_size: 2,
        hop: 1,
        sample_rate: 8000,
        data: vec![0.0; n],
        labels: (0..n)
            .map(|i| if i < pos { Label::Positive } else { Label::Negative })
            .collect(),
        groups: (0..n).map(|i| format!("g{i}")).collect(),
    }
}

fn small_recipe(pos: usize, neg: usize, seed: u64) -> DatasetRecipe {
    DatasetRecipe {
        positives: pos,
        negatives: neg,
        seed,
        ..DatasetRecipe::default()
    }
}

#[test]
fn wingbeat_harmonics_sit_in_their_bins() {
    let p = WingbeatProfile {
        fundamental_hz: 450.0,
        n_harmonics: 2,
        freq_jitter_hz: 0.0,
        ..WingbeatProfile::aegypti_female()
    };
    let buf = synth_wingbeat(&p, 2.0, 8000, 1).unwrap();
    assert!(buf.peak() <= 1.0);
    let m = stft_magnitude(&buf, &StftConfig::default()).unwrap();
    let energy: Vec<f64> = (0..m.rows)
        .map(|r| (0..m.cols).map(|c| m.get(r, c) as f64).sum())
        .collect();
    let mut order: Vec<usize> = (0..m.rows).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]));
    let bin_hz: f64 = 8000.0 / 1024.0;
    let peaks = [order[0], *order.iter().find(|&&b| b.abs_diff(order[0]) > 3).unwrap()];
    for f in [450.0, 900.0] {
        let expected = (f / bin_hz).round() as usize;
        assert!(peaks.iter().any(|&b| b.abs_diff(expected) <= 1), "{f} Hz not among {peaks:?}");
    }
}

#[test]
fn synthesis_is_seeded_and_silent_at_zero_amplitude() {
    let p = WingbeatProfile::aegypti_male();
    assert_eq!(synth_wingbeat(&p, 1.0, 8000, 5).unwrap(), synth_wingbeat(&p, 1.0, 8000, 5).unwrap());
    assert_ne!(synth_wingbeat(&p, 1.0, 8000, 5).unwrap(), synth_wingbeat(&p, 1.0, 8000, 6).unwrap());
    let quiet = WingbeatProfile { amplitude: 0.0, ..p };
    assert!(synth_wingbeat(&quiet, 1.0, 8000, 5).unwrap().samples.iter().all(|&v| v == 0.0));
    for kind in NoiseKind::ALL {
        let a = synth_noise(kind, 1.0, 8000, 9, 0.5).unwrap();
        assert_eq!(a, synth_noise(kind, 1.0, 8000, 9, 0.5).unwrap());
        assert!(a.peak() <= 1.0);
    }
}

#[test]
fn white_noise_rms_and_pink_slope() {
    let white = synth_noise(NoiseKind::White, 4.0, 8000, 2, 0.5).unwrap();
    let expected = 0.5 / 3f64.sqrt();
    assert!((rms(&white.samples) / expected - 1.0).abs() < 0.1);

    // Least-squares slope of band power against log2 frequency.
    let pink = synth_noise(NoiseKind::Pink, 16.0, 8000, 3, 0.5).unwrap();
    let m = stft_magnitude(&pink, &StftConfig::new(1024, 512).unwrap()).unwrap();
    let bin_hz = 8000.0 / 1024.0;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for r in 1..m.rows {
        let f = r as f64 * bin_hz;
        if (100.0..=3000.0).contains(&f) {
            let p: f64 = (0..m.cols).map(|c| (m.get(r, c) as f64).powi(2)).sum::<f64>() / m.cols as f64;
            xs.push(f.log2());
            ys.push(10.0 * p.log10());
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 3.0).abs() <= 1.0, "slope {slope} dB/octave");
}

#[test]
fn mixing_hits_the_requested_snr() {
    let clean = synth_wingbeat(&WingbeatProfile::aegypti_female(), 2.0, 8000, 4).unwrap();
    for (kind, seed) in NoiseKind::ALL.into_iter().zip(10..) {
        let noise = synth_noise(kind, 2.0, 8000, seed, 0.5).unwrap();
        let mix = mix_at_snr(&clean, &noise, 10.0).unwrap();
        let s: Vec<f32> = clean.samples.iter().map(|&v| v * mix.signal_gain as f32).collect();
        let n: Vec<f32> = noise.samples.iter().map(|&v| v * mix.noise_gain as f32).collect();
        let snr = 20.0 * (rms(&s) / rms(&n)).log10();
        assert!((snr - 10.0).abs() <= 0.5, "{kind:?}: {snr} dB");
        assert!(mix.mixed.peak() <= 1.0);
    }
}

#[test]
fn dataset_files_and_manifest_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let recipe = small_recipe(6, 5, 7);
    let ma = synth_dataset(&recipe, a.path()).unwrap();
    let mb = synth_dataset(&recipe, b.path()).unwrap();
    let entries = load_manifest(&ma).unwrap();
    assert_eq!(entries.len(), 11);
    assert_eq!(entries.iter().filter(|e| e.label == Label::Positive).count(), 6);
    assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
    for e in &entries {
        let name = e.path.file_name().unwrap();
        assert_eq!(std::fs::read(&e.path).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let wavs = std::fs::read_dir(a.path())
        .unwrap()
        .filter(|d| d.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 11);
}

/// Share of spectral energy between 400 and 1000 Hz.
fn band_share(buf: &AudioBuffer) -> f64 {
    let m = stft_magnitude(buf, &StftConfig::default()).unwrap();
    let bin_hz = buf.sample_rate as f64 / 1024.0;
    let (mut inside, mut total) = (0.0, 0.0);
    for r in 0..m.rows {
        let e: f64 = (0..m.cols).map(|c| (m.get(r, c) as f64).powi(2)).sum();
        total += e;
        if (400.0..=1000.0).contains(&(r as f64 * bin_hz)) {
            inside += e;
        }
    }
    inside / total.max(1e-30)
}

#[test]
fn default_recipe_is_separable_by_band_energy() {
    let clips = DatasetRecipe::default().clips().unwrap();
    assert_eq!(clips.len(), 400);
    assert!(clips.iter().all(|c| c.audio.peak() <= 1.0));
    let mut scored: Vec<(f64, bool)> = clips
        .iter()
        .map(|c| (band_share(&c.audio), c.label == Label::Positive))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Best single threshold: predict positive above it.
    let total_pos = scored.iter().filter(|s| s.1).count();
    let mut best = total_pos;
    let (mut neg_below, mut pos_below) = (0, 0);
    for s in &scored {
        if s.1 {
            pos_below += 1;
        } else {
            neg_below += 1;
        }
        best = best.max(neg_below + total_pos - pos_below);
    }
    let acc = best as f64 / scored.len() as f64;
    assert!(acc >= 0.95, "band-energy detector accuracy {acc}");
}

fn write_csv(path: &Path, rows: &str) {
    std::fs::write(path, format!("path,label,group\n{rows}")).unwrap();
}

#[test]
fn manifest_errors_name_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    write_csv(&m, "a.wav,positive,g1\nb.wav,negative,g2\nc.wav,pos,\n");
    let entries = load_manifest(&m).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[0].path, dir.path().join("a.wav"));
    assert_eq!(entries[2].group, "c");

    write_csv(&m, "a.wav,positive,g1\nb.wav,maybe,g2\n");
    let err = load_manifest(&m).unwrap_err().to_string();
    assert!(err.contains(":3:") && err.contains("maybe"), "{err}");

    write_csv(&m, "a.wav,positive,g1\na.wav,negative,g2\n");
    assert!(load_manifest(&m).unwrap_err().to_string().contains("duplicate"));

    let missing = dir.path().join("nope.csv");
    let err = load_manifest(&missing).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("nope.csv"));

    std::fs::write(&m, "file,label\nx.wav,1\n").unwrap();
    assert!(load_manifest(&m).is_err());
}

#[test]
fn manifest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let entries = vec![
        ManifestEntry {
            path: dir.path().join("x.wav"),
            label: Label::Positive,
            group: "rec1".into(),
        },
        ManifestEntry {
            path: dir.path().join("y.wav"),
            label: Label::Negative,
            group: "rec2".into(),
        },
    ];
    write_manifest(&entries, &m).unwrap();
    assert_eq!(load_manifest(&m).unwrap(), entries);
}

#[test]
fn features_inherit_label_and_group() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let l = cfg.segment_spec().unwrap().segment_len;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let long = AudioBuffer::new((0..2 * l).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap();
    write_wav(&long, &dir.path().join("long.wav")).unwrap();
    write_csv(&dir.path().join("m.csv"), "long.wav,positive,rec\n");
    let entries = load_manifest(&dir.path().join("m.csv")).unwrap();
    let fs = build_features(&entries, &cfg).unwrap();
    assert_eq!((fs.len(), fs.bins, fs.frames), (3, 513, 60));
    assert!(fs.labels.iter().all(|&l| l == Label::Positive));
    assert!(fs.groups.iter().all(|g| g == "rec"));
    assert!(build_features(&[], &cfg).unwrap().is_empty());

    write_csv(&dir.path().join("bad.csv"), "long.wav,positive,rec\nmissing.wav,negative,x\n");
    let entries = load_manifest(&dir.path().join("bad.csv")).unwrap();
    let err = build_features(&entries, &cfg).unwrap_err().to_string();
    assert!(err.contains("missing.wav"), "{err}");
}

#[test]
fn stratified_folds_for_imbalanced_counts() {
    let fs = labeled(537, 2158);
    let plan = plan_folds(&fs, 10, 7, true).unwrap();
    let global = 537.0 / 2695.0;
    let mut seen = vec![false; fs.len()];
    for f in 0..10 {
        let test = plan.test_indices(f);
        let pos = test.iter().filter(|&&i| fs.labels[i] == Label::Positive).count();
        let frac = pos as f64 / test.len() as f64;
        assert!((frac - global).abs() <= 0.05, "fold {f}: {frac}");
        for i in test {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));

    let w = class_weights(&labeled(345, 2000).labels);
    assert!((w[Label::Positive.index()] - 2345.0 / 690.0).abs() < 1e-12);
    assert!((w[Label::Negative.index()] - 2345.0 / 4000.0).abs() < 1e-12);
    assert_eq!(class_weights(&labeled(50, 50).labels), [1.0, 1.0]);
}

#[test]
fn grouped_folds_never_leak() {
    let mut fs = labeled(120, 300);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, g) in fs.groups.iter_mut().enumerate() {
        let prefix = if i < 120 { "p" } else { "n" };
        *g = format!("{prefix}{}", rng.gen_range(0..25));
    }
    let plan = plan_folds(&fs, 10, 1, true).unwrap();
    assert!(leaking_groups(&fs, &plan).is_empty());
    for f in 0..10 {
        let test: std::collections::HashSet<&str> =
            plan.test_indices(f).iter().map(|&i| fs.groups[i].as_str()).collect();
        assert!(plan.train_indices(f).iter().all(|&i| !test.contains(fs.groups[i].as_str())));
    }
    let loose = plan_folds(&fs, 10, 1, false).unwrap();
    assert!(!leaking_groups(&fs, &loose).is_empty());
}

#[test]
fn fold_errors() {
    assert!(plan_folds(&labeled(0, 10), 2, 1, true).is_err());
    assert!(plan_folds(&labeled(5, 10), 6, 1, true).is_err());
    assert!(plan_folds(&labeled(5, 10), 1, 1, true).is_err());
    let mut fs = labeled(20, 20);
    fs.groups.iter_mut().for_each(|g| *g = "one".into());
    assert!(plan_folds(&fs, 2, 1, true).is_err());
}

#[test]
fn weighted_batches_balance_and_repeat() {
    let fs = labeled(100, 900);
    let plan = plan_folds(&fs, 10, 3, true).unwrap();
    let mut stream = weighted_batches(&fs, &plan, 0, 32, 11).unwrap();
    let test: std::collections::HashSet<usize> = plan.test_indices(0).into_iter().collect();
    let mut pos = 0;
    let draws = 1000;
    let mut drawn = 0;
    while drawn < draws {
        let b = stream.next().unwrap();
        assert_eq!((b.indices.len(), b.y.len()), (32, 32));
        for &i in b.indices.iter().take(draws - drawn) {
            assert!(!test.contains(&i));
            pos += usize::from(fs.labels[i] == Label::Positive);
            drawn += 1;
        }
    }
    assert!((450..=550).contains(&pos), "{pos} positives in {draws}");

    let a: Vec<Vec<usize>> = (0..5).map(|_| stream.next_indices()).collect();
    let mut again = weighted_batches(&fs, &plan, 0, 32, 11).unwrap();
    let _ = (0..draws.div_ceil(32)).map(|_| again.next_indices()).count();
    let b: Vec<Vec<usize>> = (0..5).map(|_| again.next_indices()).collect();
    assert_eq!(a, b);
    assert!(weighted_batches(&fs, &plan, 10, 32, 1).is_err());
}
