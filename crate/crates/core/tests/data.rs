use dcim_core::audio::LogMel;
use dcim_core::model::ModelConfig;
use dcim_core::runconfig::RunConfig;
use dcim_core::synth::{generate_corpus, measured_snr, read_corpus, separability_audit, write_corpus, NoiseSpec, SynthSpec};
use dcim_core::training::{prepare_examples, standardize, FeatureOptions};
use dcim_core::model::Variant;

fn toy_spec() -> SynthSpec {
    RunConfig::preset("toy").unwrap().synth
}

#[test]
fn every_token_is_acoustically_separable() {
    let spec = toy_spec();
    let corpus = generate_corpus(&spec, 32).unwrap();
    let r = separability_audit(&spec, &corpus, &ModelConfig::toy().audio).unwrap();
    assert!(r.occurrences > 80);
    assert_eq!(r.correct, r.occurrences, "{r:?}");
}

#[test]
fn streams_follow_the_token_clock() {
    let spec = toy_spec();
    let lm = LogMel::new(&ModelConfig::toy().audio).unwrap();
    for u in generate_corpus(&spec, 12).unwrap() {
        let n = u.tokens.len();
        assert_eq!(u.audio.len(), n * spec.token_samples());
        assert_eq!(u.video.len(), n * spec.token_frames());
        assert_eq!(lm.compute(&u.audio).unwrap().shape()[0], 16 * n - 2);
        assert!(u.tokens.iter().all(|&k| (1..=spec.vocab_size).contains(&k)));
    }
}

#[test]
fn disk_round_trip_preserves_features() {
    let spec = toy_spec();
    let corpus = generate_corpus(&spec, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus, spec.sample_rate).unwrap();
    let (sr, back) = read_corpus(dir.path()).unwrap();
    assert_eq!(sr, spec.sample_rate);
    assert_eq!(back, corpus);
    let cfg = ModelConfig::toy();
    let a = prepare_examples::<f32>(&corpus, &cfg, Variant::Avsr, &FeatureOptions::default()).unwrap();
    let b = prepare_examples::<f32>(&back, &cfg, Variant::Avsr, &FeatureOptions::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.mel.as_ref().unwrap().bit_eq(y.mel.as_ref().unwrap()));
        assert!(x.video.as_ref().unwrap().bit_eq(y.video.as_ref().unwrap()));
    }
}

#[test]
fn noise_is_calibrated_and_reproducible() {
    let corpus = generate_corpus(&toy_spec(), 6).unwrap();
    for u in &corpus {
        for snr in [-5.0, 0.0, 20.0] {
            let spec = NoiseSpec { snr_db: snr, seed: 3 };
            let a = spec.apply(&u.audio, u.id).unwrap();
            assert!((measured_snr(&u.audio, &a) - snr).abs() < 0.1);
            assert_eq!(a, spec.apply(&u.audio, u.id).unwrap());
            assert_ne!(a, NoiseSpec { snr_db: snr, seed: 4 }.apply(&u.audio, u.id).unwrap());
        }
    }
}

#[test]
fn augmented_views_are_prepared_per_snr() {
    let corpus = generate_corpus(&toy_spec(), 2).unwrap();
    let opts = FeatureOptions {
        snr_db: None,
        augment_snrs: vec![0.0, 10.0],
        noise_seed: 1,
    };
    let ex = prepare_examples::<f64>(&corpus, &ModelConfig::toy(), Variant::Avsr, &opts).unwrap();
    assert_eq!(ex[0].noisy_mels.len(), 2);
    assert!(!ex[0].input(Some(1)).mel.unwrap().bit_eq(ex[0].mel.as_ref().unwrap()));
    assert!(ex[0].input(None).mel.unwrap().bit_eq(ex[0].mel.as_ref().unwrap()));
}

#[test]
fn clip_standardization() {
    let clip = &generate_corpus(&toy_spec(), 1).unwrap()[0].video;
    let s = standardize(clip.frames());
    let n = s.numel() as f64;
    let mean = s.data().iter().sum::<f64>() / n;
    let var = s.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
}
