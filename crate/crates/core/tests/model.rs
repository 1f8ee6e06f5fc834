use dcim_core::experiments::{corpora, initial_model, run_stage};
use dcim_core::model::{CheckpointData, Model, ModelConfig, Variant};
use dcim_core::runconfig::RunConfig;
use dcim_core::training::EpochMetrics;
use dcim_core::Error;

#[test]
fn config_text_round_trips() {
    for name in ["paper", "toy", "tiny"] {
        let cfg = ModelConfig::preset(name).unwrap();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg, "{name}");
    }
    let run = RunConfig::preset("toy").unwrap();
    assert_eq!(RunConfig::parse(&run.to_text(), &[]).unwrap(), run);
}

#[test]
fn module_counts_partition_the_parameters() {
    let cfg = ModelConfig::tiny();
    for v in [Variant::Asr, Variant::Vsr, Variant::Avsr] {
        let m = Model::<f32>::new(&cfg, v, 0).unwrap();
        assert_eq!(m.module_counts().iter().map(|(_, n)| n).sum::<usize>(), m.param_count(), "{v}");
    }
}

#[test]
fn foreign_checkpoints_need_force() {
    let cfg = ModelConfig::tiny();
    let src = Model::<f32>::new(&cfg, Variant::Asr, 1).unwrap();
    let data = CheckpointData::from_model(&src);
    let mut other = Model::<f32>::new(&cfg, Variant::Avsr, 2).unwrap();
    assert!(matches!(other.load_state(&data, false), Err(Error::DigestMismatch { .. })));
    let copied = other.load_state(&data, true).unwrap();
    assert_eq!(copied.len(), data.tensors.len());
    let mut same = Model::<f32>::new(&cfg, Variant::Asr, 3).unwrap();
    same.load_state(&data, false).unwrap();
    assert_eq!(CheckpointData::from_model(&same).tensors, data.tensors);
}

#[test]
fn warm_start_checks_variants() {
    let cfg = ModelConfig::tiny();
    let asr = CheckpointData::from_model(&Model::<f32>::new(&cfg, Variant::Asr, 1).unwrap());
    let vsr = CheckpointData::from_model(&Model::<f32>::new(&cfg, Variant::Vsr, 1).unwrap());
    assert!(Model::<f32>::warm_start(&cfg, 0, &vsr, None).is_err());
    assert!(Model::<f32>::warm_start(&cfg, 0, &asr, Some(&asr)).is_err());
    let (_, r) = Model::<f32>::warm_start(&cfg, 0, &asr, Some(&vsr)).unwrap();
    assert_eq!(r.from_asr.len(), asr.tensors.len());
    assert!(r.from_vsr.iter().all(|n| n.starts_with("visual.")));
    assert!(!r.fresh.is_empty());
}

#[test]
fn run_config_parsing() {
    let text = "# comment\nrun.preset = tiny  # trailing\n\nasr.epochs = 4\n";
    let run = RunConfig::parse(text, &[("asr.epochs".into(), "5".into())]).unwrap();
    assert_eq!(run.asr.epochs, 5);
    assert!(matches!(RunConfig::parse("nope.key = 1", &[]), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("no equals sign", &[]), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("run.preset = huge", &[]), Err(Error::Config(_))));
}

#[test]
fn avsr_pretraining_requires_checkpoints() {
    let run = RunConfig::preset("tiny").unwrap();
    let err = initial_model(&run, &run.model, Variant::Avsr, None, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let (m, warm) = initial_model(&run, &run.model, Variant::Asr, None, None).unwrap();
    assert!(warm.is_none() && m.variant == Variant::Asr);
}

#[test]
fn tiny_stage_writes_metrics_and_learns() {
    let mut run = RunConfig::preset("tiny").unwrap();
    run.asr.epochs = 6;
    let (train, eval) = corpora(&run).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(&run.model, Variant::Asr, run.seed).unwrap();
    let hist = run_stage(&run, &mut m, &train, &eval, Some(dir.path())).unwrap();
    assert_eq!(hist.len(), 6);
    assert!(hist.last().unwrap().loss < hist[0].loss, "{hist:?}");
    let csv = std::fs::read_to_string(dir.path().join("asr_metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(EpochMetrics::CSV_HEADER));
    let back = Model::<f32>::load(&dir.path().join("asr.ckpt")).unwrap();
    assert_eq!(CheckpointData::from_model(&back).tensors, CheckpointData::from_model(&m).tensors);
}
