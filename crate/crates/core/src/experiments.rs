//! Pipelines shared by the command line and the acceptance tests: staged
//! training, the noise sweep and the DCIM ablation.

use std::fmt::Write as _;
use std::path::Path;

use crate::dcim::DcimMode;
use crate::error::{Error, Result};
use crate::model::{CheckpointData, Model, ModelConfig, Variant, WarmStartReport};
use crate::runconfig::RunConfig;
use crate::synth::{generate_corpus, read_corpus, Utterance};
use crate::training::{evaluate, prepare_examples, train, EpochMetrics, FeatureOptions, TrainOutputs};

/// Training and evaluation corpora: read from disk when configured,
/// generated otherwise.
pub fn corpora(run: &RunConfig) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let load = |dir: &Option<std::path::PathBuf>, spec, n| match dir {
        Some(d) => read_corpus(d).map(|(_, c)| c),
        None => generate_corpus(spec, n),
    };
    Ok((
        load(&run.data.train_dir, &run.synth, run.data.n_train)?,
        load(&run.data.eval_dir, &run.eval_synth(), run.data.n_eval)?,
    ))
}

/// Model a stage starts from. The AVSR is warm-started from `asr` and
/// `vsr` when pre-training is on, and built cold otherwise.
pub fn initial_model(
    run: &RunConfig,
    model_cfg: &ModelConfig,
    stage: Variant,
    asr: Option<&CheckpointData>,
    vsr: Option<&CheckpointData>,
) -> Result<(Model<f32>, Option<WarmStartReport>)> {
    if stage != Variant::Avsr || !run.init.pretrain {
        return Ok((Model::new(model_cfg, stage, run.seed)?, None));
    }
    match (asr, vsr) {
        (Some(a), Some(v)) => {
            let (m, report) = Model::warm_start(model_cfg, run.seed, a, Some(v))?;
            Ok((m, Some(report)))
        }
        _ => Err(Error::Config(
            "the avsr stage with init.pretrain = true needs ASR and VSR checkpoints".into(),
        )),
    }
}

/// Trains `model` as `stage` on the run's settings. With `out`, writes
/// `<stage>.ckpt` and `<stage>_metrics.csv` there.
pub fn run_stage(
    run: &RunConfig,
    model: &mut Model<f32>,
    train_set: &[Utterance],
    eval_set: &[Utterance],
    out: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    let stage = model.variant;
    let tc = run.stage(stage);
    let opts = FeatureOptions {
        snr_db: None,
        augment_snrs: tc.noise_snrs.clone(),
        noise_seed: run.data.noise_seed,
    };
    let train_ex = prepare_examples(train_set, &model.cfg, stage, &opts)?;
    let eval_ex = prepare_examples(eval_set, &model.cfg, stage, &FeatureOptions::default())?;
    let ckpt = out.map(|d| d.join(format!("{stage}.ckpt")));
    let csv = out.map(|d| d.join(format!("{stage}_metrics.csv")));
    train(
        model,
        tc,
        &train_ex,
        &eval_ex,
        TrainOutputs {
            metrics_csv: csv.as_deref(),
            checkpoint: ckpt.as_deref(),
        },
    )
}

/// WER of `model` on `corpus`, with white noise at `snr_db` if given.
pub fn eval_wer(model: &Model<f32>, corpus: &[Utterance], snr_db: Option<f64>, noise_seed: u64) -> Result<(f64, Vec<Vec<usize>>)> {
    let opts = FeatureOptions {
        snr_db,
        augment_snrs: Vec::new(),
        noise_seed,
    };
    let ex = prepare_examples(corpus, &model.cfg, model.variant, &opts)?;
    let e = evaluate(model, &ex)?;
    Ok((e.wer, e.hyps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub snr: f64,
    pub wer_audio_only: f64,
    pub wer_av: f64,
}

/// Audio-only and audio-visual WER over an SNR grid, on identical noise.
pub fn noise_sweep(av: &Model<f32>, audio: &Model<f32>, corpus: &[Utterance], snrs: &[f64], noise_seed: u64) -> Result<Vec<SweepRow>> {
    if !audio.variant.uses_audio() || audio.variant.uses_video() || av.variant != Variant::Avsr {
        return Err(Error::arg("noise sweep compares an avsr checkpoint with an asr checkpoint"));
    }
    snrs.iter()
        .map(|&snr| {
            Ok(SweepRow {
                snr,
                wer_audio_only: eval_wer(audio, corpus, Some(snr), noise_seed)?.0,
                wer_av: eval_wer(av, corpus, Some(snr), noise_seed)?.0,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("snr,wer_audio_only,wer_av\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.snr, r.wer_audio_only, r.wer_av).expect("string write");
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: String,
    pub params: usize,
    pub adapter_params: usize,
    pub eval_wer: f64,
}

/// Fine-tunes one warm-started AVSR per DCIM mode and scores each on the
/// evaluation set at `run.data.eval_snr`.
pub fn ablate(
    run: &RunConfig,
    modes: &[String],
    asr: &CheckpointData,
    vsr: &CheckpointData,
    train_set: &[Utterance],
    eval_set: &[Utterance],
) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|name| {
            let mode: DcimMode = name.parse()?;
            let cfg = ModelConfig {
                dcim_mode: mode,
                ..run.model.clone()
            };
            let (mut m, _) = Model::warm_start(&cfg, run.seed, asr, Some(vsr))?;
            run_stage(run, &mut m, train_set, &[], None)?;
            let (wer, _) = eval_wer(&m, eval_set, Some(run.data.eval_snr), run.data.noise_seed)?;
            log::info!("ablation {name}: eval WER {wer:.4}");
            Ok(AblationRow {
                mode: name.clone(),
                params: m.param_count(),
                adapter_params: m.params.count_prefix("dcim."),
                eval_wer: wer,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow], snr: f64) -> String {
    let mut s = String::from("mode,params,adapter_params,snr,eval_wer\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{:.6}", r.mode, r.params, r.adapter_params, snr, r.eval_wer).expect("string write");
    }
    s
}
