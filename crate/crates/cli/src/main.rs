//! `dcim`: corpus synthesis, staged training, evaluation, noise sweeps,
//! DCIM ablations and the self-check suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcim_core::experiments::{ablate, ablation_csv, corpora, eval_wer, initial_model, noise_sweep, run_stage, sweep_csv};
use dcim_core::model::{read_checkpoint, CheckpointData, Model, Variant};
use dcim_core::runconfig::{parse_override, RunConfig};
use dcim_core::synth::{generate_corpus, read_corpus, write_corpus, Utterance, SNR_GRID};
use dcim_core::verify::run_suite;
use dcim_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "dcim", version, about = "Audio-visual speech recognition with dual Conformer interaction modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus.
    Synth {
        /// Config file; its `synth.*` keys describe the corpus.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// `key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one stage and write `<stage>.ckpt` and `<stage>_metrics.csv`.
    Train {
        #[arg(long)]
        stage: Variant,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init_asr: Option<PathBuf>,
        #[arg(long)]
        init_vsr: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// WER of a checkpoint on a corpus directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// White-noise SNR in dB; clean when omitted.
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
        #[arg(long, default_value_t = 7)]
        noise_seed: u64,
        /// Hypotheses file; defaults to the checkpoint path with `.hyp.txt`.
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// Audio-only vs audio-visual WER over the SNR grid.
    NoiseSweep {
        #[arg(long)]
        ckpt_av: PathBuf,
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 7)]
        noise_seed: u64,
        #[arg(long, default_value = "noise_sweep.csv")]
        out: PathBuf,
    },
    /// Fine-tune one AVSR per DCIM mode and tabulate eval WERs.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "dual,v2a,a2v,no-purify,no-complete,last2")]
        modes: Vec<String>,
        #[arg(long)]
        init_asr: Option<PathBuf>,
        #[arg(long)]
        init_vsr: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Gradient checks, CTC oracle, rate audit, warm start, checkpoints.
    Verify,
    /// Per-module and total parameter counts.
    ParamCount {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> dcim_core::Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let pairs = overrides.iter().map(|s| parse_override(s)).collect::<dcim_core::Result<Vec<_>>>()?;
    RunConfig::parse(&text, &pairs)
}

fn prepare_out(run: &RunConfig) -> dcim_core::Result<()> {
    std::fs::create_dir_all(&run.out_dir)?;
    std::fs::write(run.out_dir.join("config.resolved"), run.to_text())?;
    Ok(())
}

/// ASR and VSR checkpoints for an AVSR stage: given paths, else trained
/// here into the output directory.
fn pretrained(run: &RunConfig, train: &[Utterance], eval: &[Utterance]) -> dcim_core::Result<(CheckpointData, CheckpointData)> {
    let get = |path: &Option<PathBuf>, stage: Variant| -> dcim_core::Result<CheckpointData> {
        if let Some(p) = path {
            return read_checkpoint(p);
        }
        log::info!("no {stage} checkpoint given; training one");
        let mut m = Model::new(&run.model, stage, run.seed)?;
        run_stage(run, &mut m, train, eval, Some(&run.out_dir))?;
        Ok(CheckpointData::from_model(&m))
    };
    Ok((get(&run.init.asr, Variant::Asr)?, get(&run.init.vsr, Variant::Vsr)?))
}

fn hyps_text(corpus: &[Utterance], hyps: &[Vec<usize>]) -> String {
    let join = |t: &[usize]| t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut s = String::from("id\treference\thypothesis\n");
    for (u, h) in corpus.iter().zip(hyps) {
        writeln!(s, "{}\t{}\t{}", u.id, join(&u.tokens), join(h)).expect("string write");
    }
    s
}

fn run(cli: Cli) -> dcim_core::Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, out, n, overrides } => {
            let run = load_config(spec.as_deref(), &overrides)?;
            let corpus = generate_corpus(&run.synth, n)?;
            write_corpus(&out, &corpus, run.synth.sample_rate)?;
            println!("wrote {n} utterances to {}", out.display());
        }
        Command::Train {
            stage,
            config,
            init_asr,
            init_vsr,
            overrides,
        } => {
            let mut run = load_config(config.as_deref(), &overrides)?;
            run.init.asr = init_asr.or(run.init.asr);
            run.init.vsr = init_vsr.or(run.init.vsr);
            prepare_out(&run)?;
            let (train, eval) = corpora(&run)?;
            let (a, v) = if stage == Variant::Avsr && run.init.pretrain {
                let (a, v) = pretrained(&run, &train, &eval)?;
                (Some(a), Some(v))
            } else {
                (None, None)
            };
            let (mut model, warm) = initial_model(&run, &run.model, stage, a.as_ref(), v.as_ref())?;
            if let Some(w) = warm {
                log::info!(
                    "warm start: {} tensors from asr, {} from vsr, {} fresh",
                    w.from_asr.len(),
                    w.from_vsr.len(),
                    w.fresh.len()
                );
            }
            let history = run_stage(&run, &mut model, &train, &eval, Some(&run.out_dir))?;
            if let Some(last) = history.last() {
                println!(
                    "{stage}: epoch {} loss {:.4} train WER {:.4} eval WER {}",
                    last.epoch,
                    last.loss,
                    last.train_wer,
                    last.eval_wer.map_or("-".into(), |w| format!("{w:.4}"))
                );
            }
            println!("checkpoint {}", run.out_dir.join(format!("{stage}.ckpt")).display());
        }
        Command::Eval {
            ckpt,
            corpus,
            snr,
            noise_seed,
            hyps,
        } => {
            let model = Model::<f32>::load(&ckpt)?;
            let (_, utts) = read_corpus(&corpus)?;
            let (wer, h) = eval_wer(&model, &utts, snr, noise_seed)?;
            let path = hyps.unwrap_or_else(|| ckpt.with_extension("hyp.txt"));
            std::fs::write(&path, hyps_text(&utts, &h))?;
            let cond = snr.map_or("clean".into(), |s| format!("SNR {s} dB"));
            println!("WER {wer:.4} ({} utterances, {cond}); hypotheses in {}", utts.len(), path.display());
        }
        Command::NoiseSweep {
            ckpt_av,
            ckpt_a,
            corpus,
            noise_seed,
            out,
        } => {
            let av = Model::<f32>::load(&ckpt_av)?;
            let audio = Model::<f32>::load(&ckpt_a)?;
            let (_, utts) = read_corpus(&corpus)?;
            let rows = noise_sweep(&av, &audio, &utts, &SNR_GRID, noise_seed)?;
            let csv = sweep_csv(&rows);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Ablate {
            config,
            modes,
            init_asr,
            init_vsr,
            overrides,
        } => {
            let mut run = load_config(config.as_deref(), &overrides)?;
            run.init.asr = init_asr.or(run.init.asr);
            run.init.vsr = init_vsr.or(run.init.vsr);
            prepare_out(&run)?;
            let (train, eval) = corpora(&run)?;
            let (a, v) = pretrained(&run, &train, &eval)?;
            let rows = ablate(&run, &modes, &a, &v, &train, &eval)?;
            let csv = ablation_csv(&rows, run.data.eval_snr);
            std::fs::write(run.out_dir.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Verify => {
            let dir = tempfile::tempdir()?;
            let report = run_suite(dir.path())?;
            print!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        Command::ParamCount { config, overrides } => {
            let run = load_config(config.as_deref(), &overrides)?;
            for variant in [Variant::Asr, Variant::Vsr, Variant::Avsr] {
                let m = Model::<f32>::new(&run.model, variant, run.seed)?;
                println!("{variant}");
                for (name, n) in m.module_counts() {
                    println!("  {name:<16} {n:>12}");
                }
                println!("  {:<16} {:>12}", "total", m.param_count());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Diverged { .. }) { EXIT_DIVERGED } else { EXIT_USAGE })
        }
    }
}
