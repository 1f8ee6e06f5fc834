//! Run configuration: line-based `section.key = value` text covering the
//! model, synthesis, data and per-stage training settings.
//!
//! `run.preset` is applied first wherever it appears; the remaining lines
//! apply in order, then command-line overrides. Unknown keys are errors.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::synth::SynthSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Corpus directories; generated from `synth.*` when unset.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Seed of the generated evaluation corpus.
    pub eval_seed: u64,
    pub noise_seed: u64,
    /// SNR of the noisy evaluation set used by ablations.
    pub eval_snr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitConfig {
    pub asr: Option<PathBuf>,
    pub vsr: Option<PathBuf>,
    /// Warm-start the AVSR from ASR and VSR checkpoints.
    pub pretrain: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    /// Seed of model initialization.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    pub data: DataConfig,
    pub init: InitConfig,
    pub asr: TrainConfig,
    pub vsr: TrainConfig,
    pub avsr: TrainConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let model = ModelConfig::preset(name)?;
        let stage = if name == "paper" { TrainConfig::paper } else { TrainConfig::toy };
        let synth = SynthSpec {
            vocab_size: model.vocab - 1,
            canvas: model.visual.input_size[0],
            ..SynthSpec::default()
        };
        let tiny = name == "tiny";
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            out_dir: PathBuf::from("run"),
            synth: SynthSpec {
                max_tokens: if tiny { 3 } else { synth.max_tokens },
                ..synth
            },
            data: DataConfig {
                train_dir: None,
                eval_dir: None,
                n_train: if tiny { 4 } else { 256 },
                n_eval: if tiny { 2 } else { 48 },
                eval_seed: 1,
                noise_seed: 7,
                eval_snr: 0.0,
            },
            init: InitConfig {
                asr: None,
                vsr: None,
                pretrain: true,
            },
            asr: stage(Variant::Asr),
            vsr: stage(Variant::Vsr),
            avsr: stage(Variant::Avsr),
            model,
        })
    }

    pub fn stage(&self, v: Variant) -> &TrainConfig {
        match v {
            Variant::Asr => &self.asr,
            Variant::Vsr => &self.vsr,
            Variant::Avsr => &self.avsr,
        }
    }

    pub fn stage_mut(&mut self, v: Variant) -> &mut TrainConfig {
        match v {
            Variant::Asr => &mut self.asr,
            Variant::Vsr => &mut self.vsr,
            Variant::Avsr => &mut self.avsr,
        }
    }

    /// Parses config text, then applies `overrides` (`key=value` pairs).
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "run.preset")
            .map_or("toy", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let int = || value.parse::<u64>().map_err(|_| bad());
        let u32v = || value.parse::<u32>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        let path = || (!value.is_empty()).then(|| PathBuf::from(value));
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` lacks a section")))?;
        match (section, field) {
            ("run", "preset") => self.preset = value.to_string(),
            ("run", "seed") => self.seed = int()?,
            ("run", "out") => self.out_dir = PathBuf::from(value),
            ("synth", "vocab_size") => self.synth.vocab_size = num()?,
            ("synth", "min_tokens") => self.synth.min_tokens = num()?,
            ("synth", "max_tokens") => self.synth.max_tokens = num()?,
            ("synth", "token_ms") => self.synth.token_ms = u32v()?,
            ("synth", "sample_rate") => self.synth.sample_rate = u32v()?,
            ("synth", "fps") => self.synth.fps = u32v()?,
            ("synth", "crossfade_ms") => self.synth.crossfade_ms = u32v()?,
            ("synth", "canvas") => self.synth.canvas = num()?,
            ("synth", "seed") => self.synth.seed = int()?,
            ("data", "train_dir") => self.data.train_dir = path(),
            ("data", "eval_dir") => self.data.eval_dir = path(),
            ("data", "n_train") => self.data.n_train = num()?,
            ("data", "n_eval") => self.data.n_eval = num()?,
            ("data", "eval_seed") => self.data.eval_seed = int()?,
            ("data", "noise_seed") => self.data.noise_seed = int()?,
            ("data", "eval_snr") => self.data.eval_snr = float()?,
            ("init", "asr") => self.init.asr = path(),
            ("init", "vsr") => self.init.vsr = path(),
            ("init", "pretrain") => self.init.pretrain = flag()?,
            ("asr" | "vsr" | "avsr", _) => {
                let t = self.stage_mut(section.parse()?);
                let list = |s: &str| s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_string).collect::<Vec<_>>();
                match field {
                    "epochs" => t.epochs = num()?,
                    "batch_size" => t.batch_size = num()?,
                    "base_lr" => t.base_lr = float()?,
                    "warmup" => t.warmup = int()?,
                    "clip_norm" => t.clip_norm = float()?,
                    "seed" => t.seed = int()?,
                    "freeze" => t.freeze = list(value),
                    "noise_snrs" => {
                        t.noise_snrs = list(value).iter().map(|s| s.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?
                    }
                    "noise_prob" => t.noise_prob = float()?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        for t in [&self.asr, &self.vsr, &self.avsr] {
            t.validate()?;
        }
        if self.synth.vocab_size + 1 > self.model.vocab {
            return Err(Error::Config(format!(
                "synth.vocab_size {} does not fit model.vocab {} (blank included)",
                self.synth.vocab_size, self.model.vocab
            )));
        }
        if [self.synth.canvas; 2] != self.model.visual.input_size {
            return Err(Error::Config(format!(
                "synth.canvas {} differs from visual.input_size {:?}",
                self.synth.canvas, self.model.visual.input_size
            )));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(Error::Config("data.n_train and data.n_eval must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved text; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let floats = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let s = &self.synth;
        let d = &self.data;
        let mut out = vec![
            ("run.preset".to_string(), self.preset.clone()),
            ("run.seed".into(), self.seed.to_string()),
            ("run.out".into(), self.out_dir.display().to_string()),
        ];
        out.extend(self.model.entries());
        out.extend([
            ("synth.vocab_size".into(), s.vocab_size.to_string()),
            ("synth.min_tokens".into(), s.min_tokens.to_string()),
            ("synth.max_tokens".into(), s.max_tokens.to_string()),
            ("synth.token_ms".into(), s.token_ms.to_string()),
            ("synth.sample_rate".into(), s.sample_rate.to_string()),
            ("synth.fps".into(), s.fps.to_string()),
            ("synth.crossfade_ms".into(), s.crossfade_ms.to_string()),
            ("synth.canvas".into(), s.canvas.to_string()),
            ("synth.seed".into(), s.seed.to_string()),
            ("data.train_dir".into(), opt(&d.train_dir)),
            ("data.eval_dir".into(), opt(&d.eval_dir)),
            ("data.n_train".into(), d.n_train.to_string()),
            ("data.n_eval".into(), d.n_eval.to_string()),
            ("data.eval_seed".into(), d.eval_seed.to_string()),
            ("data.noise_seed".into(), d.noise_seed.to_string()),
            ("data.eval_snr".into(), d.eval_snr.to_string()),
            ("init.asr".into(), opt(&self.init.asr)),
            ("init.vsr".into(), opt(&self.init.vsr)),
            ("init.pretrain".into(), self.init.pretrain.to_string()),
        ]);
        for v in [Variant::Asr, Variant::Vsr, Variant::Avsr] {
            let t = self.stage(v);
            out.extend([
                (format!("{v}.epochs"), t.epochs.to_string()),
                (format!("{v}.batch_size"), t.batch_size.to_string()),
                (format!("{v}.base_lr"), t.base_lr.to_string()),
                (format!("{v}.warmup"), t.warmup.to_string()),
                (format!("{v}.clip_norm"), t.clip_norm.to_string()),
                (format!("{v}.seed"), t.seed.to_string()),
                (format!("{v}.freeze"), t.freeze.join(",")),
                (format!("{v}.noise_snrs"), floats(&t.noise_snrs)),
                (format!("{v}.noise_prob"), t.noise_prob.to_string()),
            ]);
        }
        out.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The synthesis spec of the evaluation corpus.
    pub fn eval_synth(&self) -> SynthSpec {
        SynthSpec {
            seed: self.data.eval_seed,
            ..self.synth.clone()
        }
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        for preset in ["toy", "tiny", "paper"] {
            let mut cfg = RunConfig::preset(preset).unwrap();
            cfg.init.asr = Some(PathBuf::from("a.ckpt"));
            cfg.avsr.freeze = vec!["audio.stage1".into(), "visual.frontend".into()];
            assert_eq!(RunConfig::parse(&cfg.to_text(), &[]).unwrap(), cfg, "{preset}");
        }
    }

    #[test]
    fn preset_first_overrides_last() {
        let text = "asr.epochs = 5\nrun.preset = tiny\n# comment\nmodel.dropout = 0.2  # trailing\n";
        let over = [("asr.epochs".to_string(), "7".to_string())];
        let cfg = RunConfig::parse(text, &over).unwrap();
        assert_eq!(cfg.model.audio_dims, vec![8, 8, 8]);
        assert_eq!(cfg.asr.epochs, 7);
        assert_eq!(cfg.model.dropout, 0.2);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["model.bogus = 1", "asr.speed = 2", "nosection = 1", "run.seed = x", "justtext"] {
            assert!(RunConfig::parse(text, &[]).is_err(), "{text}");
        }
        assert!(RunConfig::parse("synth.canvas = 48", &[]).is_err());
        assert!(parse_override("a.b").is_err());
    }
}
