//! Model configuration, presets and their canonical text form.

use std::fmt;
use std::str::FromStr;

use crate::audio::{AudioFrontendConfig, SpecAugmentConfig};
use crate::binio::fnv1a64;
use crate::dcim::{AdapterSharing, DcimMode, Direction, LayerSelection};
use crate::error::{Error, Result};
use crate::visual::VisualFrontendConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Asr,
    Vsr,
    Avsr,
}

impl Variant {
    pub fn code(self) -> u32 {
        match self {
            Variant::Asr => 1,
            Variant::Vsr => 2,
            Variant::Avsr => 3,
        }
    }

    pub fn from_code(c: u32) -> Result<Self> {
        match c {
            1 => Ok(Variant::Asr),
            2 => Ok(Variant::Vsr),
            3 => Ok(Variant::Avsr),
            _ => Err(Error::Checkpoint(format!("unknown model variant code {c}"))),
        }
    }

    pub fn uses_audio(self) -> bool {
        self != Variant::Vsr
    }

    pub fn uses_video(self) -> bool {
        self != Variant::Asr
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Variant::Asr),
            "vsr" => Ok(Variant::Vsr),
            "avsr" => Ok(Variant::Avsr),
            _ => Err(Error::Config(format!("unknown stage `{s}` (asr, vsr, avsr)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Asr => "asr",
            Variant::Vsr => "vsr",
            Variant::Avsr => "avsr",
        })
    }
}

/// Where the visual branch output joins the audio branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPoint {
    Stage3Entry,
    Stage3Exit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Audio,
    Visual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Vocabulary size including the blank at index 0.
    pub vocab: usize,
    pub audio: AudioFrontendConfig,
    pub subsample_channels: usize,
    pub audio_dims: Vec<usize>,
    pub audio_layers: Vec<usize>,
    /// Group size of the grouped attention in stage 1.
    pub stage1_group: usize,
    /// Time stride of the first block of stage 1.
    pub stage1_stride: usize,
    pub visual: VisualFrontendConfig,
    pub visual_layers: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub dropout: f64,
    pub relative_pos: bool,
    /// Bottleneck of the DCIM adapters.
    pub adapter_bottleneck: usize,
    /// Bottleneck of the adapter carrying visual features into stage 3.
    pub fusion_bottleneck: usize,
    pub fusion_point: FusionPoint,
    pub dcim_mode: DcimMode,
    pub adapter_sharing: AdapterSharing,
    pub inter_ctc_lambda: f64,
    pub inter_ctc_stream: Stream,
}

impl ModelConfig {
    /// Published sizes: dims [180, 256, 360], layers [5, 5, 4], vocabulary
    /// 256, ResNet-18 visual trunk.
    pub fn paper() -> Self {
        Self {
            vocab: 256,
            audio: AudioFrontendConfig::default(),
            subsample_channels: 180,
            audio_dims: vec![180, 256, 360],
            audio_layers: vec![5, 5, 4],
            stage1_group: 3,
            stage1_stride: 2,
            visual: VisualFrontendConfig::paper(),
            visual_layers: 5,
            n_heads: 4,
            conv_kernel: 15,
            ff_expansion: 4,
            dropout: 0.1,
            relative_pos: true,
            adapter_bottleneck: 180,
            fusion_bottleneck: 256,
            fusion_point: FusionPoint::Stage3Entry,
            dcim_mode: DcimMode::dual(),
            adapter_sharing: AdapterSharing::Shared,
            inter_ctc_lambda: 0.3,
            inter_ctc_stream: Stream::Audio,
        }
    }

    /// Desk-scale network for the synthetic corpora: dims [24, 32, 40],
    /// 16 tokens plus blank, the same layer counts as the paper.
    pub fn toy() -> Self {
        Self {
            vocab: 17,
            audio: AudioFrontendConfig {
                cmvn: false,
                specaug: SpecAugmentConfig::off(),
                ..AudioFrontendConfig::default()
            },
            subsample_channels: 8,
            audio_dims: vec![24, 32, 40],
            audio_layers: vec![2, 2, 2],
            visual_layers: 2,
            conv_kernel: 15,
            visual: VisualFrontendConfig {
                channels: vec![4, 8, 8, 16],
                ..VisualFrontendConfig::toy(32)
            },
            adapter_bottleneck: 24,
            fusion_bottleneck: 32,
            dropout: 0.0,
            ..Self::paper()
        }
    }

    /// Smallest useful network, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        Self {
            vocab: 5,
            audio: AudioFrontendConfig {
                n_mels: 16,
                specaug: SpecAugmentConfig::off(),
                ..AudioFrontendConfig::default()
            },
            subsample_channels: 2,
            audio_dims: vec![8, 8, 8],
            audio_layers: vec![1, 2, 1],
            visual: VisualFrontendConfig {
                input_size: [16, 16],
                stem_kernel: [3, 3, 3],
                channels: vec![2, 2],
                ..VisualFrontendConfig::toy(8)
            },
            visual_layers: 2,
            n_heads: 2,
            conv_kernel: 3,
            ff_expansion: 2,
            adapter_bottleneck: 4,
            fusion_bottleneck: 4,
            dropout: 0.0,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (paper, toy, tiny)"))),
        }
    }

    pub fn dcim_dim(&self) -> usize {
        self.audio_dims[1]
    }

    pub fn dcim_layers(&self) -> usize {
        self.audio_layers[1]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &'static str, detail: String| Err(Error::Build { rule, detail });
        if self.audio_dims.len() != 3 || self.audio_layers.len() != 3 {
            return fail("exactly three audio stages", format!("{:?}", self.audio_dims));
        }
        if self.audio_layers.iter().any(|&n| n == 0) {
            return fail("every audio stage has at least one layer", format!("{:?}", self.audio_layers));
        }
        if self.visual_layers != self.dcim_layers() {
            return fail(
                "DCIM pairs audio stage 2 with the visual stage (equal layer count)",
                format!("audio stage 2 has {}, visual has {}", self.dcim_layers(), self.visual_layers),
            );
        }
        if self.vocab < 2 {
            return fail("vocabulary holds blank plus at least one token", self.vocab.to_string());
        }
        if !(0.0..=1.0).contains(&self.inter_ctc_lambda) {
            return Err(Error::Config(format!("model.inter_ctc_lambda {} outside [0, 1]", self.inter_ctc_lambda)));
        }
        if !(1..=2).contains(&self.stage1_stride) {
            return fail("stage1_stride in {1, 2}", self.stage1_stride.to_string());
        }
        self.audio.validate()?;
        self.visual_for_build().validate()
    }

    /// Visual front-end configuration with its width tied to the DCIM.
    pub fn visual_for_build(&self) -> VisualFrontendConfig {
        VisualFrontendConfig {
            out_dim: self.dcim_dim(),
            ..self.visual.clone()
        }
    }

    /// Canonical `section.key = value` entries, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let a = &self.audio;
        let v = &self.visual;
        let m = &self.dcim_mode;
        let kv: Vec<(&str, String)> = vec![
            ("model.vocab", self.vocab.to_string()),
            ("model.audio_dims", list(&self.audio_dims)),
            ("model.audio_layers", list(&self.audio_layers)),
            ("model.stage1_group", self.stage1_group.to_string()),
            ("model.stage1_stride", self.stage1_stride.to_string()),
            ("model.visual_layers", self.visual_layers.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.conv_kernel", self.conv_kernel.to_string()),
            ("model.ff_expansion", self.ff_expansion.to_string()),
            ("model.relative_pos", self.relative_pos.to_string()),
            ("model.subsample_channels", self.subsample_channels.to_string()),
            ("model.adapter_bottleneck", self.adapter_bottleneck.to_string()),
            ("model.fusion_bottleneck", self.fusion_bottleneck.to_string()),
            (
                "model.fusion_point",
                match self.fusion_point {
                    FusionPoint::Stage3Entry => "stage3_entry",
                    FusionPoint::Stage3Exit => "stage3_exit",
                }
                .into(),
            ),
            (
                "model.inter_ctc_stream",
                match self.inter_ctc_stream {
                    Stream::Audio => "audio",
                    Stream::Visual => "visual",
                }
                .into(),
            ),
            (
                "dcim.direction",
                match m.direction {
                    Direction::Dual => "dual",
                    Direction::VToA => "v2a",
                    Direction::AToV => "a2v",
                }
                .into(),
            ),
            ("dcim.purification", m.purification.to_string()),
            ("dcim.completion", m.completion.to_string()),
            (
                "dcim.layers",
                match m.layers {
                    LayerSelection::All => "all",
                    LayerSelection::LastTwo => "last2",
                }
                .into(),
            ),
            (
                "dcim.sharing",
                match self.adapter_sharing {
                    AdapterSharing::Shared => "shared",
                    AdapterSharing::PerPath => "per_path",
                }
                .into(),
            ),
            ("audio.sample_rate_hz", a.sample_rate_hz.to_string()),
            ("audio.window_ms", a.window_ms.to_string()),
            ("audio.hop_ms", a.hop_ms.to_string()),
            ("audio.dft_size", a.dft_size.to_string()),
            ("audio.n_mels", a.n_mels.to_string()),
            ("audio.log_floor", format!("{:e}", a.log_floor)),
            ("audio.cmvn", a.cmvn.to_string()),
            ("visual.input_size", format!("{}x{}", v.input_size[0], v.input_size[1])),
            ("visual.stem_kernel", list(&v.stem_kernel)),
            ("visual.stem_stride", list(&v.stem_stride)),
            ("visual.channels", list(&v.channels)),
            ("visual.blocks_per_stage", v.blocks_per_stage.to_string()),
            ("visual.temporal_pool_stride", v.temporal_pool_stride.to_string()),
            // training-time settings, excluded from the digest
            ("model.dropout", self.dropout.to_string()),
            ("model.inter_ctc_lambda", self.inter_ctc_lambda.to_string()),
            ("specaug.n_freq_masks", a.specaug.n_freq_masks.to_string()),
            ("specaug.max_freq_width", a.specaug.max_freq_width.to_string()),
            ("specaug.n_time_masks", a.specaug.n_time_masks.to_string()),
            ("specaug.max_time_width", a.specaug.max_time_width.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn is_training_key(key: &str) -> bool {
        key.starts_with("specaug.") || key == "model.dropout" || key == "model.inter_ctc_lambda"
    }

    /// Canonical text of every entry.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Architecture text: the canonical text without training-only keys.
    pub fn architecture_text(&self) -> String {
        self.entries()
            .iter()
            .filter(|(k, _)| !Self::is_training_key(k))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// 64-bit FNV-1a over the architecture text and the variant.
    pub fn digest(&self, variant: Variant) -> u64 {
        fnv1a64(format!("{}variant = {variant}\n", self.architecture_text()).as_bytes())
    }

    pub fn has_key(key: &str) -> bool {
        Self::paper().entries().iter().any(|(k, _)| k == key)
    }

    /// Sets one entry from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let num = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        let flag = || value.parse::<bool>().map_err(|_| bad());
        let list = || -> Result<Vec<usize>> { value.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect() };
        let triple = || -> Result<[usize; 3]> { list()?.try_into().map_err(|_| bad()) };
        match key {
            "model.vocab" => self.vocab = num()?,
            "model.audio_dims" => {
                self.audio_dims = list()?;
                if let Some(&d) = self.audio_dims.get(1) {
                    self.visual.out_dim = d;
                }
            }
            "model.audio_layers" => self.audio_layers = list()?,
            "model.stage1_group" => self.stage1_group = num()?,
            "model.stage1_stride" => self.stage1_stride = num()?,
            "model.visual_layers" => self.visual_layers = num()?,
            "model.n_heads" => self.n_heads = num()?,
            "model.conv_kernel" => self.conv_kernel = num()?,
            "model.ff_expansion" => self.ff_expansion = num()?,
            "model.dropout" => self.dropout = float()?,
            "model.relative_pos" => self.relative_pos = flag()?,
            "model.subsample_channels" => self.subsample_channels = num()?,
            "model.adapter_bottleneck" => self.adapter_bottleneck = num()?,
            "model.fusion_bottleneck" => self.fusion_bottleneck = num()?,
            "model.fusion_point" => {
                self.fusion_point = match value {
                    "stage3_entry" => FusionPoint::Stage3Entry,
                    "stage3_exit" => FusionPoint::Stage3Exit,
                    _ => return Err(bad()),
                }
            }
            "model.inter_ctc_lambda" => self.inter_ctc_lambda = float()?,
            "model.inter_ctc_stream" => {
                self.inter_ctc_stream = match value {
                    "audio" => Stream::Audio,
                    "visual" => Stream::Visual,
                    _ => return Err(bad()),
                }
            }
            "dcim.mode" => self.dcim_mode = value.parse()?,
            "dcim.direction" => {
                self.dcim_mode.direction = match value {
                    "dual" => Direction::Dual,
                    "v2a" => Direction::VToA,
                    "a2v" => Direction::AToV,
                    _ => return Err(bad()),
                }
            }
            "dcim.purification" => self.dcim_mode.purification = flag()?,
            "dcim.completion" => self.dcim_mode.completion = flag()?,
            "dcim.layers" => {
                self.dcim_mode.layers = match value {
                    "all" => LayerSelection::All,
                    "last2" => LayerSelection::LastTwo,
                    _ => return Err(bad()),
                }
            }
            "dcim.sharing" => {
                self.adapter_sharing = match value {
                    "shared" => AdapterSharing::Shared,
                    "per_path" => AdapterSharing::PerPath,
                    _ => return Err(bad()),
                }
            }
            "audio.sample_rate_hz" => self.audio.sample_rate_hz = value.parse().map_err(|_| bad())?,
            "audio.window_ms" => self.audio.window_ms = float()?,
            "audio.hop_ms" => self.audio.hop_ms = float()?,
            "audio.dft_size" => self.audio.dft_size = num()?,
            "audio.n_mels" => self.audio.n_mels = num()?,
            "audio.log_floor" => self.audio.log_floor = float()?,
            "audio.cmvn" => self.audio.cmvn = flag()?,
            "specaug.n_freq_masks" => self.audio.specaug.n_freq_masks = num()?,
            "specaug.max_freq_width" => self.audio.specaug.max_freq_width = num()?,
            "specaug.n_time_masks" => self.audio.specaug.n_time_masks = num()?,
            "specaug.max_time_width" => self.audio.specaug.max_time_width = num()?,
            "visual.input_size" => {
                let (h, w) = value.split_once('x').ok_or_else(bad)?;
                self.visual.input_size = [h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?];
            }
            "visual.stem_kernel" => self.visual.stem_kernel = triple()?,
            "visual.stem_stride" => self.visual.stem_stride = triple()?,
            "visual.channels" => self.visual.channels = list()?,
            "visual.blocks_per_stage" => self.visual.blocks_per_stage = num()?,
            "visual.temporal_pool_stride" => self.visual.temporal_pool_stride = num()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses canonical text as produced by [`ModelConfig::to_text`],
    /// starting from the paper preset.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::paper();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}
