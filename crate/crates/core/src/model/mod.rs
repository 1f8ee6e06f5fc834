//! ASR, VSR and AVSR networks sharing one parameter naming scheme.
//!
//! ```text
//! audio: log-mel → subsample → stage1 (grouped, stride 2) → trans12
//!        → stage2 ─┐
//! video: frontend → visual blocks ─┤ (paired as DCIM layers in AVSR)
//!        trans23(audio) + fusion(visual) → stage3 → head
//! ```
//!
//! Names of the ASR and of the VSR are subsets of the AVSR names, so the
//! AVSR can be warm-started from both.

mod checkpoint;
mod config;

pub use checkpoint::{read_checkpoint, save_checkpoint, CheckpointData, WarmStartReport};
pub use config::{FusionPoint, ModelConfig, Stream, Variant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{halve, ConvSubsample};
use crate::autodiff::Var;
use crate::conformer::{AttentionKind, ConformerBlock, ConformerBlockConfig, StageTransition};
use crate::dcim::{tap_layers, Adapter, DcimLayer};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::visual::VisualFrontend;

/// One utterance as seen by a model: CMVN'd log-mel features `[F, n_mels]`
/// and/or a clip `[T, H, W]`, whichever the variant consumes.
#[derive(Clone, Debug)]
pub struct ModelInput<S> {
    pub mel: Option<Tensor<S>>,
    pub video: Option<Tensor<S>>,
}

pub struct ModelOutput {
    /// Final log-probabilities `[T', V]`.
    pub logp: Var,
    /// Log-probabilities of the intermediate heads, in layer order.
    pub taps: Vec<Var>,
    /// Audio and visual streams where the middle stage ends, before stage
    /// 3 and fusion.
    pub audio_stream: Option<Var>,
    pub visual_stream: Option<Var>,
}

#[derive(Clone, Debug)]
struct AudioFront {
    subsample: ConvSubsample,
    stage1: Vec<ConformerBlock>,
    trans12: StageTransition,
}

#[derive(Clone, Debug)]
enum Middle {
    Audio(Vec<ConformerBlock>),
    Visual(Vec<ConformerBlock>),
    Dual(Vec<DcimLayer>),
}

#[derive(Clone, Debug)]
struct Net {
    audio: Option<AudioFront>,
    visual: Option<VisualFrontend>,
    middle: Middle,
    trans23: Option<StageTransition>,
    fusion: Option<Adapter>,
    stage3: Vec<ConformerBlock>,
    head: Linear,
    inter_head: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore<S>,
    net: Net,
}

impl<S: Scalar> Model<S> {
    /// Builds a freshly initialized network. Initialization depends only on
    /// `seed`.
    pub fn new(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build(&mut ParamBuilder::new(&mut params, &mut rng), cfg, variant)?;
        let mut model = Self {
            cfg: cfg.clone(),
            variant,
            params,
            net,
        };
        if variant == Variant::Vsr {
            // alone, a zero-output fusion adapter would cut the VSR in two
            let w = model.params.id("fusion.adapter.l3.w").expect("fusion adapter");
            let shape = model.params.get(w).shape().to_vec();
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            *model.params.get_mut(w) = Tensor::from_fn(&shape, |_| S::lit(rand::Rng::random_range(&mut rng, -bound..=bound)));
        }
        Ok(model)
    }

    /// Same network at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            variant: self.variant,
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    pub fn digest(&self) -> u64 {
        self.cfg.digest(self.variant)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Parameter counts per top-level module, in build order. Empty modules
    /// are left out.
    pub fn module_counts(&self) -> Vec<(&'static str, usize)> {
        const MODULES: [&str; 12] = [
            "audio.frontend.",
            "audio.stage1.",
            "audio.trans12.",
            "audio.stage2.",
            "visual.frontend.",
            "visual.block",
            "dcim.",
            "audio.trans23.",
            "fusion.",
            "audio.stage3.",
            "head.",
            "inter_head.",
        ];
        MODULES
            .iter()
            .map(|&m| (m.trim_end_matches('.'), self.params.count_prefix(m)))
            .filter(|&(_, n)| n > 0)
            .collect()
    }

    /// Number of output frames for an input of `mel_frames` and/or
    /// `video_frames`.
    pub fn output_len(&self, mel_frames: Option<usize>, video_frames: Option<usize>) -> usize {
        let audio = mel_frames.map(|f| {
            let t = ConvSubsample::out_len(f);
            if self.cfg.stage1_stride == 2 {
                halve(t)
            } else {
                t
            }
        });
        let video = video_frames.map(|f| self.cfg.visual.out_len(f));
        match (audio, video) {
            (Some(a), Some(v)) => a.min(v),
            (a, v) => a.or(v).unwrap_or(0),
        }
    }

    /// Runs the network on one utterance. The tape's training flag decides
    /// whether dropout is active.
    pub fn forward(&self, ctx: &Ctx<'_, S>, input: &ModelInput<S>) -> Result<ModelOutput> {
        let t = ctx.tape;
        let net = &self.net;
        let take = |x: &Option<Tensor<S>>, what: &str| {
            x.as_ref()
                .map(|v| t.constant(v.clone()))
                .ok_or_else(|| Error::arg(format!("{} model needs {what} input", self.variant)))
        };

        let audio = match &net.audio {
            None => None,
            Some(front) => {
                let mel = take(&input.mel, "audio")?;
                let mut x = front.subsample.forward(ctx, mel)?;
                let mut mask = vec![true; t.shape(x)[0]];
                for b in &front.stage1 {
                    (x, mask) = b.forward(ctx, x, &mask)?;
                }
                let (x, _) = front.trans12.forward(ctx, x, &mask)?;
                Some(x)
            }
        };
        let visual = match &net.visual {
            None => None,
            Some(front) => Some(front.forward(ctx, take(&input.video, "video")?)?),
        };
        let (audio, visual) = trim_to_common(ctx, audio, visual)?;
        let len = t.shape(audio.or(visual).expect("at least one stream"))[0];
        let mask = vec![true; len];

        let mut taps = Vec::new();
        let (audio, visual) = match &net.middle {
            Middle::Audio(blocks) => (Some(run(ctx, blocks, audio.expect("audio"), &mask)?), None),
            Middle::Visual(blocks) => (None, Some(run(ctx, blocks, visual.expect("visual"), &mask)?)),
            Middle::Dual(layers) => {
                let (mut a, mut v) = (audio.expect("audio"), visual.expect("visual"));
                let tapped = tap_layers(layers.len());
                for layer in layers {
                    let out = layer.forward(ctx, a, v, &mask)?;
                    (a, v) = (out.audio, out.visual);
                    let tap = match self.cfg.inter_ctc_stream {
                        Stream::Audio => out.audio_tap,
                        Stream::Visual => out.visual_tap,
                    };
                    if let (Some(tap), Some(head), true) = (tap, &net.inter_head, tapped.contains(&layer.index)) {
                        taps.push(t.log_softmax(head.forward(ctx, tap)?, 1)?);
                    }
                }
                (Some(a), Some(v))
            }
        };

        let (audio_stream, visual_stream) = (audio, visual);
        let fused = |x: Var| -> Result<Var> {
            match (&net.fusion, visual) {
                (Some(f), Some(v)) => t.add(x, f.forward(ctx, v)?),
                _ => Ok(x),
            }
        };
        let mut x = match (&net.trans23, audio) {
            (Some(tr), Some(a)) => tr.forward(ctx, a, &mask)?.0,
            // visual-only: the fusion adapter is the way into stage 3
            _ => net.fusion.as_ref().expect("fusion adapter").forward(ctx, visual.expect("visual"))?,
        };
        let at_entry = self.cfg.fusion_point == FusionPoint::Stage3Entry;
        if audio.is_some() && at_entry {
            x = fused(x)?;
        }
        x = run(ctx, &net.stage3, x, &mask)?;
        if audio.is_some() && !at_entry {
            x = fused(x)?;
        }
        let logp = t.log_softmax(net.head.forward(ctx, x)?, 1)?;
        Ok(ModelOutput {
            logp,
            taps,
            audio_stream,
            visual_stream,
        })
    }
}

fn run<S: Scalar>(ctx: &Ctx<'_, S>, blocks: &[ConformerBlock], mut x: Var, mask: &[bool]) -> Result<Var> {
    for b in blocks {
        x = b.forward(ctx, x, mask)?.0;
    }
    Ok(x)
}

/// Cuts both streams to their common length. The synthetic front-ends
/// produce equal lengths; real inputs may differ by a frame.
fn trim_to_common<S: Scalar>(ctx: &Ctx<'_, S>, a: Option<Var>, v: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
    let t = ctx.tape;
    let len = |x: Option<Var>| x.map(|x| t.shape(x)[0]);
    let n = match (len(a), len(v)) {
        (Some(x), Some(y)) => x.min(y),
        (x, y) => x.or(y).unwrap_or(0),
    };
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let cut = |x: Option<Var>| -> Result<Option<Var>> {
        x.map(|x| if t.shape(x)[0] == n { Ok(x) } else { t.slice(x, 0, 0, n) }).transpose()
    };
    Ok((cut(a)?, cut(v)?))
}

fn block_cfg(cfg: &ModelConfig, dim: usize) -> ConformerBlockConfig {
    ConformerBlockConfig {
        n_heads: cfg.n_heads,
        conv_kernel: cfg.conv_kernel,
        ff_expansion: cfg.ff_expansion,
        relative_pos: cfg.relative_pos,
        dropout: cfg.dropout,
        ..ConformerBlockConfig::new(dim)
    }
}

fn blocks<S: Scalar>(pb: &mut ParamBuilder<'_, S>, prefix: &str, n: usize, cfg: &ConformerBlockConfig) -> Result<Vec<ConformerBlock>> {
    (1..=n).map(|i| ConformerBlock::new(pb, &format!("{prefix}.block{i}"), cfg)).collect()
}

fn build<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cfg: &ModelConfig, variant: Variant) -> Result<Net> {
    let [d1, d2, d3] = [cfg.audio_dims[0], cfg.audio_dims[1], cfg.audio_dims[2]];
    let [n1, n2, n3] = [cfg.audio_layers[0], cfg.audio_layers[1], cfg.audio_layers[2]];

    let audio = if variant.uses_audio() {
        let subsample = ConvSubsample::new(&mut pb.sub("audio.frontend"), cfg.audio.n_mels, cfg.subsample_channels, d1)?;
        let grouped = ConformerBlockConfig {
            attention: AttentionKind::Grouped(cfg.stage1_group),
            ..block_cfg(cfg, d1)
        };
        let mut stage1 = Vec::with_capacity(n1);
        for i in 1..=n1 {
            let c = ConformerBlockConfig {
                conv_stride: if i == 1 { cfg.stage1_stride } else { 1 },
                ..grouped.clone()
            };
            stage1.push(ConformerBlock::new(pb, &format!("audio.stage1.block{i}"), &c)?);
        }
        let trans12 = StageTransition::new(pb, "audio.trans12", d1, d2, 1, cfg.conv_kernel)?;
        Some(AudioFront { subsample, stage1, trans12 })
    } else {
        None
    };

    let visual = if variant.uses_video() {
        Some(VisualFrontend::new(&mut pb.sub("visual.frontend"), &cfg.visual_for_build())?)
    } else {
        None
    };

    let mid = block_cfg(cfg, d2);
    let middle = match variant {
        Variant::Asr => Middle::Audio(blocks(pb, "audio.stage2", n2, &mid)?),
        Variant::Vsr => Middle::Visual(blocks(pb, "visual", cfg.visual_layers, &mid)?),
        Variant::Avsr => {
            let a = blocks(pb, "audio.stage2", n2, &mid)?;
            let v = blocks(pb, "visual", cfg.visual_layers, &mid)?;
            let mut layers = Vec::with_capacity(n2);
            for (i, (a, v)) in a.into_iter().zip(v).enumerate() {
                let paths = cfg.dcim_mode.paths(i + 1, n2);
                layers.push(DcimLayer::new(pb, i + 1, a, v, cfg.adapter_bottleneck, paths, cfg.adapter_sharing)?);
            }
            Middle::Dual(layers)
        }
    };

    let trans23 = if variant.uses_audio() {
        Some(StageTransition::new(pb, "audio.trans23", d2, d3, 1, cfg.conv_kernel)?)
    } else {
        None
    };
    let fusion = if variant.uses_video() {
        Some(Adapter::new(pb, "fusion.adapter", [d2, cfg.fusion_bottleneck, d3])?)
    } else {
        None
    };
    let stage3 = blocks(pb, "audio.stage3", n3, &block_cfg(cfg, d3))?;
    let head = Linear::new(pb, "head", d3, cfg.vocab, true)?;
    let inter_head = if variant == Variant::Avsr {
        Some(Linear::new(pb, "inter_head", d2, cfg.vocab, true)?)
    } else {
        None
    };
    Ok(Net {
        audio,
        visual,
        middle,
        trans23,
        fusion,
        stage3,
        head,
        inter_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn input(cfg: &ModelConfig, units: usize, seed: u64) -> ModelInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = move |_: usize| rand::Rng::random_range(&mut rng, -1.0..1.0);
        let [h, w] = cfg.visual.input_size;
        ModelInput {
            mel: Some(Tensor::from_fn(&[16 * units - 2, cfg.audio.n_mels], &mut r)),
            video: Some(Tensor::from_fn(&[4 * units, h, w], |i| 0.5 + 0.5 * r(i))),
        }
    }

    #[test]
    fn names_nest_across_variants() {
        let cfg = ModelConfig::tiny();
        let asr = Model::<f32>::new(&cfg, Variant::Asr, 1).unwrap();
        let vsr = Model::<f32>::new(&cfg, Variant::Vsr, 1).unwrap();
        let avsr = Model::<f32>::new(&cfg, Variant::Avsr, 1).unwrap();
        for n in asr.params.names().chain(vsr.params.names()) {
            let id = avsr.params.id(n).unwrap_or_else(|| panic!("{n} missing from AVSR"));
            let shape = avsr.params.get(id).shape();
            let own = asr.params.by_name(n).or(vsr.params.by_name(n)).unwrap().shape();
            assert_eq!(shape, own, "{n}");
        }
        let sum: usize = avsr.module_counts().iter().map(|m| m.1).sum();
        assert_eq!(sum, avsr.param_count());
    }

    #[test]
    fn output_lengths_follow_the_chain() {
        let cfg = ModelConfig::tiny();
        for variant in [Variant::Asr, Variant::Vsr, Variant::Avsr] {
            let m = Model::<f64>::new(&cfg, variant, 3).unwrap();
            for units in [1, 3] {
                let tape = Tape::new();
                let out = m.forward(&Ctx::inference(&tape, &m.params), &input(&cfg, units, 4)).unwrap();
                assert_eq!(tape.shape(out.logp), vec![2 * units, cfg.vocab], "{variant}");
                assert_eq!(m.output_len(Some(16 * units - 2), Some(4 * units)), 2 * units);
                let sums = tape.value(out.logp).map(|v| v.exp());
                for r in 0..2 * units {
                    let s: f64 = sums.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
                let expected_taps = if variant == Variant::Avsr { tap_layers(cfg.dcim_layers()).len() } else { 0 };
                assert_eq!(out.taps.len(), expected_taps);
            }
        }
    }

    #[test]
    fn missing_stream_is_an_error() {
        let cfg = ModelConfig::tiny();
        let m = Model::<f64>::new(&cfg, Variant::Avsr, 0).unwrap();
        let mut x = input(&cfg, 1, 0);
        x.video = None;
        let tape = Tape::new();
        assert!(m.forward(&Ctx::inference(&tape, &m.params), &x).is_err());
    }

    #[test]
    fn fresh_avsr_with_copied_weights_equals_asr() {
        let cfg = ModelConfig::tiny();
        let asr = Model::<f64>::new(&cfg, Variant::Asr, 5).unwrap();
        let mut avsr = Model::<f64>::new(&cfg, Variant::Avsr, 6).unwrap();
        for e in asr.params.entries() {
            let id = avsr.params.id(&e.name).unwrap();
            *avsr.params.get_mut(id) = e.value.clone();
        }
        let x = input(&cfg, 2, 7);
        let ta = Tape::new();
        let ya = asr.forward(&Ctx::inference(&ta, &asr.params), &x).unwrap();
        let tb = Tape::new();
        let yb = avsr.forward(&Ctx::inference(&tb, &avsr.params), &x).unwrap();
        assert!(ta.value(ya.logp).bit_eq(&tb.value(yb.logp)));
    }
}
