//! The self-check suite run by the `verify` command.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ctc_oracle::ctc_grid;
use super::gradcheck::{check_gradients, project, GradCheckOptions, GradCheckReport};
use crate::audio::LogMel;
use crate::autodiff::{Tape, Var};
use crate::conformer::{AttentionKind, ConformerBlock, ConformerBlockConfig};
use crate::ctc::{ctc_loss, LabelSequence};
use crate::dcim::{AdapterSharing, DcimLayer, DcimMode};
use crate::error::Result;
use crate::model::{CheckpointData, Model, ModelConfig, ModelInput, Variant};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamStore};
use crate::synth::{generate_corpus, SynthSpec};
use crate::tensor::Tensor;

pub type LossFn = Box<dyn Fn(&Ctx<'_, f64>, &[Var]) -> Result<Var>>;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// One finite-difference case per tape primitive.
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, LossFn)> = Vec::new();
    let s = |shape: &[usize], seed: u64| rand_tensor(shape, 100 + seed);
    cases.push(("add", vec![s(&[3, 4], 1), s(&[4], 2)], Box::new(|c, v| {
        let y = c.tape.add(v[0], v[1])?;
        project(c.tape, y, 1)
    })));
    cases.push(("sub", vec![s(&[3, 4], 3), s(&[3, 4], 4)], Box::new(|c, v| {
        let y = c.tape.sub(v[0], v[1])?;
        project(c.tape, y, 2)
    })));
    cases.push(("mul", vec![s(&[2, 3, 2], 5), s(&[3, 2], 6)], Box::new(|c, v| {
        let y = c.tape.mul(v[0], v[1])?;
        project(c.tape, y, 3)
    })));
    cases.push(("matmul", vec![s(&[2, 3, 4], 7), s(&[4, 5], 8)], Box::new(|c, v| {
        let y = c.tape.matmul(v[0], v[1])?;
        project(c.tape, y, 4)
    })));
    cases.push(("linear", vec![s(&[3, 4], 9), s(&[4, 2], 10), s(&[2], 11)], Box::new(|c, v| {
        let y = c.tape.linear(v[0], v[1], Some(v[2]))?;
        project(c.tape, y, 5)
    })));
    cases.push(("conv1d_depthwise", vec![s(&[7, 3], 12), s(&[3, 5], 13), s(&[3], 14)], Box::new(|c, v| {
        let y = c.tape.conv1d_depthwise(v[0], v[1], v[2], 1)?;
        project(c.tape, y, 6)
    })));
    cases.push(("conv1d_depthwise_stride2", vec![s(&[7, 3], 15), s(&[3, 3], 16), s(&[3], 17)], Box::new(|c, v| {
        let y = c.tape.conv1d_depthwise(v[0], v[1], v[2], 2)?;
        project(c.tape, y, 7)
    })));
    cases.push(("conv2d", vec![s(&[2, 2, 5, 4], 18), s(&[3, 2, 3, 3], 19), s(&[3], 20)], Box::new(|c, v| {
        let y = c.tape.conv2d(v[0], v[1], v[2], [2, 1], [1, 1])?;
        project(c.tape, y, 8)
    })));
    cases.push(("conv3d", vec![s(&[2, 3, 5, 5], 21), s(&[2, 2, 3, 3, 3], 22), s(&[2], 23)], Box::new(|c, v| {
        let y = c.tape.conv3d(v[0], v[1], v[2], [1, 2, 2], [1, 1, 1])?;
        project(c.tape, y, 9)
    })));
    cases.push(("glu", vec![s(&[3, 6], 24)], Box::new(|c, v| {
        let y = c.tape.glu(v[0])?;
        project(c.tape, y, 10)
    })));
    cases.push(("swish", vec![s(&[3, 4], 25)], Box::new(|c, v| project(c.tape, c.tape.swish(v[0]), 11))));
    cases.push(("sigmoid", vec![s(&[3, 4], 26)], Box::new(|c, v| project(c.tape, c.tape.sigmoid(v[0]), 12))));
    cases.push(("relu", vec![s(&[3, 4], 27)], Box::new(|c, v| project(c.tape, c.tape.relu(v[0]), 13))));
    cases.push(("exp_ln_square", vec![s(&[5], 28).map(|x| x.abs() + 0.5)], Box::new(|c, v| {
        let y = c.tape.ln(v[0]);
        let y = c.tape.exp(c.tape.square(y));
        project(c.tape, y, 14)
    })));
    cases.push(("transpose", vec![s(&[2, 3, 4], 29)], Box::new(|c, v| {
        let y = c.tape.transpose(v[0], 0, 2)?;
        project(c.tape, y, 15)
    })));
    cases.push(("permute_reshape", vec![s(&[2, 3, 4], 30)], Box::new(|c, v| {
        let y = c.tape.permute(v[0], &[1, 2, 0])?;
        let y = c.tape.reshape(y, &[12, 2])?;
        project(c.tape, y, 16)
    })));
    cases.push(("concat", vec![s(&[2, 3], 31), s(&[2, 2], 32)], Box::new(|c, v| {
        let y = c.tape.concat(&[v[0], v[1]], 1)?;
        project(c.tape, y, 17)
    })));
    cases.push(("slice_pad", vec![s(&[5, 3], 33)], Box::new(|c, v| {
        let y = c.tape.slice(v[0], 0, 1, 3)?;
        let y = c.tape.pad(y, 1, 1, 2)?;
        project(c.tape, y, 18)
    })));
    cases.push(("masked_fill", vec![s(&[3, 4], 34)], Box::new(|c, v| {
        let y = c.tape.masked_fill(v[0], &[false, true, false, true], -3.0)?;
        project(c.tape, y, 19)
    })));
    cases.push(("sum_mean_axis", vec![s(&[3, 4, 2], 35)], Box::new(|c, v| {
        let a = c.tape.sum_axis(v[0], 1)?;
        let b = c.tape.mean_axis(v[0], 2)?;
        let (pa, pb) = (project(c.tape, a, 20)?, project(c.tape, b, 21)?);
        let m = c.tape.mean(v[0]);
        let s = c.tape.add(pa, pb)?;
        c.tape.add(s, m)
    })));
    cases.push(("softmax", vec![s(&[3, 5], 36)], Box::new(|c, v| {
        let y = c.tape.softmax(v[0], 0)?;
        project(c.tape, y, 22)
    })));
    cases.push(("masked_softmax", vec![s(&[3, 4], 37)], Box::new(|c, v| {
        let y = c.tape.masked_softmax(v[0], &[true, true, false, true])?;
        project(c.tape, y, 23)
    })));
    cases.push(("log_softmax", vec![s(&[4, 5], 38)], Box::new(|c, v| {
        let y = c.tape.log_softmax(v[0], 1)?;
        project(c.tape, y, 24)
    })));
    cases.push(("layer_norm", vec![s(&[3, 6], 39), s(&[6], 40), s(&[6], 41)], Box::new(|c, v| {
        let y = c.tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(c.tape, y, 25)
    })));
    cases.push(("rel_shift", vec![s(&[2, 3, 5], 42)], Box::new(|c, v| {
        let y = c.tape.rel_shift(v[0])?;
        project(c.tape, y, 26)
    })));
    cases.push(("avg_pool_rows", vec![s(&[5, 3], 43)], Box::new(|c, v| {
        let y = c.tape.avg_pool_rows(v[0], 2)?;
        project(c.tape, y, 27)
    })));
    cases.push(("scale_add_scalar", vec![s(&[4], 44)], Box::new(|c, v| {
        let y = c.tape.add_scalar(c.tape.scale(v[0], 0.37), 1.5);
        project(c.tape, c.tape.neg(y), 28)
    })));
    cases
}

/// Worst of the primitive checks, as one report.
pub fn check_primitives() -> Result<GradCheckReport> {
    let store = ParamStore::new();
    let mut worst: Option<GradCheckReport> = None;
    let mut compared = 0;
    for (name, inputs, f) in primitive_cases() {
        let r = check_gradients(name, &store, &inputs, GradCheckOptions::primitive(), f)?;
        compared += r.compared;
        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err || !r.passed()) {
            worst = Some(r);
        }
    }
    let mut r = worst.expect("at least one primitive");
    r.worst = format!("{}: {}", r.name, r.worst);
    r.name = "primitives".into();
    r.compared = compared;
    Ok(r)
}

fn block_cfg(attention: AttentionKind, conv_stride: usize) -> ConformerBlockConfig {
    ConformerBlockConfig {
        n_heads: 2,
        conv_kernel: 3,
        ff_expansion: 2,
        attention,
        conv_stride,
        dropout: 0.0,
        ..ConformerBlockConfig::new(8)
    }
}

fn randomize(store: &mut ParamStore<f64>, pattern: &str) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(pattern) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = rand_tensor(&shape, 500 + id.index() as u64);
        }
    }
}

/// One Conformer block: standard attention, then grouped attention with a
/// stride-2 convolution.
pub fn check_conformer_block() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (name, attention, stride) in [
        ("conformer block", AttentionKind::Standard, 1),
        ("conformer block (grouped, stride 2)", AttentionKind::Grouped(2), 2),
    ] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ConformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), "block", &block_cfg(attention, stride))?;
        // nonzero position biases so their gradients are exercised
        randomize(&mut store, "pos_");
        let mask = [true, true, true, true, false];
        out.push(check_gradients(name, &store, &[rand_tensor(&[5, 8], 4)], GradCheckOptions::composed(), |c, v| {
            let (y, _) = block.forward(c, v[0], &mask)?;
            project(c.tape, y, 5)
        })?);
    }
    Ok(out)
}

/// One full DCIM layer with every path on and nonzero adapters; the loss
/// reads both streams.
pub fn check_dcim_layer() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let cfg = block_cfg(AttentionKind::Standard, 1);
    let a = ConformerBlock::new(&mut pb, "audio", &cfg)?;
    let v = ConformerBlock::new(&mut pb, "visual", &cfg)?;
    let layer = DcimLayer::new(&mut pb, 1, a, v, 4, DcimMode::dual().paths(1, 1), AdapterSharing::Shared)?;
    randomize(&mut store, ".l3.");
    check_gradients(
        "dcim layer",
        &store,
        &[rand_tensor(&[4, 8], 7), rand_tensor(&[4, 8], 8)],
        GradCheckOptions::composed(),
        |c, x| {
            let o = layer.forward(c, x[0], x[1], &[true; 4])?;
            let pa = project(c.tape, o.audio, 9)?;
            let pv = project(c.tape, o.visual, 10)?;
            c.tape.add(pa, pv)
        },
    )
}

/// Linear layer, log-softmax and CTC loss, differentiated end to end.
pub fn check_ctc_end_to_end() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lin = Linear::new(&mut ParamBuilder::new(&mut store, &mut rng), "proj", 6, 5, true)?;
    let labels = LabelSequence::new(vec![1, 3, 3], 5)?;
    check_gradients("ctc end to end", &store, &[rand_tensor(&[7, 6], 12)], GradCheckOptions::composed(), |c, v| {
        let z = lin.forward(c, v[0])?;
        let lp = c.tape.log_softmax(z, 1)?;
        ctc_loss(c.tape, lp, &labels)
    })
}

#[derive(Clone, Debug)]
pub struct RateAuditRow {
    pub tokens: usize,
    pub mel_frames: usize,
    pub video_frames: usize,
    pub audio_at_fusion: usize,
    pub video_at_fusion: usize,
    pub output_frames: usize,
    /// Frames CTC needs for the worst case, every token a repeat.
    pub ctc_needs: usize,
}

impl RateAuditRow {
    pub fn ok(&self) -> bool {
        self.audio_at_fusion == self.video_at_fusion && self.output_frames >= self.ctc_needs
    }
}

/// Frame counts through both front-ends for 1..=`max_tokens` tokens.
pub fn rate_audit(cfg: &ModelConfig, spec: &SynthSpec, max_tokens: usize) -> Result<Vec<RateAuditRow>> {
    let model = Model::<f32>::new(cfg, Variant::Avsr, 0)?;
    let lm = LogMel::new(&cfg.audio)?;
    (1..=max_tokens)
        .map(|u| {
            let spec = SynthSpec {
                min_tokens: u,
                max_tokens: u,
                ..spec.clone()
            };
            let utt = generate_corpus(&spec, 1)?.remove(0);
            let mel_frames = lm.compute(&utt.audio)?.shape()[0];
            let video_frames = utt.video.frames().shape()[0];
            let audio_at_fusion = model.output_len(Some(mel_frames), None);
            let video_at_fusion = model.output_len(None, Some(video_frames));
            Ok(RateAuditRow {
                tokens: u,
                mel_frames,
                video_frames,
                audio_at_fusion,
                video_at_fusion,
                output_frames: model.output_len(Some(mel_frames), Some(video_frames)),
                ctc_needs: 2 * u - 1,
            })
        })
        .collect()
}

fn tiny_input(cfg: &ModelConfig, units: usize, seed: u64) -> ModelInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.visual.input_size;
    let mel = Tensor::from_fn(&[16 * units - 2, cfg.audio.n_mels], |_| rng.random_range(-1.0..1.0));
    let video = Tensor::from_fn(&[4 * units, h, w], |_| rng.random_range(0.0..1.0));
    ModelInput {
        mel: Some(mel),
        video: Some(video),
    }
}

fn logits(model: &Model<f64>, input: &ModelInput<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let out = model.forward(&Ctx::inference(&tape, &model.params), input)?;
    Ok(tape.detach(out.logp))
}

/// A warm-started AVSR reproduces the ASR's output bit for bit at 64-bit.
pub fn check_warm_start(cfg: &ModelConfig) -> Result<bool> {
    let asr = Model::<f32>::new(cfg, Variant::Asr, 21)?;
    let vsr = Model::<f32>::new(cfg, Variant::Vsr, 22)?;
    let (avsr, _) = Model::<f64>::warm_start(cfg, 23, &CheckpointData::from_model(&asr), Some(&CheckpointData::from_model(&vsr)))?;
    let input = tiny_input(cfg, 3, 24);
    let a = logits(&asr.cast::<f64>(), &ModelInput { video: None, ..input.clone() })?;
    let b = logits(&avsr, &input)?;
    Ok(a.bit_eq(&b))
}

/// Save then load gives bit-identical outputs.
pub fn check_checkpoint_round_trip(cfg: &ModelConfig, dir: &Path) -> Result<bool> {
    let path = dir.join("verify_round_trip.ckpt");
    let m = Model::<f32>::new(cfg, Variant::Avsr, 31)?;
    m.save(&path)?;
    let back = Model::<f32>::load(&path)?;
    std::fs::remove_file(&path)?;
    let input = tiny_input(cfg, 2, 32);
    Ok(logits(&m.cast(), &input)?.bit_eq(&logits(&back.cast(), &input)?))
}

#[derive(Clone, Debug)]
pub struct SuiteItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub items: Vec<SuiteItem>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.items.push(SuiteItem {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn grad(&mut self, r: GradCheckReport) {
        let detail = format!("max rel err {:.2e} over {} entries (tol {:.0e})", r.max_rel_err, r.compared, r.tolerance);
        self.push(format!("gradient: {}", r.name), r.passed(), detail);
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            writeln!(f, "{} {:<40} {}", if i.passed { "PASS" } else { "FAIL" }, i.name, i.detail)?;
        }
        Ok(())
    }
}

/// Gradient checks, the CTC oracle grid, the rate audit, warm start and
/// checkpoint round trip. `scratch` receives a temporary checkpoint.
pub fn run_suite(scratch: &Path) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let grid = ctc_grid(50, 0)?;
    report.push(
        "ctc oracle grid",
        grid.passed(),
        format!("{} cases, max |dp - enum| {:.2e}", grid.cases, grid.max_abs_diff),
    );
    report.grad(check_primitives()?);
    for r in check_conformer_block()? {
        report.grad(r);
    }
    report.grad(check_dcim_layer()?);
    report.grad(check_ctc_end_to_end()?);

    let toy = ModelConfig::toy();
    let spec = SynthSpec {
        vocab_size: toy.vocab - 1,
        canvas: toy.visual.input_size[0],
        ..SynthSpec::default()
    };
    let rows = rate_audit(&toy, &spec, 8)?;
    let bad: Vec<usize> = rows.iter().filter(|r| !r.ok()).map(|r| r.tokens).collect();
    report.push(
        "rate alignment",
        bad.is_empty(),
        if bad.is_empty() {
            format!("1..={} tokens: streams agree, output 2U frames", rows.len())
        } else {
            format!("misaligned at U = {bad:?}")
        },
    );

    let tiny = ModelConfig::tiny();
    report.push("warm start reproduces asr", check_warm_start(&tiny)?, "bitwise at 64-bit");
    report.push("checkpoint round trip", check_checkpoint_round_trip(&tiny, scratch)?, "bitwise forward outputs");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_audit_matches_the_length_chain() {
        let cfg = ModelConfig::toy();
        let spec = SynthSpec {
            vocab_size: cfg.vocab - 1,
            ..SynthSpec::default()
        };
        for r in rate_audit(&cfg, &spec, 4).unwrap() {
            assert!(r.ok(), "{r:?}");
            assert_eq!(r.mel_frames, 16 * r.tokens - 2);
            assert_eq!(r.video_frames, 4 * r.tokens);
            assert_eq!(r.output_frames, 2 * r.tokens);
        }
    }
}
