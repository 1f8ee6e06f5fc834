//! Adam with a warmup schedule, feature preparation, the per-stage
//! training loop and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{spec_augment, LogMel};
use crate::autodiff::Tape;
use crate::ctc::{ctc_loss, greedy_decode, inter_ctc_combine, wer, LabelSequence};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelInput, Variant};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::synth::{NoiseSpec, Utterance};
use crate::tensor::Tensor;

/// `base · dim^-0.5 · min(step^-0.5, step · warmup^-1.5)`, for `step >= 1`.
pub fn noam_lr(step: u64, dim: usize, base: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    base * (dim as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup.max(1) as f64).powf(-1.5))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are untouched. A
    /// non-finite gradient rejects the whole step and returns `false`.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: f64) -> bool {
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            log::warn!("non-finite gradient at step {}, update skipped", self.step + 1);
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = params.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k].as_f64();
                let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
                let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
                m[k] = S::lit(mk);
                v[k] = S::lit(vk);
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = S::lit(p[k].as_f64() - upd);
            }
        }
        true
    }
}

/// Rescales the gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Option<Tensor<S>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let c = S::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

/// Parameters matched by any pattern: `prefix*`, an exact name, or a dotted
/// prefix such as `audio.stage1`. A pattern that matches nothing is an
/// error.
pub fn freeze_mask<S: Scalar>(params: &ParamStore<S>, patterns: &[String]) -> Result<Vec<bool>> {
    let mut mask = vec![false; params.len()];
    for pat in patterns {
        let hits = |name: &str| match pat.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => name == pat || name.starts_with(&format!("{pat}.")),
        };
        let mut any = false;
        for (i, name) in params.names().enumerate() {
            if hits(name) {
                mask[i] = true;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!("freeze pattern `{pat}` matches no parameter")));
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: u64,
    pub clip_norm: f64,
    pub seed: u64,
    pub freeze: Vec<String>,
    /// SNRs (dB) of the cached noisy copies used for augmentation.
    pub noise_snrs: Vec<f64>,
    /// Chance of replacing the clean audio by a noisy copy.
    pub noise_prob: f64,
}

impl TrainConfig {
    /// Desk-scale preset for a stage.
    pub fn toy(stage: Variant) -> Self {
        let base = Self {
            epochs: 20,
            batch_size: 8,
            base_lr: 0.16,
            warmup: 250,
            clip_norm: 5.0,
            seed: 0,
            freeze: Vec::new(),
            noise_snrs: Vec::new(),
            noise_prob: 0.0,
        };
        match stage {
            Variant::Asr => base,
            Variant::Vsr => base,
            Variant::Avsr => Self {
                epochs: 6,
                noise_snrs: vec![-5.0, 0.0, 5.0, 10.0],
                noise_prob: 0.5,
                ..base
            },
        }
    }

    /// Published scale, kept as a named preset only.
    pub fn paper(stage: Variant) -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            warmup: 10_000,
            noise_snrs: Vec::new(),
            noise_prob: 0.0,
            ..Self::toy(stage)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("train.base_lr and train.clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || (self.noise_prob > 0.0 && self.noise_snrs.is_empty()) {
            return Err(Error::Config("train.noise_prob needs a value in [0, 1] and a nonempty train.noise_snrs".into()));
        }
        Ok(())
    }
}

/// Cached model inputs of one utterance.
#[derive(Clone, Debug)]
pub struct Example<S> {
    pub id: usize,
    pub labels: LabelSequence,
    pub mel: Option<Tensor<S>>,
    /// Features of noisy copies, one per augmentation SNR.
    pub noisy_mels: Vec<Tensor<S>>,
    pub video: Option<Tensor<S>>,
}

impl<S: Scalar> Example<S> {
    pub fn input(&self, noisy: Option<usize>) -> ModelInput<S> {
        ModelInput {
            mel: match noisy {
                Some(k) => Some(self.noisy_mels[k].clone()),
                None => self.mel.clone(),
            },
            video: self.video.clone(),
        }
    }
}

/// How to turn waveforms into cached features.
#[derive(Clone, Debug, Default)]
pub struct FeatureOptions {
    /// Replace the clean audio by a noisy copy at this SNR.
    pub snr_db: Option<f64>,
    pub augment_snrs: Vec<f64>,
    pub noise_seed: u64,
}

/// Zero mean, unit variance over a whole clip.
pub fn standardize(clip: &Tensor<f64>) -> Tensor<f64> {
    let n = clip.numel() as f64;
    let mean = clip.data().iter().sum::<f64>() / n;
    let var = clip.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-6);
    clip.map(|v| (v - mean) * inv)
}

/// Extracts the features a `variant` consumes from every utterance.
pub fn prepare_examples<S: Scalar>(corpus: &[Utterance], cfg: &ModelConfig, variant: Variant, opts: &FeatureOptions) -> Result<Vec<Example<S>>> {
    let lm = LogMel::new(&cfg.audio)?;
    let feats = |wave: &[f64]| lm.features(wave).map(|t| t.cast::<S>());
    corpus
        .iter()
        .map(|u| {
            let labels = LabelSequence::new(u.tokens.clone(), cfg.vocab)?;
            let (mel, noisy_mels) = if variant.uses_audio() {
                let audio = match opts.snr_db {
                    Some(snr) => NoiseSpec { snr_db: snr, seed: opts.noise_seed }.apply(&u.audio, u.id)?,
                    None => u.audio.clone(),
                };
                let noisy = opts
                    .augment_snrs
                    .iter()
                    .enumerate()
                    .map(|(k, &snr)| {
                        let spec = NoiseSpec {
                            snr_db: snr,
                            seed: opts.noise_seed.wrapping_add(1 + k as u64),
                        };
                        feats(&spec.apply(&u.audio, u.id)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(feats(&audio)?), noisy)
            } else {
                (None, Vec::new())
            };
            let video = variant.uses_video().then(|| standardize(u.video.frames()).cast::<S>());
            Ok(Example {
                id: u.id,
                labels,
                mel,
                noisy_mels,
                video,
            })
        })
        .collect()
}

/// Per-utterance training loss: CTC on the final head, combined with the
/// intermediate heads when the model has any.
pub fn utterance_loss<S: Scalar>(model: &Model<S>, ctx: &Ctx<'_, S>, input: &ModelInput<S>, labels: &LabelSequence) -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
    let out = model.forward(ctx, input)?;
    let t = ctx.tape;
    let main = ctc_loss(t, out.logp, labels)?;
    let taps = out.taps.iter().map(|&lp| ctc_loss(t, lp, labels)).collect::<Result<Vec<_>>>()?;
    let lambda = if taps.is_empty() { 0.0 } else { model.cfg.inter_ctc_lambda };
    Ok((inter_ctc_combine(t, main, &taps, lambda)?, out.logp))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_wer: f64,
    pub eval_wer: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,train_wer,eval_wer,lr";

    pub fn csv_row(&self) -> String {
        let eval = self.eval_wer.map_or(String::new(), |w| format!("{w:.6}"));
        format!("{},{:.6},{:.6},{},{:.6e}", self.epoch, self.loss, self.train_wer, eval, self.lr)
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutputs<'a> {
    pub metrics_csv: Option<&'a Path>,
    /// Rewritten after every epoch, so a diverged run keeps the last good
    /// state.
    pub checkpoint: Option<&'a Path>,
}

/// Trains `model` in place. Returns one row per epoch.
///
/// Train WER is scored on the decodes of the training passes themselves.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    cfg: &TrainConfig,
    train_set: &[Example<S>],
    eval_set: &[Example<S>],
    out: TrainOutputs<'_>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let frozen = freeze_mask(&model.params, &cfg.freeze)?;
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = model.cfg.audio_dims[2];
    let specaug = model.cfg.audio.specaug.clone();
    let use_specaug = specaug.n_freq_masks + specaug.n_time_masks > 0;
    let mut csv = match out.metrics_csv {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{}", EpochMetrics::CSV_HEADER)?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hyps, mut refs) = (0.0, Vec::new(), Vec::new());
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Option<Tensor<S>>> = vec![None; model.params.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                let noisy = (!ex.noisy_mels.is_empty() && rng.random_bool(cfg.noise_prob)).then(|| rng.random_range(0..ex.noisy_mels.len()));
                let mut input = ex.input(noisy);
                if use_specaug {
                    input.mel = input.mel.map(|m| spec_augment(&m, &specaug, &mut rng));
                }
                let tape = Tape::training(rng.random());
                let ctx = Ctx::with_frozen(&tape, &model.params, &frozen);
                let (loss, logp) = utterance_loss(model, &ctx, &input, &ex.labels)?;
                let value = tape.value(loss).item().as_f64();
                if !value.is_finite() {
                    log::error!("epoch {epoch}: non-finite loss on utterance {}", ex.id);
                    return Err(Error::Diverged { epoch });
                }
                batch_loss += value;
                hyps.push(greedy_decode(&tape.value(logp)));
                refs.push(ex.labels.tokens().to_vec());
                let scaled = tape.scale(loss, S::lit(1.0 / batch.len() as f64));
                for (acc, g) in grads.iter_mut().zip(tape.backward(scaled)?.by_tag(model.params.len())) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, g) => *acc = g,
                        _ => {}
                    }
                }
            }
            loss_sum += batch_loss;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            lr = noam_lr(adam.steps() + 1, dim, cfg.base_lr, cfg.warmup);
            adam.step(&mut model.params, &grads, lr);
        }
        let eval_wer = if eval_set.is_empty() { None } else { Some(evaluate(model, eval_set)?.wer) };
        let row = EpochMetrics {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            train_wer: wer(&refs, &hyps)?,
            eval_wer,
            lr,
        };
        log::info!("{}", row.csv_row());
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", row.csv_row())?;
            w.flush()?;
        }
        if let Some(p) = out.checkpoint {
            model.save(p)?;
        }
        history.push(row);
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub wer: f64,
    pub hyps: Vec<Vec<usize>>,
}

/// Greedy decoding of every example, dropout off.
pub fn evaluate<S: Scalar>(model: &Model<S>, examples: &[Example<S>]) -> Result<Evaluation> {
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in examples {
        let tape = Tape::new();
        let out = model.forward(&Ctx::inference(&tape, &model.params), &ex.input(None))?;
        hyps.push(greedy_decode(&tape.value(out.logp)));
    }
    let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.labels.tokens().to_vec()).collect();
    Ok(Evaluation { wer: wer(&refs, &hyps)?, hyps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthSpec};

    #[test]
    fn schedule_shape() {
        let (d, b, w) = (40, 1.0, 1000);
        let peak = noam_lr(w, d, b, w);
        let s = w as f64;
        assert!((s.powf(-0.5) - s * s.powf(-1.5)).abs() < 1e-15);
        assert!(noam_lr(1, d, b, w) < peak);
        assert!((noam_lr(1, d, b, w) - b / (d as f64).sqrt() * s.powf(-1.5)).abs() < 1e-15);
        let mut prev = peak;
        for step in w + 1..w + 10_000 {
            let lr = noam_lr(step, d, b, w);
            assert!(lr < prev);
            prev = lr;
        }
    }

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = store(&[1.0, -2.0]);
        let mut adam = Adam::new(&p);
        assert!(adam.step(&mut p, &[Some(Tensor::zeros(&[2]))], 0.1));
        assert_eq!(p.entries()[0].value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_moves_against_its_sign() {
        let mut p = store(&[0.0, 0.0]);
        let mut adam = Adam::new(&p);
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        let lr = 1e-3;
        for _ in 0..500 {
            adam.step(&mut p, &[Some(g.clone())], lr);
        }
        let x = p.entries()[0].value.data();
        // bias-corrected moments of a constant gradient give steps of lr·sign(g)
        assert!((x[0] + 500.0 * lr).abs() < 1e-6);
        assert!((x[1] - 500.0 * lr).abs() < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic_and_rejects_nan() {
        let mut p = store(&[2.0, -1.0]);
        let mut adam = Adam::new(&p);
        let loss = |p: &ParamStore<f64>| p.entries()[0].value.data().iter().map(|v| v * v).sum::<f64>();
        let before = loss(&p);
        let g = p.entries()[0].value.map(|v| 2.0 * v);
        adam.step(&mut p, &[Some(g)], 1e-2);
        assert!(loss(&p) < before);
        let snapshot = p.entries()[0].value.clone();
        assert!(!adam.step(&mut p, &[Some(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap())], 1e-2));
        assert_eq!(adam.steps(), 1);
        assert!(p.entries()[0].value.bit_eq(&snapshot));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f64 = g[0].as_ref().unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn freeze_patterns() {
        let m = Model::<f32>::new(&ModelConfig::tiny(), Variant::Asr, 0).unwrap();
        let mask = freeze_mask(&m.params, &["audio.stage1".into(), "head*".into()]).unwrap();
        for (name, &f) in m.params.names().zip(&mask) {
            assert_eq!(f, name.starts_with("audio.stage1.") || name.starts_with("head"), "{name}");
        }
        assert!(freeze_mask(&m.params, &["nothing".into()]).is_err());
    }

    #[test]
    fn frozen_parameters_stay_put_and_runs_repeat() {
        let cfg = ModelConfig::tiny();
        let spec = SynthSpec {
            vocab_size: cfg.vocab - 1,
            canvas: 16,
            max_tokens: 3,
            ..SynthSpec::default()
        };
        let corpus = generate_corpus(&spec, 3).unwrap();
        let ex = prepare_examples::<f64>(&corpus, &cfg, Variant::Asr, &FeatureOptions::default()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 2,
            freeze: vec!["audio.frontend".into()],
            ..TrainConfig::toy(Variant::Asr)
        };
        let run = || {
            let mut m = Model::<f64>::new(&cfg, Variant::Asr, 1).unwrap();
            let before = m.params.clone();
            let h = train(&mut m, &tc, &ex, &ex[..1], TrainOutputs::default()).unwrap();
            (before, m, h)
        };
        let (before, m, h) = run();
        for (a, b) in before.entries().iter().zip(m.params.entries()) {
            assert_eq!(a.value.bit_eq(&b.value), a.name.starts_with("audio.frontend."), "{}", a.name);
        }
        let (_, _, h2) = run();
        assert_eq!(h, h2);
        assert!(h.iter().all(|r| r.eval_wer.is_some()));
    }
}
