//! Audio front-end: log-mel features, SpecAugment, convolutional
//! subsampling, and the `DWV1` waveform file format.

use std::f64::consts::PI;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::Var;
use crate::binio;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
}

impl SpecAugmentConfig {
    pub fn off() -> Self {
        Self {
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 0,
            max_time_width: 0,
        }
    }
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 27,
            n_time_masks: 2,
            max_time_width: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFrontendConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub dft_size: usize,
    pub n_mels: usize,
    pub log_floor: f64,
    pub specaug: SpecAugmentConfig,
    /// Per-utterance mean/variance normalisation of every mel bin.
    pub cmvn: bool,
}

impl Default for AudioFrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_ms: 25.0,
            hop_ms: 10.0,
            dft_size: 512,
            n_mels: 80,
            log_floor: 1e-10,
            specaug: SpecAugmentConfig::default(),
            cmvn: true,
        }
    }
}

impl AudioFrontendConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.dft_size / 2 + 1
    }

    /// Number of analysis frames for `samples` input samples.
    pub fn frames(&self, samples: usize) -> Option<usize> {
        let w = self.window_len();
        (samples >= w).then(|| 1 + (samples - w) / self.hop_len())
    }

    pub fn validate(&self) -> Result<()> {
        let rule = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        rule(self.sample_rate_hz > 0, "audio.sample_rate_hz must be positive")?;
        rule(self.hop_len() >= 1, "audio.hop_ms too small")?;
        rule(self.hop_ms <= self.window_ms, "audio.hop_ms must not exceed audio.window_ms")?;
        rule(self.window_len() <= self.dft_size, "audio.window_ms exceeds audio.dft_size")?;
        rule(self.n_mels >= 1 && self.n_mels <= self.n_bins(), "audio.n_mels must be in [1, dft_size/2+1]")?;
        rule(self.log_floor > 0.0, "audio.log_floor must be positive")?;
        Ok(())
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters `[n_mels][n_bins]` equally spaced on the mel scale
/// between 0 Hz and Nyquist, plus each filter's centre frequency.
pub fn mel_filterbank(cfg: &AudioFrontendConfig) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let sr = cfg.sample_rate_hz as f64;
    let top = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sr / cfg.dft_size as f64;
    let mut bank = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, c, hi) = (points[m], points[m + 1], points[m + 2]);
        let row: Vec<f64> = (0..cfg.n_bins())
            .map(|k| {
                let f = bin_hz(k);
                ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({c:.1} Hz) covers no DFT bin; reduce n_mels or raise dft_size"
            )));
        }
        bank.push(row);
    }
    Ok((bank, points[1..=cfg.n_mels].to_vec()))
}

/// Precomputed tables for repeated log-mel extraction.
#[derive(Clone, Debug)]
pub struct LogMel {
    cfg: AudioFrontendConfig,
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bank: Vec<Vec<f64>>,
    centers: Vec<f64>,
}

impl LogMel {
    pub fn new(cfg: &AudioFrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, n, bins) = (cfg.window_len(), cfg.dft_size, cfg.n_bins());
        // periodic Hann
        let window = (0..w).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / w as f64).cos()).collect();
        let mut cos = Vec::with_capacity(bins * w);
        let mut sin = Vec::with_capacity(bins * w);
        for k in 0..bins {
            for i in 0..w {
                // reduce the phase index first to keep the argument small
                let ang = 2.0 * PI * ((k * i) % n) as f64 / n as f64;
                cos.push(ang.cos());
                sin.push(ang.sin());
            }
        }
        let (bank, centers) = mel_filterbank(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            window,
            cos,
            sin,
            bank,
            centers,
        })
    }

    pub fn config(&self) -> &AudioFrontendConfig {
        &self.cfg
    }

    /// Centre frequency (Hz) of every mel filter.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// One-sided power spectrum of a single frame (`window_len` samples),
    /// normalised so that the bins sum to the windowed frame's energy.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let (w, n, bins) = (self.window.len(), self.cfg.dft_size, self.cfg.n_bins());
        let xs: Vec<f64> = frame.iter().zip(&self.window).map(|(x, h)| x * h).collect();
        (0..bins)
            .map(|k| {
                let (c, s) = (&self.cos[k * w..(k + 1) * w], &self.sin[k * w..(k + 1) * w]);
                let re: f64 = xs.iter().zip(c).map(|(x, c)| x * c).sum();
                let im: f64 = xs.iter().zip(s).map(|(x, s)| x * s).sum();
                let double = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                double * (re * re + im * im) / n as f64
            })
            .collect()
    }

    /// Windowed frame energy `Σ (h·x)²`.
    pub fn frame_energy(&self, frame: &[f64]) -> f64 {
        frame.iter().zip(&self.window).map(|(x, h)| (x * h).powi(2)).sum()
    }

    /// Raw log-mel features `[frames, n_mels]`, before normalisation.
    pub fn compute(&self, wave: &[f64]) -> Result<Tensor<f64>> {
        let w = self.window.len();
        let frames = self.cfg.frames(wave.len()).ok_or_else(|| {
            Error::InputTooShort(format!("{} samples, one window needs {w}", wave.len()))
        })?;
        let hop = self.cfg.hop_len();
        let mut out = Vec::with_capacity(frames * self.cfg.n_mels);
        for f in 0..frames {
            let p = self.power_spectrum(&wave[f * hop..f * hop + w]);
            for filt in &self.bank {
                let e: f64 = filt.iter().zip(&p).map(|(a, b)| a * b).sum();
                out.push(e.max(self.cfg.log_floor).ln());
            }
        }
        Tensor::new(&[frames, self.cfg.n_mels], out)
    }

    /// Features as fed to the model: log-mel, then CMVN if enabled.
    pub fn features(&self, wave: &[f64]) -> Result<Tensor<f64>> {
        let mel = self.compute(wave)?;
        Ok(if self.cfg.cmvn { cmvn(&mel) } else { mel })
    }
}

/// Log-mel features of `wave`; see [`LogMel::compute`].
pub fn log_mel(wave: &[f64], cfg: &AudioFrontendConfig) -> Result<Tensor<f64>> {
    LogMel::new(cfg)?.compute(wave)
}

/// Per-column mean and variance normalisation over time.
pub fn cmvn(x: &Tensor<f64>) -> Tensor<f64> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for j in 0..c {
        let mean = (0..t).map(|i| x.data()[i * c + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x.data()[i * c + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for i in 0..t {
            out.data_mut()[i * c + j] = (x.data()[i * c + j] - mean) * inv;
        }
    }
    out
}

/// Zeroes random frequency and time bands of `mel[T, F]`. Widths are drawn
/// uniformly from `[0, max_width]` and clamped to the axis.
pub fn spec_augment<S: Scalar>(mel: &Tensor<S>, cfg: &SpecAugmentConfig, rng: &mut impl Rng) -> Tensor<S> {
    let (t, f) = (mel.shape()[0], mel.shape()[1]);
    let mut out = mel.clone();
    let band = |extent: usize, max_width: usize, rng: &mut dyn rand::RngCore| {
        let width = rng.random_range(0..=max_width).min(extent);
        let start = rng.random_range(0..=extent - width);
        start..start + width
    };
    for _ in 0..cfg.n_freq_masks {
        let r = band(f, cfg.max_freq_width, rng);
        for i in 0..t {
            out.data_mut()[i * f + r.start..i * f + r.end].fill(S::zero());
        }
    }
    for _ in 0..cfg.n_time_masks {
        let r = band(t, cfg.max_time_width, rng);
        out.data_mut()[r.start * f..r.end * f].fill(S::zero());
    }
    out
}

/// Stride-2 output length with "same" padding.
pub fn halve(len: usize) -> usize {
    (len.max(1) - 1) / 2 + 1
}

/// Two stride-2 3×3 convolutions over (time, frequency) with ReLU, then a
/// linear projection of the flattened channels × frequencies.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub proj: Linear,
    pub channels: usize,
    pub n_mels: usize,
}

impl ConvSubsample {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, n_mels: usize, channels: usize, out_dim: usize) -> Result<Self> {
        let b1 = (6.0 / (9.0 + 9.0 * channels as f64)).sqrt();
        let b2 = (6.0 / (18.0 * channels as f64)).sqrt();
        let w1 = pb.uniform("conv1.w", &[channels, 1, 3, 3], b1)?;
        let bias1 = pb.zeros("conv1.b", &[channels])?;
        let w2 = pb.uniform("conv2.w", &[channels, channels, 3, 3], b2)?;
        let bias2 = pb.zeros("conv2.b", &[channels])?;
        let f = halve(halve(n_mels));
        let proj = Linear::new(pb, "proj", channels * f, out_dim, true)?;
        Ok(Self {
            w1,
            b1: bias1,
            w2,
            b2: bias2,
            proj,
            channels,
            n_mels,
        })
    }

    pub fn out_len(frames: usize) -> usize {
        halve(halve(frames))
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        9 * c + c + 9 * c * c + c + self.proj.param_count()
    }

    /// `mel[T, F]` to `[⌈T/4⌉, out_dim]`.
    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, mel: Var) -> Result<Var> {
        let tape = ctx.tape;
        let shape = tape.shape(mel);
        if shape.len() != 2 || shape[1] != self.n_mels {
            return Err(Error::dim("conv_subsample", &shape, &[self.n_mels]));
        }
        if shape[0] < 4 {
            return Err(Error::InputTooShort(format!("{} frames, subsampling needs at least 4", shape[0])));
        }
        let x = tape.reshape(mel, &[1, 1, shape[0], shape[1]])?;
        let x = tape.conv2d(x, ctx.p(self.w1), ctx.p(self.b1), [2, 2], [1, 1])?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, ctx.p(self.w2), ctx.p(self.b2), [2, 2], [1, 1])?;
        let x = tape.relu(x);
        let s = tape.shape(x);
        let (c, t, f) = (s[1], s[2], s[3]);
        let x = tape.reshape(x, &[c, t, f])?;
        let x = tape.permute(x, &[1, 0, 2])?;
        let x = tape.reshape(x, &[t, c * f])?;
        self.proj.forward(ctx, x)
    }
}

/// Writes `DWV1` 16-bit PCM. Samples are clamped to [-1, 1] and rounded.
pub fn write_dwv(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"DWV1")?;
    w.write_all(&sample_rate.to_le_bytes())?;
    let n = u32::try_from(samples.len()).map_err(|_| Error::Format("waveform too long".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for &s in samples {
        w.write_all(&quantize_i16(s).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `DWV1` file into samples scaled to [-1, 1).
pub fn read_dwv(path: &Path) -> Result<(u32, Vec<f64>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    binio::expect_magic(&mut r, b"DWV1")?;
    let sr = binio::read_u32(&mut r, "sample rate")?;
    let n = binio::read_u32(&mut r, "sample count")? as usize;
    let mut bytes = vec![0u8; n * 2];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated DWV payload, expected {n} samples")))?;
    let samples = bytes
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32768.0)
        .collect();
    Ok((sr, samples))
}

pub fn quantize_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Rounds every sample onto the 16-bit PCM grid.
pub fn quantize(samples: &mut [f64]) {
    for s in samples {
        *s = f64::from(quantize_i16(*s)) / 32768.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = AudioFrontendConfig::default();
        let mel = log_mel(&vec![0.0; 1600], &cfg).unwrap();
        assert_eq!(mel.shape(), &[1 + (1600 - 400) / 160, 80]);
        assert!(mel.data().iter().all(|&x| x == 1e-10f64.ln()));
    }

    #[test]
    fn too_short_is_an_error() {
        let cfg = AudioFrontendConfig::default();
        assert!(matches!(log_mel(&[0.0; 399], &cfg), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn tone_peaks_at_the_nearest_filter() {
        let cfg = AudioFrontendConfig::default();
        let lm = LogMel::new(&cfg).unwrap();
        let nearest = lm
            .centers()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        let mel = lm.compute(&tone(440.0, 4000, 0.5)).unwrap();
        for row in mel.data().chunks(80) {
            let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn parseval() {
        let cfg = AudioFrontendConfig::default();
        let lm = LogMel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: f64 = lm.power_spectrum(&frame).iter().sum();
        let e = lm.frame_energy(&frame);
        assert!((p - e).abs() / e < 1e-6, "{p} vs {e}");
    }

    #[test]
    fn scaling_shifts_the_log_domain() {
        let mut cfg = AudioFrontendConfig::default();
        cfg.log_floor = 1e-300;
        let lm = LogMel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wave: Vec<f64> = (0..1200).map(|_| rng.random_range(-0.5..0.5)).collect();
        let scaled: Vec<f64> = wave.iter().map(|x| x * 3.0).collect();
        let (a, b) = (lm.compute(&wave).unwrap(), lm.compute(&scaled).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - 2.0 * 3f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn filterbank_rows_are_valid() {
        let (bank, _) = mel_filterbank(&AudioFrontendConfig::default()).unwrap();
        assert_eq!(bank.len(), 80);
        for row in &bank {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn spec_augment_contracts() {
        let mel = Tensor::<f64>::from_fn(&[20, 8], |i| 1.0 + i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(spec_augment(&mel, &SpecAugmentConfig::off(), &mut rng), mel);

        let wide = SpecAugmentConfig {
            n_freq_masks: 1,
            max_freq_width: 8,
            n_time_masks: 2,
            max_time_width: 100,
        };
        let a = spec_augment(&mel, &wide, &mut ChaCha8Rng::seed_from_u64(9));
        let b = spec_augment(&mel, &wide, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.shape(), mel.shape());
        for (x, y) in a.data().iter().zip(mel.data()) {
            assert!(*x == 0.0 || x == y);
        }
    }

    #[test]
    fn subsample_lengths() {
        assert_eq!(ConvSubsample::out_len(100), 25);
        assert_eq!(ConvSubsample::out_len(200), 50);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sub = ConvSubsample::new(&mut ParamBuilder::new(&mut store, &mut rng), 16, 3, 12).unwrap();
        assert_eq!(sub.param_count(), store.count());
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let x = tape.constant(Tensor::ones(&[10, 16]));
        let y = sub.forward(&ctx, x).unwrap();
        assert_eq!(tape.shape(y), vec![3, 12]);
        let short = tape.constant(Tensor::ones(&[3, 16]));
        assert!(matches!(sub.forward(&ctx, short), Err(Error::InputTooShort(_))));
    }

    #[test]
    fn dwv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dwv");
        let mut wave = tone(300.0, 500, 0.7);
        quantize(&mut wave);
        write_dwv(&path, 16000, &wave).unwrap();
        let (sr, back) = read_dwv(&path).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(back, wave);
        std::fs::write(&path, b"DWV1\x80\x3e\0\0\x05\0\0\0\0\0").unwrap();
        assert!(matches!(read_dwv(&path), Err(Error::Format(_))));
    }
}
