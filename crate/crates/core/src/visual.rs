//! Visual front-end: 3-D convolutional stem, per-frame residual blocks,
//! global average pooling and temporal pooling. Also the `DVC1` clip
//! format.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Var;
use crate::binio;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const VIDEO_FPS: u32 = 25;

/// Grayscale clip `[T, H, W]` with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f64>,
}

impl VideoClip {
    /// Values are clamped to [0, 1]; frames must be at least 16×16.
    pub fn new(frames: Tensor<f64>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[1] < 16 || s[2] < 16 {
            return Err(Error::arg(format!("video clip must be [T, H>=16, W>=16], got {s:?}")));
        }
        Ok(Self {
            frames: frames.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn frames(&self) -> &Tensor<f64> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFrontendConfig {
    pub input_size: [usize; 2],
    pub stem_kernel: [usize; 3],
    pub stem_stride: [usize; 3],
    /// Output channels of each residual stage; the stem emits the first.
    pub channels: Vec<usize>,
    /// Residual blocks per stage (1 for the toy network, 2 for ResNet-18).
    pub blocks_per_stage: usize,
    pub out_dim: usize,
    pub temporal_pool_stride: usize,
}

impl VisualFrontendConfig {
    pub fn toy(out_dim: usize) -> Self {
        Self {
            input_size: [32, 32],
            stem_kernel: [5, 7, 7],
            stem_stride: [1, 2, 2],
            channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            out_dim,
            temporal_pool_stride: 2,
        }
    }

    /// ResNet-18 trunk widths on 96×96 lip crops.
    pub fn paper() -> Self {
        Self {
            input_size: [96, 96],
            channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            out_dim: 256,
            ..Self::toy(256)
        }
    }

    pub fn n_res_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents after the stem and after every stage.
    pub fn extents(&self) -> Vec<[usize; 2]> {
        let step = |l: usize, k: usize, s: usize| (l + 2 * (k / 2) - k) / s + 1;
        let mut e = [
            step(self.input_size[0], self.stem_kernel[1], self.stem_stride[1]),
            step(self.input_size[1], self.stem_kernel[2], self.stem_stride[2]),
        ];
        let mut out = vec![e];
        for _ in 1..self.channels.len() {
            e = [(e[0] - 1) / 2 + 1, (e[1] - 1) / 2 + 1];
            out.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &'static str| {
            Err(Error::Build {
                rule,
                detail: format!("{self:?}"),
            })
        };
        if self.channels.is_empty() || self.blocks_per_stage == 0 || self.out_dim == 0 {
            return fail("visual network needs at least one stage");
        }
        if self.stem_kernel.iter().any(|&k| k % 2 == 0) || self.stem_stride.iter().any(|&s| s == 0) {
            return fail("visual stem kernel odd and stride positive");
        }
        if self.stem_stride[0] != 1 {
            return fail("visual stem keeps the time axis (temporal stride 1)");
        }
        if self.temporal_pool_stride == 0 {
            return fail("temporal_pool_stride >= 1");
        }
        if self.input_size.iter().any(|&s| s < 16) {
            return fail("visual input at least 16x16");
        }
        // every stride-2 stage must start from an extent it can halve
        let ext = self.extents();
        if ext.windows(2).any(|w| w[0][0] < 2 || w[0][1] < 2) {
            return fail("spatial extent stays >= 2 before every downsampling stage");
        }
        Ok(())
    }

    /// Output length for `frames` input frames.
    pub fn out_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.temporal_pool_stride)
    }
}

#[derive(Clone, Debug)]
struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            w: s.uniform("w", &[cout, cin, k, k], bound)?,
            b: s.zeros("b", &[cout])?,
            stride,
            pad: k / 2,
        })
    }

    fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        ctx.tape.conv2d(x, ctx.p(self.w), ctx.p(self.b), [self.stride; 2], [self.pad; 2])
    }
}

/// Two 3×3 convolutions with a shortcut: identity, or a strided 1×1
/// projection when the block changes width or resolution.
#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let shortcut = if cin != cout || stride != 1 {
            Some(Conv2d::new(&mut s, "shortcut", cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            c1: Conv2d::new(&mut s, "conv1", cin, cout, 3, stride)?,
            c2: Conv2d::new(&mut s, "conv2", cout, cout, 3, 1)?,
            shortcut,
        })
    }

    fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = t.relu(self.c1.forward(ctx, x)?);
        let h = self.c2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some(c) => c.forward(ctx, x)?,
            None => x,
        };
        Ok(t.relu(t.add(h, skip)?))
    }
}

#[derive(Clone, Debug)]
pub struct VisualFrontend {
    pub cfg: VisualFrontendConfig,
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<ResBlock>,
    pub proj: Linear,
}

impl VisualFrontend {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, cfg: &VisualFrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let [kt, kh, kw] = cfg.stem_kernel;
        let c0 = cfg.channels[0];
        let stem_w = pb.uniform("stem.w", &[c0, 1, kt, kh, kw], (6.0 / (kt * kh * kw) as f64).sqrt())?;
        let stem_b = pb.zeros("stem.b", &[c0])?;
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (i, &c) in cfg.channels.iter().enumerate() {
            for j in 0..cfg.blocks_per_stage {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(pb, &format!("res{}.{}", i + 1, j + 1), cin, c, stride)?);
                cin = c;
            }
        }
        let proj = Linear::new(pb, "proj", cin, cfg.out_dim, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem_w,
            stem_b,
            blocks,
            proj,
        })
    }

    /// Per-frame features `[T, C]` before temporal pooling.
    pub fn frame_features<S: Scalar>(&self, ctx: &Ctx<'_, S>, clip: Var) -> Result<Var> {
        let t = ctx.tape;
        let s = t.shape(clip);
        if s.len() != 3 || [s[1], s[2]] != self.cfg.input_size {
            return Err(Error::dim("visual_forward", &s, &self.cfg.input_size));
        }
        let frames = s[0];
        let [_, kh, kw] = self.cfg.stem_kernel;
        let x = t.reshape(clip, &[1, frames, s[1], s[2]])?;
        let pad = [self.cfg.stem_kernel[0] / 2, kh / 2, kw / 2];
        let x = t.conv3d(x, ctx.p(self.stem_w), ctx.p(self.stem_b), self.cfg.stem_stride, pad)?;
        let x = t.relu(x);
        // [C, T, H, W] -> [T, C, H, W]: the residual stages run per frame
        let x = t.permute(x, &[1, 0, 2, 3])?;
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        let s = t.shape(x);
        let x = t.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        t.mean_axis(x, 2)
    }

    /// `clip[T, H, W]` to `[⌈T/stride⌉, out_dim]`.
    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, clip: Var) -> Result<Var> {
        let f = self.frame_features(ctx, clip)?;
        let y = self.proj.forward(ctx, f)?;
        ctx.tape.avg_pool_rows(y, self.cfg.temporal_pool_stride)
    }
}

pub fn write_dvc(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"DVC1")?;
    for &d in clip.frames.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in clip.frames.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dvc(path: &Path) -> Result<VideoClip> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    binio::expect_magic(&mut r, b"DVC1")?;
    let t = binio::read_u32(&mut r, "frame count")? as usize;
    let h = binio::read_u32(&mut r, "height")? as usize;
    let w = binio::read_u32(&mut r, "width")? as usize;
    let n = t * h * w;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated DVC payload, expected {n} values")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    VideoClip::new(Tensor::new(&[t, h, w], data).map_err(|e| Error::Format(e.to_string()))?)
}
