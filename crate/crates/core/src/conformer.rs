//! Conformer and Efficient Conformer blocks.
//!
//! Every sub-module takes a `[T, D]` sequence and a validity mask of
//! length `T` (`true` = real frame). Values at invalid frames never reach
//! valid outputs.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Full self-attention, `g = 1`.
    Standard,
    /// Time folded into groups of `g` frames before attention.
    Grouped(usize),
}

impl AttentionKind {
    pub fn group(self) -> usize {
        match self {
            AttentionKind::Standard => 1,
            AttentionKind::Grouped(g) => g,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerBlockConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ff_expansion: usize,
    pub attention: AttentionKind,
    /// Relative sinusoidal position bias; absolute sinusoids otherwise.
    pub relative_pos: bool,
    pub conv_stride: usize,
    pub dropout: f64,
}

impl ConformerBlockConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            n_heads: 4,
            conv_kernel: 15,
            ff_expansion: 4,
            attention: AttentionKind::Standard,
            relative_pos: true,
            conv_stride: 1,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &'static str| {
            Err(Error::Build {
                rule,
                detail: format!("{self:?}"),
            })
        };
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return fail("dim divisible by n_heads");
        }
        if self.conv_kernel % 2 == 0 {
            return fail("conv_kernel odd");
        }
        if self.attention.group() == 0 {
            return fail("group size g >= 1");
        }
        if !(1..=2).contains(&self.conv_stride) {
            return fail("conv_stride in {1, 2}");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout in [0, 1)");
        }
        Ok(())
    }

    /// `24·d² + 47·d` for the default expansion of 4.
    pub fn param_count(&self) -> usize {
        let (d, e, k) = (self.dim, self.ff_expansion, self.conv_kernel);
        let ffm = 2 * d + d * e * d + e * d + e * d * d + d;
        let mhsa = 2 * d + 4 * (d * d + d) + d * d + 2 * d;
        let conv = 2 * d + d * 2 * d + 2 * d + k * d + d + 2 * d + d * d + d;
        2 * ffm + mhsa + conv + 2 * d
    }
}

/// Output validity mask after a stride-`s` operation.
pub fn stride_mask(mask: &[bool], stride: usize) -> Vec<bool> {
    mask.iter().step_by(stride).copied().collect()
}

/// Zeroes the rows of `x[T, D]` whose mask entry is false.
pub fn zero_invalid<S: Scalar>(tape: &Tape<S>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let d = *tape.shape(x).last().unwrap_or(&1);
    let fill: Vec<bool> = mask.iter().flat_map(|&m| std::iter::repeat_n(!m, d)).collect();
    tape.masked_fill(x, &fill, S::zero())
}

/// Sinusoid table `[positions.len(), dim]`.
pub fn sinusoids<S: Scalar>(positions: impl Iterator<Item = f64>, dim: usize) -> Tensor<S> {
    let mut data = Vec::new();
    let mut n = 0;
    for p in positions {
        n += 1;
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            data.push(S::lit(if i % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() }));
        }
    }
    Tensor::from_parts(vec![n, dim], data)
}

/// Pre-norm feed-forward with half-step residual:
/// `x + ½·W2·dropout(swish(W1·LN(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, dim: usize, expansion: usize, dropout: f64) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", dim)?,
            l1: Linear::new(&mut s, "l1", dim, dim * expansion, true)?,
            l2: Linear::new(&mut s, "l2", dim * expansion, dim, true)?,
            dropout,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = self.norm.forward(ctx, x)?;
        let h = self.l1.forward(ctx, h)?;
        let h = t.swish(h);
        let h = t.dropout(h, self.dropout)?;
        let h = self.l2.forward(ctx, h)?;
        let h = t.dropout(h, self.dropout)?;
        let h = t.scale(h, S::lit(0.5));
        t.add(x, h)
    }
}

/// Multi-head self-attention with relative (or absolute) sinusoidal
/// positions and optional time grouping.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub pos: Option<Linear>,
    pub pos_u: Option<ParamId>,
    pub pos_v: Option<ParamId>,
    pub n_heads: usize,
    pub group: usize,
    pub dropout: f64,
    dim: usize,
}

impl SelfAttention {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cfg: &ConformerBlockConfig) -> Result<Self> {
        let mut s = pb.sub(name);
        let d = cfg.dim;
        let dk = d / cfg.n_heads;
        let norm = LayerNorm::new(&mut s, "norm", d)?;
        let q = Linear::new(&mut s, "q", d, d, true)?;
        let k = Linear::new(&mut s, "k", d, d, true)?;
        let v = Linear::new(&mut s, "v", d, d, true)?;
        let out = Linear::new(&mut s, "out", d, d, true)?;
        let (pos, pos_u, pos_v) = if cfg.relative_pos {
            (
                Some(Linear::new(&mut s, "pos", d, d, false)?),
                Some(s.zeros("pos_u", &[cfg.n_heads, dk])?),
                Some(s.zeros("pos_v", &[cfg.n_heads, dk])?),
            )
        } else {
            (None, None, None)
        };
        Ok(Self {
            norm,
            q,
            k,
            v,
            out,
            pos,
            pos_u,
            pos_v,
            n_heads: cfg.n_heads,
            group: cfg.attention.group(),
            dropout: cfg.dropout,
            dim: d,
        })
    }

    /// Attention probabilities `[H, G, G]` and the attended values `[T, D]`
    /// (before the output projection), for a pre-normalised input.
    pub fn attend<S: Scalar>(&self, ctx: &Ctx<'_, S>, xn: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let tape = ctx.tape;
        let t_len = mask.len();
        let (h, d, g) = (self.n_heads, self.dim, self.group);
        let dk = d / h;
        let groups = t_len.div_ceil(g);
        let tp = groups * g;

        let xn = zero_invalid(tape, xn, mask)?;
        let xn = if tp > t_len { tape.pad(xn, 0, 0, tp - t_len)? } else { xn };
        let xqk = if self.pos.is_none() {
            let pe = tape.constant(sinusoids(( 0..tp).map(|p| p as f64), d));
            tape.add(xn, pe)?
        } else {
            xn
        };
        let q = self.q.forward(ctx, xqk)?;
        let k = self.k.forward(ctx, xqk)?;
        let v = self.v.forward(ctx, xn)?;

        // [Tp, D] -> [H, G, g·dk]
        let fold = |x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[groups, g, h, dk])?;
            let x = tape.permute(x, &[2, 0, 1, 3])?;
            tape.reshape(x, &[h, groups, g * dk])
        };
        let q4 = tape.reshape(q, &[tp, h, dk])?;
        let kt = tape.transpose(fold(k)?, 1, 2)?;
        let mut scores = match (self.pos.as_ref(), self.pos_u, self.pos_v) {
            (Some(pos), Some(u), Some(vb)) => {
                let qu = tape.add(q4, ctx.p(u))?;
                let qu = tape.reshape(qu, &[tp, d])?;
                let content = tape.matmul(fold(qu)?, kt)?;
                // relative distances G-1 .. -(G-1)
                let rel = sinusoids((0..2 * groups - 1).map(|i| (groups - 1) as f64 - i as f64), d);
                let p = pos.forward(ctx, tape.constant(rel))?;
                let p = tape.reshape(p, &[2 * groups - 1, h, dk])?;
                let pt = tape.permute(p, &[1, 2, 0])?;
                let qv = tape.add(q4, ctx.p(vb))?;
                let qv = tape.reshape(qv, &[groups, g, h, dk])?;
                let qv = tape.sum_axis(qv, 1)?;
                let qv = tape.permute(qv, &[1, 0, 2])?;
                let position = tape.rel_shift(tape.matmul(qv, pt)?)?;
                tape.add(content, position)?
            }
            _ => tape.matmul(fold(q)?, kt)?,
        };
        scores = tape.scale(scores, S::lit(1.0 / ((g * dk) as f64).sqrt()));
        let keep: Vec<bool> = (0..groups).map(|j| mask[j * g..((j + 1) * g).min(t_len)].iter().any(|&m| m)).collect();
        let probs = tape.masked_softmax(scores, &keep)?;
        let probs_d = tape.dropout(probs, self.dropout)?;
        let ctxv = tape.matmul(probs_d, fold(v)?)?;
        let ctxv = tape.reshape(ctxv, &[h, groups, g, dk])?;
        let ctxv = tape.permute(ctxv, &[1, 2, 0, 3])?;
        let ctxv = tape.reshape(ctxv, &[tp, d])?;
        let ctxv = if tp > t_len { tape.slice(ctxv, 0, 0, t_len)? } else { ctxv };
        Ok((probs, ctxv))
    }

    /// Attention branch on a pre-normalised input, without the residual.
    pub fn branch<S: Scalar>(&self, ctx: &Ctx<'_, S>, xn: Var, mask: &[bool]) -> Result<Var> {
        let (_, a) = self.attend(ctx, xn, mask)?;
        let y = self.out.forward(ctx, a)?;
        let y = ctx.tape.dropout(y, self.dropout)?;
        zero_invalid(ctx.tape, y, mask)
    }

    /// `x + MHSA(LN(x))`.
    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var, mask: &[bool]) -> Result<Var> {
        let xn = self.norm.forward(ctx, x)?;
        let y = self.branch(ctx, xn, mask)?;
        ctx.tape.add(x, y)
    }
}

/// Pointwise → GLU → depthwise (stride 1 or 2) → LN → swish → pointwise.
/// Residual only at stride 1.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pw1: Linear,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub mid_norm: LayerNorm,
    pub pw2: Linear,
    pub stride: usize,
    pub dropout: f64,
}

impl ConvModule {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cfg: &ConformerBlockConfig) -> Result<Self> {
        let mut s = pb.sub(name);
        let d = cfg.dim;
        let bound = (3.0 / cfg.conv_kernel as f64).sqrt();
        Ok(Self {
            norm: LayerNorm::new(&mut s, "norm", d)?,
            pw1: Linear::new(&mut s, "pw1", d, 2 * d, true)?,
            dw_w: s.uniform("dw.w", &[d, cfg.conv_kernel], bound)?,
            dw_b: s.zeros("dw.b", &[d])?,
            mid_norm: LayerNorm::new(&mut s, "mid_norm", d)?,
            pw2: Linear::new(&mut s, "pw2", d, d, true)?,
            stride: cfg.conv_stride,
            dropout: cfg.dropout,
        })
    }

    /// Returns the output and its validity mask.
    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let t = ctx.tape;
        let h = self.norm.forward(ctx, x)?;
        let h = self.pw1.forward(ctx, h)?;
        let h = t.glu(h)?;
        let h = zero_invalid(t, h, mask)?;
        let h = t.conv1d_depthwise(h, ctx.p(self.dw_w), ctx.p(self.dw_b), self.stride)?;
        let out_mask = stride_mask(mask, self.stride);
        let h = self.mid_norm.forward(ctx, h)?;
        let h = t.swish(h);
        let h = self.pw2.forward(ctx, h)?;
        let h = t.dropout(h, self.dropout)?;
        let y = if self.stride == 1 { t.add(x, h)? } else { h };
        Ok((zero_invalid(t, y, &out_mask)?, out_mask))
    }
}

/// `FFM → MHSA → Conv → FFM → LayerNorm`.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub cfg: ConformerBlockConfig,
    pub ff1: FeedForward,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, cfg: &ConformerBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = pb.sub(name);
        Ok(Self {
            ff1: FeedForward::new(&mut s, "ff1", cfg.dim, cfg.ff_expansion, cfg.dropout)?,
            attn: SelfAttention::new(&mut s, "attn", cfg)?,
            conv: ConvModule::new(&mut s, "conv", cfg)?,
            ff2: FeedForward::new(&mut s, "ff2", cfg.dim, cfg.ff_expansion, cfg.dropout)?,
            final_norm: LayerNorm::new(&mut s, "final_norm", cfg.dim)?,
            cfg: cfg.clone(),
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.dim || shape[0] != mask.len() {
            return Err(Error::dim("conformer_block", &shape, &[mask.len(), self.cfg.dim]));
        }
        let x = self.ff1.forward(ctx, x)?;
        let x = self.attn.forward(ctx, x, mask)?;
        let (x, mask) = self.conv.forward(ctx, x, mask)?;
        let x = self.ff2.forward(ctx, x)?;
        let x = self.final_norm.forward(ctx, x)?;
        Ok((x, mask))
    }
}

/// Affine change of width between stages, with an optional stride-2
/// depthwise convolution over time.
#[derive(Clone, Debug)]
pub struct StageTransition {
    pub proj: Linear,
    pub down: Option<(ParamId, ParamId)>,
}

impl StageTransition {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, din: usize, dout: usize, time_stride: usize, kernel: usize) -> Result<Self> {
        if !(1..=2).contains(&time_stride) {
            return Err(Error::Build {
                rule: "time_stride in {1, 2}",
                detail: format!("{name}: {time_stride}"),
            });
        }
        let mut s = pb.sub(name);
        let proj = Linear::new(&mut s, "proj", din, dout, true)?;
        let down = if time_stride == 2 {
            let bound = (3.0 / kernel as f64).sqrt();
            Some((s.uniform("down.w", &[dout, kernel], bound)?, s.zeros("down.b", &[dout])?))
        } else {
            None
        };
        Ok(Self { proj, down })
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let y = self.proj.forward(ctx, x)?;
        match self.down {
            None => Ok((y, mask.to_vec())),
            Some((w, b)) => {
                let y = zero_invalid(ctx.tape, y, mask)?;
                let y = ctx.tape.conv1d_depthwise(y, ctx.p(w), ctx.p(b), 2)?;
                Ok((y, stride_mask(mask, 2)))
            }
        }
    }

    pub fn param_count(&self, kernel: usize) -> usize {
        self.proj.param_count() + self.down.map_or(0, |_| (kernel + 1) * self.proj.dout)
    }
}
