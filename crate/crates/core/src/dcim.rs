//! Dual Conformer Interaction Module: paired audio and visual Conformer
//! blocks exchanging features through bottleneck adapters.
//!
//! For each stream `m` with partner `~m`:
//!
//! ```text
//! X_m   = FFM(x_m),  N_m = LN(X_m)
//! I'_m  = Ada_att(N_m) + X_m + MHSA(N_m) + Ada_att(N_~m)
//! I''_m = Ada_conv(I'_m) + FFM(Conv(I'_m)) + Ada_conv(I'_~m)
//! out_m = LN(I''_m)
//! ```
//!
//! The first adapter term of each line is the purification path, the last
//! the completion path.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::conformer::{zero_invalid, ConformerBlock};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamBuilder};
use crate::scalar::Scalar;

/// Three affine maps `D → d → d → D'` with swish after the first two.
/// The last map starts at zero, so a fresh adapter outputs exactly zero.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Adapter {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, dims: [usize; 3]) -> Result<Self> {
        let [d_in, d, d_out] = dims;
        let mut s = pb.sub(name);
        Ok(Self {
            l1: Linear::new(&mut s, "l1", d_in, d, true)?,
            l2: Linear::new(&mut s, "l2", d, d, true)?,
            l3: Linear::zeros(&mut s, "l3", d, d_out)?,
        })
    }

    /// `D·d + d + d·d + d + d·D' + D'`.
    pub fn count(dims: [usize; 3]) -> usize {
        let [a, d, b] = dims;
        a * d + d + d * d + d + d * b + b
    }

    pub fn param_count(&self) -> usize {
        self.l1.param_count() + self.l2.param_count() + self.l3.param_count()
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = t.swish(self.l1.forward(ctx, x)?);
        let h = t.swish(self.l2.forward(ctx, h)?);
        self.l3.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Dual,
    /// Only the audio stream receives visual features.
    VToA,
    /// Only the visual stream receives audio features.
    AToV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSelection {
    All,
    LastTwo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSharing {
    /// One attention-stage and one conv-stage adapter per layer, used by
    /// every path of both streams.
    Shared,
    /// A separate adapter for every active path.
    PerPath,
}

/// Which adapter paths of the DCIM stack are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DcimMode {
    pub direction: Direction,
    pub purification: bool,
    pub completion: bool,
    pub layers: LayerSelection,
}

/// Active adapter paths of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Paths {
    pub audio_self: bool,
    pub audio_cross: bool,
    pub visual_self: bool,
    pub visual_cross: bool,
}

impl Paths {
    pub fn any(self) -> bool {
        self.audio_self || self.audio_cross || self.visual_self || self.visual_cross
    }

    pub fn count(self) -> usize {
        [self.audio_self, self.audio_cross, self.visual_self, self.visual_cross]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

impl DcimMode {
    pub const NAMES: [&'static str; 6] = ["dual", "v2a", "a2v", "no-purify", "no-complete", "last2"];

    pub fn dual() -> Self {
        Self {
            direction: Direction::Dual,
            purification: true,
            completion: true,
            layers: LayerSelection::All,
        }
    }

    /// No adapter path at all: the two streams run as unpaired blocks.
    pub fn decoupled() -> Self {
        Self {
            purification: false,
            completion: false,
            ..Self::dual()
        }
    }

    /// Paths of layer `i` (1-indexed) in a stack of `n`.
    pub fn paths(&self, i: usize, n: usize) -> Paths {
        let on = match self.layers {
            LayerSelection::All => true,
            LayerSelection::LastTwo => i + 2 > n,
        };
        let (p, c) = (on && self.purification, on && self.completion);
        Paths {
            audio_self: p,
            visual_self: p,
            audio_cross: c && self.direction != Direction::AToV,
            visual_cross: c && self.direction != Direction::VToA,
        }
    }
}

impl Default for DcimMode {
    fn default() -> Self {
        Self::dual()
    }
}

impl FromStr for DcimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d = Self::dual();
        Ok(match s {
            "dual" => d,
            "v2a" | "v_to_a" => Self { direction: Direction::VToA, ..d },
            "a2v" | "a_to_v" => Self { direction: Direction::AToV, ..d },
            "no-purify" => Self { purification: false, ..d },
            "no-complete" => Self { completion: false, ..d },
            "last2" | "last_two" => Self { layers: LayerSelection::LastTwo, ..d },
            "decoupled" => Self::decoupled(),
            _ => return Err(Error::Config(format!("unknown DCIM mode `{s}`"))),
        })
    }
}

impl fmt::Display for DcimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::Dual => "dual",
            Direction::VToA => "v2a",
            Direction::AToV => "a2v",
        };
        let layers = match self.layers {
            LayerSelection::All => "all",
            LayerSelection::LastTwo => "last2",
        };
        write!(f, "{dir}/purify={}/complete={}/{layers}", self.purification, self.completion)
    }
}

/// The adapters of one stage (attention or conv) of a layer.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub audio_self: Option<Adapter>,
    pub audio_cross: Option<Adapter>,
    pub visual_self: Option<Adapter>,
    pub visual_cross: Option<Adapter>,
}

impl AdapterSet {
    fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, dims: [usize; 3], paths: Paths, sharing: AdapterSharing) -> Result<Self> {
        let mut make = |on: bool, suffix: &str| -> Result<Option<Adapter>> {
            if !on {
                return Ok(None);
            }
            Adapter::new(pb, &format!("{name}{suffix}"), dims).map(Some)
        };
        match sharing {
            AdapterSharing::Shared => {
                let shared = make(paths.any(), "")?;
                let pick = |on: bool| if on { shared.clone() } else { None };
                Ok(Self {
                    audio_self: pick(paths.audio_self),
                    audio_cross: pick(paths.audio_cross),
                    visual_self: pick(paths.visual_self),
                    visual_cross: pick(paths.visual_cross),
                })
            }
            AdapterSharing::PerPath => Ok(Self {
                audio_self: make(paths.audio_self, ".a_self")?,
                audio_cross: make(paths.audio_cross, ".v_to_a")?,
                visual_self: make(paths.visual_self, ".v_self")?,
                visual_cross: make(paths.visual_cross, ".a_to_v")?,
            }),
        }
    }

    /// Sum of the self path on `own` and the cross path on `other`, if any.
    fn apply<S: Scalar>(
        ctx: &Ctx<'_, S>,
        self_path: Option<&Adapter>,
        cross_path: Option<&Adapter>,
        own: Var,
        other: Var,
    ) -> Result<Option<Var>> {
        let a = self_path.map(|ad| ad.forward(ctx, own)).transpose()?;
        let b = cross_path.map(|ad| ad.forward(ctx, other)).transpose()?;
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(ctx.tape.add(a, b)?),
            (a, b) => a.or(b),
        })
    }
}

/// Outputs of one DCIM layer.
pub struct DcimOutput {
    pub audio: Var,
    pub visual: Var,
    /// Conv-stage adapter contribution to the audio stream, if any.
    pub audio_tap: Option<Var>,
    pub visual_tap: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DcimLayer {
    pub index: usize,
    pub audio: ConformerBlock,
    pub visual: ConformerBlock,
    pub adapter_attn: AdapterSet,
    pub adapter_conv: AdapterSet,
    pub paths: Paths,
}

impl DcimLayer {
    /// Adds the adapters of layer `index` (1-indexed) around two existing
    /// blocks of equal width.
    pub fn new<S: Scalar>(
        pb: &mut ParamBuilder<'_, S>,
        index: usize,
        audio: ConformerBlock,
        visual: ConformerBlock,
        bottleneck: usize,
        paths: Paths,
        sharing: AdapterSharing,
    ) -> Result<Self> {
        let d = audio.cfg.dim;
        if visual.cfg.dim != d || audio.cfg.conv_stride != 1 || visual.cfg.conv_stride != 1 {
            return Err(Error::Build {
                rule: "DCIM pairs stride-1 blocks of equal width",
                detail: format!("audio {d}, visual {}", visual.cfg.dim),
            });
        }
        let mut s = pb.sub(&format!("dcim.layer{index}"));
        let dims = [d, bottleneck, d];
        Ok(Self {
            index,
            adapter_attn: AdapterSet::new(&mut s, "adapter_attn", dims, paths, sharing)?,
            adapter_conv: AdapterSet::new(&mut s, "adapter_conv", dims, paths, sharing)?,
            audio,
            visual,
            paths,
        })
    }

    /// Parameters added by the adapters of this layer.
    pub fn adapter_count(paths: Paths, sharing: AdapterSharing, dims: [usize; 3]) -> usize {
        let per_stage = match sharing {
            AdapterSharing::Shared => usize::from(paths.any()),
            AdapterSharing::PerPath => paths.count(),
        };
        2 * per_stage * Adapter::count(dims)
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, xa: Var, xv: Var, mask: &[bool]) -> Result<DcimOutput> {
        let t = ctx.tape;
        let (la, lv) = (t.shape(xa)[0], t.shape(xv)[0]);
        if la != lv {
            return Err(Error::Alignment { audio: la, visual: lv });
        }
        let (a, v) = (&self.audio, &self.visual);
        let (at, ct) = (&self.adapter_attn, &self.adapter_conv);

        let xa = a.ff1.forward(ctx, xa)?;
        let xv = v.ff1.forward(ctx, xv)?;
        let na = a.attn.norm.forward(ctx, xa)?;
        let nv = v.attn.norm.forward(ctx, xv)?;
        let ia = t.add(xa, a.attn.branch(ctx, na, mask)?)?;
        let iv = t.add(xv, v.attn.branch(ctx, nv, mask)?)?;
        let ia_ad = AdapterSet::apply(ctx, at.audio_self.as_ref(), at.audio_cross.as_ref(), na, nv)?;
        let iv_ad = AdapterSet::apply(ctx, at.visual_self.as_ref(), at.visual_cross.as_ref(), nv, na)?;
        let ia = match ia_ad {
            Some(x) => t.add(ia, zero_invalid(t, x, mask)?)?,
            None => ia,
        };
        let iv = match iv_ad {
            Some(x) => t.add(iv, zero_invalid(t, x, mask)?)?,
            None => iv,
        };

        let (ca, _) = a.conv.forward(ctx, ia, mask)?;
        let (cv, _) = v.conv.forward(ctx, iv, mask)?;
        let fa = a.ff2.forward(ctx, ca)?;
        let fv = v.ff2.forward(ctx, cv)?;
        let audio_tap = AdapterSet::apply(ctx, ct.audio_self.as_ref(), ct.audio_cross.as_ref(), ia, iv)?
            .map(|x| zero_invalid(t, x, mask))
            .transpose()?;
        let visual_tap = AdapterSet::apply(ctx, ct.visual_self.as_ref(), ct.visual_cross.as_ref(), iv, ia)?
            .map(|x| zero_invalid(t, x, mask))
            .transpose()?;
        let fa = match audio_tap {
            Some(x) => t.add(fa, x)?,
            None => fa,
        };
        let fv = match visual_tap {
            Some(x) => t.add(fv, x)?,
            None => fv,
        };
        Ok(DcimOutput {
            audio: a.final_norm.forward(ctx, fa)?,
            visual: v.final_norm.forward(ctx, fv)?,
            audio_tap,
            visual_tap,
        })
    }
}

/// 1-indexed layers whose conv-stage adapter output feeds an intermediate
/// CTC loss: the even ones.
pub fn tap_layers(n_layers: usize) -> Vec<usize> {
    (1..=n_layers).filter(|i| i % 2 == 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::conformer::ConformerBlockConfig;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn layer(mode: DcimMode, sharing: AdapterSharing, randomize: bool) -> (ParamStore<f64>, DcimLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ConformerBlockConfig {
            conv_kernel: 3,
            dropout: 0.0,
            ..ConformerBlockConfig::new(8)
        };
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let a = ConformerBlock::new(&mut pb, "audio", &cfg).unwrap();
        let v = ConformerBlock::new(&mut pb, "visual", &cfg).unwrap();
        let l = DcimLayer::new(&mut pb, 1, a, v, 4, mode.paths(1, 1), sharing).unwrap();
        if randomize {
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).contains(".l3.") {
                    let s = store.get(id).shape().to_vec();
                    *store.get_mut(id) = rand_t(&s, id.index() as u64);
                }
            }
        }
        (store, l)
    }

    fn run(store: &ParamStore<f64>, l: &DcimLayer, xa: &Tensor<f64>, xv: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, store);
        let out = l.forward(&ctx, tape.constant(xa.clone()), tape.constant(xv.clone()), &[true; 5]).unwrap();
        (tape.detach(out.audio), tape.detach(out.visual))
    }

    #[test]
    fn adapter_counts() {
        assert_eq!(Adapter::count([256, 180, 256]), 125_176);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = Adapter::new(&mut ParamBuilder::new(&mut store, &mut rng), "ad", [8, 4, 8]).unwrap();
        assert_eq!(ad.param_count(), Adapter::count([8, 4, 8]));
        assert_eq!(store.count(), ad.param_count());
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let y = ad.forward(&ctx, tape.constant(rand_t(&[3, 8], 2))).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_paths() {
        let p = |s: &str, i| s.parse::<DcimMode>().unwrap().paths(i, 5);
        assert_eq!(p("dual", 1).count(), 4);
        assert!(!p("v2a", 3).visual_cross && p("v2a", 3).audio_cross);
        assert!(!p("a2v", 3).audio_cross && p("a2v", 3).visual_cross);
        assert!(!p("no-purify", 2).audio_self && p("no-purify", 2).audio_cross);
        assert!(!p("last2", 3).any() && p("last2", 4).count() == 4);
        assert!(!DcimMode::decoupled().paths(2, 5).any());
        assert!("bogus".parse::<DcimMode>().is_err());
        assert_eq!(tap_layers(5), vec![2, 4]);
        assert!(tap_layers(1).is_empty());
    }

    #[test]
    fn zero_adapters_equal_decoupled_blocks() {
        let (xa, xv) = (rand_t(&[5, 8], 3), rand_t(&[5, 8], 4));
        let (s1, dual) = layer(DcimMode::dual(), AdapterSharing::Shared, false);
        let (s2, plain) = layer(DcimMode::decoupled(), AdapterSharing::Shared, false);
        let (a1, v1) = run(&s1, &dual, &xa, &xv);
        let (a2, v2) = run(&s2, &plain, &xa, &xv);
        assert!(a1.bit_eq(&a2) && v1.bit_eq(&v2));

        // and the decoupled audio stream is exactly a standard block
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &s2);
        let (y, _) = plain.audio.forward(&ctx, tape.constant(xa.clone()), &[true; 5]).unwrap();
        assert!(tape.detach(y).bit_eq(&a2));
    }

    #[test]
    fn cross_effects_follow_the_mode() {
        let (xa, xv) = (rand_t(&[5, 8], 3), rand_t(&[5, 8], 4));
        let mut xa2 = xa.clone();
        xa2.data_mut()[7] += 0.5;
        let mut xv2 = xv.clone();
        xv2.data_mut()[9] += 0.5;
        let diff = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

        let (s, l) = layer(DcimMode::dual(), AdapterSharing::Shared, true);
        assert!(diff(&run(&s, &l, &xa, &xv).0, &run(&s, &l, &xa, &xv2).0) > 1e-6);
        assert!(diff(&run(&s, &l, &xa, &xv).1, &run(&s, &l, &xa2, &xv).1) > 1e-6);

        let (s, l) = layer("v2a".parse().unwrap(), AdapterSharing::Shared, true);
        assert!(diff(&run(&s, &l, &xa, &xv).1, &run(&s, &l, &xa2, &xv).1) <= 1e-12);

        let (s, l) = layer("a2v".parse().unwrap(), AdapterSharing::PerPath, true);
        assert!(diff(&run(&s, &l, &xa, &xv).0, &run(&s, &l, &xa, &xv2).0) <= 1e-12);

        let (s, l) = layer(DcimMode::decoupled(), AdapterSharing::Shared, true);
        assert_eq!(diff(&run(&s, &l, &xa, &xv).0, &run(&s, &l, &xa, &xv2).0), 0.0);
        assert_eq!(diff(&run(&s, &l, &xa, &xv).1, &run(&s, &l, &xa2, &xv).1), 0.0);
    }

    #[test]
    fn sharing_controls_parameter_count() {
        let dims = [8, 4, 8];
        let (s_shared, l) = layer(DcimMode::dual(), AdapterSharing::Shared, false);
        for set in [&l.adapter_attn, &l.adapter_conv] {
            let w = set.audio_self.as_ref().unwrap().l1.w;
            for site in [&set.audio_cross, &set.visual_self, &set.visual_cross] {
                assert_eq!(site.as_ref().unwrap().l1.w, w);
            }
        }
        let (s_per, _) = layer(DcimMode::dual(), AdapterSharing::PerPath, false);
        let (s_none, _) = layer(DcimMode::decoupled(), AdapterSharing::Shared, false);
        let paths = DcimMode::dual().paths(1, 1);
        assert_eq!(s_shared.count() - s_none.count(), DcimLayer::adapter_count(paths, AdapterSharing::Shared, dims));
        assert_eq!(s_per.count() - s_none.count(), DcimLayer::adapter_count(paths, AdapterSharing::PerPath, dims));
        assert_eq!(s_per.count() - s_none.count(), 4 * (s_shared.count() - s_none.count()));
    }

    #[test]
    fn misaligned_streams_are_rejected() {
        let (s, l) = layer(DcimMode::dual(), AdapterSharing::Shared, false);
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &s);
        let xa = tape.constant(rand_t(&[5, 8], 1));
        let xv = tape.constant(rand_t(&[4, 8], 1));
        assert!(matches!(l.forward(&ctx, xa, xv, &[true; 5]), Err(Error::Alignment { .. })));
    }
}
