//! Checkpoint files.
//!
//! ```text
//! "DCIM" | u32 version | u64 digest | u32 variant
//! u32 len | canonical config text
//! u32 count | count × (u32 len | name | u32 rank | rank × u32)
//! f32 payload, little-endian, in manifest order
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, Variant};
use crate::binio::{expect_magic, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCIM";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub digest: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointData {
    pub fn from_model<S: Scalar>(model: &Model<S>) -> Self {
        Self {
            variant: model.variant,
            cfg: model.cfg.clone(),
            digest: model.digest(),
            tensors: model.params.entries().iter().map(|e| (e.name.clone(), e.value.cast())).collect(),
        }
    }

    fn by_name(&self) -> HashMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let data = CheckpointData::from_model(model);
    let mut w = BufWriter::new(File::create(path)?);
    let text = data.cfg.to_text();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&data.digest.to_le_bytes())?;
    w.write_all(&data.variant.code().to_le_bytes())?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&(data.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &data.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in &data.tensors {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format(format!("{what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated {what}")))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::from(e).at(path))?);
    expect_magic(&mut r, MAGIC)?;
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let digest = read_u64(&mut r, "digest")?;
    let variant = Variant::from_code(read_u32(&mut r, "variant")?)?;
    let cfg = ModelConfig::from_text(&read_string(&mut r, "config text")?)?;
    if cfg.digest(variant) != digest {
        return Err(Error::Checkpoint("stored digest does not match the stored configuration".into()));
    }
    let count = read_u32(&mut r, "manifest")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = read_string(&mut r, "tensor name")?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r, "shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated payload at `{name}`")))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(CheckpointData {
        variant,
        cfg,
        digest,
        tensors,
    })
}

/// Which parameters a warm start filled, and from where.
#[derive(Clone, Debug, Default)]
pub struct WarmStartReport {
    pub from_asr: Vec<String>,
    pub from_vsr: Vec<String>,
    /// Left at initialization: adapters and the intermediate head.
    pub fresh: Vec<String>,
}

impl<S: Scalar> Model<S> {
    /// Rebuilds the network stored in a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let data = read_checkpoint(path)?;
        let mut m = Self::new(&data.cfg, data.variant, 0)?;
        m.load_state(&data, false)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }

    /// Copies checkpoint values into this model. With matching digests every
    /// parameter must be present; otherwise the load is refused unless
    /// `force`, which copies the names present in both with equal shapes.
    /// Returns the copied names.
    pub fn load_state(&mut self, data: &CheckpointData, force: bool) -> Result<Vec<String>> {
        let own = self.digest();
        if data.digest != own && !force {
            return Err(Error::DigestMismatch {
                expected: own,
                found: data.digest,
            });
        }
        let src = data.by_name();
        let exact = data.digest == own;
        if exact && src.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                src.len(),
                self.params.len()
            )));
        }
        let mut copied = Vec::new();
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            match src.get(name.as_str()) {
                Some(t) if t.shape() == self.params.get(id).shape() => {
                    *self.params.get_mut(id) = t.cast();
                    copied.push(name);
                }
                other if exact => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}`: {}",
                        if other.is_some() { "shape differs" } else { "missing" }
                    )))
                }
                _ => {}
            }
        }
        Ok(copied)
    }

    /// AVSR initialized from an ASR and optionally a VSR checkpoint: every
    /// ASR parameter, the `visual.*` parameters of the VSR, everything else
    /// fresh. Adapters start at zero output, so before fine-tuning the AVSR
    /// reproduces the ASR exactly.
    pub fn warm_start(cfg: &ModelConfig, seed: u64, asr: &CheckpointData, vsr: Option<&CheckpointData>) -> Result<(Self, WarmStartReport)> {
        if asr.variant != Variant::Asr {
            return Err(Error::Checkpoint(format!("expected an asr checkpoint, got {}", asr.variant)));
        }
        if let Some(v) = vsr.filter(|v| v.variant != Variant::Vsr) {
            return Err(Error::Checkpoint(format!("expected a vsr checkpoint, got {}", v.variant)));
        }
        let mut m = Self::new(cfg, Variant::Avsr, seed)?;
        let mut report = WarmStartReport::default();
        let mut fill = |src: &CheckpointData, keep: &dyn Fn(&str) -> bool, sink: &mut Vec<String>| -> Result<()> {
            for (name, t) in &src.tensors {
                if !keep(name) {
                    continue;
                }
                let id = m
                    .params
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` has no counterpart in the AVSR")))?;
                if t.shape() != m.params.get(id).shape() {
                    return Err(Error::Checkpoint(format!("`{name}`: shape differs from the AVSR")));
                }
                *m.params.get_mut(id) = t.cast();
                sink.push(name.clone());
            }
            Ok(())
        };
        fill(asr, &|_| true, &mut report.from_asr)?;
        if let Some(v) = vsr {
            fill(v, &|n| n.starts_with("visual."), &mut report.from_vsr)?;
        }
        report.fresh = m
            .params
            .names()
            .filter(|n| !report.from_asr.iter().chain(&report.from_vsr).any(|c| c == n))
            .map(str::to_string)
            .collect();
        Ok((m, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::tiny();
        let m = Model::<f32>::new(&cfg, Variant::Avsr, 9).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        for (a, b) in m.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.bit_eq(&b.value));
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[9] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::<f32>::load(&path), Err(Error::Checkpoint(_))));
        bytes[9] ^= 1;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::<f32>::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let cfg = ModelConfig::tiny();
        let asr = Model::<f32>::new(&cfg, Variant::Asr, 1).unwrap();
        let data = CheckpointData::from_model(&asr);
        let mut avsr = Model::<f32>::new(&cfg, Variant::Avsr, 2).unwrap();
        assert!(matches!(avsr.load_state(&data, false), Err(Error::DigestMismatch { .. })));
        let copied = avsr.load_state(&data, true).unwrap();
        assert_eq!(copied.len(), asr.params.len());
    }

    #[test]
    fn warm_start_fills_all_shared_names() {
        let cfg = ModelConfig::tiny();
        let asr = CheckpointData::from_model(&Model::<f32>::new(&cfg, Variant::Asr, 1).unwrap());
        let vsr = CheckpointData::from_model(&Model::<f32>::new(&cfg, Variant::Vsr, 2).unwrap());
        let (m, rep) = Model::<f32>::warm_start(&cfg, 3, &asr, Some(&vsr)).unwrap();
        assert_eq!(rep.from_asr.len(), asr.tensors.len());
        assert!(rep.from_vsr.iter().all(|n| n.starts_with("visual.")));
        assert_eq!(rep.from_vsr.len(), vsr.tensors.iter().filter(|(n, _)| n.starts_with("visual.")).count());
        assert!(rep
            .fresh
            .iter()
            .all(|n| n.starts_with("dcim.") || n.starts_with("fusion.") || n.starts_with("inter_head.")));
        assert_eq!(rep.from_asr.len() + rep.from_vsr.len() + rep.fresh.len(), m.params.len());
        assert!(Model::<f32>::warm_start(&cfg, 3, &vsr, None).is_err());
    }
}
