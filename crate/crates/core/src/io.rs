//! Little-endian binary containers for datasets (`MAGD`) and model
//! checkpoints (`MAGC`), plus the dataset JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::{LstmBaseline, MlpBaseline};
use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::magnet::{ArchConfig, IntegrationMode, MagnetModel};
use crate::nn::Tensor;
use crate::predict::{Model, ModelKind};
use crate::preprocess::Standardizer;
use crate::sim::SystemKind;

pub const DATASET_MAGIC: &[u8; 4] = b"MAGD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAGC";
pub const FORMAT_VERSION: u16 = 1;
/// Bytes before the dataset payload.
pub const DATASET_HEADER_LEN: usize = 4 + 2 + 1 + 4 * 4 + 8;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).or_else(|_| format_err(format!("{what} {v} does not fit in 32 bits")))
}

/// Byte cursor with explicit truncation diagnostics.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!(
                "truncated {}: needed {n} more bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.bytes.len()
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return format_err(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            ));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Sidecar path: `<stem>.meta.json` next to the dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + ds.data.len() * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ds.system.id());
    for (v, what) in [
        (ds.n_agents, "agent count"),
        (ds.state_dim, "state dimension"),
        (ds.sequences, "sequence count"),
        (ds.length, "sequence length"),
    ] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&ds.dt.to_le_bytes());
    put_f64s(&mut out, &ds.data);
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return format_err("not a MAGD file");
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        what: "MAGD header",
    };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported MAGD version {version}"));
    }
    let id = r.u8()?;
    let system = SystemKind::from_id(id).ok_or_else(|| Error::Format(format!("unknown system id {id}")))?;
    let (n, d, m, l) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let dt = r.f64()?;
    let count = [n, d, m, l].iter().try_fold(1usize, |acc, &v| acc.checked_mul(v));
    let expect = count
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let found = bytes.len() - r.pos;
    if found != expect {
        return format_err(format!(
            "MAGD payload is {found} bytes, header (N={n}, d={d}, M={m}, L={l}) implies {expect}"
        ));
    }
    r.what = "MAGD payload";
    let data = r.f64s(expect / 8)?;
    r.finish()?;
    Dataset::new(system, n, d, m, l, dt, data)
}

/// Writes the dataset and, when it carries metadata, its JSON sidecar.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    if let Some(meta) = &ds.meta {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    }
    Ok(())
}

/// Reads a dataset and attaches its sidecar metadata if present.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = decode_dataset(&fs::read(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(side)?)?;
        ds.meta = Some(meta);
    }
    Ok(ds)
}

/// Any model a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Magnet(MagnetModel),
    Mlp(MlpBaseline),
    Lstm(LstmBaseline),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            AnyModel::Magnet(m) => m,
            AnyModel::Mlp(m) => m,
            AnyModel::Lstm(m) => m,
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn Model {
        match self {
            AnyModel::Magnet(m) => m,
            AnyModel::Mlp(m) => m,
            AnyModel::Lstm(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub val_loss: f64,
}

fn put_group(out: &mut Vec<u8>, widths: &[usize]) -> Result<()> {
    out.push(u8::try_from(widths.len()).or_else(|_| format_err("too many layer widths"))?);
    for &w in widths {
        out.extend_from_slice(&to_u32(w, "layer width")?.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = ckpt.model.as_model();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    let (deriv_dim, mode, groups): (usize, IntegrationMode, Vec<Vec<usize>>) = match &ckpt.model {
        AnyModel::Magnet(m) => (
            m.arch.deriv_dim,
            m.mode(),
            vec![m.arch.h_widths.clone(), m.arch.f_widths.clone(), vec![m.arch.g_width]],
        ),
        AnyModel::Mlp(m) => (m.state_dim(), IntegrationMode::FirstOrder, vec![m.hidden().to_vec()]),
        AnyModel::Lstm(m) => (m.state_dim(), IntegrationMode::FirstOrder, vec![vec![m.hidden(), m.layers()]]),
    };
    out.extend_from_slice(&to_u32(model.n_agents(), "agent count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(model.state_dim(), "state dimension")?.to_le_bytes());
    out.extend_from_slice(&to_u32(deriv_dim, "derivative dimension")?.to_le_bytes());
    out.push(mode.tag());
    out.extend_from_slice(&model.dt().to_le_bytes());
    out.push(groups.len() as u8);
    for g in &groups {
        put_group(&mut out, g)?;
    }

    let std = model.standardizer();
    out.extend_from_slice(&to_u32(std.dim(), "standardizer dimension")?.to_le_bytes());
    put_f64s(&mut out, &std.mean);
    put_f64s(&mut out, &std.std);

    let tensors = model.tensors();
    out.extend_from_slice(&to_u32(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, t) in model.tensor_names().iter().zip(tensors) {
        let len = u16::try_from(name.len()).or_else(|_| format_err(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).or_else(|_| format_err("tensor rank too large"))?);
        for &dim in t.shape() {
            out.extend_from_slice(&to_u32(dim, "tensor dimension")?.to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    out.extend_from_slice(&ckpt.val_loss.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return format_err("not a MAGC file");
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        what: "MAGC checkpoint",
    };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported MAGC version {version}"));
    }
    let tag = r.u8()?;
    let kind = ModelKind::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown model kind tag {tag}")))?;
    let n_agents = r.u32()?;
    let state_dim = r.u32()?;
    let deriv_dim = r.u32()?;
    let mode_tag = r.u8()?;
    let mode = IntegrationMode::from_tag(mode_tag)
        .ok_or_else(|| Error::Format(format!("unknown integration mode {mode_tag}")))?;
    let dt = r.f64()?;
    let group_count = r.u8()?;
    let mut groups = Vec::with_capacity(group_count as usize);
    for _ in 0..group_count {
        let len = r.u8()?;
        groups.push((0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    let std_dim = r.u32()?;
    let mean = r.f64s(std_dim)?;
    let std = r.f64s(std_dim)?;
    let standardizer = Standardizer::new(mean, std).map_err(|e| Error::Format(format!("standardizer: {e}")))?;

    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).or_else(|_| format_err("tensor name is not UTF-8"))?;
        if named.iter().any(|(n, _): &(String, Tensor)| *n == name) {
            return format_err(format!("duplicate tensor name {name}"));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let data = r.f64s(numel)?;
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        named.push((name, tensor));
    }
    let val_loss = r.f64()?;
    r.finish()?;

    let group = |k: usize| -> Result<&Vec<usize>> {
        groups.get(k).ok_or_else(|| Error::Format(format!("missing architecture group {k}")))
    };
    let bad = |e: Error| Error::Format(format!("checkpoint does not match its architecture: {e}"));
    let model = match kind {
        ModelKind::Magnet => {
            let arch = ArchConfig {
                input_dim: state_dim,
                deriv_dim,
                h_widths: group(0)?.clone(),
                f_widths: group(1)?.clone(),
                g_width: *group(2)?.first().ok_or_else(|| Error::Format("missing g width".into()))?,
            };
            if arch.mode() != mode {
                return format_err("integration mode disagrees with the architecture");
            }
            AnyModel::Magnet(MagnetModel::from_parts(arch, n_agents, dt, standardizer, named).map_err(bad)?)
        }
        ModelKind::Mlp => AnyModel::Mlp(
            MlpBaseline::from_parts(n_agents, state_dim, dt, group(0)?, standardizer, named).map_err(bad)?,
        ),
        ModelKind::Lstm => {
            let g = group(0)?;
            if g.len() != 2 {
                return format_err("LSTM architecture needs hidden size and layer count");
            }
            AnyModel::Lstm(LstmBaseline::from_parts(n_agents, state_dim, dt, g[0], g[1], standardizer, named).map_err(bad)?)
        }
    };
    Ok(Checkpoint { model, val_loss })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let data = (0..160).map(|i| (i as f64).sqrt() - 3.0).collect();
        Dataset::new(SystemKind::PointMass, 4, 4, 2, 5, 0.01, data).unwrap()
    }

    #[test]
    fn dataset_roundtrip_and_size() {
        let ds = small();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len() - DATASET_HEADER_LEN, 1280);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert!(back.data.iter().zip(&ds.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dataset_rejects_bad_magic_and_truncation() {
        let mut bytes = encode_dataset(&small()).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        let err = decode_dataset(truncated).unwrap_err().to_string();
        assert!(err.contains("1277") && err.contains("1280"), "{err}");
        bytes[0] = b'X';
        assert_eq!(decode_dataset(&bytes).unwrap_err().to_string(), "not a MAGD file");
    }

    #[test]
    fn checkpoint_roundtrip_all_kinds() {
        let mut magnet = MagnetModel::build(ArchConfig::for_system(SystemKind::PointMass), 4, 0.01, 3).unwrap();
        magnet
            .set_standardizer(Standardizer::new(vec![0.1, -0.2, 0.3, 0.0], vec![1.5, 2.0, 0.5, 1.0]).unwrap())
            .unwrap();
        let models = [
            AnyModel::Magnet(magnet),
            AnyModel::Mlp(MlpBaseline::build(3, 2, 0.01, &[8, 8], 1).unwrap()),
            AnyModel::Lstm(LstmBaseline::build(2, 1, 0.01, 6, 2, 1).unwrap()),
        ];
        for model in models {
            let ckpt = Checkpoint { model, val_loss: 1.25e-3 };
            let bytes = encode_checkpoint(&ckpt).unwrap();
            assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
        }
    }

    #[test]
    fn checkpoint_rejects_unknown_kind() {
        let ckpt = Checkpoint {
            model: AnyModel::Mlp(MlpBaseline::build(1, 1, 0.01, &[2], 0).unwrap()),
            val_loss: 0.0,
        };
        let mut bytes = encode_checkpoint(&ckpt).unwrap();
        bytes[6] = 9;
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("unknown model kind"));
        assert!(decode_checkpoint(b"MAGD").is_err());
        let good = encode_checkpoint(&ckpt).unwrap();
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
    }
}
