//! Versioned binary checkpoints and the transfer-learning workflow.
//!
//! Wire format (all integers little-endian):
//! magic "PDTL" | version u32 | config-text length u32 + UTF-8 bytes |
//! tensor count u32 | per tensor: name length u16 + UTF-8 name, rank u8,
//! extents u32 each, dtype byte 0x01 (IEEE-754 f64 LE), raw values |
//! one trailing byte: 0x4F followed by an optimizer-state section, or the
//! terminator 0x00.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::graph::{DenseNetConfig, HeadConfig, ModelGraph, ModelKind, StemConfig};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDTL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0x01;
const TAG_OPTIMIZER: u8 = 0x4F;
const TAG_END: u8 = 0x00;

/// Decode failures, each shape of corruption its own variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    Malformed(String),
    /// Tensor names or shapes disagree with the embedded config.
    Mismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "checkpoint: bad magic bytes"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "checkpoint: unsupported format version {v}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint: truncated payload"),
            CheckpointError::Malformed(m) => write!(f, "checkpoint: malformed: {m}"),
            CheckpointError::Mismatch(m) => write!(f, "checkpoint: name/shape mismatch: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub kind: OptimizerKind,
    pub t: u64,
    pub m: Vec<(String, Vec<f64>)>,
    pub v: Vec<(String, Vec<f64>)>,
}

impl OptimizerSnapshot {
    pub fn from_state(state: &OptimizerState) -> Self {
        OptimizerSnapshot {
            kind: state.kind,
            t: state.t,
            m: state.m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            v: state.v.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn into_state(self) -> OptimizerState {
        let mut st = OptimizerState::new(self.kind);
        st.t = self.t;
        st.m = self.m.into_iter().collect();
        st.v = self.v.into_iter().collect();
        st
    }
}

/// In-memory checkpoint: config text, named tensors (parameters plus batch
/// norm running statistics), optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

// ---------------------------------------------------------------------------
// config text
// ---------------------------------------------------------------------------

fn join_usizes(xs: &[usize]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{x}"));
    }
    s
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer list entry '{p}'")))
        })
        .collect()
}

/// Serialize the model identity as `key = value` lines.
pub fn config_to_text(
    config: &DenseNetConfig,
    kind: ModelKind,
    seed: u64,
    epoch: usize,
) -> String {
    let mut s = String::new();
    s.push_str(&format!("kind = {}\n", kind.as_str()));
    s.push_str(&format!("stem_kernel = {}\n", config.stem.kernel));
    s.push_str(&format!("stem_stride = {}\n", config.stem.stride));
    s.push_str(&format!("stem_pool = {}\n", config.stem.pool));
    s.push_str(&format!("in_channels = {}\n", config.in_channels));
    s.push_str(&format!("k0 = {}\n", config.k0));
    s.push_str(&format!("block_sizes = {}\n", join_usizes(&config.block_sizes)));
    s.push_str(&format!("growth_rate = {}\n", config.growth_rate));
    s.push_str(&format!(
        "bottleneck_multiplier = {}\n",
        config.bottleneck_multiplier
    ));
    s.push_str(&format!("compression = {}\n", config.compression));
    s.push_str(&format!(
        "head_widths = {}\n",
        join_usizes(&config.head.dense_widths)
    ));
    s.push_str(&format!("head_dropout = {}\n", config.head.dropout_rate));
    s.push_str(&format!("num_classes = {}\n", config.num_classes));
    s.push_str(&format!("resolution = {}\n", config.input_resolution));
    s.push_str(&format!("seed = {seed}\n"));
    s.push_str(&format!("epoch = {epoch}\n"));
    s
}

/// Parse the config text back into (config, kind, seed, epoch).
pub fn config_from_text(text: &str) -> Result<(DenseNetConfig, ModelKind, u64, usize)> {
    let mut map: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad config line '{line}'")))?;
        map.insert(k.trim(), v.trim());
    }
    let get = |k: &str| -> Result<&str> {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing config key '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("bad integer for key '{k}'")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("bad float for key '{k}'")))
    };
    let kind = ModelKind::parse(get("kind")?)?;
    let config = DenseNetConfig {
        stem: StemConfig {
            kernel: parse_usize("stem_kernel")?,
            stride: parse_usize("stem_stride")?,
            pool: get("stem_pool")? == "true",
        },
        in_channels: parse_usize("in_channels")?,
        k0: parse_usize("k0")?,
        block_sizes: parse_usizes(get("block_sizes")?)?,
        growth_rate: parse_usize("growth_rate")?,
        bottleneck_multiplier: parse_usize("bottleneck_multiplier")?,
        compression: parse_f64("compression")?,
        head: HeadConfig {
            dense_widths: parse_usizes(get("head_widths")?)?,
            dropout_rate: parse_f64("head_dropout")?,
        },
        num_classes: parse_usize("num_classes")?,
        input_resolution: parse_usize("resolution")?,
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::Config("bad seed".into()))?;
    let epoch = parse_usize("epoch")?;
    Ok((config, kind, seed, epoch))
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> core::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> core::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> core::result::Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> core::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> core::result::Result<u64, CheckpointError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f64s(&mut self, n: usize) -> core::result::Result<Vec<f64>, CheckpointError> {
        let b = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(b.chunks_exact(8)
            .map(|c| {
                let mut a = [0u8; 8];
                a.copy_from_slice(c);
                f64::from_le_bytes(a)
            })
            .collect())
    }

    fn string(&mut self, n: usize) -> core::result::Result<String, CheckpointError> {
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(|s| s.to_string())
            .map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(c: &mut Cursor) -> core::result::Result<(String, Tensor), CheckpointError> {
    let name_len = c.u16()? as usize;
    let name = c.string(name_len)?;
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let dtype = c.u8()?;
    if dtype != DTYPE_F64 {
        return Err(CheckpointError::Malformed(format!(
            "unknown dtype byte 0x{dtype:02X}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = c.f64s(n)?;
    Ok((name, Tensor::from_vec(&shape, data)))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        match &self.optimizer {
            Some(snap) => {
                out.push(TAG_OPTIMIZER);
                out.push(match snap.kind {
                    OptimizerKind::Sgd => 0,
                    OptimizerKind::RmsProp => 1,
                    OptimizerKind::Adam => 2,
                });
                out.extend_from_slice(&snap.t.to_le_bytes());
                for buffers in [&snap.m, &snap.v] {
                    out.extend_from_slice(&(buffers.len() as u32).to_le_bytes());
                    for (name, vals) in buffers {
                        put_tensor(&mut out, name, &[vals.len()], vals);
                    }
                }
            }
            None => out.push(TAG_END),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> core::result::Result<Checkpoint, CheckpointError> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let cfg_len = c.u32()? as usize;
        let config_text = c.string(cfg_len)?;
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(get_tensor(&mut c)?);
        }
        let optimizer = match c.u8()? {
            TAG_END => None,
            TAG_OPTIMIZER => {
                let kind = match c.u8()? {
                    0 => OptimizerKind::Sgd,
                    1 => OptimizerKind::RmsProp,
                    2 => OptimizerKind::Adam,
                    b => {
                        return Err(CheckpointError::Malformed(format!(
                            "unknown optimizer kind byte 0x{b:02X}"
                        )))
                    }
                };
                let t = c.u64()?;
                let mut sections = [Vec::new(), Vec::new()];
                for sec in &mut sections {
                    let n = c.u32()? as usize;
                    for _ in 0..n {
                        let (name, tensor) = get_tensor(&mut c)?;
                        sec.push((name, tensor.into_data()));
                    }
                }
                let [m, v] = sections;
                Some(OptimizerSnapshot { kind, t, m, v })
            }
            b => {
                return Err(CheckpointError::Malformed(format!(
                    "unknown section tag 0x{b:02X}"
                )))
            }
        };
        Ok(Checkpoint {
            version,
            config_text,
            tensors,
            optimizer,
        })
    }
}

// ---------------------------------------------------------------------------
// model <-> checkpoint
// ---------------------------------------------------------------------------

/// Snapshot a model (parameters + batch norm running statistics).
pub fn checkpoint_from_model(model: &ModelGraph, optimizer: Option<OptimizerSnapshot>) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    for (key, running) in &model.bn {
        tensors.push((
            format!("{key}.running_mean"),
            Tensor::from_vec(&[running.mean.len()], running.mean.clone()),
        ));
        tensors.push((
            format!("{key}.running_var"),
            Tensor::from_vec(&[running.var.len()], running.var.clone()),
        ));
    }
    Checkpoint {
        version: FORMAT_VERSION,
        config_text: config_to_text(&model.config, model.kind, model.seed, model.trained_epoch),
        tensors,
        optimizer,
    }
}

/// Rebuild a model from a checkpoint; every embedded tensor must land on a
/// matching parameter or running-stat slot, and every model parameter must
/// be covered.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> core::result::Result<ModelGraph, CheckpointError> {
    let (config, kind, seed, epoch) = config_from_text(&ckpt.config_text)
        .map_err(|e| CheckpointError::Malformed(format!("{e}")))?;
    let mut model = ModelGraph::build(config, kind, seed)
        .map_err(|e| CheckpointError::Malformed(format!("{e}")))?;
    model.trained_epoch = epoch;
    let mut covered = 0usize;
    for (name, tensor) in &ckpt.tensors {
        if let Some(key) = name.strip_suffix(".running_mean") {
            let slot = model
                .bn
                .get_mut(key)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor '{name}'")))?;
            if slot.mean.len() != tensor.numel() {
                return Err(CheckpointError::Mismatch(format!(
                    "shape mismatch for '{name}'"
                )));
            }
            slot.mean = tensor.data().to_vec();
        } else if let Some(key) = name.strip_suffix(".running_var") {
            let slot = model
                .bn
                .get_mut(key)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor '{name}'")))?;
            if slot.var.len() != tensor.numel() {
                return Err(CheckpointError::Mismatch(format!(
                    "shape mismatch for '{name}'"
                )));
            }
            slot.var = tensor.data().to_vec();
        } else {
            let slot = model
                .params
                .get_mut(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor '{name}'")))?;
            if slot.shape() != tensor.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "shape mismatch for '{name}'"
                )));
            }
            *slot = tensor.clone();
            covered += 1;
        }
    }
    if covered != model.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint covers {covered} of {} parameters",
            model.params.len()
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// transfer learning
// ---------------------------------------------------------------------------

/// Which parameters to exclude from optimizer updates after transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FreezePolicy {
    None,
    /// Everything before the classifier head.
    Backbone,
    Explicit(Vec<String>),
}

/// Build a new model from a pretrained checkpoint: backbone parameters and
/// batch norm statistics copied, a fresh head initialized from `seed`, and
/// freeze flags applied.
pub fn transfer(
    base: &Checkpoint,
    new_head: HeadConfig,
    num_classes: usize,
    freeze: FreezePolicy,
    seed: u64,
) -> Result<ModelGraph> {
    let (mut config, kind, _, _) = config_from_text(&base.config_text)?;
    config.head = new_head;
    config.num_classes = num_classes;
    let mut model = ModelGraph::build(config, kind, seed)?;
    for (name, tensor) in &base.tensors {
        if name.starts_with("head.") {
            continue;
        }
        if let Some(key) = name.strip_suffix(".running_mean") {
            let slot = model.bn.get_mut(key).ok_or_else(|| {
                Error::Config(format!("checkpoint incompatible: unknown '{name}'"))
            })?;
            slot.mean = tensor.data().to_vec();
        } else if let Some(key) = name.strip_suffix(".running_var") {
            let slot = model.bn.get_mut(key).ok_or_else(|| {
                Error::Config(format!("checkpoint incompatible: unknown '{name}'"))
            })?;
            slot.var = tensor.data().to_vec();
        } else {
            let slot = model.params.get_mut(name).ok_or_else(|| {
                Error::Config(format!("checkpoint incompatible: unknown '{name}'"))
            })?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint incompatible: shape mismatch for '{name}'"
                )));
            }
            *slot = tensor.clone();
        }
    }
    match freeze {
        FreezePolicy::None => {}
        FreezePolicy::Backbone => {
            let names = model.backbone_param_names();
            model.freeze(&names)?;
        }
        FreezePolicy::Explicit(names) => model.freeze(&names)?,
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DenseNetConfig;
    use crate::ops::Mode;
    use crate::rng::Rng;

    fn toy_model(seed: u64) -> ModelGraph {
        ModelGraph::build(DenseNetConfig::toy(32), ModelKind::Dense, seed).unwrap()
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = DenseNetConfig::toy(32);
        let text = config_to_text(&cfg, ModelKind::Dense, 42, 7);
        let (cfg2, kind, seed, epoch) = config_from_text(&text).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(kind, ModelKind::Dense);
        assert_eq!(seed, 42);
        assert_eq!(epoch, 7);
    }

    #[test]
    fn roundtrip_bit_identical_logits() {
        let mut model = toy_model(9);
        let bytes = checkpoint_from_model(&model, None).encode();
        let ckpt = Checkpoint::decode(&bytes).unwrap();
        let mut restored = model_from_checkpoint(&ckpt).unwrap();
        let mut rng = Rng::new(4);
        let input = Tensor::from_vec(
            &[1, 1, 32, 32],
            (0..1024).map(|_| rng.uniform()).collect(),
        );
        let mut r1 = Rng::new(0);
        let mut r2 = Rng::new(0);
        let (a, _) = model.forward(&input, Mode::Eval, &mut r1).unwrap();
        let (b, _) = restored.forward(&input, Mode::Eval, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn corrupted_magic_is_distinct_error() {
        let model = toy_model(9);
        let mut bytes = checkpoint_from_model(&model, None).encode();
        bytes[0] = b'X';
        assert_eq!(Checkpoint::decode(&bytes), Err(CheckpointError::BadMagic));
    }

    #[test]
    fn bumped_version_is_distinct_error() {
        let model = toy_model(9);
        let mut bytes = checkpoint_from_model(&model, None).encode();
        bytes[4] = 0xFF;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::UnsupportedVersion(_))
        ));
    }

    #[test]
    fn truncation_is_distinct_error() {
        let model = toy_model(9);
        let bytes = checkpoint_from_model(&model, None).encode();
        let cut = &bytes[..bytes.len() / 2];
        assert_eq!(Checkpoint::decode(cut), Err(CheckpointError::Truncated));
    }

    #[test]
    fn renamed_tensor_is_mismatch() {
        let model = toy_model(9);
        let mut ckpt = checkpoint_from_model(&model, None);
        ckpt.tensors[0].0 = String::from("no.such.param");
        let bytes = ckpt.encode();
        let decoded = Checkpoint::decode(&bytes).unwrap();
        assert!(matches!(
            model_from_checkpoint(&decoded),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let model = toy_model(9);
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        st.t = 17;
        st.m.insert("head.out.bias".into(), alloc::vec![0.25, -0.5]);
        st.v.insert("head.out.bias".into(), alloc::vec![0.01, 0.02]);
        let ckpt = checkpoint_from_model(&model, Some(OptimizerSnapshot::from_state(&st)));
        let decoded = Checkpoint::decode(&ckpt.encode()).unwrap();
        let snap = decoded.optimizer.unwrap();
        assert_eq!(snap.kind, OptimizerKind::Adam);
        assert_eq!(snap.t, 17);
        assert_eq!(snap.m[0].1, alloc::vec![0.25, -0.5]);
    }

    #[test]
    fn transfer_copies_backbone_and_freezes() {
        let model = toy_model(9);
        let ckpt = checkpoint_from_model(&model, None);
        let head = HeadConfig {
            dense_widths: alloc::vec![32],
            dropout_rate: 0.5,
        };
        let transferred = transfer(&ckpt, head, 2, FreezePolicy::Backbone, 123).unwrap();
        for name in transferred.backbone_param_names() {
            assert_eq!(
                transferred.params[&name].data(),
                model.params[&name].data(),
                "backbone param {name} not copied"
            );
            assert!(transferred.frozen.contains(&name));
        }
        // head is fresh and unfrozen
        assert!(transferred.params.keys().any(|k| k.starts_with("head.")));
        assert!(!transferred.frozen.iter().any(|k| k.starts_with("head.")));
    }

    #[test]
    fn transfer_preset_b_head_shapes() {
        let model = toy_model(9);
        let ckpt = checkpoint_from_model(&model, None);
        let head = HeadConfig::preset("B").unwrap();
        let t = transfer(&ckpt, head, 2, FreezePolicy::None, 1).unwrap();
        // pooled feature dim of the toy backbone is 62
        assert_eq!(t.params["head.fc1.weight"].shape(), &[62, 1024]);
        assert_eq!(t.params["head.fc2.weight"].shape(), &[1024, 512]);
        assert_eq!(t.params["head.out.weight"].shape(), &[512, 2]);
    }
}
