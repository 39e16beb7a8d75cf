//! Checkpoint serialization: a named-tensor container with optional
//! optimizer state and an epoch counter, stored in a little-endian binary
//! format (magic `PPMSEG01`, version 1). The model's topology travels in a
//! reserved `meta.config` tensor so a checkpoint alone can rebuild the
//! network.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build_model, Mode, Model, ModelConfig, PPMConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PPMSEG01";
const FORMAT_VERSION: u32 = 1;
/// Reserved tensor carrying the model configuration (integer fields stored
/// as f32 bit patterns).
pub const META_CONFIG: &str = "meta.config";
const CONFIG_SCHEMA: u32 = 1;

/// Upper bounds used to reject absurd headers before allocating.
const MAX_NAME_LEN: u32 = 1 << 16;
const MAX_RANK: u32 = 8;
const MAX_TENSORS: u32 = 1 << 20;

/// One serialized tensor: a unique name, dimensions, and row-major data.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// A complete training snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<Vec<NamedTensor>>,
    pub epoch: u32,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &[NamedTensor]) {
    put_u32(buf, tensors.len() as u32);
    for t in tensors {
        put_u32(buf, t.name.len() as u32);
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(buf, t.dims.len() as u32);
        for &d in &t.dims {
            put_u32(buf, d);
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_tensors(&mut buf, &self.tensors);
        match &self.optimizer {
            Some(opt) => {
                buf.push(1);
                put_tensors(&mut buf, opt);
            }
            None => buf.push(0),
        }
        put_u32(&mut buf, self.epoch);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:02x?}, expected {:02x?} (field: magic)",
                magic, MAGIC
            )));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION} (field: version)"
            )));
        }
        let tensors = r.tensors("tensors")?;
        let flag = r.u8("has-optimizer flag")?;
        let optimizer = match flag {
            0 => None,
            1 => Some(r.tensors("optimizer tensors")?),
            other => {
                return Err(Error::Format(format!(
                    "has-optimizer flag must be 0 or 1, got {other}"
                )))
            }
        };
        let epoch = r.u32("epoch")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after epoch",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            tensors,
            optimizer,
            epoch,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read_file(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Snapshot a model (with optional optimizer state) into a checkpoint.
    /// The first tensor is always `meta.config`.
    pub fn from_model(m: &Model, optimizer: Option<Vec<NamedTensor>>, epoch: u32) -> Checkpoint {
        let mut tensors = vec![encode_config(m.config())];
        for (name, t) in m.named_parameters().into_iter().chain(m.named_buffers()) {
            let s = t.shape();
            tensors.push(NamedTensor {
                name,
                dims: vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
                data: t.to_vec(),
            });
        }
        Checkpoint {
            tensors,
            optimizer,
            epoch,
        }
    }

    /// Rebuild the model this checkpoint describes. Every stored tensor
    /// must match a model tensor by name and shape, and vice versa. The
    /// returned model is in inference mode.
    pub fn to_model(&self) -> Result<Model> {
        let meta = self
            .tensors
            .iter()
            .find(|t| t.name == META_CONFIG)
            .ok_or_else(|| Error::Format(format!("missing tensor '{META_CONFIG}'")))?;
        let cfg = decode_config(meta)?;
        let mut model = build_model(&cfg)?;
        model.set_mode(Mode::Inference);

        let mut targets: std::collections::BTreeMap<String, Tensor> = model
            .named_parameters()
            .into_iter()
            .chain(model.named_buffers())
            .collect();
        for t in &self.tensors {
            if t.name == META_CONFIG {
                continue;
            }
            let dst = targets.remove(&t.name).ok_or_else(|| {
                Error::Format(format!("unknown tensor name '{}'", t.name))
            })?;
            let s = dst.shape();
            let want = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
            if t.dims != want {
                return Err(Error::Format(format!(
                    "tensor '{}' has dims {:?}, expected {:?}",
                    t.name, t.dims, want
                )));
            }
            dst.set_data(&t.data)?;
        }
        if let Some((name, _)) = targets.into_iter().next() {
            return Err(Error::Format(format!("missing tensor '{name}'")));
        }
        Ok(model)
    }
}

/// Save a model snapshot with no optimizer state and epoch 0.
pub fn save_checkpoint(m: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(m, None, 0).write_file(path)
}

/// Load a model from a checkpoint file, in inference mode.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::read_file(path)?.to_model()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated while reading {field} (need {n} bytes at offset {}, have {})",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensors(&mut self, field: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(&format!("{field} count"))?;
        if count > MAX_TENSORS {
            return Err(Error::Format(format!(
                "{field} count {count} exceeds limit {MAX_TENSORS}"
            )));
        }
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name_len = self.u32(&format!("{field}[{i}] name length"))?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::Format(format!(
                    "{field}[{i}] name length {name_len} exceeds limit {MAX_NAME_LEN}"
                )));
            }
            let name_bytes = self.take(name_len as usize, &format!("{field}[{i}] name"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Format(format!("{field}[{i}] name is not UTF-8")))?
                .to_string();
            let rank = self.u32(&format!("tensor '{name}' rank"))?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!(
                    "tensor '{name}' rank {rank} exceeds limit {MAX_RANK}"
                )));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for d in 0..rank {
                let dim = self.u32(&format!("tensor '{name}' dim {d}"))?;
                numel = numel.saturating_mul(dim as u64);
                dims.push(dim);
            }
            let bytes = numel.saturating_mul(4);
            if bytes > (self.buf.len() - self.pos) as u64 {
                return Err(Error::Format(format!(
                    "truncated while reading tensor '{name}' data (need {bytes} bytes, have {})",
                    self.buf.len() - self.pos
                )));
            }
            let raw = self.take(bytes as usize, &format!("tensor '{name}' data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push(NamedTensor { name, dims, data });
        }
        Ok(out)
    }
}

/// Encode the model configuration as f32 bit patterns. Layout (u32 each):
/// schema, in_channels, input h, input w, encoder len + channels, decoder
/// len + channels, bins len + bins, branch_channels, fused, dilation,
/// seed low word, seed high word.
fn encode_config(cfg: &ModelConfig) -> NamedTensor {
    let mut words: Vec<u32> = vec![
        CONFIG_SCHEMA,
        cfg.in_channels as u32,
        cfg.input_size.0 as u32,
        cfg.input_size.1 as u32,
    ];
    words.push(cfg.encoder_stage_channels.len() as u32);
    words.extend(cfg.encoder_stage_channels.iter().map(|&c| c as u32));
    words.push(cfg.decoder_channels.len() as u32);
    words.extend(cfg.decoder_channels.iter().map(|&c| c as u32));
    words.push(cfg.ppm.bins.len() as u32);
    words.extend(cfg.ppm.bins.iter().map(|&b| b as u32));
    words.push(cfg.ppm.branch_channels as u32);
    words.push(cfg.ppm.fused as u32);
    words.push(cfg.decoder_dilation as u32);
    words.push(cfg.seed as u32);
    words.push((cfg.seed >> 32) as u32);
    NamedTensor {
        name: META_CONFIG.to_string(),
        dims: vec![words.len() as u32],
        data: words.into_iter().map(f32::from_bits).collect(),
    }
}

fn decode_config(t: &NamedTensor) -> Result<ModelConfig> {
    let fmt = |msg: &str| Error::Format(format!("{META_CONFIG}: {msg}"));
    if t.numel() != t.data.len() {
        return Err(fmt("dims do not match data length"));
    }
    let words: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
    let mut pos = 0usize;
    let mut next = |what: &str| -> Result<u32> {
        let v = *words
            .get(pos)
            .ok_or_else(|| fmt(&format!("truncated before {what}")))?;
        pos += 1;
        Ok(v)
    };
    let schema = next("schema")?;
    if schema != CONFIG_SCHEMA {
        return Err(fmt(&format!(
            "unsupported config schema {schema}, expected {CONFIG_SCHEMA}"
        )));
    }
    let in_channels = next("in_channels")? as usize;
    let input_h = next("input height")? as usize;
    let input_w = next("input width")? as usize;
    let mut read_list = |what: &str| -> Result<Vec<usize>> {
        let len = next(&format!("{what} length"))?;
        if len > 64 {
            return Err(fmt(&format!("{what} length {len} exceeds limit 64")));
        }
        (0..len).map(|i| Ok(next(&format!("{what}[{i}]"))? as usize)).collect()
    };
    let encoder_stage_channels = read_list("encoder channels")?;
    let decoder_channels = read_list("decoder channels")?;
    let bins = read_list("bins")?;
    let branch_channels = next("branch_channels")? as usize;
    let fused = match next("fused")? {
        0 => false,
        1 => true,
        other => return Err(fmt(&format!("fused must be 0 or 1, got {other}"))),
    };
    let decoder_dilation = next("decoder_dilation")? as usize;
    let seed_lo = next("seed low word")? as u64;
    let seed_hi = next("seed high word")? as u64;
    if pos != words.len() {
        return Err(fmt("trailing config words"));
    }
    let cfg = ModelConfig {
        in_channels,
        input_size: (input_h, input_w),
        encoder_stage_channels,
        decoder_channels,
        ppm: PPMConfig {
            bins,
            branch_channels,
            fused,
        },
        decoder_dilation,
        seed: seed_lo | (seed_hi << 32),
    };
    cfg.validate()
        .map_err(|e| fmt(&format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{no_grad, Shape};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            input_size: (32, 48),
            encoder_stage_channels: vec![3, 4, 5, 6, 7],
            decoder_channels: vec![6, 5, 4, 3],
            ppm: PPMConfig {
                bins: vec![1, 2],
                branch_channels: 2,
                fused: true,
            },
            decoder_dilation: 2,
            seed: 11,
        }
    }

    fn probe_input() -> Tensor {
        let vals: Vec<f32> = (0..3 * 32 * 48).map(|i| ((i * 7) % 53) as f32 / 53.0).collect();
        Tensor::from_vec(Shape::new(1, 3, 32, 48), vals).unwrap()
    }

    /// Build a model whose running stats differ from their defaults, so the
    /// round trip exercises buffers too.
    fn warmed_model() -> Model {
        let mut m = build_model(&tiny_config()).unwrap();
        no_grad(|| m.forward(&probe_input())).unwrap();
        m.set_mode(Mode::Inference);
        m
    }

    #[test]
    fn wire_format_golden_bytes() {
        let ck = Checkpoint {
            tensors: vec![NamedTensor {
                name: "ab".into(),
                dims: vec![1, 2],
                data: vec![1.0, -2.0],
            }],
            optimizer: None,
            epoch: 3,
        };
        let bytes = ck.to_bytes();
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"PPMSEG01");
        want.extend_from_slice(&1u32.to_le_bytes()); // version
        want.extend_from_slice(&1u32.to_le_bytes()); // tensor count
        want.extend_from_slice(&2u32.to_le_bytes()); // name length
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&2u32.to_le_bytes()); // rank
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        want.push(0); // no optimizer
        want.extend_from_slice(&3u32.to_le_bytes()); // epoch
        assert_eq!(bytes, want);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn round_trip_is_bit_exact_including_optimizer_and_epoch() {
        let m = warmed_model();
        let opt = vec![NamedTensor {
            name: "adam.m.head.conv.weight".into(),
            dims: vec![4],
            data: vec![0.5, -0.25, 3e-9, f32::MIN_POSITIVE],
        }];
        let ck = Checkpoint::from_model(&m, Some(opt), 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.epoch, 17);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for (a, b) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dims, b.dims);
            let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }
    }

    #[test]
    fn save_load_reproduces_forward_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = warmed_model();
        let x = probe_input();
        let before = no_grad(|| m.forward(&x)).unwrap().to_vec();
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.mode(), Mode::Inference);
        assert_eq!(loaded.config(), m.config());
        let after = no_grad(|| loaded.forward(&x)).unwrap().to_vec();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }

    #[test]
    fn corrupt_magic_and_version_are_format_errors() {
        let m = warmed_model();
        let good = Checkpoint::from_model(&m, None, 0).to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        match Checkpoint::from_bytes(&bad_magic) {
            Err(Error::Format(msg)) => assert!(msg.contains("magic"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad_version = good.clone();
        bad_version[8] = 9;
        match Checkpoint::from_bytes(&bad_version) {
            Err(Error::Format(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_anywhere_is_a_format_error() {
        let m = warmed_model();
        let good = Checkpoint::from_model(&m, None, 3).to_bytes();
        // Cut at a spread of prefix lengths, including inside the magic,
        // the headers, tensor data, and the final epoch field.
        let cuts = [0, 4, 9, 13, 20, good.len() / 2, good.len() - 5, good.len() - 1];
        for &cut in &cuts {
            match Checkpoint::from_bytes(&good[..cut]) {
                Err(Error::Format(msg)) => {
                    assert!(msg.contains("truncated") || msg.contains("magic"), "cut {cut}: {msg}")
                }
                other => panic!("cut {cut}: expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let m = warmed_model();
        let mut bytes = Checkpoint::from_model(&m, None, 0).to_bytes();
        bytes.push(0);
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tensor_name_is_reported() {
        let m = warmed_model();
        let mut ck = Checkpoint::from_model(&m, None, 0);
        // Rename a real tensor; the loader must name the stranger.
        let idx = ck
            .tensors
            .iter()
            .position(|t| t.name == "head.conv.bias")
            .unwrap();
        ck.tensors[idx].name = "head.conv.extra".into();
        match ck.to_model() {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("head.conv.extra"), "{msg}");
                assert!(msg.contains("unknown"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let m = warmed_model();
        let mut ck = Checkpoint::from_model(&m, None, 0);
        let idx = ck
            .tensors
            .iter()
            .position(|t| t.name == "head.conv.bias")
            .unwrap();
        ck.tensors.remove(idx);
        match ck.to_model() {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("missing") && msg.contains("head.conv.bias"), "{msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = warmed_model();
        let mut ck = Checkpoint::from_model(&m, None, 0);
        let idx = ck
            .tensors
            .iter()
            .position(|t| t.name == "head.conv.bias")
            .unwrap();
        ck.tensors[idx].dims = vec![1, 2, 1, 1];
        ck.tensors[idx].data = vec![0.0, 0.0];
        match ck.to_model() {
            Err(Error::Format(msg)) => assert!(msg.contains("head.conv.bias"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_optimizer_flag_is_a_format_error() {
        let ck = Checkpoint {
            tensors: vec![],
            optimizer: None,
            epoch: 0,
        };
        let mut bytes = ck.to_bytes();
        let flag_pos = bytes.len() - 5;
        bytes[flag_pos] = 2;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("flag"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_tensor_header_is_rejected_without_allocation() {
        // A tensor claiming 2^32 elements must fail cleanly as truncation.
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes()); // one tensor
        bytes.extend_from_slice(&1u32.to_le_bytes()); // name "x"
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes()); // rank 2
        bytes.extend_from_slice(&65536u32.to_le_bytes());
        bytes.extend_from_slice(&65536u32.to_le_bytes());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn config_meta_tensor_round_trips_every_field() {
        let mut cfg = tiny_config();
        cfg.seed = 0xDEAD_BEEF_0BAD_F00D;
        cfg.ppm.fused = false;
        let decoded = decode_config(&encode_config(&cfg)).unwrap();
        assert_eq!(decoded, cfg);
    }

    #[test]
    fn config_meta_rejects_bad_schema_and_garbage() {
        let cfg = tiny_config();
        let mut t = encode_config(&cfg);
        t.data[0] = f32::from_bits(99);
        match decode_config(&t) {
            Err(Error::Format(msg)) => assert!(msg.contains("schema"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut t = encode_config(&cfg);
        t.data.truncate(3);
        t.dims = vec![3];
        assert!(matches!(decode_config(&t), Err(Error::Format(_))));
        // An invalid decoded configuration is a format error, not a panic.
        let mut t = encode_config(&cfg);
        t.data[2] = f32::from_bits(33); // height not divisible by 16
        match decode_config(&t) {
            Err(Error::Format(msg)) => assert!(msg.contains("invalid configuration"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_without_meta_config_is_rejected() {
        let ck = Checkpoint {
            tensors: vec![],
            optimizer: None,
            epoch: 0,
        };
        match ck.to_model() {
            Err(Error::Format(msg)) => assert!(msg.contains(META_CONFIG), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn read_file_includes_path_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ckpt");
        std::fs::write(&path, b"PPMSEG01only").unwrap();
        match Checkpoint::read_file(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("broken.ckpt"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
