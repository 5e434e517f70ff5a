//! Named-tensor checkpoint archive.
//!
//! Little-endian layout:
//!
//! ```text
//! "DSWR" | u32 version | u64 count
//! count x ( u32 name_len | name | u8 dtype | u8 rank | rank x u64 dim | data )
//! u64 footer = byte length of everything before it
//! ```
//!
//! Besides the parameters the archive holds `meta.config` (the run config
//! JSON, one byte per f32 element), `meta.seed` and `adam.step` (u64 as f64
//! `[hi32, lo32]`), and `adam.m/<name>`, `adam.v/<name>` moments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"DSWR";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 5;
const CONFIG: &str = "meta.config";
const SEED: &str = "meta.seed";
const STEP: &str = "adam.step";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Everything needed to rebuild a model and continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub run: RunConfig,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
}

fn ckpt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Checkpoint { offset: offset as u64, message: message.into() }
}

enum Raw {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    raw: Raw,
    /// Byte offset of the record, for error reporting.
    offset: usize,
}

fn u64_pair(v: u64) -> Raw {
    Raw::F64(vec![(v >> 32) as f64, (v & 0xffff_ffff) as f64])
}

fn write_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        v.write_le(out);
    }
}

fn write_raw(out: &mut Vec<u8>, name: &str, raw: &Raw) {
    match raw {
        Raw::F32(v) => write_entry(out, name, &[v.len()], v),
        Raw::F64(v) => write_entry(out, name, &[v.len()], v),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(ckpt_err(self.pos, format!("truncated reading {what}: {n} bytes needed, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn entry(&mut self) -> Result<Entry> {
        let offset = self.pos;
        let len = self.u32("name length")? as usize;
        let name_at = self.pos;
        let name = std::str::from_utf8(self.take(len, "name")?).map_err(|_| ckpt_err(name_at, "tensor name is not UTF-8"))?.to_string();
        let tag_at = self.pos;
        let dtype = DType::from_tag(self.u8("dtype")?).ok_or_else(|| ckpt_err(tag_at, format!("{name}: unknown dtype tag")))?;
        let rank_at = self.pos;
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(ckpt_err(rank_at, format!("{name}: rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let at = self.pos;
            let d = self.u64("dimension")?;
            numel = usize::try_from(d)
                .ok()
                .filter(|&d| d > 0)
                .and_then(|d| numel.checked_mul(d))
                .ok_or_else(|| ckpt_err(at, format!("{name}: bad dimension {d}")))?;
            shape.push(d as usize);
        }
        let bytes = numel.checked_mul(dtype.size()).ok_or_else(|| ckpt_err(rank_at, format!("{name}: size overflows")))?;
        let data = self.take(bytes, &format!("data of {name}"))?;
        let raw = match dtype {
            DType::F32 => Raw::F32(data.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => Raw::F64(data.chunks_exact(8).map(f64::read_le).collect()),
        };
        Ok(Entry { name, shape, raw, offset })
    }
}

impl Entry {
    fn tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        match (self.raw, T::DTYPE) {
            (Raw::F32(v), DType::F32) => Ok(Tensor::from_parts(self.shape, v.into_iter().map(|x| T::from_f64(x as f64)).collect())),
            (Raw::F64(v), DType::F64) => Ok(Tensor::from_parts(self.shape, v.into_iter().map(T::from_f64).collect())),
            _ => Err(ckpt_err(self.offset, format!("{}: stored dtype differs from {}", self.name, T::DTYPE))),
        }
    }

    fn u64_pair(&self) -> Result<u64> {
        match &self.raw {
            Raw::F64(v) if v.len() == 2 && v.iter().all(|x| x.fract() == 0.0 && (0.0..4_294_967_296.0).contains(x)) => {
                Ok(((v[0] as u64) << 32) | v[1] as u64)
            }
            _ => Err(ckpt_err(self.offset, format!("{}: expected f64 [hi, lo] pair", self.name))),
        }
    }

    fn text(&self) -> Result<String> {
        let bad = || ckpt_err(self.offset, format!("{}: expected f32 byte values", self.name));
        let Raw::F32(v) = &self.raw else { return Err(bad()) };
        let bytes = v.iter().map(|&x| if x.fract() == 0.0 && (0.0..256.0).contains(&x) { Ok(x as u8) } else { Err(bad()) }).collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| ckpt_err(self.offset, format!("{}: not UTF-8", self.name)))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, run: RunConfig, seed: u64, adam: Option<AdamState<T>>) -> Self {
        Self { run, seed, params: model.params.clone(), adam }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.run).expect("config serializes");
        let adam = self.adam.as_ref();
        let count = 2 + self.params.len() + adam.map_or(0, |a| 1 + a.m.len() + a.v.len());
        let mut out = Vec::with_capacity(32 + self.params.num_scalars() * T::DTYPE.size() * if adam.is_some() { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        write_raw(&mut out, CONFIG, &Raw::F32(config.bytes().map(f32::from).collect()));
        write_raw(&mut out, SEED, &u64_pair(self.seed));
        for (_, name, t) in self.params.iter() {
            write_entry(&mut out, name, t.shape(), t.data());
        }
        if let Some(a) = adam {
            write_raw(&mut out, STEP, &u64_pair(a.step));
            for (prefix, moments) in [(M_PREFIX, &a.m), (V_PREFIX, &a.v)] {
                for (name, t) in a.names.iter().zip(moments) {
                    write_entry(&mut out, &format!("{prefix}{name}"), t.shape(), t.data());
                }
            }
        }
        let len = out.len() as u64;
        out.extend_from_slice(&len.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(ckpt_err(0, "bad magic, expected DSWR"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ckpt_err(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u64("tensor count")?;
        let (mut run, mut seed, mut step) = (None, None, None);
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let e = r.entry()?;
            let offset = e.offset;
            match e.name.as_str() {
                CONFIG => {
                    let text = e.text()?;
                    run = Some(serde_json::from_str::<RunConfig>(&text).map_err(|err| ckpt_err(offset, format!("config: {err}")))?);
                }
                SEED => seed = Some(e.u64_pair()?),
                STEP => step = Some(e.u64_pair()?),
                n if n.starts_with(M_PREFIX) => m.push((n[M_PREFIX.len()..].to_string(), e.tensor()?)),
                n if n.starts_with(V_PREFIX) => v.push((n[V_PREFIX.len()..].to_string(), e.tensor()?)),
                n => {
                    let name = n.to_string();
                    params.insert(&name, e.tensor()?).map_err(|_| ckpt_err(offset, format!("duplicate tensor {name}")))?;
                }
            }
        }
        let footer_at = r.pos;
        let footer = r.u64("footer")?;
        if footer != footer_at as u64 {
            return Err(ckpt_err(footer_at, format!("footer records {footer} bytes, found {footer_at}")));
        }
        if r.pos != bytes.len() {
            return Err(ckpt_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let run = run.ok_or_else(|| ckpt_err(footer_at, format!("missing {CONFIG}")))?;
        let seed = seed.ok_or_else(|| ckpt_err(footer_at, format!("missing {SEED}")))?;
        let adam = match step {
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(ckpt_err(footer_at, format!("moments without {STEP}"))),
            Some(step) => {
                let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
                let aligned = |xs: &[(String, Tensor<T>)]| xs.len() == names.len() && xs.iter().zip(&names).all(|((a, t), b)| a == b && params.by_name(b).is_some_and(|p| p.shape() == t.shape()));
                if !aligned(&m) || !aligned(&v) {
                    return Err(ckpt_err(footer_at, "optimizer moments do not match the parameters"));
                }
                Some(AdamState { step, names, m: m.into_iter().map(|x| x.1).collect(), v: v.into_iter().map(|x| x.1).collect() })
            }
        };
        Ok(Self { run, seed, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuild the model from the stored config and install the stored
    /// parameters, which must match the config name for name.
    pub fn into_model(self) -> Result<(Model<T>, Option<AdamState<T>>)> {
        let mut model = Model::build(&self.run.model, self.seed)?;
        let expected: Vec<(&str, &[usize])> = model.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        let stored: Vec<(&str, &[usize])> = self.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
        if expected != stored {
            let diff = expected.iter().zip(&stored).find(|(a, b)| a != b).map(|(a, b)| format!("{a:?} vs {b:?}"));
            return Err(Error::Config(format!(
                "checkpoint parameters do not match its model config ({} vs {} tensors; first difference {})",
                expected.len(),
                stored.len(),
                diff.unwrap_or_else(|| "in length".into())
            )));
        }
        model.params = self.params;
        Ok((model, self.adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint<f32> {
        let run = RunConfig::default();
        let mut model = Model::<f32>::build(&run.model, 11).unwrap();
        model.params.perturb(2, 0.1, |_| true);
        let mut adam = AdamState::new(&model.params);
        adam.step = (7u64 << 32) + 5;
        adam.m[0] = adam.m[0].map(|_| 0.25);
        Checkpoint::from_model(&model, run, u64::MAX - 3, Some(adam))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let (model, adam) = back.into_model().unwrap();
        assert_eq!(model.params, c.params);
        assert_eq!(adam.unwrap().step, (7u64 << 32) + 5);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 15, 16, 40, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
            match Checkpoint::<f32>::from_bytes(&bytes[..cut]) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_corruption() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Checkpoint { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
        let mut good = sample().to_bytes();
        good.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&good).is_err());
    }

    #[test]
    fn dtype_and_config_mismatch() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Checkpoint { .. })));
        let mut c = sample();
        c.run.model = ModelConfig { msg_ffn_enabled: false, ..c.run.model };
        assert!(matches!(c.into_model(), Err(Error::Config(_))));
    }

    #[test]
    fn without_optimizer_state() {
        let mut c = sample();
        c.adam = None;
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }
}
