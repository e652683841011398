//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "CEMBCKPT" | u32 version
//! u32 len | config JSON
//! u32 count | count × (name, u8 frozen, tensor)
//! u8 has_rng | [32-byte seed | u64 stream | u128 word position]
//! u8 has_adam | [f64 lr, beta1, beta2, eps | u64 step | u32 count | count × (name, tensor m, tensor v)]
//!
//! name   = u32 len | UTF-8 bytes
//! tensor = u8 dtype | u32 ndim | ndim × u32 dim | payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{DType, Float, Tensor};
use crate::train::{AdamConfig, AdamState, Moments};

pub const MAGIC: &[u8; 8] = b"CEMBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Resolved configuration; the model configuration sits under `"model"`.
    pub config: serde_json::Value,
    pub params: ParamStore<T>,
    pub rng: Option<Rng>,
    pub adam: Option<AdamState<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn tensor<T: Float>(&mut self, t: &Tensor<T>) {
        self.u8(T::DTYPE.tag());
        self.u32(t.ndim());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }
    fn tensor<T: Float>(&mut self) -> std::result::Result<Tensor<T>, String> {
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
        if dtype != T::DTYPE {
            return Err(format!("tensor dtype {dtype}, expected {}", T::DTYPE));
        }
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * dtype.size_of())?;
        let data = raw.chunks(dtype.size_of()).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

impl<T: Float> Checkpoint<T> {
    pub fn from_bundle(bundle: &ModelBundle<T>, mut config: serde_json::Value) -> Self {
        if !config.is_object() {
            config = serde_json::json!({});
        }
        config["model"] = serde_json::to_value(bundle.config).expect("model config serializes");
        Self {
            config,
            params: bundle.params.clone(),
            rng: None,
            adam: None,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .config
            .get("model")
            .ok_or_else(|| Error::Config("checkpoint config has no `model` section".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("checkpoint model config: {e}")))
    }

    /// Rebuilds the bundle. With `requested`, every model field must agree
    /// with the checkpoint; the first disagreeing field is reported.
    pub fn to_bundle(&self, requested: Option<&ModelConfig>) -> Result<ModelBundle<T>> {
        let config = self.model_config()?;
        if let Some(req) = requested {
            let have = serde_json::to_value(config).expect("serializes");
            let want = serde_json::to_value(req).expect("serializes");
            if let Some((field, a, b)) = first_difference("model", &have, &want) {
                return Err(Error::CheckpointMismatch {
                    field,
                    checkpoint: a,
                    requested: b,
                });
            }
        }
        config.validate()?;
        Ok(ModelBundle {
            config,
            params: self.params.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.bytes(serde_json::to_string(&self.config).expect("json serializes").as_bytes());
        w.u32(self.params.len());
        for p in self.params.iter() {
            w.bytes(p.name.as_bytes());
            w.u8(u8::from(p.frozen));
            w.tensor(&p.value);
        }
        match &self.rng {
            None => w.u8(0),
            Some(r) => {
                w.u8(1);
                w.0.extend_from_slice(&r.get_seed());
                w.u64(r.get_stream());
                w.0.extend_from_slice(&r.get_word_pos().to_le_bytes());
            }
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    w.f64(v);
                }
                w.u64(a.step);
                w.u32(a.moments.len());
                for (name, m) in &a.moments {
                    w.bytes(name.as_bytes());
                    w.tensor(&m.m);
                    w.tensor(&m.v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let n = r.u32()?;
        let config = serde_json::from_slice(r.take(n)?).map_err(|e| format!("config: {e}"))?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(format!("bad frozen flag {b}")),
            };
            let t = r.tensor()?;
            params.insert(name.clone(), t).map_err(|e| e.to_string())?;
            params.get_mut(&name).expect("just inserted").frozen = frozen;
        }
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let mut rng = <Rng as rand::SeedableRng>::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(pos);
                Some(rng)
            }
            b => return Err(format!("bad rng flag {b}")),
        };
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let step = r.u64()?;
                let mut moments = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let name = r.string()?;
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    moments.insert(name, Moments { m, v });
                }
                Some(AdamState { config, step, moments })
            }
            b => return Err(format!("bad optimizer flag {b}")),
        };
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Self {
            config,
            params,
            rng,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

/// First leaf where two JSON values differ, as `(dotted path, left, right)`.
pub fn first_difference(path: &str, a: &serde_json::Value, b: &serde_json::Value) -> Option<(String, String, String)> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = format!("{path}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => first_difference(&sub, u, v),
                    (u, v) => Some((sub, fmt_opt(u), fmt_opt(v))),
                }
            })
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

fn fmt_opt(v: Option<&serde_json::Value>) -> String {
    v.map_or_else(|| "nothing".into(), |v| v.to_string())
}
