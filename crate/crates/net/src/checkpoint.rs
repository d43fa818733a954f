//! GLDF container: magic, version, length-prefixed JSON, then a tensor table.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{NetError, Result};
use crate::params::{ModelParams, NetConfig, TimeConfig};
use crate::tensor::{real, Real};

pub const MAGIC: &[u8; 4] = b"GLDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    net: NetConfig,
    time: Option<TimeConfig>,
    #[serde(default)]
    extra: Value,
}

pub fn encode<F: Real>(meta: &Value, tensors: &[TensorEntry<F>]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| t.data.len() * F::BYTES + 32).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(NetError::Checkpoint(format!("tensor {} has inconsistent shape", t.name)));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(F::DTYPE);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NetError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a container, converting stored f32/f64 data to `F`.
pub fn decode<F: Real>(buf: &[u8]) -> Result<(Value, Vec<TensorEntry<F>>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let meta: Value = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let dtype = r.take(1)?[0];
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match dtype {
            1 => r.take(numel * 4)?.chunks(4).map(|c| real(f32::read_le(c) as f64)).collect(),
            2 => r.take(numel * 8)?.chunks(8).map(|c| real(f64::read_le(c))).collect(),
            other => return Err(NetError::Checkpoint(format!("unknown dtype tag {other}"))),
        };
        tensors.push(TensorEntry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, tensors))
}

pub fn write_file<F: Real>(path: &Path, meta: &Value, tensors: &[TensorEntry<F>]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_file<F: Real>(path: &Path) -> Result<(Value, Vec<TensorEntry<F>>)> {
    decode(&fs::read(path)?)
}

pub fn params_entries<F: Real>(params: &ModelParams<F>, prefix: &str) -> Vec<TensorEntry<F>> {
    params
        .names
        .iter()
        .zip(&params.shapes)
        .zip(&params.values)
        .map(|((n, &(r, c)), v)| TensorEntry { name: format!("{prefix}{n}"), shape: vec![r, c], data: v.clone() })
        .collect()
}

/// Rebuilds parameters from entries carrying `prefix`.
pub fn params_from_entries<F: Real>(
    net: NetConfig,
    time: Option<TimeConfig>,
    entries: &[TensorEntry<F>],
    prefix: &str,
) -> Result<ModelParams<F>> {
    let tensors = entries
        .iter()
        .filter_map(|e| {
            let name = e.name.strip_prefix(prefix)?;
            Some((name.to_string(), e.shape.clone(), e.data.clone()))
        })
        .map(|(n, s, d)| match s.as_slice() {
            [r, c] => Ok((n, (*r, *c), d)),
            _ => Err(NetError::Checkpoint(format!("tensor {n} is not 2-D"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(net, time, tensors)
}

pub fn save_params<F: Real>(path: &Path, params: &ModelParams<F>, extra: Value) -> Result<()> {
    let meta = ModelMeta { net: params.config.clone(), time: params.time.clone(), extra };
    write_file(path, &serde_json::to_value(meta)?, &params_entries(params, ""))
}

pub fn load_params<F: Real>(path: &Path) -> Result<(ModelParams<F>, Value)> {
    let (meta, entries) = read_file::<F>(path)?;
    let meta: ModelMeta = serde_json::from_value(meta)?;
    let p = params_from_entries(meta.net, meta.time, &entries, "")?;
    Ok((p, meta.extra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn params() -> ModelParams<f32> {
        let mut c = NetConfig::new(4, 6);
        c.d_model = 16;
        c.n_heads = 2;
        c.d_ff = 16;
        let mut r = rand::rngs::StdRng::seed_from_u64(1);
        let base = ModelParams::<f32>::init_base(c, &mut r).unwrap();
        base.augment_time(TimeConfig::new(12), &mut r).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = params();
        let path = dir.path().join("m.gldf");
        save_params(&path, &p, serde_json::json!({"note": 1})).unwrap();
        let (q, extra) = load_params::<f32>(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(extra["note"], 1);
        // widening keeps values exactly
        let (w, _) = load_params::<f64>(&path).unwrap();
        assert_eq!(w.cast::<f32>(), p);
    }

    #[test]
    fn unknown_version_and_corruption_are_rejected() {
        let p = params();
        let mut bytes = encode(&serde_json::json!({}), &params_entries(&p, "")).unwrap();
        assert!(decode::<f32>(&bytes).is_ok());
        bytes[4] = 9;
        assert!(matches!(decode::<f32>(&bytes), Err(NetError::Checkpoint(m)) if m.contains("version")));
        let good = encode(&serde_json::json!({}), &params_entries(&p, "")).unwrap();
        assert!(decode::<f32>(&good[..good.len() - 3]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
