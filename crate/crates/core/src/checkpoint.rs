//! Chunked binary model files.
//!
//! ```text
//! magic    8 bytes   "DYBNNMDL"
//! version  u32 LE    FORMAT_VERSION
//! chunk*   tag [4]u8, name_len u16 LE, name (UTF-8), payload_len u64 LE, payload
//! ```
//!
//! Chunks, in order: `CONF` (canonical TOML of the model config), `MODE`
//! (`binary` or `real`), one `PARM` per parameter or buffer, and a terminating
//! `END `. A `PARM` payload is `dtype u8` (1 = f64 LE), `rank u8`,
//! `rank x u32 LE` dims, then the values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::binconv::WeightMode;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::network::{build_model, Model};

pub const MAGIC: &[u8; 8] = b"DYBNNMDL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn push_chunk(out: &mut Vec<u8>, tag: &[u8; 4], name: &str, payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

pub fn encode_model(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_chunk(&mut out, b"CONF", "config", m.config().to_toml().as_bytes());
    push_chunk(&mut out, b"MODE", "weight_mode", m.weight_mode().as_str().as_bytes());
    for (name, _, p) in m.named_params() {
        let mut payload = Vec::with_capacity(2 + 4 * p.dims.len() + 8 * p.len());
        payload.push(DTYPE_F64);
        payload.push(p.dims.len() as u8);
        for &d in &p.dims {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        push_chunk(&mut out, b"PARM", &name, &payload);
    }
    push_chunk(&mut out, b"END ", "", &[]);
    out
}

pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, chunk: &str, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format {
                chunk: chunk.to_string(),
                message: format!(
                    "truncated {what}: need {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

struct Chunk<'a> {
    tag: [u8; 4],
    name: String,
    payload: &'a [u8],
}

fn read_chunk<'a>(r: &mut Reader<'a>, index: usize) -> Result<Chunk<'a>> {
    let header = format!("#{index}");
    let tag: [u8; 4] = r.take(4, &header, "chunk tag")?.try_into().unwrap();
    let label = format!("{}{header}", String::from_utf8_lossy(&tag).trim_end());
    let name_len = u16::from_le_bytes(r.take(2, &label, "name length")?.try_into().unwrap());
    let name = r.take(name_len as usize, &label, "chunk name")?;
    let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Format {
        chunk: label.clone(),
        message: "chunk name is not UTF-8".into(),
    })?;
    let label = if name.is_empty() { label } else { name.clone() };
    let len = u64::from_le_bytes(r.take(8, &label, "payload length")?.try_into().unwrap());
    let payload = r.take(len as usize, &label, "payload")?;
    Ok(Chunk { tag, name, payload })
}

fn parse_param(chunk: &Chunk<'_>) -> Result<(Vec<usize>, Vec<f64>)> {
    let err = |m: String| Error::Format {
        chunk: chunk.name.clone(),
        message: m,
    };
    let mut r = Reader {
        bytes: chunk.payload,
        pos: 0,
    };
    let head = r.take(2, &chunk.name, "tensor header")?;
    if head[0] != DTYPE_F64 {
        return Err(err(format!("unknown dtype {}", head[0])));
    }
    let rank = head[1] as usize;
    let dims: Vec<usize> = r
        .take(4 * rank, &chunk.name, "shape")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = r.take(8 * count, &chunk.name, "values")?;
    if r.pos != chunk.payload.len() {
        return Err(err("trailing bytes after values".into()));
    }
    let data = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "header", "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            chunk: "header".into(),
            message: "not a model file (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "header", "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let mut config: Option<ModelConfig> = None;
    let mut mode = WeightMode::Binary;
    let mut params: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let mut ended = false;
    let mut index = 0;
    while r.pos < bytes.len() {
        let chunk = read_chunk(&mut r, index)?;
        index += 1;
        match &chunk.tag {
            b"CONF" => {
                let text = std::str::from_utf8(chunk.payload).map_err(|_| Error::Format {
                    chunk: chunk.name.clone(),
                    message: "config is not UTF-8".into(),
                })?;
                config = Some(ModelConfig::from_toml(text).map_err(|e| Error::Format {
                    chunk: chunk.name.clone(),
                    message: e.to_string(),
                })?);
            }
            b"MODE" => {
                let s = std::str::from_utf8(chunk.payload).unwrap_or("");
                mode = WeightMode::parse(s).ok_or_else(|| Error::Format {
                    chunk: chunk.name.clone(),
                    message: format!("unknown weight mode {s:?}"),
                })?;
            }
            b"PARM" => {
                let parsed = parse_param(&chunk)?;
                params.insert(chunk.name.clone(), parsed);
            }
            b"END " => {
                ended = true;
                break;
            }
            other => {
                return Err(Error::Format {
                    chunk: chunk.name.clone(),
                    message: format!("unknown chunk tag {:?}", String::from_utf8_lossy(other)),
                })
            }
        }
    }
    if !ended {
        return Err(Error::Format {
            chunk: "END".into(),
            message: "file ends without a terminating chunk".into(),
        });
    }
    let config = config.ok_or_else(|| Error::Format {
        chunk: "config".into(),
        message: "missing config chunk".into(),
    })?;
    let mut model = build_model(&config).map_err(|e| Error::Format {
        chunk: "config".into(),
        message: e.to_string(),
    })?;
    let mut failure: Option<Error> = None;
    model.visit_params(&mut |name, _, p| {
        if failure.is_some() {
            return;
        }
        match params.remove(name) {
            Some((dims, data)) if dims == p.dims => p.data = data,
            Some((dims, _)) => {
                failure = Some(Error::Format {
                    chunk: name.to_string(),
                    message: format!("shape {dims:?} does not match the config's {:?}", p.dims),
                })
            }
            None => {
                failure = Some(Error::Format {
                    chunk: name.to_string(),
                    message: "parameter chunk missing".into(),
                })
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Format {
            chunk: extra.clone(),
            message: "parameter not present in the config".into(),
        });
    }
    model.set_weight_mode(mode);
    model.refresh_packed();
    Ok(model)
}
