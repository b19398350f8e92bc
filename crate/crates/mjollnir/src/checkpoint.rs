//! Binary tensor container: a JSON header (free-form config plus a tensor
//! manifest of name/dims/dtype/byte-offset) followed by raw little-endian
//! tensor payloads. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

const MAGIC: &[u8; 8] = b"MJLNTC1\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: [usize; 4],
    pub dtype: String,
    /// Byte offset of this tensor's payload, relative to the payload start.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes a container. Tensor payloads are laid out in iteration order.
pub fn save<T: Scalar>(
    path: &Path,
    config: &serde_json::Value,
    tensors: &[(String, &Tensor4<T>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dims: t.dims(),
            dtype: T::DTYPE.to_string(),
            offset,
        });
        offset += (t.len() * T::BYTE_WIDTH) as u64;
    }
    let header = Header {
        config: config.clone(),
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.len() * T::BYTE_WIDTH);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a container written by [`save`]. Every tensor must carry the dtype
/// of `T`.
pub fn load<T: Scalar>(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor4<T>)>)> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "file too short for magic".into(),
    })?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|_| Error::Format {
        offset: 8,
        msg: "file too short for header length".into(),
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| Error::Format {
        offset: 12,
        msg: format!("truncated header (expected {header_len} bytes)"),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
        offset: 12,
        msg: format!("header is not valid JSON: {e}"),
    })?;
    let payload_start = 12 + header_len as u64;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != T::DTYPE {
            return Err(Error::Format {
                offset: payload_start + entry.offset,
                msg: format!(
                    "tensor `{}` has dtype {}, expected {}",
                    entry.name, entry.dtype, T::DTYPE
                ),
            });
        }
        let n: usize = entry.dims.iter().product();
        let start = entry.offset as usize;
        let end = start + n * T::BYTE_WIDTH;
        if end > payload.len() {
            return Err(Error::Format {
                offset: payload_start + entry.offset,
                msg: format!(
                    "tensor `{}` payload truncated: needs {} bytes, file has {}",
                    entry.name,
                    end - start,
                    payload.len().saturating_sub(start)
                ),
            });
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(T::BYTE_WIDTH)
            .map(T::read_le)
            .collect();
        tensors.push((entry.name.clone(), Tensor4::new(entry.dims, data)?));
    }
    Ok((header.config, tensors))
}

/// Reads only the header: the config value and the tensor manifest.
pub fn peek(path: &Path) -> Result<(serde_json::Value, Vec<TensorEntry>)> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        msg: "file too short for magic".into(),
    })?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|_| Error::Format {
        offset: 8,
        msg: "file too short for header length".into(),
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(|_| Error::Format {
        offset: 12,
        msg: "truncated header".into(),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
        offset: 12,
        msg: format!("header is not valid JSON: {e}"),
    })?;
    Ok((header.config, header.tensors))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Saves model parameters (and any auxiliary tensors, e.g. optimizer
/// moments) with the model config embedded in the header.
pub fn save_model<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    extra: serde_json::Value,
    aux: &[(String, &Tensor4<T>)],
) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor4<T>)> = Vec::new();
    params.visit(&mut |name, _, t| tensors.push((name, t)));
    tensors.extend(aux.iter().map(|(n, t)| (n.clone(), *t)));
    let header = serde_json::to_value(ModelHeader {
        model: params.config.clone(),
        extra,
    })?;
    save(path, &header, &tensors)
}

/// Loads model parameters saved by [`save_model`]. Returns the parameters,
/// the `extra` header value, and any auxiliary tensors that are not model
/// parameters.
#[allow(clippy::type_complexity)]
pub fn load_model<T: Scalar>(
    path: &Path,
) -> Result<(ModelParams<T>, serde_json::Value, Vec<(String, Tensor4<T>)>)> {
    let (config_value, tensors) = load::<T>(path)?;
    let header: ModelHeader = serde_json::from_value(config_value).map_err(|e| Error::Format {
        offset: 12,
        msg: format!("checkpoint header does not describe a model: {e}"),
    })?;
    let mut params = ModelParams::<T>::skeleton(&header.model)?;
    let mut by_name: std::collections::HashMap<String, Tensor4<T>> =
        tensors.into_iter().collect();
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, _, t| match by_name.remove(&name) {
        Some(loaded) if loaded.dims() == t.dims() => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: dims {:?} in file, model expects {:?}",
            loaded.dims(),
            t.dims()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(Error::Format {
            offset: 12,
            msg: format!("checkpoint does not match model: {}", missing.join("; ")),
        });
    }
    let mut leftovers: Vec<(String, Tensor4<T>)> = by_name.into_iter().collect();
    leftovers.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((params, header.extra, leftovers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use std::io::Seek;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("mjollnir_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.tc");
        let t1 = Tensor4::<f32>::from_fn([2, 3, 2, 2], |b, c, h, w| {
            (b as f32 - c as f32) * 0.3 + (h * 2 + w) as f32 * 1e-7
        });
        let t2 = Tensor4::<f32>::from_fn([1, 1, 1, 4], |_, _, _, w| (w as f32).exp());
        let cfg = serde_json::json!({"k": 1});
        save(&path, &cfg, &[("alpha".into(), &t1), ("beta".into(), &t2)]).unwrap();
        let (cfg2, tensors) = load::<f32>(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(tensors.len(), 2);
        let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(tensors[0].0, "alpha");
        assert_eq!(bits(&tensors[0].1), bits(&t1));
        assert_eq!(bits(&tensors[1].1), bits(&t2));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = std::env::temp_dir().join("mjollnir_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.tc");
        std::fs::write(&path, b"NOTMINE!").unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(Error::Format { offset: 0, .. })
        ));
        // valid file, then truncate payload
        let t = Tensor4::<f32>::full([1, 1, 4, 4], 1.5);
        save(&path, &serde_json::json!({}), &[("t".into(), &t)]).unwrap();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        let len = f.metadata().unwrap().len();
        f.set_len(len - 8).unwrap();
        drop(f);
        match load::<f32>(&path) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("expected truncation error, got {other:?}"),
        }
        let _ = std::fs::File::open(&path).unwrap().stream_position();
    }

    #[test]
    fn model_round_trip_and_leftovers() {
        let dir = std::env::temp_dir().join("mjollnir_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.tc");
        let cfg = ModelConfig::tiny();
        let params = init_params::<f32>(&cfg, 9).unwrap();
        let aux = Tensor4::<f32>::full([1, 1, 1, 1], 3.0);
        save_model(
            &path,
            &params,
            serde_json::json!({"epoch": 4}),
            &[("optim.t".into(), &aux)],
        )
        .unwrap();
        let (loaded, extra, leftovers) = load_model::<f32>(&path).unwrap();
        assert_eq!(extra["epoch"], 4);
        assert_eq!(loaded.to_flat_f64(), params.to_flat_f64());
        assert_eq!(leftovers.len(), 1);
        assert_eq!(leftovers[0].0, "optim.t");
    }
}
