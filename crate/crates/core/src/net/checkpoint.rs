//! Versioned binary checkpoints: magic bytes, a key-value text header,
//! then little-endian 32-bit parameter arrays. Save/load round-trips are
//! bit-exact.

use super::{batch::shapes_of, FieldNetwork, NetConfig};
use crate::geom::{NormalizationTransform, Vec3};
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"PFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Everything a checkpoint stores: the network, training progress, the
/// normalization used at fit time, and optional optimizer moments.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: NetConfig,
    pub params: Vec<f32>,
    pub step: u64,
    pub master_seed: u64,
    pub transform: NormalizationTransform,
    pub adam_m: Option<Vec<f32>>,
    pub adam_v: Option<Vec<f32>>,
}

impl CheckpointData {
    pub fn network(&self) -> FieldNetwork {
        let shapes = shapes_of(&self.config);
        let mut weights = Vec::with_capacity(shapes.len());
        let mut biases = Vec::with_capacity(shapes.len());
        let mut ofs = 0;
        for (rows, cols) in shapes {
            let w = Array2::from_shape_vec(
                (rows, cols),
                self.params[ofs..ofs + rows * cols].to_vec(),
            )
            .expect("shape");
            ofs += rows * cols;
            let b = Array1::from_vec(self.params[ofs..ofs + rows].to_vec());
            ofs += rows;
            weights.push(w);
            biases.push(b);
        }
        FieldNetwork { config: self.config.clone(), weights, biases }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<(), CheckpointError> {
    let count = data.config.param_count();
    assert_eq!(data.params.len(), count, "parameter length mismatch");
    let has_opt = data.adam_m.is_some() && data.adam_v.is_some();

    let mut header = String::new();
    let mut kv = |k: &str, v: String| {
        header.push_str(k);
        header.push('=');
        header.push_str(&v);
        header.push('\n');
    };
    kv("net.hidden_width", data.config.hidden_width.to_string());
    kv("net.hidden_layers", data.config.hidden_layers.to_string());
    kv("net.skip_at", data.config.skip_at.to_string());
    kv("net.beta", data.config.beta.to_string());
    kv("net.radius", data.config.radius.to_string());
    kv("net.inside_positive", (data.config.sign_inside_positive as u8).to_string());
    kv("step", data.step.to_string());
    kv("master_seed", data.master_seed.to_string());
    kv(
        "transform.center",
        format!("{} {} {}", data.transform.center.x, data.transform.center.y, data.transform.center.z),
    );
    kv("transform.scale", data.transform.scale.to_string());
    kv("param_count", count.to_string());
    kv("has_optimizer", (has_opt as u8).to_string());

    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(|e| io_err(path, e))?;
    w.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;

    let mut write_arr = |arr: &[f32]| -> Result<(), CheckpointError> {
        let mut buf = Vec::with_capacity(arr.len() * 4);
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| io_err(path, e))
    };
    write_arr(&data.params)?;
    if has_opt {
        write_arr(data.adam_m.as_ref().unwrap())?;
        write_arr(data.adam_v.as_ref().unwrap())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::Corrupt(format!("bad magic bytes {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::Corrupt("missing version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| CheckpointError::Corrupt("missing header length".into()))?;
    let hlen = u32::from_le_bytes(u32buf) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    let header = String::from_utf8(hbytes)
        .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;

    let mut map = BTreeMap::new();
    for line in header.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad header line: {line}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String, CheckpointError> {
        map.get(k).ok_or_else(|| CheckpointError::Corrupt(format!("missing header key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?.parse().map_err(|_| CheckpointError::Corrupt(format!("bad value for {k}")))
    };
    let parse_u64 = |k: &str| -> Result<u64, CheckpointError> {
        get(k)?.parse().map_err(|_| CheckpointError::Corrupt(format!("bad value for {k}")))
    };
    let parse_f64 = |k: &str| -> Result<f64, CheckpointError> {
        get(k)?.parse().map_err(|_| CheckpointError::Corrupt(format!("bad value for {k}")))
    };

    let config = NetConfig {
        hidden_width: parse_usize("net.hidden_width")?,
        hidden_layers: parse_usize("net.hidden_layers")?,
        skip_at: parse_usize("net.skip_at")?,
        beta: parse_f64("net.beta")?,
        radius: parse_f64("net.radius")?,
        sign_inside_positive: parse_u64("net.inside_positive")? != 0,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Corrupt(format!("invalid architecture: {e}")))?;
    let step = parse_u64("step")?;
    let master_seed = parse_u64("master_seed")?;
    let center_raw = get("transform.center")?.clone();
    let parts: Vec<f64> = center_raw
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CheckpointError::Corrupt("bad transform.center".into())))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(CheckpointError::Corrupt("transform.center needs 3 values".into()));
    }
    let transform = NormalizationTransform {
        center: Vec3::new(parts[0], parts[1], parts[2]),
        scale: parse_f64("transform.scale")?,
    };
    let count = parse_usize("param_count")?;
    if count != config.param_count() {
        return Err(CheckpointError::Corrupt(format!(
            "param_count {count} does not match architecture ({})",
            config.param_count()
        )));
    }
    let has_opt = parse_u64("has_optimizer")? != 0;

    let mut read_arr = |n: usize| -> Result<Vec<f32>, CheckpointError> {
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Corrupt("truncated parameter array".into()))?;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let params = read_arr(count)?;
    let (adam_m, adam_v) = if has_opt {
        (Some(read_arr(count)?), Some(read_arr(count)?))
    } else {
        (None, None)
    };

    // Trailing garbage means the writer and reader disagree.
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => return Err(CheckpointError::Corrupt("trailing bytes after arrays".into())),
        Err(e) => return Err(io_err(path, e)),
    }

    Ok(CheckpointData { config, params, step, master_seed, transform, adam_m, adam_v })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_data() -> CheckpointData {
        let config = NetConfig { hidden_width: 16, hidden_layers: 3, skip_at: 1, ..NetConfig::default() };
        let net = FieldNetwork::init_geometric(&config, 9).unwrap();
        CheckpointData {
            params: net.params_flat(),
            config,
            step: 1234,
            master_seed: 77,
            transform: NormalizationTransform { center: Vec3::new(0.1, -0.2, 0.3), scale: 1.75 },
            adam_m: None,
            adam_v: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let mut data = sample_data();
        data.adam_m = Some(vec![0.25f32; data.params.len()]);
        data.adam_v = Some(vec![1.5f32; data.params.len()]);
        save_checkpoint(&path, &data).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, data.config);
        assert_eq!(loaded.step, data.step);
        assert_eq!(loaded.master_seed, data.master_seed);
        assert_eq!(loaded.transform.center, data.transform.center);
        assert_eq!(loaded.transform.scale.to_bits(), data.transform.scale.to_bits());
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.params), bits(&data.params));
        assert_eq!(bits(loaded.adam_m.as_ref().unwrap()), bits(data.adam_m.as_ref().unwrap()));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn truncated_params_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ckpt");
        let data = sample_data();
        save_checkpoint(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn network_reconstruction_matches_params() {
        let data = sample_data();
        let net = data.network();
        assert_eq!(net.params_flat(), data.params);
    }
}
