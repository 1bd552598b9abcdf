//! Parameter checkpoints.
//!
//! Layout: `SFCK`, `version: u32 LE`, `header_len: u64 LE`, a JSON header
//! (`kind`, `config_hash`, parameter names and shapes, free-form `extra`),
//! then every parameter's values as `f64` LE in header order. Loading
//! checks the kind and configuration hash before touching any values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};

const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config_hash: String,
    params: Vec<ParamHeader>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_raw<'a>(
    path: &Path,
    kind: &str,
    config_hash: &str,
    params: Vec<(String, &'a Array2<f64>)>,
    extra: serde_json::Value,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        params: params
            .iter()
            .map(|(name, v)| ParamHeader {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
        extra,
    };
    let head = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&head).map_err(io)?;
    for (_, v) in params {
        for x in v.iter() {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

type RawParams = Vec<(String, Array2<f64>)>;

fn read_raw(path: &Path) -> Result<(Header, RawParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut fixed = [0u8; 16];
    r.read_exact(&mut fixed).map_err(|_| ck_err(path, "truncated header"))?;
    if &fixed[..4] != MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ck_err(path, format!("unsupported version {version}")));
    }
    let head_len = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes")) as usize;
    let mut head = vec![0u8; head_len];
    r.read_exact(&mut head).map_err(|_| ck_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&head).map_err(|e| ck_err(path, e.to_string()))?;
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let mut bytes = vec![0u8; p.rows * p.cols * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| ck_err(path, format!("truncated data for {}", p.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((
            p.name.clone(),
            Array2::from_shape_vec((p.rows, p.cols), data).expect("sized"),
        ));
    }
    Ok((header, params))
}

pub fn save(path: &Path, kind: &str, config_hash: &str, store: &ParamStore) -> Result<()> {
    write_raw(
        path,
        kind,
        config_hash,
        store.iter().map(|(n, v)| (n.to_string(), v)).collect(),
        serde_json::Value::Null,
    )
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match exactly.
pub fn load_into(path: &Path, kind: &str, config_hash: &str, store: &mut ParamStore) -> Result<()> {
    let (header, params) = read_raw(path)?;
    if header.kind != kind {
        return Err(ck_err(path, format!("holds `{}`, expected `{kind}`", header.kind)));
    }
    if header.config_hash != config_hash {
        return Err(ck_err(
            path,
            format!(
                "config hash {} does not match current configuration {config_hash}",
                header.config_hash
            ),
        ));
    }
    if params.len() != store.len() {
        return Err(ck_err(
            path,
            format!("{} parameters, model has {}", params.len(), store.len()),
        ));
    }
    for (name, value) in params {
        let id = store
            .get(&name)
            .ok_or_else(|| ck_err(path, format!("unknown parameter {name}")))?;
        if store.value(id).dim() != value.dim() {
            return Err(ck_err(path, format!("shape mismatch for {name}")));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}

/// Adam moments plus the iteration counter, for resuming a stage.
pub fn save_optimizer(path: &Path, config_hash: &str, store: &ParamStore, adam: &Adam, iteration: usize) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let params = names
        .iter()
        .zip(&adam.m)
        .map(|(n, m)| (format!("m/{n}"), m))
        .chain(names.iter().zip(&adam.v).map(|(n, v)| (format!("v/{n}"), v)));
    write_raw(
        path,
        "adam",
        config_hash,
        params.collect(),
        serde_json::json!({ "step": adam.step, "iteration": iteration }),
    )
}

/// Restores Adam moments; returns the saved iteration.
pub fn load_optimizer(path: &Path, config_hash: &str, store: &ParamStore, adam: &mut Adam) -> Result<usize> {
    let (header, params) = read_raw(path)?;
    if header.kind != "adam" || header.config_hash != config_hash {
        return Err(ck_err(path, "optimizer state does not belong to this model"));
    }
    let n = store.len();
    if params.len() != 2 * n {
        return Err(ck_err(path, "optimizer state size mismatch"));
    }
    for (i, (_, m)) in params.iter().take(n).enumerate() {
        adam.m[i] = m.clone();
    }
    for (i, (_, v)) in params.iter().skip(n).enumerate() {
        adam.v[i] = v.clone();
    }
    adam.step = header.extra["step"].as_u64().unwrap_or(0);
    Ok(header.extra["iteration"].as_u64().unwrap_or(0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", array![[1.0, 2.5], [std::f64::consts::PI, -0.0]]);
        s.add("b", array![[1e-300]]);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let s = store();
        save(&p, "toy", "abc", &s).unwrap();
        let mut t = store();
        *t.value_mut(t.get("a").unwrap()) = array![[0.0, 0.0], [0.0, 0.0]];
        load_into(&p, "toy", "abc", &mut t).unwrap();
        assert!(s.same_values(&t));
    }

    #[test]
    fn rejects_wrong_kind_hash_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save(&p, "toy", "abc", &store()).unwrap();
        let mut t = store();
        assert!(load_into(&p, "other", "abc", &mut t).is_err());
        let err = load_into(&p, "toy", "zzz", &mut t).unwrap_err().to_string();
        assert!(err.contains("config hash"), "{err}");
        std::fs::write(&p, b"nonsense").unwrap();
        assert!(load_into(&p, "toy", "abc", &mut t).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.adam");
        let mut s = store();
        let mut adam = Adam::new(&s, 0.1, 0.9, 0.98);
        let grads: Vec<_> = s.iter().map(|(_, v)| Some(v.clone())).collect();
        adam.update(&mut s, &grads);
        save_optimizer(&p, "h", &s, &adam, 7).unwrap();
        let mut fresh = Adam::new(&s, 0.1, 0.9, 0.98);
        assert_eq!(load_optimizer(&p, "h", &s, &mut fresh).unwrap(), 7);
        assert_eq!(fresh.step, 1);
        assert_eq!(fresh.m, adam.m);
        assert_eq!(fresh.v, adam.v);
    }
}
