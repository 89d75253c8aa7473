//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!   8-byte magic `SEQATTR1`, u32 version, u32 tensor count, then per tensor:
//!   u16 name length, UTF-8 name, u8 dtype tag (0 = f64), u8 rank,
//!   rank x u32 dims, raw little-endian f64 element data.
//!
//! Optimizer state is stored under the `adam/` name prefix
//! (`adam/m/<param>`, `adam/v/<param>`, `adam/step`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::error::{NumError, Result};
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEQATTR1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_tensors<P: AsRef<Path>>(path: P, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| NumError::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let len = u16::try_from(name_bytes.len())
            .map_err(|_| NumError::Checkpoint(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[DTYPE_F64])?;
        let rank = u8::try_from(tensor.rank())
            .map_err(|_| NumError::Checkpoint(format!("rank too large for {name}")))?;
        w.write_all(&[rank])?;
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| NumError::Checkpoint(format!("dim too large for {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| NumError::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)?;
        if tag[0] != DTYPE_F64 {
            return Err(NumError::Checkpoint(format!(
                "unknown dtype tag {} for {name}",
                tag[0]
            )));
        }
        let rank = tag[1] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| NumError::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Parameter tensors plus optional optimizer state and extra named tensors
/// (normalization statistics, config fingerprints), ready to write.
pub fn training_entries(
    store: &ParamStore,
    adam: Option<&AdamState>,
    extra: &[(String, Tensor)],
) -> Vec<(String, Tensor)> {
    let mut entries: Vec<(String, Tensor)> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect();
    if let Some(adam) = adam {
        for id in store.ids() {
            let (m, v) = adam.moments(id);
            let shape = store.value(id).shape().to_vec();
            entries.push((
                format!("adam/m/{}", store.name(id)),
                Tensor::new(shape.clone(), m.to_vec()).expect("moment shape matches parameter"),
            ));
            entries.push((
                format!("adam/v/{}", store.name(id)),
                Tensor::new(shape, v.to_vec()).expect("moment shape matches parameter"),
            ));
        }
        entries.push((
            "adam/step".to_string(),
            Tensor::scalar(adam.step_count() as f64),
        ));
    }
    entries.extend(extra.iter().cloned());
    entries
}

/// Restores parameter values (and optimizer state when present) from the
/// named tensors of a checkpoint. Returns the leftover non-parameter entries.
pub fn restore_training_state(
    entries: Vec<(String, Tensor)>,
    store: &mut ParamStore,
    adam: Option<&mut AdamState>,
) -> Result<Vec<(String, Tensor)>> {
    let mut rest = Vec::new();
    let mut adam_m: Vec<(String, Tensor)> = Vec::new();
    let mut adam_v: Vec<(String, Tensor)> = Vec::new();
    let mut adam_step: Option<u64> = None;
    let mut loaded = 0usize;
    for (name, tensor) in entries {
        if let Some(suffix) = name.strip_prefix("adam/m/") {
            adam_m.push((suffix.to_string(), tensor));
        } else if let Some(suffix) = name.strip_prefix("adam/v/") {
            adam_v.push((suffix.to_string(), tensor));
        } else if name == "adam/step" {
            adam_step = Some(tensor.item()? as u64);
        } else if let Some(id) = store.id(&name) {
            store.load_value(id, tensor)?;
            loaded += 1;
        } else {
            rest.push((name, tensor));
        }
    }
    if loaded != store.len() {
        return Err(NumError::Checkpoint(format!(
            "checkpoint restored {loaded} of {} parameters",
            store.len()
        )));
    }
    if let Some(adam) = adam {
        for (name, m) in adam_m {
            let id = store.id(&name).ok_or_else(|| {
                NumError::Checkpoint(format!("adam moment for unknown parameter {name}"))
            })?;
            let v = adam_v
                .iter()
                .find(|(n, _)| n == &name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| {
                    NumError::Checkpoint(format!("missing second moment for {name}"))
                })?;
            adam.load_moments(id, m.into_data(), v)?;
        }
        if let Some(step) = adam_step {
            adam.set_step(step);
        }
    }
    Ok(rest)
}
