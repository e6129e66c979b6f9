//! `LSPS` prediction-store container: magic, format version, epoch, dtype
//! tag, N/M/L/K, record count, then per sample (ascending id) the id, the
//! N final logits and the L·M·K auxiliary logits.

use std::collections::BTreeMap;
use std::path::Path;

use lsskd_core::distill::{PredictionRecord, PredictionStore, StoreLayout};
use lsskd_core::Real;

use crate::bytes::{put_u32, Reader};
use crate::checkpoint::write_atomic;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"LSPS";
pub const VERSION: u32 = 1;

/// Serializes the latest completed epoch of `store`.
pub fn encode<T: Real>(store: &PredictionStore<T>) -> Vec<u8> {
    let l = store.layout();
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, VERSION);
    put_u32(&mut out, store.current_epoch());
    out.push(T::DTYPE.tag());
    for v in [l.classes, l.transforms, l.stages, l.joint()] {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, store.current().len() as u32);
    for (&id, rec) in store.current() {
        put_u32(&mut out, id);
        for &v in rec.final_logits.iter().chain(&rec.sad) {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode<T: Real>(bytes: &[u8], layout: StoreLayout) -> Result<PredictionStore<T>, String> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| "not a prediction store".to_string())? != MAGIC {
        return Err("bad magic; not a prediction store".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported store version {version}"));
    }
    let epoch = r.u32()?;
    if r.u8()? != T::DTYPE.tag() {
        return Err("store element type differs from the training precision".into());
    }
    let header = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    let expect = [layout.classes, layout.transforms, layout.stages, layout.joint()];
    if header != expect {
        return Err(format!("store layout N/M/L/K {header:?}, expected {expect:?}"));
    }
    let count = r.u32()?;
    let size = T::DTYPE.size();
    let mut records = BTreeMap::new();
    let mut last = None;
    for _ in 0..count {
        let id = r.u32()?;
        if last.is_some_and(|prev| id <= prev) {
            return Err(format!("sample ids not strictly ascending at {id}"));
        }
        last = Some(id);
        let mut values = |n: usize| r.take(n * size).map(|b| b.chunks_exact(size).map(T::read_le).collect::<Vec<T>>());
        let final_logits = values(layout.classes)?;
        let sad = values(layout.sad_len())?;
        records.insert(id, PredictionRecord { final_logits, sad });
    }
    r.finish()?;
    PredictionStore::restore(layout, epoch, records).map_err(|e| e.to_string())
}

pub fn write<T: Real>(store: &PredictionStore<T>, path: &Path) -> CliResult<()> {
    write_atomic(path, &encode(store))
}

pub fn read<T: Real>(path: &Path, layout: StoreLayout) -> CliResult<PredictionStore<T>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, layout).map_err(|e| CliError::format(path, e))
}
