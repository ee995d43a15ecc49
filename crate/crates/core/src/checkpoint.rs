//! Checkpoint archive: a safetensors file holding every parameter under its
//! dotted name, plus
//!
//! - `meta.version`: `u32[1]`, currently [`CHECKPOINT_VERSION`]
//! - `meta.config`: `u32[6]` = `n, m, k, quality_index, snr_kernel, stage`
//! - `tables.{gaussian,factorized}.{cdfs,offsets,lengths,precision}`: the
//!   coding tables in flat layout (`offsets` stored as `i64`)
//!
//! Loading validates every expected key and shape and rejects unknown keys.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use lumen_rans::{CdfTableSet, FlatTables};

use crate::model::{JointModel, Stage};
use crate::transforms::ModelConfig;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_tensor(v: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_slice(v, v.len(), &Device::Cpu)?)
}

fn put_tables(map: &mut HashMap<String, Tensor>, prefix: &str, tables: &CdfTableSet) -> Result<()> {
    let flat = tables.flatten();
    let offsets: Vec<i64> = flat.offsets.iter().map(|&o| o as i64).collect();
    map.insert(format!("{prefix}.cdfs"), u32_tensor(&flat.cdfs)?);
    map.insert(format!("{prefix}.offsets"), Tensor::from_slice(&offsets, offsets.len(), &Device::Cpu)?);
    map.insert(format!("{prefix}.lengths"), u32_tensor(&flat.lengths)?);
    map.insert(format!("{prefix}.precision"), u32_tensor(&[flat.precision])?);
    Ok(())
}

fn take(map: &mut HashMap<String, Tensor>, key: &str) -> Result<Tensor> {
    map.remove(key).ok_or_else(|| Error::Checkpoint(format!("missing key {key}")))
}

fn take_u32(map: &mut HashMap<String, Tensor>, key: &str) -> Result<Vec<u32>> {
    let t = take(map, key)?;
    if t.dtype() != DType::U32 || t.rank() != 1 {
        return Err(Error::Checkpoint(format!("{key}: expected a u32 vector, found {:?} {:?}", t.dtype(), t.dims())));
    }
    Ok(t.to_vec1()?)
}

fn take_tables(map: &mut HashMap<String, Tensor>, prefix: &str) -> Result<CdfTableSet> {
    let cdfs = take_u32(map, &format!("{prefix}.cdfs"))?;
    let lengths = take_u32(map, &format!("{prefix}.lengths"))?;
    let precision = take_u32(map, &format!("{prefix}.precision"))?;
    let key = format!("{prefix}.offsets");
    let offsets = take(map, &key)?;
    if offsets.dtype() != DType::I64 || offsets.rank() != 1 {
        return Err(Error::Checkpoint(format!("{key}: expected an i64 vector")));
    }
    let offsets = offsets
        .to_vec1::<i64>()?
        .into_iter()
        .map(|o| i32::try_from(o).map_err(|_| Error::Checkpoint(format!("{key}: offset {o} out of range"))))
        .collect::<Result<Vec<_>>>()?;
    let [precision] = precision[..] else {
        return Err(Error::Checkpoint(format!("{prefix}.precision must hold one value")));
    };
    let flat = FlatTables {
        cdfs,
        offsets,
        lengths,
        precision,
    };
    CdfTableSet::from_flat(&flat).map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))
}

/// Writes the model, rebuilding its coding tables first.
pub fn save(model: &mut JointModel, path: &Path) -> Result<()> {
    model.update_tables()?;
    let tables = model.tables().expect("tables were just built");
    let mut map = HashMap::new();
    for (name, var) in model.store.named() {
        map.insert(name.clone(), var.as_tensor().clone());
    }
    let c = model.cfg;
    map.insert("meta.version".into(), u32_tensor(&[CHECKPOINT_VERSION])?);
    map.insert(
        "meta.config".into(),
        u32_tensor(&[
            c.n as u32,
            c.m as u32,
            c.k as u32,
            c.quality_index as u32,
            c.snr_kernel as u32,
            model.stage as u32,
        ])?,
    );
    put_tables(&mut map, "tables.gaussian", &tables.gaussian)?;
    put_tables(&mut map, "tables.factorized", &tables.factorized)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    candle_core::safetensors::save(&map, path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads a checkpoint into a model with parameters of type `dtype`.
pub fn load(path: &Path, dtype: DType) -> Result<JointModel> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut map = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let version = take_u32(&mut map, "meta.version")?;
    if version != [CHECKPOINT_VERSION] {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version:?}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta = take_u32(&mut map, "meta.config")?;
    let [n, m, k, q, kernel, stage] = meta[..] else {
        return Err(Error::Checkpoint(format!("meta.config has {} entries, expected 6", meta.len())));
    };
    let quality = u8::try_from(q).map_err(|_| Error::Checkpoint(format!("quality {q} out of range")))?;
    let mut cfg = ModelConfig::new(n as usize, m as usize, k as usize, quality)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    cfg.snr_kernel = kernel as usize;
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut model = JointModel::new(cfg, 0, dtype)?;
    model.stage = Stage::from_u32(stage)?;
    for (name, var) in model.store.named() {
        let t = take(&mut map, name)?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(dtype)?)?;
    }
    let gaussian = take_tables(&mut map, "tables.gaussian")?;
    let factorized = take_tables(&mut map, "tables.factorized")?;
    model.set_tables(gaussian, factorized)?;
    if let Some(extra) = map.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected key {extra}")));
    }
    Ok(model)
}
