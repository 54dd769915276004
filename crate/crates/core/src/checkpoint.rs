//! Binary checkpoints: magic `LAVT`, format version, the model config as
//! JSON, then one tensor record per parameter in store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::LaViTModel;
use crate::params::ParameterStore;
use crate::tensor::{read_u32, Tensor};

pub const MAGIC: &[u8; 4] = b"LAVT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_CONFIG_BYTES: u32 = 1 << 20;

pub fn write_checkpoint<W: Write>(model: &LaViTModel, w: &mut W) -> Result<()> {
    let json = model.config.to_json();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        t.write_record(name, w)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<LaViTModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short to hold the LAVT header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"LAVT\"; not a checkpoint file")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let len = read_u32(r)?;
    if len > MAX_CONFIG_BYTES {
        return Err(Error::Checkpoint(format!("config block of {len} bytes is implausibly large")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_json(&text)?;
    let count = read_u32(r)?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let (name, t): (String, Tensor) = Tensor::read_record(r)?;
        store.insert(name, t)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor record".into()));
    }
    LaViTModel::from_parts(&config, store)
}

pub fn save(model: &LaViTModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LaViTModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(&mut BufReader::new(file))
}
