//! Checkpoint container: magic "AGWC", version, a model-kind tag, a flat
//! key=value config block, and a named tensor table where each entry is a
//! raw tensor record.
//!
//! Writes are atomic: the file is written to a sibling temp path and
//! renamed into place.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::kvconfig::KvBlock;
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AGWC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint file holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Discriminator,
    TrainState,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Generator => 1,
            ModelKind::Discriminator => 2,
            ModelKind::TrainState => 3,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Generator),
            2 => Ok(ModelKind::Discriminator),
            3 => Ok(ModelKind::TrainState),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown model kind tag {other}"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub kind: ModelKind,
    pub config: KvBlock,
    pub tensors: ParamSet<T>,
}

pub fn save<T: Scalar>(
    path: &Path,
    kind: ModelKind,
    config: &KvBlock,
    tensors: &ParamSet<T>,
) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(CoreError::InvalidArgument("empty checkpoint path".into()));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(&CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&kind.tag().to_le_bytes())?;
        let cfg = config.render();
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(cfg.as_bytes())?;
        f.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in tensors.iter() {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            tensor.write_raw(&mut f)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if path.as_os_str().is_empty() {
        return Err(CoreError::InvalidArgument("empty checkpoint path".into()));
    }
    let display = path.display().to_string();
    let err = |detail: String| CoreError::Format {
        path: display.clone(),
        detail,
    };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        CoreError::Data(format!("cannot open checkpoint {display}: {e}"))
    })?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(err(format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let kind = ModelKind::from_tag(read_u32(&mut f)?)?;
    let cfg_len = read_u32(&mut f)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_bytes)?;
    let config = KvBlock::parse(
        std::str::from_utf8(&cfg_bytes).map_err(|_| err("config block is not UTF-8".into()))?,
    )?;
    let count = read_u32(&mut f)? as usize;
    let mut tensors = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| err("tensor name is not UTF-8".into()))?;
        let tensor = Tensor::read_raw(&mut f, &display)?;
        tensors.insert(name, tensor)?;
    }
    Ok(Checkpoint {
        kind,
        config,
        tensors,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
