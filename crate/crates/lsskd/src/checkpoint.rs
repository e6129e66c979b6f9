//! `LSSK` parameter container: magic, format version, 32-byte config
//! digest, completed epoch, then named records (name length, name, dtype
//! tag, rank, dimensions, little-endian elements). Optimizer state travels
//! in the same container under the `optim.` prefix.

use std::path::Path;

use lsskd_core::network::{InferenceNetwork, BackboneConfig, StudentNetwork};
use lsskd_core::train::Sgd;
use lsskd_core::{DType, Real, Tensor};

use crate::bytes::{put_u32, Reader};
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"LSSK";
pub const VERSION: u32 = 1;
pub const BRANCH_PREFIX: &str = "branch";
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl Record {
    pub fn from_values<T: Real>(name: impl Into<String>, dims: &[usize], values: &[T]) -> Self {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for &v in values {
            v.write_le(&mut data);
        }
        Record { name: name.into(), dtype: T::DTYPE, dims: dims.to_vec(), data }
    }

    pub fn values<T: Real>(&self) -> Result<Vec<T>, String> {
        if self.dtype != T::DTYPE {
            return Err(format!("record {} holds {:?}, expected {:?}", self.name, self.dtype, T::DTYPE));
        }
        Ok(self.data.chunks_exact(self.dtype.size()).map(T::read_le).collect())
    }

    pub fn tensor<T: Real>(&self) -> Result<Tensor<T>, String> {
        Tensor::new(&self.dims, self.values()?).map_err(|e| format!("record {}: {e}", self.name))
    }

    fn is_branch(&self) -> bool {
        self.name.starts_with(BRANCH_PREFIX)
    }

    fn is_optim(&self) -> bool {
        self.name.starts_with("optim.")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub epoch: u32,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.digest);
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            put_u32(&mut out, r.name.len() as u32);
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                put_u32(&mut out, d as u32);
            }
            out.extend_from_slice(&r.data);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| "not a checkpoint".to_string())? != MAGIC {
            return Err("bad magic; not a checkpoint".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().map_err(|_| "truncated digest")?;
        let epoch = r.u32()?;
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "record name is not UTF-8")?;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| format!("record {name}: unknown dtype tag"))?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = dims.iter().product();
            let data = r.take(numel * dtype.size())?.to_vec();
            records.push(Record { name, dtype, dims, data });
        }
        r.finish()?;
        Ok(Checkpoint { digest, epoch, records })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| CliError::format(path, e))
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.encode())
    }

    pub fn is_stripped(&self) -> bool {
        !self.records.iter().any(Record::is_branch)
    }

    /// The inference-only container: branch and optimizer records removed.
    pub fn strip(&self) -> Result<Checkpoint, String> {
        if self.is_stripped() {
            return Err("checkpoint is already stripped".into());
        }
        let records = self.records.iter().filter(|r| !r.is_branch() && !r.is_optim()).cloned().collect();
        Ok(Checkpoint { digest: self.digest, epoch: self.epoch, records })
    }

    /// Model records (everything but optimizer state).
    pub fn params(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| !r.is_optim())
    }

    /// Trainable-parameter element count of the model records.
    pub fn parameter_count(&self) -> usize {
        self.params()
            .filter(|r| !r.name.ends_with(".running_mean") && !r.name.ends_with(".running_var"))
            .map(|r| r.dims.iter().product::<usize>())
            .sum()
    }

    pub fn from_training<T: Real>(digest: [u8; 32], epoch: u32, net: &StudentNetwork<T>, opt: &Sgd<T>) -> Self {
        let mut records: Vec<Record> =
            net.params().iter().map(|p| Record::from_values(p.name.clone(), p.value.shape(), p.value.data())).collect();
        for (p, v) in net.params().iter().zip(opt.velocities()) {
            if !v.is_empty() {
                records.push(Record::from_values(format!("{VELOCITY_PREFIX}{}", p.name), p.value.shape(), v));
            }
        }
        Checkpoint { digest, epoch, records }
    }

    fn named_tensors<'a, T: Real>(records: impl Iterator<Item = &'a Record>) -> Result<Vec<(&'a str, Tensor<T>)>, String> {
        records.map(|r| Ok((r.name.as_str(), r.tensor()?))).collect()
    }

    /// Rebuilds the full training state; fails on a stripped container.
    pub fn restore_training<T: Real>(&self, config: BackboneConfig) -> Result<(StudentNetwork<T>, Sgd<T>), String> {
        if self.is_stripped() {
            return Err("stripped checkpoint cannot resume training".into());
        }
        let mut net = StudentNetwork::new(config).map_err(|e| e.to_string())?;
        net.params_mut().assign(Self::named_tensors(self.params())?).map_err(|e| e.to_string())?;
        let mut opt = Sgd::new(net.params());
        for r in self.records.iter().filter(|r| r.is_optim()) {
            let name = r.name.strip_prefix(VELOCITY_PREFIX).ok_or_else(|| format!("unknown optimizer record {}", r.name))?;
            let id = net.params().find(name).ok_or_else(|| format!("velocity for unknown parameter {name}"))?;
            opt.set_velocity(id, r.values()?).map_err(|e| e.to_string())?;
        }
        Ok((net, opt))
    }

    /// The inference network from either a full or a stripped container.
    pub fn inference<T: Real>(&self, config: BackboneConfig) -> Result<InferenceNetwork<T>, String> {
        let tensors = Self::named_tensors(self.params().filter(|r| !r.is_branch()))?;
        InferenceNetwork::from_records(config, tensors).map_err(|e| e.to_string())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
