//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DSMOECKP"
//! version      u32
//! kind         u8       0 = student, 1 = teacher
//! fingerprint  str      schema fingerprint (hex)
//! schema       str      schema JSON
//! config       str      model config JSON
//! count        u32      number of tensors
//! per tensor:
//!   name       str
//!   trainable  u8
//!   ndim       u32
//!   dims       ndim × u64
//!   values     prod(dims) × f64
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DsmoeModel, ModelConfig, TeacherModel};
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSMOECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Student,
    Teacher,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Student => 0,
            CheckpointKind::Teacher => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckpointContents {
    pub kind: CheckpointKind,
    pub fingerprint: String,
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub tensors: ParamStore,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn write_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    schema: &FeatureSchema,
    config: &ModelConfig,
    store: &ParamStore,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(kind.tag());
    put_str(&mut buf, &schema.fingerprint());
    put_str(&mut buf, &serde_json::to_string(schema)?);
    put_str(&mut buf, &serde_json::to_string(config)?);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_str(&mut buf, &p.name);
        buf.push(p.requires_grad as u8);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointContents> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let kind = match c.u8()? {
        0 => CheckpointKind::Student,
        1 => CheckpointKind::Teacher,
        t => return Err(Error::Checkpoint(format!("unknown model kind {t}"))),
    };
    let fingerprint = c.str()?.to_owned();
    let schema: FeatureSchema = serde_json::from_str(c.str()?)?;
    let config: ModelConfig = serde_json::from_str(c.str()?)?;
    if schema.fingerprint() != fingerprint {
        return Err(Error::Checkpoint("stored schema does not match its fingerprint".into()));
    }
    let count = c.u32()?;
    let mut tensors = ParamStore::new();
    for _ in 0..count {
        let name = c.str()?.to_owned();
        let trainable = c.u8()? != 0;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t, trainable);
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(CheckpointContents {
        kind,
        fingerprint,
        schema,
        config,
        tensors,
    })
}

fn restore(store: &mut ParamStore, contents: &CheckpointContents) -> Result<()> {
    if contents.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            contents.tensors.len(),
            store.len()
        )));
    }
    store.load_values_from(&contents.tensors)
}

fn expect_kind(contents: &CheckpointContents, kind: CheckpointKind) -> Result<()> {
    if contents.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            contents.kind
        )));
    }
    Ok(())
}

impl DsmoeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CheckpointKind::Student, &self.schema, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = read_checkpoint(path)?;
        expect_kind(&contents, CheckpointKind::Student)?;
        let mut model = DsmoeModel::new(&contents.schema, &contents.config, 0)?;
        restore(&mut model.store, &contents)?;
        Ok(model)
    }

    /// Loads and refuses a checkpoint whose schema differs from `schema`.
    pub fn load_for(path: &Path, schema: &FeatureSchema) -> Result<Self> {
        let model = Self::load(path)?;
        check_fingerprint(&model.schema, schema)?;
        Ok(model)
    }
}

impl TeacherModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, CheckpointKind::Teacher, &self.schema, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = read_checkpoint(path)?;
        expect_kind(&contents, CheckpointKind::Teacher)?;
        let mut model = TeacherModel::new(&contents.schema, &contents.config, 0)?;
        restore(&mut model.store, &contents)?;
        Ok(model)
    }
}

pub fn check_fingerprint(stored: &FeatureSchema, data: &FeatureSchema) -> Result<()> {
    let (a, b) = (stored.fingerprint(), data.fingerprint());
    if a != b {
        return Err(Error::Fingerprint { checkpoint: a, data: b });
    }
    Ok(())
}
