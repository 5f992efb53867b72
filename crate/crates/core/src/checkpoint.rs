//! Binary checkpoint persistence.
//!
//! The format is deliberately small and fully validated:
//!
//! ```text
//! "SPRS"  magic
//! u32     format version (currently 1)
//! u32     record count
//! per record:
//!   u32       name length, then that many UTF-8 bytes
//!   u8        dtype: 0 = f32 tensor, 1 = bit-packed mask
//!   u32       rank, then rank × u32 dims
//!   payload   little-endian f32s, or ceil(n/8) bytes of bits
//!             (first element in the lowest bit of the first byte)
//! u32     CRC-32 of everything above
//! ```
//!
//! All integers are little-endian. Record names are unique; loading rejects
//! bad magic, unknown versions or dtypes, truncation, trailing garbage, and
//! checksum mismatches. A round trip is bit-exact, including signed zeros
//! and subnormals.

use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::models::{MethodState, Model};
use crate::tensor::Tensor;
use crate::train::InitSnapshot;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPRS";
pub const CHECKPOINT_VERSION: u32 = 1;

// ---- CRC-32 (reflected, polynomial 0xEDB88320) -------------------------------

const fn crc_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc_table();

/// CRC-32 as used by zip/png (init all-ones, reflected, final complement).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---- records ------------------------------------------------------------------

/// One named array in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Tensor(Tensor<f32>),
    /// Keep mask plus the logical dims of the weight it belongs to.
    Mask { dims: Vec<usize>, mask: SparsityMask },
}

impl Record {
    pub fn dims(&self) -> &[usize] {
        match self {
            Record::Tensor(t) => t.dims(),
            Record::Mask { dims, .. } => dims,
        }
    }
}

/// An ordered, uniquely named collection of tensors and masks.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    records: Vec<(String, Record)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[(String, Record)] {
        &self.records
    }

    fn insert(&mut self, name: &str, record: Record) -> Result<()> {
        if self.records.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint {
                path: PathBuf::from("<memory>"),
                reason: format!("duplicate record name `{name}`"),
            });
        }
        self.records.push((name.to_string(), record));
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: &Tensor<f32>) -> Result<()> {
        self.insert(name, Record::Tensor(t.clone()))
    }

    /// Store a mask under the dims of the weight it covers; the dims must
    /// multiply out to the mask length.
    pub fn insert_mask(&mut self, name: &str, dims: &[usize], mask: &SparsityMask) -> Result<()> {
        let numel: usize = dims.iter().product();
        if numel != mask.len() {
            return Err(Error::Checkpoint {
                path: PathBuf::from("<memory>"),
                reason: format!(
                    "mask `{name}` has {} entries but dims {dims:?} make {numel}",
                    mask.len()
                ),
            });
        }
        self.insert(name, Record::Mask { dims: dims.to_vec(), mask: mask.clone() })
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name) {
            Some(Record::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn mask(&self, name: &str) -> Option<&SparsityMask> {
        match self.get(name) {
            Some(Record::Mask { mask, .. }) => Some(mask),
            _ => None,
        }
    }

    /// Serialize to bytes (checksum included).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, record) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match record {
                Record::Tensor(t) => {
                    out.push(0u8);
                    write_dims(&mut out, t.dims());
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Record::Mask { dims, mask } => {
                    out.push(1u8);
                    write_dims(&mut out, dims);
                    out.extend_from_slice(&mask.to_bytes());
                }
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Parse bytes produced by [`Checkpoint::to_bytes`]; `origin` labels
    /// errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
        if bytes.len() < 16 {
            return Err(fail(format!("{} bytes is too short for a checkpoint", bytes.len())));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        let computed = crc32(body);
        if stored != computed {
            return Err(fail(format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        let mut cur = Cursor { bytes: body, pos: 0, origin };
        let magic = cur.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(fail(format!("bad magic {magic:?}")));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported format version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let count = cur.u32("record count")? as usize;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let ctx = format!("record {i}");
            let name_len = cur.u32(&format!("{ctx} name length"))? as usize;
            let name_bytes = cur.take(name_len, &format!("{ctx} name"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| fail(format!("{ctx} name is not UTF-8")))?
                .to_string();
            let dtype = cur.take(1, &format!("{ctx} dtype"))?[0];
            let rank = cur.u32(&format!("{ctx} rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for d in 0..rank {
                dims.push(cur.u32(&format!("{ctx} dim {d}"))? as usize);
            }
            let numel: usize = dims.iter().product();
            let record = match dtype {
                0 => {
                    let payload = cur.take(numel * 4, &format!("{ctx} ({name}) payload"))?;
                    let data: Vec<f32> = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Record::Tensor(
                        Tensor::new(dims, data)
                            .map_err(|e| fail(format!("{ctx} ({name}): {e}")))?,
                    )
                }
                1 => {
                    let payload =
                        cur.take(numel.div_ceil(8), &format!("{ctx} ({name}) mask payload"))?;
                    let mask = SparsityMask::from_bytes(numel, payload, origin)?;
                    Record::Mask { dims, mask }
                }
                other => {
                    return Err(fail(format!("{ctx} ({name}) has unknown dtype code {other}")))
                }
            };
            ck.insert(&name, record)
                .map_err(|_| fail(format!("duplicate record name `{name}`")))?;
        }
        if cur.pos != body.len() {
            return Err(fail(format!(
                "{} trailing bytes after the last record",
                body.len() - cur.pos
            )));
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.origin.to_path_buf(),
                reason: format!(
                    "truncated: {what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

// ---- model persistence --------------------------------------------------------

/// Snapshot a model's trainable state (and optionally its captured
/// initialization) into named records: `{layer}.w`, `{layer}.b`, plus
/// `{layer}.mask` / `{layer}.log_sigma2` / `{layer}.log_alpha` as the method
/// requires, and `init.{layer}.w` / `init.{layer}.b` when an initialization
/// is given.
pub fn model_to_checkpoint(
    model: &Model<f32>,
    init: Option<&InitSnapshot>,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    for layer in &model.layers {
        ck.insert_tensor(&format!("{}.w", layer.name), &layer.w)?;
        ck.insert_tensor(&format!("{}.b", layer.name), &layer.b)?;
        match &layer.method {
            MethodState::Dense => {}
            MethodState::Masked { mask, .. } => {
                ck.insert_mask(&format!("{}.mask", layer.name), layer.w.dims(), mask)?;
            }
            MethodState::Vd { log_sigma2 } => {
                ck.insert_tensor(&format!("{}.log_sigma2", layer.name), log_sigma2)?;
            }
            MethodState::L0 { gates } => {
                ck.insert_tensor(&format!("{}.log_alpha", layer.name), &gates.log_alpha)?;
            }
        }
    }
    if let Some(snapshot) = init {
        for (name, w, b) in &snapshot.layers {
            ck.insert_tensor(&format!("init.{name}.w"), w)?;
            ck.insert_tensor(&format!("init.{name}.b"), b)?;
        }
    }
    Ok(ck)
}

/// Restore a model's trainable state from records written by
/// [`model_to_checkpoint`]. The model supplies the architecture and method;
/// every tensor the method needs must be present with matching dims.
pub fn load_model_state(model: &mut Model<f32>, ck: &Checkpoint, origin: &Path) -> Result<()> {
    let fail = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
    for layer in &mut model.layers {
        let w = ck
            .tensor(&format!("{}.w", layer.name))
            .ok_or_else(|| fail(format!("missing record `{}.w`", layer.name)))?;
        if w.dims() != layer.w.dims() {
            return Err(fail(format!(
                "record `{}.w` has dims {:?}, the model expects {:?}",
                layer.name,
                w.dims(),
                layer.w.dims()
            )));
        }
        layer.w = w.clone();
        let b = ck
            .tensor(&format!("{}.b", layer.name))
            .ok_or_else(|| fail(format!("missing record `{}.b`", layer.name)))?;
        if b.dims() != layer.b.dims() {
            return Err(fail(format!(
                "record `{}.b` has dims {:?}, the model expects {:?}",
                layer.name,
                b.dims(),
                layer.b.dims()
            )));
        }
        layer.b = b.clone();
        match &mut layer.method {
            MethodState::Dense => {}
            MethodState::Masked { mask, .. } => {
                let m = ck
                    .mask(&format!("{}.mask", layer.name))
                    .ok_or_else(|| fail(format!("missing record `{}.mask`", layer.name)))?;
                if m.len() != mask.len() {
                    return Err(fail(format!(
                        "record `{}.mask` covers {} weights, the model expects {}",
                        layer.name,
                        m.len(),
                        mask.len()
                    )));
                }
                *mask = m.clone();
            }
            MethodState::Vd { log_sigma2 } => {
                let t = ck
                    .tensor(&format!("{}.log_sigma2", layer.name))
                    .ok_or_else(|| fail(format!("missing record `{}.log_sigma2`", layer.name)))?;
                if t.dims() != log_sigma2.dims() {
                    return Err(fail(format!(
                        "record `{}.log_sigma2` has dims {:?}, the model expects {:?}",
                        layer.name,
                        t.dims(),
                        log_sigma2.dims()
                    )));
                }
                *log_sigma2 = t.clone();
            }
            MethodState::L0 { gates } => {
                let t = ck
                    .tensor(&format!("{}.log_alpha", layer.name))
                    .ok_or_else(|| fail(format!("missing record `{}.log_alpha`", layer.name)))?;
                if t.dims() != gates.log_alpha.dims() {
                    return Err(fail(format!(
                        "record `{}.log_alpha` has dims {:?}, the model expects {:?}",
                        layer.name,
                        t.dims(),
                        gates.log_alpha.dims()
                    )));
                }
                gates.log_alpha = t.clone();
            }
        }
    }
    Ok(())
}

/// Recover the captured initialization stored by [`model_to_checkpoint`],
/// if present.
pub fn init_from_checkpoint(ck: &Checkpoint, layer_names: &[String]) -> Option<InitSnapshot> {
    let mut layers = Vec::with_capacity(layer_names.len());
    for name in layer_names {
        let w = ck.tensor(&format!("init.{name}.w"))?;
        let b = ck.tensor(&format!("init.{name}.b"))?;
        layers.push((name.clone(), w.clone(), b.clone()));
    }
    Some(InitSnapshot { layers })
}
