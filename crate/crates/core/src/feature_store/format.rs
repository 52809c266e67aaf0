//! Binary records, all little-endian.
//!
//! Tensor record:
//!
//! ```text
//! b"MCDF" | u32 version | u32 rank | rank × u32 dims | payload
//! ```
//!
//! Version 1 payloads are `f32` (feature files); version 2 payloads are
//! `f64` (checkpoint tensors). Rows are stored row-major.
//!
//! Sample record (one `.mcdf` file per sample):
//!
//! ```text
//! b"MCDF" | u32 version=1 | u32 0xFFFF_FFFF (sample marker, never a rank)
//! u32 id_len | id bytes (UTF-8)
//! u32 type_id | u32 answer_id
//! u32 n_tokens | n_tokens × u32
//! u32 n_keywords | n_keywords × u32
//! tensor record (visual, rank 2, version 1)
//! tensor record (audio, rank 2, version 1)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{McdError, Result};

use super::FeatureBundle;
use super::FeatureMatrix;

pub const MAGIC: &[u8; 4] = b"MCDF";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
pub const SAMPLE_MARKER: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorPayload {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Self::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Self::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub dims: Vec<usize>,
    pub payload: TensorPayload,
}

pub fn encode_tensor(out: &mut Vec<u8>, dims: &[usize], payload: &TensorPayload) {
    let version = match payload {
        TensorPayload::F32(_) => VERSION_F32,
        TensorPayload::F64(_) => VERSION_F64,
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match payload {
        TensorPayload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorPayload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

/// Cursor over an in-memory record with truncation-safe reads.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, reason: impl Into<String>) -> McdError {
        McdError::format(self.path, reason)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn u32_vec(&mut self) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn magic(&mut self) -> Result<()> {
        let m = self.take(4)?;
        if m != MAGIC {
            return Err(self.err(format!("bad magic {m:?}, expected \"MCDF\"")));
        }
        Ok(())
    }

    pub(crate) fn tensor(&mut self) -> Result<TensorRecord> {
        self.magic()?;
        let version = self.u32()?;
        if version != VERSION_F32 && version != VERSION_F64 {
            return Err(self.err(format!("unsupported tensor version {version}")));
        }
        let rank = self.u32()?;
        if rank == SAMPLE_MARKER {
            return Err(self.err("expected a tensor record, found a sample record"));
        }
        if rank > 8 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.err("element count overflow"))?;
            dims.push(d);
        }
        let width = if version == VERSION_F32 { 4 } else { 8 };
        let bytes = self.take(
            count
                .checked_mul(width)
                .ok_or_else(|| self.err("payload size overflow"))?,
        )?;
        let payload = if version == VERSION_F32 {
            TensorPayload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        } else {
            TensorPayload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        let mut a = [0u8; 8];
                        a.copy_from_slice(c);
                        f64::from_le_bytes(a)
                    })
                    .collect(),
            )
        };
        Ok(TensorRecord { dims, payload })
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<TensorRecord> {
    let mut r = Reader::new(bytes, path);
    let t = r.tensor()?;
    if r.remaining() != 0 {
        return Err(McdError::format(path, "trailing bytes after tensor record"));
    }
    Ok(t)
}

pub fn encode_sample(bundle: &FeatureBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * (bundle.visual.data.len() + bundle.audio.data.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION_F32.to_le_bytes());
    out.extend_from_slice(&SAMPLE_MARKER.to_le_bytes());
    let id = bundle.sample_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&bundle.type_id.to_le_bytes());
    out.extend_from_slice(&bundle.answer_id.to_le_bytes());
    for list in [&bundle.question_tokens, &bundle.keyword_ids] {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        list.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
    }
    for m in [&bundle.visual, &bundle.audio] {
        encode_tensor(&mut out, &[m.rows, m.cols], &TensorPayload::F32(m.data.clone()));
    }
    out
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<FeatureBundle> {
    let mut r = Reader::new(bytes, path);
    r.magic()?;
    let version = r.u32()?;
    if version != VERSION_F32 {
        return Err(McdError::format(path, format!("unsupported sample version {version}")));
    }
    if r.u32()? != SAMPLE_MARKER {
        return Err(McdError::format(path, "not a sample record (missing sample marker)"));
    }
    let id_len = r.u32()? as usize;
    let sample_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| McdError::format(path, "sample id is not UTF-8"))?;
    let type_id = r.u32()?;
    let answer_id = r.u32()?;
    let question_tokens = r.u32_vec()?;
    let keyword_ids = r.u32_vec()?;
    let mut mats = Vec::with_capacity(2);
    for name in ["visual", "audio"] {
        let t = r.tensor()?;
        if t.dims.len() != 2 {
            return Err(McdError::format(path, format!("{name} must be rank 2, got {:?}", t.dims)));
        }
        let TensorPayload::F32(data) = t.payload else {
            return Err(McdError::format(path, format!("{name} must be f32")));
        };
        mats.push(FeatureMatrix {
            rows: t.dims[0],
            cols: t.dims[1],
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(McdError::format(path, "trailing bytes after sample record"));
    }
    let audio = mats.pop().expect("two matrices");
    let visual = mats.pop().expect("two matrices");
    let bundle = FeatureBundle {
        sample_id,
        visual,
        audio,
        question_tokens,
        type_id,
        keyword_ids,
        answer_id,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `<dir>/<sample_id>.mcdf` and returns its path.
pub fn write_sample(bundle: &FeatureBundle, dir: &Path) -> Result<PathBuf> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| McdError::io(dir, e))?;
    let path = dir.join(format!("{}.mcdf", bundle.sample_id));
    fs::write(&path, encode_sample(bundle)).map_err(|e| McdError::io(&path, e))?;
    Ok(path)
}

pub fn read_sample(path: &Path) -> Result<FeatureBundle> {
    let bytes = fs::read(path).map_err(|e| McdError::io(path, e))?;
    decode_sample(&bytes, path)
}
