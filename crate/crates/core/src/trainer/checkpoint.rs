//! Single-file checkpoint archive.
//!
//! ```text
//! b"MCDC" | u32 version=1 | u64 index_len | index JSON | tensor records
//! ```
//!
//! The JSON index lists every parameter with its byte offset into the
//! record area; each record is an `f64` tensor record of the feature
//! format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{McdError, Result};
use crate::feature_store::format::{encode_tensor, Reader, TensorPayload};
use crate::model::{Mcd, ModelShape};
use crate::tensor::Tensor;

use super::RunConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub dims: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub config_fingerprint: String,
    pub config: RunConfig,
    pub shape: ModelShape,
    pub epoch: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &Mcd, run: &RunConfig, epoch: Option<usize>) -> Vec<u8> {
    let mut records = Vec::new();
    let mut tensors = Vec::with_capacity(model.store.len());
    for e in model.store.entries() {
        let start = records.len();
        let dims = e.value.shape().to_vec();
        encode_tensor(&mut records, &dims, &TensorPayload::F64(e.value.data().to_vec()));
        tensors.push(TensorEntry {
            name: e.name.clone(),
            offset: start as u64,
            length: (records.len() - start) as u64,
            dims,
            trainable: e.trainable,
        });
    }
    let index = CheckpointIndex {
        config_fingerprint: run.fingerprint(),
        config: run.clone(),
        shape: model.shape,
        epoch,
        tensors,
    };
    let json = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(16 + json.len() + records.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&records);
    out
}

pub fn save_checkpoint(model: &Mcd, run: &RunConfig, epoch: Option<usize>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| McdError::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(model, run, epoch)).map_err(|e| McdError::io(path, e))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(Mcd, CheckpointIndex)> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(McdError::format(path, "not a checkpoint archive"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(McdError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(r.u64()?).map_err(|_| McdError::format(path, "index too large"))?;
    let index: CheckpointIndex = serde_json::from_slice(r.take(len)?).map_err(|e| McdError::json(path, e))?;
    if index.config.fingerprint() != index.config_fingerprint {
        return Err(McdError::format(path, "config fingerprint does not match embedded config"));
    }
    let records = &bytes[r.position()..];
    let mut model = Mcd::new(index.config.model.clone(), index.shape, index.config.train.seed)?;
    if index.tensors.len() != model.store.len() {
        return Err(McdError::format(
            path,
            format!("{} tensors stored, model has {}", index.tensors.len(), model.store.len()),
        ));
    }
    for t in &index.tensors {
        let id = model
            .store
            .find(&t.name)
            .ok_or_else(|| McdError::format(path, format!("unknown tensor {}", t.name)))?;
        let start = usize::try_from(t.offset).map_err(|_| McdError::format(path, "offset overflow"))?;
        let end = start
            .checked_add(t.length as usize)
            .filter(|&e| e <= records.len())
            .ok_or_else(|| McdError::format(path, format!("tensor {} out of bounds", t.name)))?;
        let rec = Reader::new(&records[start..end], path).tensor()?;
        let TensorPayload::F64(data) = rec.payload else {
            return Err(McdError::format(path, format!("tensor {} is not f64", t.name)));
        };
        let expected = model.store.get(id).shape();
        if rec.dims != expected.to_vec() || rec.dims != t.dims {
            return Err(McdError::format(
                path,
                format!("tensor {} has dims {:?}, model expects {expected:?}", t.name, rec.dims),
            ));
        }
        model.store.set(id, Tensor::from_vec(expected, data));
    }
    Ok((model, index))
}

pub fn load_checkpoint(path: &Path) -> Result<(Mcd, CheckpointIndex)> {
    let bytes = fs::read(path).map_err(|e| McdError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::synthetic::{generate_in_memory, SyntheticSpec};
    use crate::feature_store::{Dataset, Split};
    use crate::trainer::{evaluate, fit};

    #[test]
    fn roundtrip_reproduces_the_eval_report() {
        let spec = SyntheticSpec {
            n_samples: 40,
            n_val: 8,
            n_test: 16,
            frames: 4,
            dim: 8,
            n_answer_classes: 4,
            n_keywords: 2,
            noise_sigma: 0.5,
            seed: 2,
        };
        let d = generate_in_memory(&spec).unwrap();
        let ds = Dataset::from_parts(d.manifest, d.samples).unwrap();
        let mut run = RunConfig::default();
        run.model.frames = 4;
        run.model.blocks = 1;
        run.train.epochs = 1;
        run.train.batch_size = 8;
        let trained = fit(&ds, &run, None).unwrap().last;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mcdc");
        save_checkpoint(&trained, &run, Some(0), &path).unwrap();
        let (loaded, index) = load_checkpoint(&path).unwrap();
        assert_eq!(index.epoch, Some(0));
        assert_eq!(index.config_fingerprint, run.fingerprint());
        for (a, b) in trained.store.entries().iter().zip(loaded.store.entries()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(
            evaluate(&trained, &ds, Split::Test, &run).unwrap(),
            evaluate(&loaded, &ds, Split::Test, &run).unwrap()
        );
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let p = Path::new("x.mcdc");
        assert!(decode_checkpoint(b"MCDF\x01\0\0\0", p).is_err());
        assert!(decode_checkpoint(b"MCDC\x01\0\0\0\xff\0\0\0\0\0\0\0{}", p).is_err());
    }
}
