//! On-disk contract for pre-extracted audio, visual and question features.

pub mod format;
pub mod manifest;
pub mod synthetic;

pub use format::{read_sample, write_sample};
pub use manifest::{
    read_truth, Dataset, DatasetManifest, SampleEntry, Scenario, Split, TruthEntry, TruthTable,
    VocabSizes,
};
pub use synthetic::{generate_synthetic_dataset, SyntheticSpec};

use crate::error::{McdError, Result};

/// Row-major `rows × cols` feature activations as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One question about one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub sample_id: String,
    /// `L_v × D`
    pub visual: FeatureMatrix,
    /// `L_a × D`
    pub audio: FeatureMatrix,
    pub question_tokens: Vec<u32>,
    pub type_id: u32,
    pub keyword_ids: Vec<u32>,
    pub answer_id: u32,
}

impl FeatureBundle {
    /// Structural checks that need no vocabulary; see
    /// [`DatasetManifest::check_bundle`] for range checks.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| McdError::InvalidSample {
            sample_id: self.sample_id.clone(),
            field,
            reason,
        };
        if self.sample_id.is_empty()
            || self
                .sample_id
                .chars()
                .any(|c| c == '/' || c == '\\' || c.is_control())
        {
            return Err(bad("sample_id", "must be a non-empty file-name-safe string".into()));
        }
        for (field, m) in [("visual", &self.visual), ("audio", &self.audio)] {
            if m.rows == 0 || m.cols == 0 {
                return Err(bad(field, format!("empty matrix {}x{}", m.rows, m.cols)));
            }
            if m.rows * m.cols != m.data.len() {
                return Err(bad(field, "data length does not match shape".into()));
            }
            if let Some(pos) = m.data.iter().position(|x| !x.is_finite()) {
                return Err(bad(
                    field,
                    format!("non-finite value {} at row {}, col {}", m.data[pos], pos / m.cols, pos % m.cols),
                ));
            }
        }
        if self.visual.cols != self.audio.cols {
            return Err(bad(
                "audio",
                format!("width {} differs from visual width {}", self.audio.cols, self.visual.cols),
            ));
        }
        if self.question_tokens.is_empty() {
            return Err(bad("question_tokens", "question has no tokens".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn bundle() -> FeatureBundle {
        FeatureBundle {
            sample_id: "s-1".into(),
            visual: FeatureMatrix::new(2, 3, vec![0.5, -1.0, 2.25, 1e-30, f32::MAX, -0.0]),
            audio: FeatureMatrix::new(1, 3, vec![3.0, 4.0, 5.0]),
            question_tokens: vec![1, 2, 3],
            type_id: 2,
            keyword_ids: vec![7],
            answer_id: 4,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        let p = write_sample(&b, dir.path()).unwrap();
        let back = read_sample(&p).unwrap();
        assert_eq!(back, b);
        // -0.0 == 0.0 under PartialEq, so compare bit patterns too.
        let bits = |m: &FeatureMatrix| m.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.visual), bits(&b.visual));
    }

    #[test]
    fn repeated_writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        let p = write_sample(&b, dir.path()).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_sample(&b, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    #[test]
    fn nan_is_rejected_with_field_and_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bundle();
        b.visual.data[1] = f32::NAN;
        let err = write_sample(&b, dir.path()).unwrap_err().to_string();
        assert!(err.contains("visual") && err.contains("s-1"), "{err}");
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let bytes = format::encode_sample(&bundle());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = format::decode_sample(&bytes[..cut], Path::new("x.mcdf")).unwrap_err();
            assert!(matches!(err, McdError::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn wrong_magic_is_unrecognized() {
        let mut bytes = format::encode_sample(&bundle());
        bytes[0] = b'X';
        let err = format::decode_sample(&bytes, Path::new("x.mcdf")).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"), "{err}");
    }

    #[test]
    fn empty_question_is_invalid() {
        let mut b = bundle();
        b.question_tokens.clear();
        assert!(b.validate().is_err());
    }

    #[test]
    fn tensor_record_versions() {
        let mut out = Vec::new();
        format::encode_tensor(&mut out, &[2, 1], &format::TensorPayload::F64(vec![1.5, -2.0]));
        let rec = format::decode_tensor(&out, Path::new("t")).unwrap();
        assert_eq!(rec.dims, vec![2, 1]);
        assert_eq!(rec.payload, format::TensorPayload::F64(vec![1.5, -2.0]));
        // header: magic, version 2, rank 2, dims
        assert_eq!(&out[..4], b"MCDF");
        assert_eq!(u32::from_le_bytes(out[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(out[8..12].try_into().unwrap()), 2);
        assert_eq!(out.len(), 4 + 4 + 4 + 8 + 16);
    }
}
