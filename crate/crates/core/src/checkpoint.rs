//! Single-file model container, format tag `trinity-ckpt-v1`.
//!
//! Layout:
//!
//! ```text
//! "trinity-ckpt-v1\n"
//! u64 little-endian: header length in bytes
//! header: JSON { format, config, ablation, tensors: [{name, shape, offset, len}] }
//! payload: every tensor as little-endian f64, offsets counted in values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderRegistry, EncoderSet};
use crate::error::{Error, Result};
use crate::fusion::{AblationFlags, DetectorModel, DetectorParams, ModelConfig};

pub const FORMAT_TAG: &str = "trinity-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub ablation: AblationFlags,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &DetectorModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for t in model.params().tensors() {
        tensors.push(TensorEntry {
            name: t.name,
            shape: t.shape,
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
        for v in t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        format: FORMAT_TAG.into(),
        config: model.config().clone(),
        ablation: model.ablation(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(FORMAT_TAG.len() + 9 + header.len() + payload.len());
    out.extend_from_slice(FORMAT_TAG.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses only the header.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let magic_len = FORMAT_TAG.len() + 1;
    if bytes.len() < magic_len + 8 || &bytes[..FORMAT_TAG.len()] != FORMAT_TAG.as_bytes() || bytes[FORMAT_TAG.len()] != b'\n' {
        return Err(bad("missing trinity-ckpt-v1 format tag"));
    }
    let len_bytes: [u8; 8] = bytes[magic_len..magic_len + 8].try_into().expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let start = magic_len + 8;
    let end = start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
    }
    Ok((header, &bytes[end..]))
}

pub fn from_bytes(bytes: &[u8], registry: &EncoderRegistry) -> Result<DetectorModel> {
    let (header, payload) = read_header(bytes)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    header.config.validate()?;
    let encoders = EncoderSet::from_config(&header.config.encoder, registry)?;
    let mut params = DetectorParams::zeros(&header.config, encoders.text_dim(), encoders.image_dim());
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    let stored: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != stored {
        return Err(Error::Checkpoint("stored tensors do not match the stored config".into()));
    }
    for ((_, dst), entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
        let src = entry
            .offset
            .checked_add(entry.len)
            .filter(|&e| e <= values.len() && entry.len == dst.len())
            .map(|e| &values[entry.offset..e])
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is out of bounds", entry.name)))?;
        dst.copy_from_slice(src);
    }
    DetectorModel::new(header.config, header.ablation, params, registry)
}

pub fn save_checkpoint(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, registry: &EncoderRegistry) -> Result<DetectorModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, registry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::CaptionRecord;
    use crate::mcaf::Criterion;
    use crate::tensor::ImageTensor;

    fn model() -> DetectorModel {
        let mut cfg = ModelConfig::tiny();
        cfg.mcaf.criterion = Criterion::Nas;
        let mut m = DetectorModel::init(cfg, AblationFlags::default(), 3, &EncoderRegistry::new()).unwrap();
        m.params_mut().mcaf.nas_alphas[5] = 0.25;
        m
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes, &EncoderRegistry::new()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let img = ImageTensor::from_fn(3, 16, 16, |c, i, j| ((c + 3 * i + 7 * j) % 11) as f64 / 11.0);
        let cap = CaptionRecord::dataset("a photo");
        assert_eq!(
            m.forward(&img, &cap).unwrap().to_bits(),
            back.forward(&img, &cap).unwrap().to_bits()
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        let reg = EncoderRegistry::new();
        assert!(matches!(from_bytes(b"nope", &reg), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(from_bytes(&bad, &reg), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8], &reg), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3], &reg), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path, &EncoderRegistry::new()).unwrap().params(), m.params());
        assert!(matches!(
            load_checkpoint(dir.path().join("missing"), &EncoderRegistry::new()),
            Err(Error::Io { .. })
        ));
    }
}
