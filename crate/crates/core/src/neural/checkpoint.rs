//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then the raw little-endian `f32` parameter blob
//! (each layer's weights then biases, optionally followed by the Adam moments
//! in the same order). The header carries the blob's SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AdamConfig, AdamState, Dense, Gradients, LayerSpec, MlpModel, Mode, NeuralError, TrainConfig, TrainRecord,
};
use crate::checksum::sha256_hex;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIWCKPT\0";

/// Provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub train_config: Option<TrainConfig>,
    pub dataset_checksum: Option<String>,
    pub record: Option<TrainRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    rng_algorithm: String,
    seed: u64,
    layers: Vec<LayerSpec>,
    meta: CheckpointMeta,
    adam: Option<AdamHeader>,
    blob_len: u64,
    blob_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step_count: u64,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model: MlpModel<f32>,
    pub adam: Option<AdamState<f32>>,
    pub meta: CheckpointMeta,
    /// Non-fatal findings, e.g. a dataset checksum other than the expected one.
    pub warnings: Vec<String>,
}

fn push_params(blob: &mut Vec<u8>, w: &[Vec<f32>], b: &[Vec<f32>]) {
    for (w, b) in w.iter().zip(b) {
        for v in w.iter().chain(b) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(
    model: &MlpModel<f32>,
    adam: Option<&AdamState<f32>>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>, NeuralError> {
    let mut blob = Vec::with_capacity(4 * model.num_parameters() * if adam.is_some() { 3 } else { 1 });
    let weights: Vec<Vec<f32>> = model.layers.iter().map(|l| l.weights.clone()).collect();
    let biases: Vec<Vec<f32>> = model.layers.iter().map(|l| l.biases.clone()).collect();
    push_params(&mut blob, &weights, &biases);
    if let Some(st) = adam {
        push_params(&mut blob, &st.first_moment.weights, &st.first_moment.biases);
        push_params(&mut blob, &st.second_moment.weights, &st.second_moment.biases);
    }
    let header = Header {
        format: "siw-mlp-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        rng_algorithm: super::RNG_ALGORITHM.into(),
        seed: model.seed,
        layers: model.specs(),
        meta: meta.clone(),
        adam: adam.map(|s| AdamHeader {
            config: s.config,
            step_count: s.step_count,
        }),
        blob_len: blob.len() as u64,
        blob_sha256: sha256_hex(&blob),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f32>, NeuralError> {
        let end = self.pos + 4 * n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| NeuralError::Integrity("parameter blob is truncated".into()))?;
        self.pos = end;
        Ok(slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn gradients(&mut self, specs: &[LayerSpec]) -> Result<Gradients<f32>, NeuralError> {
        let mut weights = Vec::with_capacity(specs.len());
        let mut biases = Vec::with_capacity(specs.len());
        for s in specs {
            weights.push(self.take(s.in_dim * s.out_dim)?);
            biases.push(self.take(s.out_dim)?);
        }
        Ok(Gradients { weights, biases })
    }
}

pub fn decode_checkpoint(
    bytes: &[u8],
    expected_dataset_checksum: Option<&str>,
) -> Result<LoadedCheckpoint, NeuralError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(NeuralError::Integrity("missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| NeuralError::Integrity("header is truncated".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NeuralError::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    super::validate_specs(&header.layers)?;
    let blob = &bytes[16 + header_len..];
    if blob.len() as u64 != header.blob_len {
        return Err(NeuralError::Integrity(format!(
            "blob has {} bytes, header declares {}",
            blob.len(),
            header.blob_len
        )));
    }
    if sha256_hex(blob) != header.blob_sha256 {
        return Err(NeuralError::Integrity("parameter checksum mismatch".into()));
    }

    let mut reader = BlobReader { bytes: blob, pos: 0 };
    let params = reader.gradients(&header.layers)?;
    let layers = header
        .layers
        .iter()
        .zip(params.weights.into_iter().zip(params.biases))
        .map(|(spec, (weights, biases))| Dense {
            spec: *spec,
            weights,
            biases,
        })
        .collect();
    let model = MlpModel {
        layers,
        mode: Mode::Eval,
        seed: header.seed,
    };
    let adam = match header.adam {
        Some(a) => Some(AdamState {
            config: a.config,
            step_count: a.step_count,
            first_moment: reader.gradients(&header.layers)?,
            second_moment: reader.gradients(&header.layers)?,
        }),
        None => None,
    };
    if reader.pos != blob.len() {
        return Err(NeuralError::ShapeMismatch(format!(
            "{} trailing bytes after the declared layers",
            blob.len() - reader.pos
        )));
    }

    let mut warnings = Vec::new();
    if let Some(expected) = expected_dataset_checksum {
        match header.meta.dataset_checksum.as_deref() {
            Some(found) if found == expected => {}
            found => {
                let msg = format!(
                    "checkpoint '{}' was trained on dataset {} but the current dataset is {expected}",
                    header.meta.label,
                    found.unwrap_or("<unknown>")
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    Ok(LoadedCheckpoint {
        model,
        adam,
        meta: header.meta,
        warnings,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &MlpModel<f32>,
    adam: Option<&AdamState<f32>>,
    meta: &CheckpointMeta,
) -> Result<(), NeuralError> {
    fs::write(path, encode_checkpoint(model, adam, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_dataset_checksum: Option<&str>) -> Result<LoadedCheckpoint, NeuralError> {
    decode_checkpoint(&fs::read(path)?, expected_dataset_checksum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{chain_specs, init_model, Activation};

    fn model() -> MlpModel<f32> {
        let specs = chain_specs(&[6, 16, 16, 6], Activation::leaky(), Activation::Linear, &[0], 0.1);
        init_model(&specs, 17).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            label: "corrector_1".into(),
            train_config: Some(TrainConfig::corrector(43)),
            dataset_checksum: Some("abc".into()),
            record: None,
        }
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let m = model();
        let mut st = AdamState::new(&m, AdamConfig::default());
        st.step_count = 12;
        st.first_moment.weights[1][3] = 0.25;
        st.second_moment.biases[2][0] = 1e-7;
        let bytes = encode_checkpoint(&m, Some(&st), &meta()).unwrap();
        let loaded = decode_checkpoint(&bytes, Some("abc")).unwrap();
        assert_eq!(loaded.model, m);
        assert_eq!(loaded.adam.unwrap(), st);
        assert_eq!(loaded.meta, meta());
        assert!(loaded.warnings.is_empty());
    }

    #[test]
    fn dataset_mismatch_warns() {
        let bytes = encode_checkpoint(&model(), None, &meta()).unwrap();
        let loaded = decode_checkpoint(&bytes, Some("def")).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
        assert!(loaded.warnings[0].contains("def"));
    }

    #[test]
    fn truncation_and_corruption_fail() {
        let bytes = encode_checkpoint(&model(), None, &meta()).unwrap();
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(short, None), Err(NeuralError::Integrity(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 10;
        flipped[last] ^= 0x40;
        assert!(matches!(
            decode_checkpoint(&flipped, None),
            Err(NeuralError::Integrity(_))
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..10], None),
            Err(NeuralError::Integrity(_))
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let bytes = encode_checkpoint(&model(), None, &meta()).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
        let patched = header.replace("\"version\":1", "\"version\":9");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(
            decode_checkpoint(&out, None),
            Err(NeuralError::VersionMismatch { found: 9, .. })
        ));
    }
}
