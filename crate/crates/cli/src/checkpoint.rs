//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "ABNN"
//! version  u32      currently 1
//! arch     u32 length + TOML text of the architecture
//! prov     u32 length + UTF-8 provenance text (the canonical run config)
//! count    u32      number of tensor records
//! record   u32 name length + UTF-8 name
//!          u32 rank, then rank x u32 dims
//!          u8 dtype tag (0 = f32, 1 = f64)
//!          payload: numel x (4 | 8) bytes, little-endian
//! ```
//!
//! Payloads are written little-endian regardless of host, and a load
//! reproduces every parameter bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use abnn_core::net::{ParamRole, StochasticModel};
use abnn_core::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"ABNN";
pub const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint magic {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0} (supported: {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Concrete architecture stored beside the tensors so a checkpoint is
/// self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub stochastic: bool,
    pub prior_sigma: f64,
    pub dtype: DType,
}

impl ModelArch {
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::new();
        let mut prev = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            widths.push((prev, w));
            prev = w;
        }
        widths
    }

    /// Expected tensor record names in canonical order.
    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layer_widths().len() {
            if self.stochastic {
                for role in ["mu_w", "rho_w", "mu_b", "rho_b"] {
                    names.push(format!("layer{i}.{role}"));
                }
            } else {
                names.push(format!("layer{i}.w"));
                names.push(format!("layer{i}.b"));
            }
        }
        names
    }
}

fn dtype_tag(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn tag_dtype(tag: u8) -> Result<DType, CheckpointError> {
    match tag {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        other => Err(CheckpointError::Malformed(format!(
            "unknown dtype tag {other}"
        ))),
    }
}

fn tensor_payload(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    match t.dtype() {
        DType::F32 => {
            for i in 0..t.numel() {
                out.extend_from_slice(&(t.value_at(i) as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for i in 0..t.numel() {
                out.extend_from_slice(&t.value_at(i).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32_le()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| CheckpointError::Malformed(format!("non-UTF-8 string: {e}")))
    }
}

fn role_name(role: ParamRole) -> &'static str {
    role.as_str()
}

/// Serializes the model with its architecture and provenance text.
pub fn save_checkpoint(
    model: &StochasticModel,
    arch: &ModelArch,
    provenance: &str,
    path: &Path,
) -> Result<(), CheckpointError> {
    let arch_text = toml::to_string_pretty(arch)
        .map_err(|e| CheckpointError::Malformed(format!("arch serialization: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(arch_text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(arch_text.as_bytes());
    bytes.extend_from_slice(&(provenance.len() as u32).to_le_bytes());
    bytes.extend_from_slice(provenance.as_bytes());

    let specs = model.param_specs();
    bytes.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for (layer, role) in specs {
        let tensor = model.param(layer, role);
        let name = format!("layer{layer}.{}", role_name(role));
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        bytes.push(dtype_tag(tensor.dtype()));
        bytes.extend_from_slice(&tensor_payload(tensor));
    }

    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor), CheckpointError> {
    let name = r.string()?;
    let rank = r.u32_le()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32_le()? as usize);
    }
    let dtype = tag_dtype(r.u8()?)?;
    let numel: usize = shape.iter().product();
    let tensor = match dtype {
        DType::F32 => {
            let raw = r.take(numel * 4)?;
            let vals: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_f32(shape, vals)
                .map_err(|e| CheckpointError::Malformed(format!("tensor '{name}': {e}")))?
        }
        DType::F64 => {
            let raw = r.take(numel * 8)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect();
            Tensor::from_f64(shape, vals)
                .map_err(|e| CheckpointError::Malformed(format!("tensor '{name}': {e}")))?
        }
    };
    Ok((name, tensor))
}

/// Reads a checkpoint back into a model, its architecture, and the verbatim
/// provenance text. Refuses unknown versions; a truncated file never yields
/// a partial model.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(StochasticModel, ModelArch, String), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32_le()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let arch_text = r.string()?;
    let arch: ModelArch = toml::from_str(&arch_text)
        .map_err(|e| CheckpointError::Malformed(format!("arch block: {e}")))?;
    let provenance = r.string()?;

    let count = r.u32_le()? as usize;
    let expected_names = arch.tensor_names();
    if count != expected_names.len() {
        return Err(CheckpointError::Malformed(format!(
            "architecture expects {} tensors, file has {count}",
            expected_names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }

    let widths = arch.layer_widths();
    let mut layers = Vec::with_capacity(widths.len());
    let mut cursor = tensors.into_iter();
    let mut next = |expected: &str, shape: &[usize]| -> Result<Tensor, CheckpointError> {
        let (name, tensor) = cursor
            .next()
            .ok_or_else(|| CheckpointError::Malformed("missing tensor record".into()))?;
        if name != expected {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor '{expected}', found '{name}'"
            )));
        }
        if tensor.shape() != shape {
            return Err(CheckpointError::Malformed(format!(
                "tensor '{name}' has shape {:?}, architecture expects {:?}",
                tensor.shape(),
                shape
            )));
        }
        if tensor.dtype() != arch.dtype {
            return Err(CheckpointError::Malformed(format!(
                "tensor '{name}' is {}, architecture expects {}",
                tensor.dtype(),
                arch.dtype
            )));
        }
        Ok(tensor)
    };

    for (i, &(prev, width)) in widths.iter().enumerate() {
        if arch.stochastic {
            let mu_w = next(&format!("layer{i}.mu_w"), &[prev, width])?;
            let rho_w = next(&format!("layer{i}.rho_w"), &[prev, width])?;
            let mu_b = next(&format!("layer{i}.mu_b"), &[width])?;
            let rho_b = next(&format!("layer{i}.rho_b"), &[width])?;
            layers.push(abnn_core::net::Layer::Variational(
                abnn_core::net::GaussianVariationalLayer {
                    mu_w,
                    rho_w,
                    mu_b,
                    rho_b,
                    prior_sigma: arch.prior_sigma,
                },
            ));
        } else {
            let weight = next(&format!("layer{i}.w"), &[prev, width])?;
            let bias = next(&format!("layer{i}.b"), &[width])?;
            layers.push(abnn_core::net::Layer::Affine(abnn_core::net::AffineLayer {
                weight,
                bias,
            }));
        }
    }

    let model = StochasticModel::from_layers(layers, arch.classes)
        .map_err(|e| CheckpointError::Malformed(format!("layer stack: {e}")))?;
    Ok((model, arch, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use abnn_core::rng::rng_from_seed;

    fn sample_arch(stochastic: bool, dtype: DType) -> ModelArch {
        ModelArch {
            input_dim: 5,
            hidden: vec![4, 3],
            classes: 2,
            stochastic,
            prior_sigma: 1.0,
            dtype,
        }
    }

    fn sample_model(arch: &ModelArch, seed: u64) -> StochasticModel {
        let mut rng = rng_from_seed(seed);
        if arch.stochastic {
            StochasticModel::variational_mlp(
                arch.input_dim,
                &arch.hidden,
                arch.classes,
                arch.prior_sigma,
                arch.dtype,
                &mut rng,
            )
            .unwrap()
        } else {
            StochasticModel::deterministic_mlp(
                arch.input_dim,
                &arch.hidden,
                arch.classes,
                arch.dtype,
                &mut rng,
            )
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (stochastic, dtype) in [(true, DType::F64), (false, DType::F32)] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.abnn");
            let arch = sample_arch(stochastic, dtype);
            let model = sample_model(&arch, 17);
            save_checkpoint(&model, &arch, "provenance text", &path).unwrap();

            let (loaded, loaded_arch, prov) = load_checkpoint(&path).unwrap();
            assert_eq!(loaded_arch, arch);
            assert_eq!(prov, "provenance text");
            for (layer, role) in model.param_specs() {
                assert!(
                    model.param(layer, role).bits_eq(loaded.param(layer, role)),
                    "layer {layer} {role:?}"
                );
            }
        }
    }

    #[test]
    fn dtype_tag_is_honored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.abnn");
        let arch = sample_arch(true, DType::F32);
        let model = sample_model(&arch, 3);
        save_checkpoint(&model, &arch, "", &path).unwrap();
        let (loaded, _, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dtype(), DType::F32);
    }

    #[test]
    fn truncated_files_never_yield_a_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.abnn");
        let arch = sample_arch(false, DType::F32);
        let model = sample_model(&arch, 5);
        save_checkpoint(&model, &arch, "p", &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 10, 5] {
            let truncated_path = dir.path().join(format!("cut{cut}.abnn"));
            std::fs::write(&truncated_path, &bytes[..cut]).unwrap();
            assert!(
                matches!(
                    load_checkpoint(&truncated_path),
                    Err(CheckpointError::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.abnn");
        let arch = sample_arch(false, DType::F32);
        let model = sample_model(&arch, 5);
        save_checkpoint(&model, &arch, "p", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        let bad_magic = dir.path().join("bad_magic.abnn");
        std::fs::write(&bad_magic, &corrupted).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(CheckpointError::BadMagic { .. })
        ));

        bytes[4] = 99; // version low byte
        let bad_version = dir.path().join("bad_version.abnn");
        std::fs::write(&bad_version, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }
}
