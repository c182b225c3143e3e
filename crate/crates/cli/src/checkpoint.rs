//! Checkpoint directories: `manifest.json` plus one raw blob per tensor.
//!
//! Blobs hold little-endian IEEE-754 `f64` values in row-major order. The manifest lists
//! every blob with its role, shape and SHA-256 digest, so loading is bit-exact and any
//! corruption is detected. Biases are stored as `n × 1` tensors.
//!
//! The training variant keeps `U`, `S`, `V` per low-rank layer; the deploy variant keeps
//! `US` and `V`, the two thin factors used for inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dlrt_core::dlrt::LowRankFactors;
use dlrt_core::netcore::{Affine, Layer, Network, NetworkSpec, Weight};
use dlrt_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "dlrt-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Training,
    Deploy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub role: String,
    pub file: String,
    pub shape: [usize; 2],
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    /// `dense`, `low_rank` or `deploy`.
    pub form: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_bounds: Option<[usize; 2]>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub architecture: NetworkSpec,
    pub ranks: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub layers: Vec<LayerEntry>,
}

/// Run information stored alongside the tensors.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub config: Option<RunConfig>,
}

fn encode(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_tensor(dir: &Path, index: usize, role: &str, m: &Matrix) -> Result<TensorEntry> {
    let file = format!("layer{index}.{role}.bin");
    let bytes = encode(m);
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(io_err(&path))?;
    Ok(TensorEntry { role: role.into(), file, shape: [m.rows(), m.cols()], sha256: digest(&bytes) })
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Matrix> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if digest(&bytes) != entry.sha256 {
        return Err(CliError::Checksum { file: entry.file.clone() });
    }
    let [rows, cols] = entry.shape;
    if bytes.len() != rows * cols * 8 {
        return Err(CliError::Checkpoint(format!("{}: {} bytes for shape {rows}x{cols}", entry.file, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes"))).collect();
    Ok(Matrix::new(rows, cols, data)?)
}

/// Writes `net` into `dir` (created if needed) and returns the manifest.
pub fn save(dir: &Path, net: &Network, variant: Variant, meta: &CheckpointMeta) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut layers = Vec::new();
    for (k, layer) in net.layers.iter().enumerate() {
        let Some(a) = layer.affine() else { continue };
        let weight = match variant {
            Variant::Deploy => a.weight.to_deploy(),
            Variant::Training => a.weight.clone(),
        };
        let (form, rank_bounds, mut tensors) = match &weight {
            Weight::Dense(w) => ("dense", None, vec![write_tensor(dir, k, "W", w)?]),
            Weight::LowRank(f) => (
                "low_rank",
                Some([f.r_min, f.r_max]),
                vec![write_tensor(dir, k, "U", &f.u)?, write_tensor(dir, k, "S", &f.s)?, write_tensor(dir, k, "V", &f.v)?],
            ),
            Weight::Deploy { left, right } => {
                ("deploy", None, vec![write_tensor(dir, k, "US", left)?, write_tensor(dir, k, "V", right)?])
            }
        };
        tensors.push(write_tensor(dir, k, "bias", &Matrix::column_vector(&a.bias))?);
        layers.push(LayerEntry { index: k, form: form.into(), rank_bounds, tensors });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        variant,
        architecture: net.spec(),
        ranks: net.ranks(),
        seed: meta.seed,
        epoch: meta.epoch,
        metrics: meta.metrics.clone(),
        config: meta.config.clone(),
        layers,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CliError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save`], verifying every checksum.
pub fn load(dir: &Path) -> Result<(Network, Manifest)> {
    let manifest = read_manifest(dir)?;
    let spec = &manifest.architecture;
    spec.validate()?;
    let mut entries: BTreeMap<usize, &LayerEntry> = manifest.layers.iter().map(|e| (e.index, e)).collect();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (k, ls) in spec.layers.iter().enumerate() {
        let layer = match ls.weight_dims() {
            None => match ls {
                dlrt_core::netcore::LayerSpec::MaxPool(p) => Layer::MaxPool(*p),
                _ => unreachable!("only pooling layers carry no weight"),
            },
            Some((n_out, n_in)) => {
                let entry = entries.remove(&k).ok_or_else(|| CliError::Checkpoint(format!("layer {k} missing")))?;
                let mut tensors = BTreeMap::new();
                for t in &entry.tensors {
                    tensors.insert(t.role.as_str(), read_tensor(dir, t)?);
                }
                let mut take = |role: &str| {
                    tensors.remove(role).ok_or_else(|| CliError::Checkpoint(format!("layer {k}: tensor {role} missing")))
                };
                let weight = match entry.form.as_str() {
                    "dense" => Weight::Dense(take("W")?),
                    "low_rank" => {
                        let [r_min, r_max] = entry
                            .rank_bounds
                            .ok_or_else(|| CliError::Checkpoint(format!("layer {k}: rank bounds missing")))?;
                        let (u, s, v) = (take("U")?, take("S")?, take("V")?);
                        Weight::LowRank(LowRankFactors::from_parts(u, s, v, r_min, r_max)?)
                    }
                    "deploy" => {
                        let (left, right) = (take("US")?, take("V")?);
                        if left.cols() != right.cols() {
                            return Err(CliError::Checkpoint(format!("layer {k}: deploy factors disagree on rank")));
                        }
                        Weight::Deploy { left, right }
                    }
                    other => return Err(CliError::Checkpoint(format!("layer {k}: unknown form {other:?}"))),
                };
                let bias = take("bias")?;
                if weight.n_out() != n_out || weight.n_in() != n_in || bias.shape() != (n_out, 1) {
                    return Err(CliError::Checkpoint(format!("layer {k}: tensor shapes disagree with architecture")));
                }
                let affine = Affine { weight, bias: bias.into_vec(), activation: ls.activation() };
                match ls {
                    dlrt_core::netcore::LayerSpec::Conv { shape, .. } => Layer::Conv { shape: *shape, affine },
                    _ => Layer::Linear(affine),
                }
            }
        };
        layers.push(layer);
    }
    if !entries.is_empty() {
        return Err(CliError::Checkpoint("manifest lists layers the architecture does not have".into()));
    }
    let net = Network { layers };
    if net.spec() != *spec {
        return Err(CliError::Checkpoint("loaded tensors do not match the recorded architecture".into()));
    }
    Ok((net, manifest))
}
