//! Checkpoints: a TOML manifest describing the model plus a binary blob
//! of named f64 tensors. Loading is strict; any path or shape drift from
//! the configured architecture is a mismatch error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{FocalParams, HeadSpec};
use crate::error::{Error, Result};
use crate::nn::params::{checksum_params, Model};
use crate::vae::{BackboneSpec, Encoder, Family, InitKind, VaeModel};

const MAGIC: &[u8; 4] = b"LLWB";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Vae,
    Encoder,
    Classifier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerNote {
    pub name: String,
    pub learning_rate: f64,
    /// "none" when no learning-rate schedule is applied.
    pub schedule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpolation: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub feature_dim: usize,
    pub resolution: usize,
    pub init: InitKind,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub param_checksum: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerNote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<FocalParams>,
}

impl CheckpointManifest {
    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            family: self.family,
            stage_widths: self.stage_widths.clone(),
            feature_dim: self.feature_dim,
            init: self.init,
        }
    }
}

/// Serializes every parameter in visit order: path, dims, little-endian
/// f64 data. Byte-identical for identical weights.
pub fn save_weights(model: &dyn Model, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p, v| {
        entries.push((
            p.to_string(),
            v.shape().to_vec(),
            v.iter().cloned().collect(),
        ));
    });
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (p, shape, data) in &entries {
        buf.extend_from_slice(&(p.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
        buf.push(shape.len() as u8);
        for d in shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| {
        Error::CheckpointMismatch(format!("{}: truncated weights file", path.display()))
    })?;
    Ok(b)
}

/// Parses a weights blob into a path-keyed tensor map.
pub fn read_weights(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let magic = read_exact::<4>(&mut f, path)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointMismatch(format!(
            "{}: not a weights file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut f, path)?);
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "{}: unsupported weights version {version}",
            path.display()
        )));
    }
    let count = u64::from_le_bytes(read_exact::<8>(&mut f, path)?);
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let plen = u16::from_le_bytes(read_exact::<2>(&mut f, path)?) as usize;
        let mut pbuf = vec![0u8; plen];
        f.read_exact(&mut pbuf).map_err(|_| {
            Error::CheckpointMismatch(format!("{}: truncated path", path.display()))
        })?;
        let p = String::from_utf8(pbuf)
            .map_err(|_| Error::CheckpointMismatch(format!("{}: non-utf8 path", path.display())))?;
        let ndim = read_exact::<1>(&mut f, path)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact::<8>(&mut f, path)?) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut f, path)?));
        }
        let arr = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| Error::CheckpointMismatch(format!("{}: {e}", path.display())))?;
        if map.insert(p.clone(), arr).is_some() {
            return Err(Error::CheckpointMismatch(format!(
                "{}: duplicate parameter {p}",
                path.display()
            )));
        }
    }
    Ok(map)
}

/// Loads a blob into a model, requiring the path sets and shapes to match
/// exactly in both directions.
pub fn load_weights_into(model: &mut dyn Model, path: &Path) -> Result<()> {
    let map = read_weights(path)?;
    let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    model.visit_params(&mut |p, v| {
        expected.insert(p.to_string(), v.shape().to_vec());
    });
    for (p, shape) in &expected {
        match map.get(p) {
            None => {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {p} missing from {}",
                    path.display()
                )))
            }
            Some(arr) if arr.shape() != shape.as_slice() => {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {p} has shape {:?}, model expects {:?}",
                    arr.shape(),
                    shape
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = map.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::CheckpointMismatch(format!(
            "unexpected parameter {extra} in {}",
            path.display()
        )));
    }
    model.visit_params_mut(&mut |p, mut v| {
        v.assign(&map[p]);
    });
    Ok(())
}

/// Writes `manifest.toml` + `weights.bin` into `dir`, creating it.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    model: &dyn Model,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let toml = toml::to_string_pretty(manifest)
        .map_err(|e| Error::InvalidConfig(format!("manifest serialization: {e}")))?;
    std::fs::write(&man_path, toml).map_err(|e| Error::io(&man_path, e))?;
    save_weights(model, &dir.join(WEIGHTS_FILE))?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&s).map_err(|e| {
        Error::CheckpointMismatch(format!("{}: manifest parse error: {e}", path.display()))
    })
}

fn verify_checksum(dir: &Path, manifest: &CheckpointManifest, model: &dyn Model) -> Result<()> {
    let sum = checksum_params(model, "");
    if sum != manifest.param_checksum {
        return Err(Error::CheckpointMismatch(format!(
            "{}: loaded weights checksum {sum} does not match manifest {}",
            dir.display(),
            manifest.param_checksum
        )));
    }
    Ok(())
}

/// Rebuilds a full VAE from a checkpoint directory.
pub fn load_vae(dir: &Path) -> Result<(VaeModel, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Vae {
        return Err(Error::CheckpointMismatch(format!(
            "{}: expected a vae checkpoint, found {:?}",
            dir.display(),
            manifest.kind
        )));
    }
    let latent = manifest.latent_dim.ok_or_else(|| {
        Error::CheckpointMismatch(format!("{}: vae manifest lacks latent_dim", dir.display()))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vae = VaeModel::new(
        manifest.backbone_spec(),
        manifest.resolution,
        latent,
        &mut rng,
    )?;
    load_weights_into(&mut vae, &dir.join(WEIGHTS_FILE))?;
    verify_checksum(dir, &manifest, &vae)?;
    Ok((vae, manifest))
}

/// Rebuilds a bare encoder from a checkpoint directory.
pub fn load_encoder(dir: &Path) -> Result<(Encoder, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Encoder {
        return Err(Error::CheckpointMismatch(format!(
            "{}: expected an encoder checkpoint, found {:?}",
            dir.display(),
            manifest.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut enc = Encoder::new(manifest.backbone_spec(), manifest.resolution, &mut rng)?;
    load_weights_into(&mut enc, &dir.join(WEIGHTS_FILE))?;
    verify_checksum(dir, &manifest, &enc)?;
    Ok((enc, manifest))
}
