//! Checkpoint directories: `manifest.json` plus one parameter blob per
//! component, each guarded by a SHA-256 checksum.
//!
//! Blob layout (little endian): magic `P2IB`, dtype byte size (u32), tensor
//! count (u32), then per tensor the name length (u32), the UTF-8 name, the
//! rank (u32), each dimension (u64) and the raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{ModelBundle, NetworkConfig, SceneMeta};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"P2IB";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub config_hash: String,
    pub phase: u8,
    pub step: u64,
    pub dtype: String,
    pub scene: SceneMeta,
    pub blobs: BTreeMap<String, BlobEntry>,
    pub checkpoint_id: String,
}

pub fn config_hash(cfg: &NetworkConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn checkpoint_id(config_hash: &str, blobs: &BTreeMap<String, BlobEntry>) -> String {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    for (name, b) in blobs {
        h.update(name.as_bytes());
        h.update(b.sha256.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn encode_blob<T: Real>(m: &dyn crate::nn::Module<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    m.visit("", &mut |name, p| tensors.push((name.to_string(), p.value.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("blob {} is truncated", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_blob<T: Real>(what: &str, buf: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut r = Reader { buf, pos: 0, what };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("blob {what} has a bad magic number")));
    }
    let bytes = r.u32()? as usize;
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format(format!("blob {what} has a non-UTF-8 name")))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * bytes)?;
        let data: Vec<T> = match bytes {
            4 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            8 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
            other => return Err(Error::Format(format!("blob {what}: unsupported value size {other}"))),
        };
        out.insert(name, Tensor::from_vec(&shape, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("blob {what} has trailing bytes")));
    }
    Ok(out)
}

/// Writes `bundle` to `dir` (created if needed) and returns the manifest.
pub fn save_checkpoint<T: Real>(bundle: &ModelBundle<T>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blobs = BTreeMap::new();
    let mut result = Ok(());
    bundle.components(&mut |name, m| {
        if result.is_err() {
            return;
        }
        let bytes = encode_blob(m);
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        result = fs::write(&path, &bytes).map_err(|e| Error::io(&path, e));
        blobs.insert(
            name.to_string(),
            BlobEntry {
                file,
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
    });
    result?;
    let hash = config_hash(&bundle.config);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        checkpoint_id: checkpoint_id(&hash, &blobs),
        config_hash: hash,
        phase: bundle.phase,
        step: bundle.step,
        dtype: T::DTYPE.to_string(),
        scene: bundle.scene,
        blobs,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            m.format_version
        )));
    }
    if config_hash(&m.config) != m.config_hash {
        return Err(Error::Format("manifest config does not match its config hash".into()));
    }
    Ok(m)
}

/// Loads a checkpoint, refusing it when `expected` is given and differs
/// from the stored configuration.
pub fn load_checkpoint<T: Real>(dir: &Path, expected: Option<&NetworkConfig>) -> Result<(ModelBundle<T>, Manifest)> {
    let m = read_manifest(dir)?;
    if let Some(cfg) = expected {
        if config_hash(cfg) != m.config_hash {
            return Err(Error::Config(
                "checkpoint was saved with a different network config".into(),
            ));
        }
    }
    let mut bundle = ModelBundle::<T>::new(m.config.clone(), m.scene, 0)?;
    bundle.phase = m.phase;
    bundle.step = m.step;
    let mut tensors: BTreeMap<String, BTreeMap<String, Tensor<T>>> = BTreeMap::new();
    let mut expected_names = Vec::new();
    bundle.components(&mut |name, _| expected_names.push(name.to_string()));
    for name in &expected_names {
        let entry = m
            .blobs
            .get(name)
            .ok_or_else(|| Error::Format(format!("manifest lists no blob for {name}")))?;
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checksum(path.display().to_string()));
        }
        tensors.insert(name.clone(), decode_blob(name, &bytes)?);
    }
    let mut problem = None;
    bundle.components_mut(&mut |name, module| {
        let blob = &tensors[name];
        let mut seen = 0;
        module.visit_mut("", &mut |pname, p| match blob.get(pname) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value = t.clone();
                seen += 1;
            }
            Some(t) => {
                problem.get_or_insert(format!(
                    "{name}.{pname}: stored shape {:?} differs from {:?}",
                    t.shape(),
                    p.value.shape()
                ));
            }
            None => {
                problem.get_or_insert(format!("{name}.{pname} missing from blob"));
            }
        });
        if seen != blob.len() {
            problem.get_or_insert(format!("{name} blob has unexpected tensors"));
        }
    });
    if let Some(p) = problem {
        return Err(Error::Format(p));
    }
    Ok((bundle, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::SceneBounds;

    fn bundle() -> ModelBundle<f32> {
        let cfg = NetworkConfig {
            resolution: 8,
            g_channels: vec![8, 6],
            d_channels: vec![16],
            latent_dim: 16,
            head_hidden: 8,
            enet_blocks: 1,
            enet_channels: 4,
            ..NetworkConfig::default()
        };
        let scene = SceneMeta {
            bounds: SceneBounds::new([0.5, 0.0, -1.0], [2.0, 1.0, 2.0]).unwrap(),
            depth_max_m: 3.5,
        };
        let mut b = ModelBundle::new(cfg, scene, 4).unwrap();
        b.step = 17;
        b.phase = 2;
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        let m = save_checkpoint(&b, dir.path()).unwrap();
        let (l, m2) = load_checkpoint::<f32>(dir.path(), Some(&b.config)).unwrap();
        assert_eq!(m, m2);
        assert_eq!((l.phase, l.step, l.scene), (2, 17, b.scene));
        let y = Tensor::from_vec(&[1, 7], vec![0.1, -0.2, 0.3, 0.9, 0.1, 0.0, -0.1]);
        assert_eq!(b.synthesize(&y, true).unwrap().0.data(), l.synthesize(&y, true).unwrap().0.data());
        let mut h1 = Vec::new();
        b.components(&mut |_, m| m.visit("", &mut |_, p| h1.extend(p.value.data().iter().map(|v| v.to_bits()))));
        let mut h2 = Vec::new();
        l.components(&mut |_, m| m.visit("", &mut |_, p| h2.extend(p.value.data().iter().map(|v| v.to_bits()))));
        assert_eq!(h1, h2);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&bundle(), dir.path()).unwrap();
        let p = dir.path().join("g.bin");
        let mut bytes = fs::read(&p).unwrap();
        let k = bytes.len() - 3;
        bytes[k] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), None), Err(Error::Checksum(_))));
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), None), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        save_checkpoint(&b, dir.path()).unwrap();
        let other = NetworkConfig {
            use_attention: false,
            ..b.config.clone()
        };
        assert!(matches!(
            load_checkpoint::<f32>(dir.path(), Some(&other)),
            Err(Error::Config(_))
        ));
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path(), None), Err(Error::Format(_))));
    }

    #[test]
    fn ablated_bundle_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bundle();
        b = ModelBundle::new(
            crate::networks::Ablation::MINIMALIST.apply(&b.config),
            b.scene,
            1,
        )
        .unwrap();
        let m = save_checkpoint(&b, dir.path()).unwrap();
        assert_eq!(m.blobs.keys().collect::<Vec<_>>(), ["d_trunk", "g", "m_d"]);
        let (l, _) = load_checkpoint::<f32>(dir.path(), None).unwrap();
        assert_eq!(l.param_count(), b.param_count());
    }
}
