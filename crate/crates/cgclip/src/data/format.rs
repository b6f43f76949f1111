//! On-disk dataset format: a JSON manifest plus one binary tensor file per
//! tracklet. Round-trips are bit-exact; regeneration under the same config
//! and seed is byte-identical.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Attributes, Caption, Dataset, Frame, GenConfig, Identity, Tracklet};
use crate::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"CGT1";
const DTYPE_F32: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: GenConfig,
    identities: Vec<ManifestIdentity>,
    tracklets: Vec<ManifestTracklet>,
    captions: Vec<ManifestCaption>,
}

#[derive(Serialize, Deserialize)]
struct ManifestIdentity {
    label: usize,
    attributes: Attributes,
}

#[derive(Serialize, Deserialize)]
struct ManifestTracklet {
    id: usize,
    identity: usize,
    camera: usize,
    frames: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestCaption {
    identity: usize,
    tokens: Vec<usize>,
}

/// Writes an f32 tensor: magic, dtype tag, rank, u32 dims, little-endian
/// payload.
pub fn write_tensor_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Format(format!(
            "tensor file shape {:?} vs {} values",
            shape,
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(DTYPE_F32);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 6 || &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("{}: bad tensor magic", path.display())));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::Format(format!("{}: unsupported dtype {}", path.display(), bytes[4])));
    }
    let rank = bytes[5] as usize;
    let mut off = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let dim = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(dim);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + numel * 4 {
        return Err(Error::Format(format!("{}: truncated payload", path.display())));
    }
    let data = bytes[off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, data))
}

fn tracklet_file(id: usize) -> String {
    format!("tracklets/trk_{:05}.bin", id)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("tracklets"))?;
    let (h, w, c) = dataset.frame_shape();
    let mut tracklets = Vec::with_capacity(dataset.tracklets.len());
    for t in &dataset.tracklets {
        let file = tracklet_file(t.id);
        let mut flat = Vec::with_capacity(t.frames.len() * h * w * c);
        for frame in &t.frames {
            flat.extend_from_slice(&frame.pixels);
        }
        write_tensor_f32(&dir.join(&file), &[t.frames.len(), h, w, c], &flat)?;
        tracklets.push(ManifestTracklet {
            id: t.id,
            identity: t.identity,
            camera: t.camera,
            frames: t.frames.len(),
            file,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: dataset.config.clone(),
        identities: dataset
            .identities
            .iter()
            .map(|i| ManifestIdentity {
                label: i.label,
                attributes: i.attrs,
            })
            .collect(),
        tracklets,
        captions: dataset
            .captions
            .iter()
            .map(|c| ManifestCaption {
                identity: c.identity,
                tokens: c.tokens.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let (h, w, c) = (manifest.config.height, manifest.config.width, 3);
    let mut tracklets = Vec::with_capacity(manifest.tracklets.len());
    for mt in &manifest.tracklets {
        let (shape, data) = read_tensor_f32(&dir.join(&mt.file))?;
        if shape != vec![mt.frames, h, w, c] {
            return Err(Error::Format(format!(
                "{}: shape {:?} disagrees with manifest",
                mt.file, shape
            )));
        }
        let frames = data
            .chunks(h * w * c)
            .map(|px| Frame {
                pixels: px.to_vec(),
            })
            .collect();
        tracklets.push(Tracklet {
            id: mt.id,
            identity: mt.identity,
            camera: mt.camera,
            frames,
        });
    }
    Ok(Dataset {
        config: manifest.config,
        identities: manifest
            .identities
            .into_iter()
            .map(|i| Identity {
                label: i.label,
                attrs: i.attributes,
            })
            .collect(),
        tracklets,
        captions: manifest
            .captions
            .into_iter()
            .map(|c| Caption {
                identity: c.identity,
                tokens: c.tokens,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_dataset;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let config = GenConfig {
            identities: 4,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let ds = gen_synthetic_dataset(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();

        assert_eq!(loaded.config, ds.config);
        assert_eq!(loaded.tracklets.len(), ds.tracklets.len());
        for (a, b) in ds.tracklets.iter().zip(&loaded.tracklets) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.camera, b.camera);
        }
        for (a, b) in ds.captions.iter().zip(&loaded.captions) {
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn regeneration_writes_identical_bytes() {
        let config = GenConfig {
            identities: 4,
            tracklets_per_identity: 2,
            ..GenConfig::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_dataset(&gen_synthetic_dataset(&config).unwrap(), dir_a.path()).unwrap();
        save_dataset(&gen_synthetic_dataset(&config).unwrap(), dir_b.path()).unwrap();

        let manifest_a = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        let trk_a = fs::read(dir_a.path().join("tracklets/trk_00000.bin")).unwrap();
        let trk_b = fs::read(dir_b.path().join("tracklets/trk_00000.bin")).unwrap();
        assert_eq!(trk_a, trk_b);
    }

    #[test]
    fn tensor_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_tensor_f32(&path, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(read_tensor_f32(&path).is_err());
    }
}
