//! Model parameter files.
//!
//! Layout: magic `CHMAPNET`, `u64` LE header length, JSON header, then a
//! flat little-endian payload. The header's manifest gives the name,
//! shape and byte offset of every tensor, including batch-norm running
//! statistics.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ChannelMapNet, NetConfig};
use crate::nn::{Real, Tensor};
use crate::protocol::{select_positions, SelectionGrid, TransformParams};
use crate::rng::Rng;
use rand::SeedableRng;

const MAGIC: &[u8; 8] = b"CHMAPNET";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to turn measurements into network input and back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub grid_n: usize,
    pub alpha: usize,
    pub spacing_m: f64,
    pub transform: TransformParams,
    pub label_fraction: f64,
    pub mask_seed: u64,
}

impl Preprocessing {
    pub fn grid(&self) -> Result<SelectionGrid> {
        select_positions(self.grid_n, self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub dtype: String,
    pub net: NetConfig,
    pub preprocessing: Preprocessing,
    pub manifest: Vec<ManifestEntry>,
    pub payload_bytes: usize,
}

pub fn save_model<T: Real>(path: &Path, net: &mut ChannelMapNet<T>, preprocessing: &Preprocessing) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, kind, shape: Vec<usize>, values: &[T]| {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            kind,
            shape,
            offset: payload.len(),
        });
        values.iter().for_each(|&v| v.write_le(&mut payload));
    };
    for p in net.params() {
        push(&p.name, EntryKind::Param, p.value.shape().to_vec(), p.value.data());
    }
    for b in net.buffers_mut() {
        push(&b.name, EntryKind::Buffer, vec![b.values.len()], b.values);
    }
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        net: net.config,
        preprocessing: preprocessing.clone(),
        manifest,
        payload_bytes: payload.len(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_model_header(bytes: &[u8]) -> Result<(ModelHeader, &[u8])> {
    ensure!(
        bytes.len() >= 16 && &bytes[..8] == MAGIC,
        Format,
        "not a model parameter file"
    );
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    ensure!(bytes.len() >= 16 + len, Format, "truncated header");
    let header: ModelHeader = serde_json::from_slice(&bytes[16..16 + len])?;
    ensure!(
        header.format_version == FORMAT_VERSION,
        Format,
        "unsupported model format version {}",
        header.format_version
    );
    let payload = &bytes[16 + len..];
    ensure!(
        payload.len() == header.payload_bytes,
        Format,
        "payload holds {} bytes, header says {}",
        payload.len(),
        header.payload_bytes
    );
    Ok((header, payload))
}

/// Loads a network, converting the stored dtype to `T` if necessary.
pub fn load_model<T: Real>(path: &Path) -> Result<(ChannelMapNet<T>, Preprocessing)> {
    let bytes = fs::read(path)?;
    let (header, payload) = read_model_header(&bytes)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
    };
    let decode = |entry: &ManifestEntry| -> Result<Vec<T>> {
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * width;
        ensure!(
            end <= payload.len(),
            Format,
            "tensor {} runs past the payload",
            entry.name
        );
        Ok(payload[entry.offset..end]
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64_lossy(f32::read_le(c) as f64),
                _ => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect())
    };
    let find = |name: &str, kind| {
        header
            .manifest
            .iter()
            .find(|e| e.name == name && e.kind == kind)
            .ok_or_else(|| Error::Format(format!("model file lacks tensor {name}")))
    };

    let mut net = ChannelMapNet::<T>::new(header.net, &mut Rng::seed_from_u64(0))?;
    let expected = net.params().len() + net.buffers_mut().len();
    ensure!(
        header.manifest.len() == expected,
        Format,
        "manifest lists {} tensors, the architecture has {expected}",
        header.manifest.len()
    );
    for p in net.params_mut() {
        let entry = find(&p.name, EntryKind::Param)?;
        ensure!(
            entry.shape == p.value.shape(),
            Format,
            "tensor {} has shape {:?}, expected {:?}",
            p.name,
            entry.shape,
            p.value.shape()
        );
        p.value = Tensor::from_vec(&entry.shape, decode(entry)?)?;
    }
    for b in net.buffers_mut() {
        let entry = find(&b.name, EntryKind::Buffer)?;
        ensure!(
            entry.shape == [b.values.len()],
            Format,
            "buffer {} has shape {:?}",
            b.name,
            entry.shape
        );
        *b.values = decode(entry)?;
    }
    header.preprocessing.transform.validate()?;
    Ok((net, header.preprocessing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::random_tensor;
    use crate::nn::Mode;

    fn prep() -> Preprocessing {
        Preprocessing {
            grid_n: 6,
            alpha: 2,
            spacing_m: 0.1,
            transform: TransformParams::identity(-200.0),
            label_fraction: 0.3,
            mask_seed: 9,
        }
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.chmapnet");
        let mut rng = Rng::seed_from_u64(4);
        let mut net = ChannelMapNet::<f32>::new(NetConfig::with_hidden(4), &mut rng).unwrap();
        net.blocks[2].bn1.running_mean[1] = 0.25;
        net.blocks[5].bn1.running_var[0] = 3.0;
        save_model(&path, &mut net, &prep()).unwrap();
        let (mut back, p) = load_model::<f32>(&path).unwrap();
        assert_eq!(p, prep());
        let x: Tensor<f32> = random_tensor(&[1, 3, 6, 6, 6], &mut rng).cast();
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = back.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);

        let (as64, _) = load_model::<f64>(&path).unwrap();
        assert_eq!(as64.blocks[5].bn1.running_var[0], 3.0);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.chmapnet");
        let mut net = ChannelMapNet::<f32>::new(NetConfig::with_hidden(2), &mut Rng::seed_from_u64(1)).unwrap();
        save_model(&path, &mut net, &prep()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Format(_))));
        fs::write(&path, b"CHMAPDS1xxxxxxxx").unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Format(_))));
    }
}
