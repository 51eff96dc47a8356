//! Multi-receiver dataset generation and the binary map-file format.
//!
//! Map file layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes   "CHMAPDS1"
//! hdr_len    u64       length of the JSON header in bytes
//! header     hdr_len   UTF-8 JSON MapFileHeader
//! records    M × N³ × (f64 re, f64 im), flat index i + N·(j + N·k)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{
    add_measurement_noise, generate_map, random_unit_vector, sample_prv, uniform, ChannelMap, PathComponent, PathGains,
    Scenario,
};
use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::{derive_seed, stream, stream_rng, Rng};

const MAGIC: &[u8; 8] = b"CHMAPDS1";

/// Draws `num_paths` T-MPCs at uniformly random directions, unit range.
pub fn sample_environment(num_paths: usize, rng: &mut Rng) -> Result<Vec<PathComponent>> {
    ensure!(num_paths >= 1, Config, "need at least one path");
    (0..num_paths)
        .map(|_| PathComponent::from_coord(random_unit_vector(rng)))
        .collect()
}

/// Receiver placement for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of receiver locations `M`.
    pub receivers: usize,
    #[serde(default = "DatasetSpec::default_min")]
    pub min_distance_m: f64,
    #[serde(default = "DatasetSpec::default_max")]
    pub max_distance_m: f64,
}

impl Default for DatasetSpec {
    /// 3240 receivers.
    fn default() -> Self {
        Self::new(3240)
    }
}

impl DatasetSpec {
    fn default_min() -> f64 {
        20.0
    }

    fn default_max() -> f64 {
        80.0
    }

    pub fn new(receivers: usize) -> Self {
        Self {
            receivers,
            min_distance_m: Self::default_min(),
            max_distance_m: Self::default_max(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.receivers >= 1, Config, "dataset needs at least one receiver");
        ensure!(
            self.min_distance_m > 0.0 && self.max_distance_m >= self.min_distance_m,
            Config,
            "receiver distance range [{}, {}] is invalid",
            self.min_distance_m,
            self.max_distance_m
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receiver {
    pub id: usize,
    pub distance_m: f64,
    pub direction: [f64; 3],
    pub gains: PathGains,
}

/// All receivers of one shared environment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: Scenario,
    pub spec: DatasetSpec,
    pub environment_seed: u64,
    pub environment: Vec<PathComponent>,
    pub receivers: Vec<Receiver>,
    pub truth: Vec<ChannelMap>,
    pub measured: Vec<ChannelMap>,
}

impl Dataset {
    pub fn header(&self, kind: MapKind) -> MapFileHeader {
        MapFileHeader {
            kind,
            scenario: self.scenario.clone(),
            receivers: self.receivers.len(),
            environment_seed: self.environment_seed,
            receiver_ids: self.receivers.iter().map(|r| r.id).collect(),
        }
    }
}

/// Generates ground-truth and noisy maps for `spec.receivers` receivers
/// sharing one environment. Each receiver draws from its own stream keyed
/// by `(rng_seed, index)`, so results do not depend on worker count.
pub fn generate_dataset(scenario: &Scenario, spec: &DatasetSpec) -> Result<Dataset> {
    scenario.validate()?;
    spec.validate()?;
    let environment_seed = derive_seed(scenario.rng_seed, stream::ENVIRONMENT, 0);
    let environment = sample_environment(scenario.num_paths, &mut Rng::seed_from_u64(environment_seed))?;
    let per_receiver = par::map_range(spec.receivers, |m| -> Result<_> {
        let mut rng = stream_rng(scenario.rng_seed, stream::RECEIVER, m as u64);
        let distance_m = uniform(&mut rng, spec.min_distance_m, spec.max_distance_m);
        let direction = random_unit_vector(&mut rng);
        let gains = sample_prv(scenario, distance_m, &mut rng)?;
        let truth = generate_map(scenario, &gains, &environment)?;
        let mut noise_rng = stream_rng(scenario.rng_seed, stream::NOISE, m as u64);
        let measured = add_measurement_noise(&truth, scenario.snr_db, &mut noise_rng)?;
        let receiver = Receiver {
            id: m,
            distance_m,
            direction,
            gains,
        };
        Ok((receiver, truth, measured))
    });
    let mut receivers = Vec::with_capacity(spec.receivers);
    let mut truth = Vec::with_capacity(spec.receivers);
    let mut measured = Vec::with_capacity(spec.receivers);
    for r in per_receiver {
        let (rx, t, m) = r?;
        receivers.push(rx);
        truth.push(t);
        measured.push(m);
    }
    Ok(Dataset {
        scenario: scenario.clone(),
        spec: spec.clone(),
        environment_seed,
        environment,
        receivers,
        truth,
        measured,
    })
}

/// What the maps in a file represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    GroundTruth,
    Measured,
    Cnn,
    Trilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFileHeader {
    pub kind: MapKind,
    pub scenario: Scenario,
    /// Number of records `M`.
    pub receivers: usize,
    pub environment_seed: u64,
    pub receiver_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MapFile {
    pub header: MapFileHeader,
    pub maps: Vec<ChannelMap>,
}

impl MapFile {
    /// Map of receiver `id`, if present.
    pub fn by_id(&self, id: usize) -> Option<&ChannelMap> {
        self.header
            .receiver_ids
            .iter()
            .position(|&r| r == id)
            .map(|i| &self.maps[i])
    }
}

pub fn write_map_file(path: &Path, header: &MapFileHeader, maps: &[ChannelMap]) -> Result<()> {
    ensure!(
        header.receivers == maps.len() && header.receiver_ids.len() == maps.len(),
        Dimension,
        "header announces {} records ({} ids), got {} maps",
        header.receivers,
        header.receiver_ids.len(),
        maps.len()
    );
    let n = header.scenario.grid_n;
    for m in maps {
        ensure!(m.n == n, Dimension, "map of size {} in a file of grid_n {n}", m.n);
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(16 * n * n * n);
    for m in maps {
        buf.clear();
        for h in &m.values {
            buf.extend_from_slice(&h.re.to_le_bytes());
            buf.extend_from_slice(&h.im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_map_file(path: &Path) -> Result<MapFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a channel-map file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    ensure!(len < 1 << 30, Format, "header length {len} is implausible");
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: MapFileHeader = serde_json::from_slice(&json)?;
    header.scenario.validate()?;
    ensure!(
        header.receiver_ids.len() == header.receivers,
        Format,
        "{} receiver ids for {} records",
        header.receiver_ids.len(),
        header.receivers
    );
    let n = header.scenario.grid_n;
    let spacing = header.scenario.spacing_m();
    let mut buf = vec![0u8; 16 * n * n * n];
    let mut maps = Vec::with_capacity(header.receivers);
    for _ in 0..header.receivers {
        r.read_exact(&mut buf)?;
        let values = buf
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                    f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
                )
            })
            .collect();
        maps.push(ChannelMap::new(n, spacing, values)?);
    }
    let mut rest = [0u8; 1];
    ensure!(
        r.read(&mut rest)? == 0,
        Format,
        "trailing bytes after {} records",
        header.receivers
    );
    Ok(MapFile { header, maps })
}
