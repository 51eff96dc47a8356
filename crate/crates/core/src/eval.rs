//! Gain-map metrics, slice exports and comparison reports.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::protocol::{gain_db, DB_FLOOR};
use crate::sim::{ChannelMap, MapKind};

/// `10·log10|h|²` over the grid, floored at −200 dB.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMap {
    pub n: usize,
    pub values: Vec<f64>,
    pub source: MapKind,
}

pub fn gain_map(map: &ChannelMap, source: MapKind) -> GainMap {
    GainMap {
        n: map.n,
        values: map.values.iter().map(|&h| gain_db(h, DB_FLOOR)).collect(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

/// Plane `axis = index` (0-based), written `x=8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SliceSpec {
    pub axis: Axis,
    pub index: usize,
}

impl fmt::Display for SliceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.axis, self.index)
    }
}

impl std::str::FromStr for SliceSpec {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || crate::Error::Config(format!("slice must look like x=8, got {s:?}"));
        let (axis, index) = s.split_once('=').ok_or_else(bad)?;
        let axis = match axis.trim().to_ascii_lowercase().as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            "z" => Axis::Z,
            _ => return Err(bad()),
        };
        let index = index.trim().parse().map_err(|_| bad())?;
        Ok(Self { axis, index })
    }
}

impl TryFrom<String> for SliceSpec {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SliceSpec> for String {
    fn from(s: SliceSpec) -> Self {
        s.to_string()
    }
}

/// One slice per axis through the grid midpoint.
pub fn default_slices(n: usize) -> Vec<SliceSpec> {
    [Axis::X, Axis::Y, Axis::Z]
        .into_iter()
        .map(|axis| SliceSpec { axis, index: n / 2 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    Slice(SliceSpec),
}

/// Flat indices of a slice in row-major order. Rows follow the lower of
/// the two remaining axes, columns the higher.
pub fn slice_indices(n: usize, spec: SliceSpec) -> Result<Vec<usize>> {
    ensure!(spec.index < n, Dimension, "slice {spec} outside a grid of {n}");
    let s = spec.index;
    let flat = |i: usize, j: usize, k: usize| i + n * (j + n * k);
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(match spec.axis {
                Axis::X => flat(s, r, c),
                Axis::Y => flat(r, s, c),
                Axis::Z => flat(r, c, s),
            });
        }
    }
    Ok(out)
}

pub fn mse(a: &GainMap, b: &GainMap, region: Region) -> Result<f64> {
    ensure!(
        a.n == b.n && a.values.len() == b.values.len(),
        Dimension,
        "gain maps of size {} and {} differ",
        a.n,
        b.n
    );
    let sq = |f: usize| {
        let d = a.values[f] - b.values[f];
        d * d
    };
    Ok(match region {
        Region::Full => (0..a.values.len()).map(sq).sum::<f64>() / a.values.len() as f64,
        Region::Slice(spec) => {
            let idx = slice_indices(a.n, spec)?;
            idx.iter().map(|&f| sq(f)).sum::<f64>() / idx.len() as f64
        }
    })
}

/// `Σ|ĥ − h|² / Σ|h|²`.
pub fn complex_nmse(truth: &ChannelMap, estimate: &ChannelMap) -> Result<f64> {
    ensure!(
        truth.n == estimate.n,
        Dimension,
        "maps of size {} and {} differ",
        truth.n,
        estimate.n
    );
    let err: f64 = truth
        .values
        .iter()
        .zip(&estimate.values)
        .map(|(h, e)| (e - h).norm_sqr())
        .sum();
    let pow: f64 = truth.values.iter().map(|h| h.norm_sqr()).sum();
    Ok(err / pow)
}

/// Writes `<stem>_<axis><index>.csv` and `.pgm` for each slice plus
/// `<stem>_range.txt` holding the dB range mapped onto gray levels.
pub fn export_slices(map: &GainMap, specs: &[SliceSpec], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = map.n;
    let mut written = Vec::new();
    for &spec in specs {
        let idx = slice_indices(n, spec)?;
        let base = format!("{stem}_{}{}", spec.axis, spec.index);

        let csv_path = dir.join(format!("{base}.csv"));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path)?;
        for row in idx.chunks(n) {
            w.write_record(row.iter().map(|&f| map.values[f].to_string()))?;
        }
        w.flush()?;
        written.push(csv_path);

        let pgm_path = dir.join(format!("{base}.pgm"));
        let mut pgm = format!("P5\n{n} {n}\n255\n").into_bytes();
        pgm.extend(idx.iter().map(|&f| gray_level(map.values[f], lo, hi)));
        fs::write(&pgm_path, pgm)?;
        written.push(pgm_path);
    }
    let range_path = dir.join(format!("{stem}_range.txt"));
    fs::write(
        &range_path,
        format!(
            "source {}\nmin_db {lo}\nmax_db {hi}\nblack min_db\nwhite max_db\n",
            kind_name(map.source)
        ),
    )?;
    written.push(range_path);
    Ok(written)
}

fn gray_level(v: f64, lo: f64, hi: f64) -> u8 {
    if !(hi > lo) {
        return 0;
    }
    (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads back a slice CSV written by [`export_slices`].
pub fn read_slice_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| crate::Error::Format(format!("{}: bad value {v:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn kind_name(kind: MapKind) -> &'static str {
    match kind {
        MapKind::GroundTruth => "ground_truth",
        MapKind::Measured => "measured",
        MapKind::Cnn => "cnn",
        MapKind::Trilinear => "trilinear",
    }
}

/// Errors of one reconstruction method against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: MapKind,
    /// dB-gain MSE over the whole grid.
    pub mse_3d: f64,
    pub mse_slices: Vec<(SliceSpec, f64)>,
    pub nmse_complex: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    /// Number of maps averaged into the scores.
    pub receivers: usize,
    pub methods: Vec<MethodScores>,
    /// `100·(1 − mse_cnn/mse_trilinear)` on the 3D MSE.
    pub reduction_pct: f64,
}

impl EvalReport {
    pub fn method(&self, kind: MapKind) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.fingerprint);
        let _ = writeln!(s, "receivers: {}", self.receivers);
        let mut header = format!("{:<12} {:>12}", "method", "3d");
        if let Some(first) = self.methods.first() {
            for (spec, _) in &first.mse_slices {
                let _ = write!(header, " {:>12}", spec.to_string());
            }
        }
        let _ = write!(header, " {:>12}", "nmse");
        let _ = writeln!(s, "{header}");
        for m in &self.methods {
            let _ = write!(s, "{:<12} {:>12.4}", kind_name(m.method), m.mse_3d);
            for (_, v) in &m.mse_slices {
                let _ = write!(s, " {v:>12.4}");
            }
            let _ = writeln!(s, " {:>12.4e}", m.nmse_complex);
        }
        let _ = writeln!(s, "cnn vs trilinear 3d mse reduction: {:.2}%", self.reduction_pct);
        s
    }

    /// Long format: `method,region,metric,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "region", "metric", "value"])?;
        for m in &self.methods {
            let name = kind_name(m.method);
            w.write_record([name, "3d", "mse_db", &m.mse_3d.to_string()])?;
            for (spec, v) in &m.mse_slices {
                w.write_record([name, &spec.to_string(), "mse_db", &v.to_string()])?;
            }
            w.write_record([name, "3d", "nmse_complex", &m.nmse_complex.to_string()])?;
        }
        w.write_record([
            "cnn_vs_trilinear",
            "3d",
            "reduction_pct",
            &self.reduction_pct.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// One receiver's maps.
#[derive(Debug, Clone, Copy)]
pub struct MapTriple<'a> {
    pub truth: &'a ChannelMap,
    pub cnn: &'a ChannelMap,
    pub trilinear: &'a ChannelMap,
}

pub fn compare(
    truth: &ChannelMap,
    cnn: &ChannelMap,
    trilinear: &ChannelMap,
    slices: &[SliceSpec],
    fingerprint: &str,
) -> Result<EvalReport> {
    compare_many(&[MapTriple { truth, cnn, trilinear }], slices, fingerprint)
}

/// Scores averaged over receivers (equal-size maps, so this equals the
/// pooled MSE).
pub fn compare_many(maps: &[MapTriple<'_>], slices: &[SliceSpec], fingerprint: &str) -> Result<EvalReport> {
    ensure!(!maps.is_empty(), Config, "nothing to evaluate");
    let mut methods: Vec<MethodScores> = [MapKind::Cnn, MapKind::Trilinear]
        .into_iter()
        .map(|method| MethodScores {
            method,
            mse_3d: 0.0,
            mse_slices: slices.iter().map(|&s| (s, 0.0)).collect(),
            nmse_complex: 0.0,
        })
        .collect();
    let scale = 1.0 / maps.len() as f64;
    for t in maps {
        let truth = gain_map(t.truth, MapKind::GroundTruth);
        for (scores, est) in methods.iter_mut().zip([t.cnn, t.trilinear]) {
            let g = gain_map(est, scores.method);
            scores.mse_3d += scale * mse(&truth, &g, Region::Full)?;
            for (spec, v) in &mut scores.mse_slices {
                *v += scale * mse(&truth, &g, Region::Slice(*spec))?;
            }
            scores.nmse_complex += scale * complex_nmse(t.truth, est)?;
        }
    }
    let reduction_pct = 100.0 * (1.0 - methods[0].mse_3d / methods[1].mse_3d);
    Ok(EvalReport {
        fingerprint: fingerprint.to_string(),
        receivers: maps.len(),
        methods,
        reduction_pct,
    })
}
