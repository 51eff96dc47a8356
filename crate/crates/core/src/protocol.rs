//! Measurement protocol and data processing: α-strided position
//! selection, input/label masks, the affine channel transforms, and the
//! gather/scatter between the full grid and the measured subgrid.
//!
//! Real-valued per-location tensors use channel-major layout
//! `3 × N³` (channels: transformed Re, Im, dB gain), spatial flat index
//! `i + N·(j + N·k)` as in [`ChannelMap`]. Subgrid tensors use the same
//! layout over `N̄³`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::sim::ChannelMap;

/// Number of real channels per grid point.
pub const CHANNELS: usize = 3;

/// Default floor for `10·log10|h|²`.
pub const DB_FLOOR: f64 = -200.0;

/// Default share of measured points held out as labels.
pub const LABEL_FRACTION: f64 = 0.3;

/// `10·log10|h|²`, clamped below at `floor`.
pub fn gain_db(h: Complex64, floor: f64) -> f64 {
    let p = h.norm_sqr();
    if p > 0.0 {
        (10.0 * p.log10()).max(floor)
    } else {
        floor
    }
}

/// α-strided measurement positions, identical on every axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionGrid {
    pub n: usize,
    pub alpha: usize,
    /// Selected per-axis indices, 0-based: `0, α, 2α, …`.
    pub selected_indices: Vec<usize>,
    /// `N̄ = ⌈N/α⌉`.
    pub n_bar: usize,
    /// `Q = N̄³`.
    pub q: usize,
}

pub fn select_positions(n: usize, alpha: usize) -> Result<SelectionGrid> {
    ensure!(alpha >= 2, Config, "alpha must be at least 2, got {alpha}");
    ensure!(n >= 2, Config, "grid needs at least 2 points per axis, got {n}");
    let selected_indices: Vec<usize> = (0..n).step_by(alpha).collect();
    let n_bar = selected_indices.len();
    debug_assert_eq!(n_bar, n.div_ceil(alpha));
    Ok(SelectionGrid {
        n,
        alpha,
        selected_indices,
        n_bar,
        q: n_bar * n_bar * n_bar,
    })
}

impl SelectionGrid {
    /// Fraction `Q/N³` of grid points that are measured.
    pub fn fraction(&self) -> f64 {
        self.q as f64 / (self.n * self.n * self.n) as f64
    }

    /// Subgrid position of full-grid axis index `i`, if selected.
    pub fn subgrid_index(&self, i: usize) -> Option<usize> {
        (i < self.n && i % self.alpha == 0).then_some(i / self.alpha)
    }

    /// Full-grid flat index of every subgrid point, in subgrid flat order.
    pub fn full_indices(&self) -> Vec<usize> {
        let n = self.n;
        let idx = &self.selected_indices;
        let mut out = Vec::with_capacity(self.q);
        for &k in idx {
            for &j in idx {
                for &i in idx {
                    out.push(i + n * (j + n * k));
                }
            }
        }
        out
    }

    /// Whether full-grid flat index `flat` is a measured position.
    pub fn is_selected_flat(&self, flat: usize) -> bool {
        let n = self.n;
        let (i, j, k) = (flat % n, (flat / n) % n, flat / (n * n));
        k < n && i % self.alpha == 0 && j % self.alpha == 0 && k % self.alpha == 0
    }
}

/// Gathers the subgrid from a channel-major `channels × N³` tensor.
pub fn compress<T: Copy>(x: &[T], channels: usize, grid: &SelectionGrid) -> Result<Vec<T>> {
    let vox = grid.n * grid.n * grid.n;
    ensure!(
        x.len() == channels * vox,
        Dimension,
        "tensor of {} values is not {channels}×{}³",
        x.len(),
        grid.n
    );
    let full = grid.full_indices();
    let mut out = Vec::with_capacity(channels * grid.q);
    for c in 0..channels {
        out.extend(full.iter().map(|&f| x[c * vox + f]));
    }
    Ok(out)
}

/// Zero-fills a `channels × N̄³` subgrid tensor back onto the full grid.
pub fn decompress<T: Copy + Default>(x: &[T], channels: usize, grid: &SelectionGrid) -> Result<Vec<T>> {
    ensure!(
        x.len() == channels * grid.q,
        Dimension,
        "tensor of {} values is not {channels}×{}³",
        x.len(),
        grid.n_bar
    );
    let vox = grid.n * grid.n * grid.n;
    let full = grid.full_indices();
    let mut out = vec![T::default(); channels * vox];
    for c in 0..channels {
        for (s, &f) in full.iter().enumerate() {
            out[c * vox + f] = x[c * grid.q + s];
        }
    }
    Ok(out)
}

/// Disjoint input/label partition of the measured subgrid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub n_bar: usize,
    /// `B^L` as booleans in subgrid flat order; `B^I` is its complement.
    label: Vec<bool>,
}

impl MaskPair {
    pub fn from_label(n_bar: usize, label: Vec<bool>) -> Result<Self> {
        ensure!(
            label.len() == n_bar * n_bar * n_bar,
            Dimension,
            "label mask of {} entries for N̄ = {n_bar}",
            label.len()
        );
        Ok(Self { n_bar, label })
    }

    /// All measured points are inputs (online reconstruction).
    pub fn all_input(n_bar: usize) -> Self {
        Self {
            n_bar,
            label: vec![false; n_bar * n_bar * n_bar],
        }
    }

    pub fn is_label(&self, s: usize) -> bool {
        self.label[s]
    }

    pub fn label_count(&self) -> usize {
        self.label.iter().filter(|&&l| l).count()
    }

    pub fn b_input(&self) -> Vec<u8> {
        self.label.iter().map(|&l| u8::from(!l)).collect()
    }

    pub fn b_label(&self) -> Vec<u8> {
        self.label.iter().map(|&l| u8::from(l)).collect()
    }

    /// `S^I`: three stacked copies of `B^I`, channel-major.
    pub fn s_input(&self) -> Vec<u8> {
        self.b_input().repeat(CHANNELS)
    }

    /// `S^L`: three stacked copies of `B^L`, channel-major.
    pub fn s_label(&self) -> Vec<u8> {
        self.b_label().repeat(CHANNELS)
    }

    pub fn label_positions(&self) -> Vec<usize> {
        (0..self.label.len()).filter(|&s| self.label[s]).collect()
    }
}

/// Draws `⌊label_fraction·Q⌋` label positions uniformly without
/// replacement; the rest are inputs.
pub fn build_masks(grid: &SelectionGrid, label_fraction: f64, rng: &mut Rng) -> Result<MaskPair> {
    ensure!(
        label_fraction > 0.0 && label_fraction < 1.0,
        Config,
        "label_fraction must lie in (0, 1), got {label_fraction}"
    );
    let count = (label_fraction * grid.q as f64).floor() as usize;
    ensure!(
        count > 0 && count < grid.q,
        Config,
        "label_fraction {label_fraction} leaves an empty input or label set over {} points",
        grid.q
    );
    let mut label = vec![false; grid.q];
    for s in rand::seq::index::sample(rng, grid.q, count) {
        label[s] = true;
    }
    MaskPair::from_label(grid.n_bar, label)
}

/// Per-channel affine map `a·v + δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub a: [f64; 3],
    pub delta: [f64; 3],
    pub db_floor: f64,
}

impl TransformParams {
    pub fn identity(db_floor: f64) -> Self {
        Self {
            a: [1.0; 3],
            delta: [0.0; 3],
            db_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.a.iter().all(|&a| a > 0.0 && a.is_finite()) && self.delta.iter().all(|d| d.is_finite()),
            Config,
            "transform scales must be positive and finite: {self:?}"
        );
        Ok(())
    }

    /// Raw `(Re, Im, dB)` features of one coefficient.
    pub fn raw(&self, h: Complex64) -> [f64; 3] {
        [h.re, h.im, gain_db(h, self.db_floor)]
    }

    pub fn apply(&self, h: Complex64) -> [f64; 3] {
        let r = self.raw(h);
        [
            self.a[0] * r[0] + self.delta[0],
            self.a[1] * r[1] + self.delta[1],
            self.a[2] * r[2] + self.delta[2],
        ]
    }

    pub fn invert(&self, re: f64, im: f64) -> Complex64 {
        Complex64::new((re - self.delta[0]) / self.a[0], (im - self.delta[1]) / self.a[1])
    }
}

/// Fits `a_i = 1/(max_i − min_i)`, `δ_i = −min_i/(max_i − min_i)` over the
/// selected points of the training maps, mapping them into `[0, 1]`.
pub fn fit_transform<'a>(
    maps: impl IntoIterator<Item = &'a ChannelMap>,
    grid: &SelectionGrid,
    db_floor: f64,
) -> Result<TransformParams> {
    let probe = TransformParams::identity(db_floor);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let full = grid.full_indices();
    let mut seen = 0usize;
    for map in maps {
        ensure!(
            map.n == grid.n,
            Dimension,
            "map of size {} for a grid of {}",
            map.n,
            grid.n
        );
        seen += 1;
        for &f in &full {
            let r = probe.raw(map.values[f]);
            for c in 0..3 {
                lo[c] = lo[c].min(r[c]);
                hi[c] = hi[c].max(r[c]);
            }
        }
    }
    ensure!(
        seen > 0,
        DegenerateData,
        "cannot fit a transform to an empty training split"
    );
    let mut a = [0.0; 3];
    let mut delta = [0.0; 3];
    for c in 0..3 {
        let span = hi[c] - lo[c];
        if !(span > 0.0) || !span.is_finite() {
            return Err(Error::DegenerateData(format!(
                "channel {c} is constant ({}) over the training split",
                lo[c]
            )));
        }
        a[c] = 1.0 / span;
        delta[c] = -lo[c] / span;
    }
    Ok(TransformParams { a, delta, db_floor })
}

/// One receiver's transformed data at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub receiver_id: usize,
    pub n: usize,
    /// `X_m`: `3 × N³`, zero off the selected subgrid.
    pub x_full: Vec<f64>,
}

/// Applies the channel transforms at selected points; other points are 0.
pub fn to_channels(
    map: &ChannelMap,
    grid: &SelectionGrid,
    params: &TransformParams,
    receiver_id: usize,
) -> Result<Sample> {
    ensure!(
        map.n == grid.n,
        Dimension,
        "map of size {} for a grid of {}",
        map.n,
        grid.n
    );
    let vox = grid.n * grid.n * grid.n;
    let mut x_full = vec![0.0; CHANNELS * vox];
    for f in grid.full_indices() {
        let v = params.apply(map.values[f]);
        for c in 0..CHANNELS {
            x_full[c * vox + f] = v[c];
        }
    }
    Ok(Sample {
        receiver_id,
        n: grid.n,
        x_full,
    })
}

/// Transformed subgrid values (`3 × N̄³`) of a map.
pub fn subgrid_channels(map: &ChannelMap, grid: &SelectionGrid, params: &TransformParams) -> Result<Vec<f64>> {
    ensure!(
        map.n == grid.n,
        Dimension,
        "map of size {} for a grid of {}",
        map.n,
        grid.n
    );
    let full = grid.full_indices();
    let mut out = vec![0.0; CHANNELS * grid.q];
    for (s, &f) in full.iter().enumerate() {
        let v = params.apply(map.values[f]);
        for c in 0..CHANNELS {
            out[c * grid.q + s] = v[c];
        }
    }
    Ok(out)
}

/// `X^I = X ⊙ S^I`, `X^L = X ⊙ S^L` with the subgrid masks zero-embedded
/// at full resolution.
pub fn apply_masks(sample: &Sample, masks: &MaskPair, grid: &SelectionGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(
        sample.n == grid.n && masks.n_bar == grid.n_bar,
        Dimension,
        "sample (N = {}) and masks (N̄ = {}) do not match grid (N = {}, N̄ = {})",
        sample.n,
        masks.n_bar,
        grid.n,
        grid.n_bar
    );
    let vox = grid.n * grid.n * grid.n;
    ensure!(
        sample.x_full.len() == CHANNELS * vox,
        Dimension,
        "sample holds {} values, expected {}",
        sample.x_full.len(),
        CHANNELS * vox
    );
    let mut x_input = vec![0.0; CHANNELS * vox];
    let mut x_label = vec![0.0; CHANNELS * vox];
    for (s, f) in grid.full_indices().into_iter().enumerate() {
        let dst = if masks.is_label(s) { &mut x_label } else { &mut x_input };
        for c in 0..CHANNELS {
            dst[c * vox + f] = sample.x_full[c * vox + f];
        }
    }
    Ok((x_input, x_label))
}

/// How network outputs become complex coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Re/Im channels only; the dB channel is ignored.
    #[default]
    ReIm,
    /// Magnitude from the dB channel, phase from Re/Im.
    DbMagnitude,
}

impl TransformParams {
    /// Inverse of the dB channel transform, in dB.
    pub fn invert_db(&self, v: f64) -> f64 {
        (v - self.delta[2]) / self.a[2]
    }

    pub fn decode(&self, re: f64, im: f64, db: f64, decoding: Decoding) -> Complex64 {
        let h = self.invert(re, im);
        match decoding {
            Decoding::ReIm => h,
            Decoding::DbMagnitude => {
                let mag = 10f64.powf(self.invert_db(db).max(self.db_floor) / 20.0);
                let phase = if h == Complex64::new(0.0, 0.0) { 0.0 } else { h.arg() };
                Complex64::from_polar(mag, phase)
            }
        }
    }
}

/// Undoes the Re/Im transforms at every grid point; the dB channel is
/// redundant and ignored.
pub fn inverse_channels(y: &[f64], n: usize, spacing_m: f64, params: &TransformParams) -> Result<ChannelMap> {
    decode_channels(y, n, spacing_m, params, Decoding::ReIm)
}

pub fn decode_channels(
    y: &[f64],
    n: usize,
    spacing_m: f64,
    params: &TransformParams,
    decoding: Decoding,
) -> Result<ChannelMap> {
    let vox = n * n * n;
    ensure!(
        y.len() == CHANNELS * vox,
        Dimension,
        "tensor of {} values is not 3×{n}³",
        y.len()
    );
    let values = (0..vox)
        .map(|f| params.decode(y[f], y[vox + f], y[2 * vox + f], decoding))
        .collect();
    ChannelMap::new(n, spacing_m, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn selection_examples() {
        let g = select_positions(40, 2).unwrap();
        assert_eq!((g.n_bar, g.q), (20, 8000));
        assert!((g.fraction() - 0.125).abs() < 1e-15);
        let g = select_positions(40, 4).unwrap();
        assert_eq!(g.selected_indices, (0..10).map(|i| 4 * i).collect::<Vec<_>>());
        assert_eq!((g.n_bar, g.q), (10, 1000));
        assert!((g.fraction() - 0.015625).abs() < 1e-15);
        let g = select_positions(40, 3).unwrap();
        assert_eq!(g.n_bar, 14);
        let g = select_positions(4, 2).unwrap();
        assert_eq!(g.selected_indices, vec![0, 2]);
        assert_eq!(g.q, 8);
        assert!(matches!(select_positions(10, 1), Err(Error::Config(_))));
    }

    #[test]
    fn label_count_and_reproducibility() {
        let g = select_positions(20, 2).unwrap();
        assert_eq!(g.n_bar, 10);
        let m = build_masks(&g, 0.3, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m.label_count(), 300);
        let again = build_masks(&g, 0.3, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m, again);
        assert!(build_masks(&g, 0.0, &mut Rng::seed_from_u64(3)).is_err());
        assert!(build_masks(&g, 1.0, &mut Rng::seed_from_u64(3)).is_err());
        let tiny = select_positions(2, 2).unwrap();
        assert!(matches!(
            build_masks(&tiny, 0.5, &mut Rng::seed_from_u64(3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unit_coefficient_channels_and_zero_clamp() {
        let id = TransformParams::identity(DB_FLOOR);
        assert_eq!(id.apply(Complex64::new(1.0, 0.0)), [1.0, 0.0, 0.0]);
        let p = TransformParams {
            a: [1.0, 1.0, 0.5],
            delta: [0.0, 0.0, 3.0],
            db_floor: DB_FLOOR,
        };
        assert_eq!(p.apply(Complex64::new(0.0, 0.0))[2], 0.5 * DB_FLOOR + 3.0);
    }

    #[test]
    fn fit_maps_range_to_unit_interval() {
        let vals = vec![
            Complex64::new(-2.0, 1.0),
            Complex64::new(2.0, -1.0),
            Complex64::new(0.5, 0.25),
            Complex64::new(1.0, 3.0),
            Complex64::new(0.1, 0.0),
            Complex64::new(-1.0, 0.5),
            Complex64::new(1.5, -0.5),
            Complex64::new(0.0, 2.0),
        ];
        let map = ChannelMap::new(2, 1.0, vals).unwrap();
        let grid = SelectionGrid {
            n: 2,
            alpha: 1,
            selected_indices: vec![0, 1],
            n_bar: 2,
            q: 8,
        };
        let t = fit_transform([&map], &grid, DB_FLOOR).unwrap();
        assert!((t.a[0] - 0.25).abs() < 1e-15 && (t.delta[0] - 0.5).abs() < 1e-15);
        for h in &map.values {
            for v in t.apply(*h) {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
        let flat = ChannelMap::new(2, 1.0, vec![Complex64::new(1.0, 1.0); 8]).unwrap();
        assert!(matches!(
            fit_transform([&flat], &grid, DB_FLOOR),
            Err(Error::DegenerateData(_))
        ));
        let none: [&ChannelMap; 0] = [];
        assert!(fit_transform(none, &grid, DB_FLOOR).is_err());
    }

    #[test]
    fn compress_hand_enumerated() {
        let g = select_positions(4, 2).unwrap();
        let x: Vec<f64> = (0..3 * 64).map(|v| v as f64).collect();
        let c = compress(&x, 3, &g).unwrap();
        assert_eq!(c.len(), 24);
        // Selected axis indices {0, 2}; subgrid order i fastest.
        let want_flat = [0, 2, 8, 10, 32, 34, 40, 42];
        for ch in 0..3 {
            for (s, f) in want_flat.iter().enumerate() {
                assert_eq!(c[ch * 8 + s], (ch * 64 + f) as f64);
            }
        }
        assert!(compress(&x[..10], 3, &g).is_err());
    }

    #[test]
    fn masks_split_sample() {
        let g = select_positions(5, 2).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let ds = crate::sim::generate_dataset(
            &crate::sim::Scenario {
                grid_n: 5,
                ..crate::sim::Scenario::desk()
            },
            &crate::sim::DatasetSpec::new(1),
        )
        .unwrap();
        let t = fit_transform(&ds.measured, &g, DB_FLOOR).unwrap();
        let s = to_channels(&ds.measured[0], &g, &t, 0).unwrap();
        let all = MaskPair::all_input(g.n_bar);
        let (xi, xl) = apply_masks(&s, &all, &g).unwrap();
        assert_eq!(xi, s.x_full);
        assert!(xl.iter().all(|&v| v == 0.0));
        let m = build_masks(&g, 0.3, &mut rng).unwrap();
        let (xi, xl) = apply_masks(&s, &m, &g).unwrap();
        for ((a, b), c) in xi.iter().zip(&xl).zip(&s.x_full) {
            assert_eq!(a + b, *c);
        }
    }
}
