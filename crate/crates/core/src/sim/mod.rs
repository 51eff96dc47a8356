//! Far-field field-response channel simulator.
//!
//! Positions are in meters with the region origin `o_t` at the cube corner
//! `[0, 0, 0]`; grid point `(i, j, k)` (0-based) sits at `d·[i, j, k]`.

mod dataset;

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::Rng;

pub use dataset::{
    generate_dataset, read_map_file, sample_environment, write_map_file, Dataset, DatasetSpec, MapFile, MapFileHeader,
    MapKind, Receiver,
};

/// Measurement SNR: a level in dB or noise-free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Noiseless,
    Db(f64),
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Noiseless => f.write_str("noiseless"),
            Snr::Db(db) => write!(f, "{db} dB"),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Noiseless => s.serialize_str("noiseless"),
            Snr::Db(db) => s.serialize_f64(*db),
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr::Db(v)),
            Raw::Int(v) => Ok(Snr::Db(v as f64)),
            Raw::Str(s) if s.eq_ignore_ascii_case("noiseless") => Ok(Snr::Noiseless),
            Raw::Str(s) => {
                s.trim().parse().map(Snr::Db).map_err(|_| {
                    serde::de::Error::custom(format!("snr_db must be a number or \"noiseless\", got {s:?}"))
                })
            }
        }
    }
}

/// Physical and protocol configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub wavelength_m: f64,
    /// Region edge in wavelengths (`W`); the cube edge is `W·λ`.
    pub region_widths: f64,
    /// Grid points per axis (`N`).
    pub grid_n: usize,
    /// Number of transmit multipath components (`L_t`).
    pub num_paths: usize,
    pub pathloss_exponent: f64,
    pub pathloss_scale: f64,
    pub snr_db: Snr,
    /// Per-axis stride between measured positions.
    pub alpha: usize,
    pub rng_seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::full()
    }
}

impl Scenario {
    /// λ = 0.2 m, W = 4, N = 40, β = 3, 30 dB SNR.
    pub fn full() -> Self {
        Self {
            wavelength_m: 0.2,
            region_widths: 4.0,
            grid_n: 40,
            num_paths: 8,
            pathloss_exponent: 3.0,
            pathloss_scale: 1.0,
            snr_db: Snr::Db(30.0),
            alpha: 4,
            rng_seed: 0,
        }
    }

    /// Same physics at `N = 16`, `α = 2`.
    pub fn desk() -> Self {
        Self {
            grid_n: 16,
            alpha: 2,
            ..Self::full()
        }
    }

    /// Short human-readable identity of the configuration.
    pub fn fingerprint(&self) -> String {
        let snr = match self.snr_db {
            Snr::Noiseless => "noiseless".to_string(),
            Snr::Db(db) => format!("{db}dB"),
        };
        format!(
            "lambda={} W={} N={} Lt={} beta={} rho={} snr={snr} alpha={} seed={}",
            self.wavelength_m,
            self.region_widths,
            self.grid_n,
            self.num_paths,
            self.pathloss_exponent,
            self.pathloss_scale,
            self.alpha,
            self.rng_seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.wavelength_m > 0.0, Config, "wavelength_m must be positive");
        ensure!(self.region_widths > 0.0, Config, "region_widths must be positive");
        ensure!(
            self.grid_n >= 2,
            Config,
            "grid_n must be at least 2, got {}",
            self.grid_n
        );
        ensure!(self.num_paths >= 1, Config, "num_paths must be at least 1");
        ensure!(self.pathloss_scale > 0.0, Config, "pathloss_scale must be positive");
        ensure!(
            self.pathloss_exponent.is_finite(),
            Config,
            "pathloss_exponent must be finite"
        );
        ensure!(self.alpha >= 2, Config, "alpha must be at least 2, got {}", self.alpha);
        if let Snr::Db(db) = self.snr_db {
            ensure!(db.is_finite(), Config, "snr_db must be finite");
        }
        Ok(())
    }

    /// Cube edge `W·λ` in meters.
    pub fn region_edge_m(&self) -> f64 {
        self.region_widths * self.wavelength_m
    }

    /// Grid spacing `d = W·λ / (N − 1)`.
    pub fn spacing_m(&self) -> f64 {
        self.region_edge_m() / (self.grid_n - 1) as f64
    }

    /// PRV entry variance `ρ·d^{−β} / L_t` at BS–receiver distance `d`.
    pub fn path_gain_variance(&self, distance_m: f64) -> f64 {
        self.pathloss_scale * distance_m.powf(-self.pathloss_exponent) / self.num_paths as f64
    }
}

/// One transmit multipath component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub mpc_coord: [f64; 3],
    pub theta_t: f64,
    pub phi_t: f64,
    pub direction: [f64; 3],
}

impl PathComponent {
    pub fn from_coord(mpc_coord: [f64; 3]) -> Result<Self> {
        let (theta_t, phi_t) = aod_angles(mpc_coord)?;
        Ok(Self {
            mpc_coord,
            theta_t,
            phi_t,
            direction: directional_vector(theta_t, phi_t),
        })
    }
}

/// Elevation/azimuth angles of departure toward a T-MPC at `coord`.
///
/// `theta = arccos(y/‖c‖) ∈ [0, π]`, `phi = atan2(z, x)`.
pub fn aod_angles(coord: [f64; 3]) -> Result<(f64, f64)> {
    let [x, y, z] = coord;
    let norm = (x * x + y * y + z * z).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidPath(format!(
            "T-MPC coordinate {coord:?} has no direction"
        )));
    }
    let theta = (y / norm).clamp(-1.0, 1.0).acos();
    let phi = z.atan2(x);
    Ok((theta, phi))
}

/// `[sin θ cos φ, cos θ, sin θ sin φ]`.
pub fn directional_vector(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, ct, st * sp]
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Field-response vector `g(t)`: entry `p` is `exp(j·2π/λ·n_pᵀ(t − o_t))`.
pub fn field_response(t: [f64; 3], paths: &[PathComponent], wavelength_m: f64) -> Vec<Complex64> {
    let k = 2.0 * PI / wavelength_m;
    paths
        .iter()
        .map(|p| Complex64::from_polar(1.0, k * dot(p.direction, t)))
        .collect()
}

/// Path-response vector of one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGains {
    pub gains: Vec<Complex64>,
    pub bs_user_distance_m: f64,
}

fn complex_normal(rng: &mut Rng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draws `f_p ~ CN(0, ρ·d^{−β}/L_t)` independently for every path.
pub fn sample_prv(scenario: &Scenario, distance_m: f64, rng: &mut Rng) -> Result<PathGains> {
    ensure!(
        distance_m > 0.0 && distance_m.is_finite(),
        Config,
        "receiver distance must be positive, got {distance_m}"
    );
    let var = scenario.path_gain_variance(distance_m);
    Ok(PathGains {
        gains: (0..scenario.num_paths).map(|_| complex_normal(rng, var)).collect(),
        bs_user_distance_m: distance_m,
    })
}

/// `h(t) = fᴴ g(t) = Σ_p conj(f_p)·exp(j·2π/λ·n_pᵀt)`.
pub fn channel_at(t: [f64; 3], gains: &PathGains, paths: &[PathComponent], wavelength_m: f64) -> Result<Complex64> {
    ensure!(
        gains.gains.len() == paths.len(),
        Dimension,
        "{} path gains for {} paths",
        gains.gains.len(),
        paths.len()
    );
    let k = 2.0 * PI / wavelength_m;
    Ok(gains
        .gains
        .iter()
        .zip(paths)
        .map(|(f, p)| f.conj() * Complex64::from_polar(1.0, k * dot(p.direction, t)))
        .sum())
}

/// Complex `N×N×N` channel map, flat index `i + N·(j + N·k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub n: usize,
    pub spacing_m: f64,
    pub values: Vec<Complex64>,
}

impl ChannelMap {
    pub fn new(n: usize, spacing_m: f64, values: Vec<Complex64>) -> Result<Self> {
        ensure!(
            values.len() == n * n * n,
            Dimension,
            "{} values for an {n}³ map",
            values.len()
        );
        Ok(Self { n, spacing_m, values })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.values[self.index(i, j, k)]
    }

    /// Position of grid point `(i, j, k)` in meters.
    pub fn position(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        grid_position(self.spacing_m, i, j, k)
    }

    pub fn mean_power(&self) -> f64 {
        self.values.iter().map(|h| h.norm_sqr()).sum::<f64>() / self.values.len() as f64
    }
}

#[inline]
pub fn grid_position(spacing_m: f64, i: usize, j: usize, k: usize) -> [f64; 3] {
    [spacing_m * i as f64, spacing_m * j as f64, spacing_m * k as f64]
}

/// Evaluates the channel at every grid point of the scenario.
pub fn generate_map(scenario: &Scenario, gains: &PathGains, paths: &[PathComponent]) -> Result<ChannelMap> {
    scenario.validate()?;
    ensure!(
        gains.gains.len() == paths.len(),
        Dimension,
        "{} path gains for {} paths",
        gains.gains.len(),
        paths.len()
    );
    let n = scenario.grid_n;
    let d = scenario.spacing_m();
    let lambda = scenario.wavelength_m;
    let planes = par::map_range(n, |k| {
        let mut plane = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let h = channel_at(grid_position(d, i, j, k), gains, paths, lambda).expect("lengths checked");
                plane.push(h);
            }
        }
        plane
    });
    ChannelMap::new(n, d, planes.concat())
}

/// Adds `CN(0, P̄/10^{snr/10})` noise, `P̄` being the map's mean power.
pub fn add_measurement_noise(map: &ChannelMap, snr: Snr, rng: &mut Rng) -> Result<ChannelMap> {
    ensure!(!map.values.is_empty(), Dimension, "cannot add noise to an empty map");
    let db = match snr {
        Snr::Noiseless => return Ok(map.clone()),
        Snr::Db(db) => db,
    };
    let noise_var = map.mean_power() / 10f64.powf(db / 10.0);
    let values = map.values.iter().map(|&h| h + complex_normal(rng, noise_var)).collect();
    ChannelMap::new(map.n, map.spacing_m, values)
}

/// Uniformly random unit vector.
pub(crate) fn random_unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = dot(v, v).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
