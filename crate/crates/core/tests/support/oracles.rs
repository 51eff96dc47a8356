//! Independent reference computations and randomized algebra checks.

use chanmap::baseline::{measured_subgrid, reconstruct_map_trilinear, trilinear_baseline, Interpolation};
use chanmap::model::masked_loss;
use chanmap::nn::Tensor;
use chanmap::protocol::{
    apply_masks, build_masks, compress, decompress, inverse_channels, select_positions, to_channels, TransformParams,
    CHANNELS, DB_FLOOR,
};
use chanmap::rng::Rng;
use chanmap::sim::{add_measurement_noise, generate_map, sample_environment, sample_prv, ChannelMap, Scenario, Snr};
use chanmap::trainer::split_dataset;
use num_complex::Complex64;
use rand::{Rng as _, SeedableRng};

pub fn random_map(n: usize, rng: &mut Rng) -> ChannelMap {
    let values = (0..n * n * n)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    ChannelMap::new(n, 0.1, values).unwrap()
}

/// Relative error of the per-entry PRV variance at `L_t = 8`, `ρ = 1`,
/// `d = 10`, `β = 3` over `draws` vectors, and the complex mean in units
/// of its standard error.
pub fn prv_statistics(draws: usize, seed: u64) -> (f64, f64) {
    let scenario = Scenario {
        num_paths: 8,
        pathloss_scale: 1.0,
        pathloss_exponent: 3.0,
        ..Scenario::desk()
    };
    let expected = 1.25e-4;
    let mut rng = Rng::seed_from_u64(seed);
    let (mut sum, mut power) = (Complex64::new(0.0, 0.0), 0.0);
    for _ in 0..draws {
        for f in sample_prv(&scenario, 10.0, &mut rng).unwrap().gains {
            sum += f;
            power += f.norm_sqr();
        }
    }
    let n = (draws * 8) as f64;
    let rel = (power / n / expected - 1.0).abs();
    let mean_in_se = (sum / n).norm() / (expected.sqrt() / n.sqrt());
    (rel, mean_in_se)
}

/// Measured SNR (dB) after injecting `snr_db` noise into a 47³ map.
pub fn measured_snr(snr_db: f64, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let scenario = Scenario {
        grid_n: 47,
        ..Scenario::desk()
    };
    let paths = sample_environment(scenario.num_paths, &mut rng).unwrap();
    let gains = sample_prv(&scenario, 40.0, &mut rng).unwrap();
    let map = generate_map(&scenario, &gains, &paths).unwrap();
    let noisy = add_measurement_noise(&map, Snr::Db(snr_db), &mut rng).unwrap();
    let noise: f64 = noisy
        .values
        .iter()
        .zip(&map.values)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    10.0 * (map.mean_power() * map.values.len() as f64 / noise).log10()
}

/// Reference trilinear reconstruction on the index lattice: per axis the
/// lower measured index and fractional weight (clamped past the last
/// node), then the explicit 8-corner weighted sum.
pub fn eight_corner_reference(map: &ChannelMap, alpha: usize) -> Vec<Complex64> {
    let n = map.n;
    let last = (n - 1) / alpha * alpha;
    let cell = |i: usize| -> (usize, f64) {
        if i >= last {
            (last - alpha, 1.0)
        } else {
            let lo = i / alpha * alpha;
            (lo, (i - lo) as f64 / alpha as f64)
        }
    };
    let mut out = vec![Complex64::new(0.0, 0.0); n * n * n];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let ((x0, tx), (y0, ty), (z0, tz)) = (cell(i), cell(j), cell(k));
                let mut acc = Complex64::new(0.0, 0.0);
                for (dx, wx) in [(0, 1.0 - tx), (alpha, tx)] {
                    for (dy, wy) in [(0, 1.0 - ty), (alpha, ty)] {
                        for (dz, wz) in [(0, 1.0 - tz), (alpha, tz)] {
                            acc += map.get(x0 + dx, y0 + dy, z0 + dz) * (wx * wy * wz);
                        }
                    }
                }
                out[i + n * (j + n * k)] = acc;
            }
        }
    }
    out
}

/// Largest deviation from the 8-corner reference over random `n = 8`,
/// `α = 2` maps.
pub fn trilinear_vs_reference(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut rng = Rng::seed_from_u64(seed);
        let map = random_map(8, &mut rng);
        let grid = select_positions(8, 2).unwrap();
        let got = trilinear_baseline(&map, &grid, Interpolation::Complex).unwrap();
        for (a, b) in got.values.iter().zip(eight_corner_reference(&map, 2)) {
            worst = worst.max((a - b).norm());
        }
    }
    worst
}

/// Largest deviation at measured nodes over random maps.
pub fn trilinear_node_error(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut rng = Rng::seed_from_u64(1000 + seed);
        let (n, alpha) = [(8, 2), (16, 2), (16, 3), (17, 4)][seed as usize % 4];
        let map = random_map(n, &mut rng);
        let grid = select_positions(n, alpha).unwrap();
        let out = trilinear_baseline(&map, &grid, Interpolation::Complex).unwrap();
        for f in grid.full_indices() {
            worst = worst.max((out.values[f] - map.values[f]).norm());
        }
    }
    worst
}

/// Largest deviation from an affine field at random interior queries and
/// at every grid point.
pub fn trilinear_affine_error(queries: usize, seed: u64) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let mut c = || Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let (c0, cx, cy, cz) = (c(), c(), c(), c());
    let field = |t: [f64; 3]| c0 + cx * t[0] + cy * t[1] + cz * t[2];
    let (n, d) = (9, 0.1);
    let values = (0..n * n * n)
        .map(|f| field([(f % n) as f64 * d, ((f / n) % n) as f64 * d, (f / (n * n)) as f64 * d]))
        .collect();
    let map = ChannelMap::new(n, d, values).unwrap();
    let sub = measured_subgrid(&map, &select_positions(n, 2).unwrap()).unwrap();
    let hi = (n - 1) as f64 * d;
    let mut rng = Rng::seed_from_u64(seed + 1);
    let mut worst: f64 = 0.0;
    for _ in 0..queries {
        let q = [
            rng.random_range(0.0..hi),
            rng.random_range(0.0..hi),
            rng.random_range(0.0..hi),
        ];
        worst = worst.max((sub.trilinear(q) - field(q)).norm());
    }
    let full = reconstruct_map_trilinear(&sub, n, d).unwrap();
    for (a, b) in full.values.iter().zip(&map.values) {
        worst = worst.max((a - b).norm());
    }
    worst
}

/// Loss and gradient are bitwise unchanged after overwriting input-set and
/// non-selected entries of the prediction. Returns the first violation.
pub fn loss_locality_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = rng.random_range(3..9);
    let alpha = rng.random_range(2..4);
    let batch = rng.random_range(1..3);
    let grid = select_positions(n, alpha).unwrap();
    if grid.q < 2 {
        return Ok(());
    }
    let masks = build_masks(&grid, 0.5, &mut rng).unwrap();
    let vox = n * n * n;
    let pred = super::random_tensor(&[batch, CHANNELS, n, n, n], &mut rng);
    let labels: Vec<f64> = (0..batch * CHANNELS * grid.q)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let base = masked_loss(&pred, &labels, &masks, &grid).unwrap();
    let full = grid.full_indices();
    let mut is_label = vec![false; vox];
    for s in masks.label_positions() {
        is_label[full[s]] = true;
    }
    let mut edited: Tensor<f64> = pred.clone();
    for b in 0..batch {
        for c in 0..CHANNELS {
            for f in (0..vox).filter(|&f| !is_label[f]) {
                edited.data_mut()[(b * CHANNELS + c) * vox + f] = rng.random_range(-1e3..1e3);
            }
        }
    }
    let after = masked_loss(&edited, &labels, &masks, &grid).unwrap();
    if base.sum_sq.to_bits() != after.sum_sq.to_bits() {
        return Err(format!("seed {seed}: loss changed {} -> {}", base.sum_sq, after.sum_sq));
    }
    if base
        .grad
        .data()
        .iter()
        .zip(after.grad.data())
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(format!("seed {seed}: gradient changed"));
    }
    for b in 0..batch {
        for c in 0..CHANNELS {
            if (0..vox).any(|f| !is_label[f] && base.grad.data()[(b * CHANNELS + c) * vox + f] != 0.0) {
                return Err(format!("seed {seed}: gradient nonzero off the label set"));
            }
        }
    }
    Ok(())
}

pub fn mask_algebra_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let grid = select_positions(rng.random_range(2..24), rng.random_range(2..5)).unwrap();
    let frac = rng.random_range(0.05..0.95);
    let Ok(m) = build_masks(&grid, frac, &mut Rng::seed_from_u64(seed)) else {
        let labels = (frac * grid.q as f64).floor() as usize;
        return if labels == 0 || labels == grid.q {
            Ok(())
        } else {
            Err(format!("seed {seed}: masks rejected"))
        };
    };
    let (bi, bl) = (m.b_input(), m.b_label());
    if !bi.iter().zip(&bl).all(|(i, l)| i + l == 1 && i * l == 0) {
        return Err(format!("seed {seed}: masks are not complementary"));
    }
    let (si, sl) = (m.s_input(), m.s_label());
    for c in 0..CHANNELS {
        if si[c * grid.q..(c + 1) * grid.q] != bi[..] || sl[c * grid.q..(c + 1) * grid.q] != bl[..] {
            return Err(format!("seed {seed}: stacked mask differs in channel {c}"));
        }
    }
    if m.label_count() != (frac * grid.q as f64).floor() as usize {
        return Err(format!("seed {seed}: wrong label count"));
    }
    Ok(())
}

pub fn duality_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = rng.random_range(2..14);
    let grid = select_positions(n, rng.random_range(2..5)).unwrap();
    let sub: Vec<f64> = (0..CHANNELS * grid.q).map(|_| rng.random_range(-1.0..1.0)).collect();
    let full = decompress(&sub, CHANNELS, &grid).unwrap();
    if compress(&full, CHANNELS, &grid).unwrap() != sub {
        return Err(format!("seed {seed}: compress ∘ decompress is not the identity"));
    }
    if decompress(&compress(&full, CHANNELS, &grid).unwrap(), CHANNELS, &grid).unwrap() != full {
        return Err(format!(
            "seed {seed}: decompress ∘ compress changed a subgrid-supported tensor"
        ));
    }
    let vox = n * n * n;
    if full
        .iter()
        .enumerate()
        .any(|(f, &v)| !grid.is_selected_flat(f % vox) && v != 0.0)
    {
        return Err(format!("seed {seed}: decompress wrote off the subgrid"));
    }
    Ok(())
}

pub fn affine_round_trip_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let map = random_map(8, &mut rng);
    let grid = select_positions(8, rng.random_range(2..4)).unwrap();
    let params = TransformParams {
        a: [
            rng.random_range(0.1..10.0),
            rng.random_range(0.1..10.0),
            rng.random_range(0.001..0.1),
        ],
        delta: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..3.0),
        ],
        db_floor: DB_FLOOR,
    };
    let sample = to_channels(&map, &grid, &params, 0).unwrap();
    let back = inverse_channels(&sample.x_full, 8, map.spacing_m, &params).unwrap();
    let masks = build_masks(&grid, 0.3, &mut rng).unwrap();
    let (xi, xl) = apply_masks(&sample, &masks, &grid).unwrap();
    if !xi.iter().zip(&xl).zip(&sample.x_full).all(|((a, b), x)| a + b == *x) {
        return Err(format!("seed {seed}: masked parts do not sum to the sample"));
    }
    match grid
        .full_indices()
        .into_iter()
        .find(|&f| (back.values[f] - map.values[f]).norm() >= 1e-12)
    {
        Some(f) => Err(format!(
            "seed {seed}: round trip off at {f}: {} vs {}",
            back.values[f], map.values[f]
        )),
        None => Ok(()),
    }
}

pub fn split_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed_from_u64(seed);
    let m = rng.random_range(2..400);
    let frac = rng.random_range(0.05..0.95);
    let Ok(s) = split_dataset(m, frac, &mut Rng::seed_from_u64(seed)) else {
        let t = (frac * m as f64).round() as usize;
        return if t == 0 || t == m {
            Ok(())
        } else {
            Err(format!("seed {seed}: split rejected"))
        };
    };
    let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
    all.sort_unstable();
    if all != (0..m).collect::<Vec<_>>() {
        return Err(format!("seed {seed}: split is not a disjoint cover"));
    }
    if s.test.len() != (frac * m as f64).round() as usize {
        return Err(format!("seed {seed}: wrong test size"));
    }
    Ok(())
}
