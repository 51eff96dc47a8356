//! Desk-scale end-to-end run: generate, train, compare against trilinear.
//!
//! `cargo run --release -p chanmap --example desk_run -- [seed] [alpha] [epochs]`
//!
//! Set `RUN_DIR` to keep the run directory; with `LOAD` also set, the best
//! checkpoint in `RUN_DIR` is evaluated instead of training.

use chanmap::baseline::{trilinear_baseline, Interpolation};
use chanmap::checkpoint::load_model;
use chanmap::eval::{compare_many, default_slices, MapTriple};
use chanmap::model::{ChannelMapNet, NetConfig};
use chanmap::protocol::{gain_db, DB_FLOOR};
use chanmap::rng::{stream, stream_rng};
use chanmap::sim::{generate_dataset, ChannelMap, DatasetSpec, Scenario};
use chanmap::trainer::{
    prepare, reconstruct_batch, train, Measurements, ReconstructOptions, TrainConfig, BEST_CHECKPOINT,
};

/// dB MSE split by position parity within the α = 2 lattice cell
/// (bit 0 = odd x, bit 1 = odd y, bit 2 = odd z); phase 0 is measured.
fn parity_table(truth: &[&ChannelMap], cnn: &[ChannelMap], tri: &[ChannelMap]) {
    let n = truth[0].n;
    for phase in 0..8 {
        let (mut c, mut t, mut count) = (0.0, 0.0, 0usize);
        for ((truth, cnn), tri) in truth.iter().zip(cnn).zip(tri) {
            for f in 0..n * n * n {
                let (x, y, z) = (f % n, (f / n) % n, f / (n * n));
                if (x % 2) | ((y % 2) << 1) | ((z % 2) << 2) != phase || x == n - 1 || y == n - 1 || z == n - 1 {
                    continue;
                }
                let g = gain_db(truth.values[f], DB_FLOOR);
                c += (gain_db(cnn.values[f], DB_FLOOR) - g).powi(2);
                t += (gain_db(tri.values[f], DB_FLOOR) - g).powi(2);
                count += 1;
            }
        }
        println!(
            "parity {phase}: cnn {:>9.3}  trilinear {:>9.3}",
            c / count as f64,
            t / count as f64
        );
    }
}

fn main() -> chanmap::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let seed = args.first().copied().unwrap_or(0);
    let alpha = args.get(1).copied().unwrap_or(2) as usize;
    let epochs = args.get(2).copied().unwrap_or(60) as usize;

    let scenario = Scenario {
        alpha,
        rng_seed: seed,
        ..Scenario::desk()
    };
    let dataset = generate_dataset(&scenario, &DatasetSpec::new(200))?;
    let config = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::desk()
    };
    let run_dir = std::env::var_os("RUN_DIR").map(std::path::PathBuf::from);
    let (mut net, data) = match (&run_dir, std::env::var_os("LOAD")) {
        (Some(dir), Some(_)) => (
            load_model::<f32>(&dir.join(BEST_CHECKPOINT))?.0,
            prepare(&dataset.measured, alpha, &config)?,
        ),
        _ => {
            let net = ChannelMapNet::new(NetConfig::with_hidden(16), &mut stream_rng(seed, stream::INIT, 0))?;
            let out = train(&dataset.measured, alpha, net, &config, run_dir.as_deref(), |e, s| {
                println!(
                    "epoch {:>3} train {:.6} test {:.6} lr {:.2e} ({s:.1}s)",
                    e.epoch, e.train_loss, e.test_loss, e.lr
                );
            })?;
            println!("best epoch {}", out.best_epoch);
            (out.net, out.data)
        }
    };
    let grid = data.preprocessing.grid()?;
    let test = &data.split.test;
    let meas = test
        .iter()
        .map(|&i| Measurements::from_map(&dataset.measured[i], &grid))
        .collect::<chanmap::Result<Vec<_>>>()?;
    let cnn = reconstruct_batch(&meas, &mut net, &data.preprocessing, ReconstructOptions::default())?;
    let tri = test
        .iter()
        .map(|&i| trilinear_baseline(&dataset.measured[i], &grid, Interpolation::Complex))
        .collect::<chanmap::Result<Vec<_>>>()?;
    let truth: Vec<&ChannelMap> = test.iter().map(|&i| &dataset.truth[i]).collect();
    let triples: Vec<MapTriple> = truth
        .iter()
        .zip(cnn.iter().zip(&tri))
        .map(|(truth, (cnn, trilinear))| MapTriple { truth, cnn, trilinear })
        .collect();
    let report = compare_many(&triples, &default_slices(scenario.grid_n), &scenario.fingerprint())?;
    print!("{}", report.to_table());
    if alpha == 2 {
        parity_table(&truth, &cnn, &tri);
    }
    Ok(())
}
