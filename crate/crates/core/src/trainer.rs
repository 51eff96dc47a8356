//! Offline training and online reconstruction.

use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_model, Preprocessing};
use crate::error::{ensure, Error, Result};
use crate::model::{masked_loss, ChannelMapNet};
use crate::nn::{cosine_lr, AdamState, Mode, Tensor};
use crate::protocol::{
    build_masks, decode_channels, fit_transform, select_positions, subgrid_channels, Decoding, MaskPair, SelectionGrid,
    CHANNELS, DB_FLOOR, LABEL_FRACTION,
};
use crate::rng::{derive_seed, stream, stream_rng, Rng};
use crate::sim::ChannelMap;

pub const BEST_CHECKPOINT: &str = "best.chmapnet";
pub const LAST_CHECKPOINT: &str = "last.chmapnet";
pub const RUN_RECORD: &str = "run_record.csv";
pub const TIMING: &str = "timing.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub test_fraction: f64,
    pub label_fraction: f64,
    pub seed: u64,
    /// Write `epoch_NNNN.chmapnet` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr0: 1e-3,
            lr_min: 0.0,
            test_fraction: 0.1,
            label_fraction: LABEL_FRACTION,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// 60 epochs with batches of 8.
    pub fn desk() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "epochs must be at least 1");
        ensure!(
            self.batch_size >= 2,
            Config,
            "batch_size must be at least 2 for batch normalization, got {}",
            self.batch_size
        );
        ensure!(
            self.test_fraction > 0.0 && self.test_fraction < 1.0,
            Config,
            "test_fraction must lie in (0, 1), got {}",
            self.test_fraction
        );
        ensure!(
            self.label_fraction > 0.0 && self.label_fraction < 1.0,
            Config,
            "label_fraction must lie in (0, 1), got {}",
            self.label_fraction
        );
        ensure!(
            self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0,
            Config,
            "need 0 <= lr_min <= lr0 and lr0 > 0"
        );
        Ok(())
    }
}

/// Indices of the train and test receivers, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Random split with `round(test_fraction · m)` test items.
pub fn split_dataset(m: usize, test_fraction: f64, rng: &mut Rng) -> Result<Split> {
    ensure!(m >= 2, Config, "need at least 2 samples to split, got {m}");
    let n_test = (test_fraction * m as f64).round() as usize;
    ensure!(
        n_test >= 1 && n_test < m,
        Config,
        "test fraction {test_fraction} of {m} samples leaves an empty split"
    );
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

/// Preprocessed training data: transformed subgrid channels per receiver.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub grid: SelectionGrid,
    pub masks: MaskPair,
    pub preprocessing: Preprocessing,
    pub split: Split,
    /// `3 × N̄³` per receiver, in dataset order.
    pub subgrids: Vec<Vec<f32>>,
}

/// Splits the maps, then fits the transform and draws masks using the
/// training split only.
pub fn prepare(maps: &[ChannelMap], alpha: usize, config: &TrainConfig) -> Result<PreparedData> {
    config.validate()?;
    ensure!(!maps.is_empty(), Config, "no maps to train on");
    let n = maps[0].n;
    let spacing_m = maps[0].spacing_m;
    ensure!(
        maps.iter().all(|m| m.n == n),
        Dimension,
        "maps of different sizes in one dataset"
    );
    let grid = select_positions(n, alpha)?;
    let split = split_dataset(
        maps.len(),
        config.test_fraction,
        &mut stream_rng(config.seed, stream::SPLIT, 0),
    )?;
    ensure!(
        split.train.len() >= 2,
        DegenerateBatch,
        "training split has {} sample(s); batch normalization needs 2",
        split.train.len()
    );
    let transform = fit_transform(split.train.iter().map(|&i| &maps[i]), &grid, DB_FLOOR)?;
    let mask_seed = derive_seed(config.seed, stream::MASKS, 0);
    let masks = build_masks(&grid, config.label_fraction, &mut Rng::seed_from_u64(mask_seed))?;
    let subgrids = maps
        .iter()
        .map(|m| {
            Ok(subgrid_channels(m, &grid, &transform)?
                .into_iter()
                .map(|v| v as f32)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        preprocessing: Preprocessing {
            grid_n: n,
            alpha,
            spacing_m,
            transform,
            label_fraction: config.label_fraction,
            mask_seed,
        },
        grid,
        masks,
        split,
        subgrids,
    })
}

/// Full-resolution network input: subgrid values outside the label set
/// scattered onto the grid, zeros elsewhere.
fn assemble_inputs(subgrids: &[&[f32]], grid: &SelectionGrid, keep: &[bool], full: &[usize]) -> Tensor<f32> {
    let n = grid.n;
    let vox = n * n * n;
    let mut x = Tensor::zeros(&[subgrids.len(), CHANNELS, n, n, n]);
    let data = x.data_mut();
    for (b, sub) in subgrids.iter().enumerate() {
        for c in 0..CHANNELS {
            let dst = &mut data[(b * CHANNELS + c) * vox..][..vox];
            let src = &sub[c * grid.q..][..grid.q];
            for (s, &f) in full.iter().enumerate() {
                if keep[s] {
                    dst[f] = src[s];
                }
            }
        }
    }
    x
}

/// Per-epoch statistics. Losses are per label entry; the optimized
/// objective is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch, kept apart so the CSV is reproducible.
    pub seconds: Vec<f64>,
}

impl RunRecord {
    pub fn final_test_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_loss)
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.test_loss.total_cmp(&b.test_loss))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        if self.epochs.is_empty() {
            w.write_record(["epoch", "train_loss", "test_loss", "lr"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "seconds"])?;
        for (e, s) in self.epochs.iter().zip(&self.seconds) {
            w.write_record([e.epoch.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self {
            seconds: vec![0.0; epochs.len()],
            epochs,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest test loss.
    pub net: ChannelMapNet<f32>,
    pub record: RunRecord,
    pub best_epoch: usize,
    pub data: PreparedData,
}

/// Loss of `net` over `ids` in eval mode: `(Σ squared error, entries)`.
fn evaluate(
    net: &mut ChannelMapNet<f32>,
    data: &PreparedData,
    ids: &[usize],
    batch: usize,
    keep: &[bool],
    full: &[usize],
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut entries = 0;
    for chunk in ids.chunks(batch) {
        let subs: Vec<&[f32]> = chunk.iter().map(|&i| data.subgrids[i].as_slice()).collect();
        let x = assemble_inputs(&subs, &data.grid, keep, full);
        let pred = net.forward_cached(&x, Mode::Eval, false)?;
        let labels = subs.concat();
        let loss = masked_loss(&pred, &labels, &data.masks, &data.grid)?;
        sum += loss.sum_sq;
        entries += loss.entries;
    }
    Ok((sum, entries))
}

/// Batches of the shuffled order; a trailing single sample joins the
/// previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

/// Trains `net` on `maps` (the measured CSI of every receiver).
///
/// With `run_dir`, the RunRecord, timings, config snapshot and checkpoints
/// are written there as training progresses. A non-finite loss stops the
/// run with [`Error::NonFinite`]; checkpoints already on disk are kept.
pub fn train(
    maps: &[ChannelMap],
    alpha: usize,
    mut net: ChannelMapNet<f32>,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord, f64),
) -> Result<TrainOutcome> {
    let data = prepare(maps, alpha, config)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("train_config.toml"),
            toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        fs::write(dir.join("split.json"), serde_json::to_vec_pretty(&data.split)?)?;
    }
    let full = data.grid.full_indices();
    let keep: Vec<bool> = (0..data.grid.q).map(|s| !data.masks.is_label(s)).collect();
    let mut adam = AdamState::<f32>::default();
    let mut record = RunRecord::default();
    let mut best: Option<(f64, usize, ChannelMapNet<f32>)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch - 1, config.epochs, config.lr0, config.lr_min);
        let mut order = data.split.train.clone();
        order.shuffle(&mut stream_rng(config.seed, stream::SHUFFLE, epoch as u64));

        let mut train_sum = 0.0;
        let mut train_entries = 0;
        for batch in batches(&order, config.batch_size) {
            let subs: Vec<&[f32]> = batch.iter().map(|&i| data.subgrids[i].as_slice()).collect();
            let x = assemble_inputs(&subs, &data.grid, &keep, &full);
            net.zero_grad();
            let pred = net.forward(&x, Mode::Train)?;
            let labels = subs.concat();
            let loss = masked_loss(&pred, &labels, &data.masks, &data.grid)?;
            if !loss.sum_sq.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {} in epoch {epoch}",
                    loss.sum_sq
                )));
            }
            net.backward(&loss.grad, false)?;
            adam.step(&mut net.params_mut(), lr)?;
            train_sum += loss.sum_sq;
            train_entries += loss.entries;
        }
        net.clear_cache();

        let (test_sum, test_entries) = evaluate(&mut net, &data, &data.split.test, config.batch_size, &keep, &full)?;
        let test_loss = test_sum / test_entries as f64;
        if !test_loss.is_finite() {
            return Err(Error::NonFinite(format!("test loss is {test_loss} in epoch {epoch}")));
        }
        let entry = EpochRecord {
            epoch,
            train_loss: train_sum / train_entries as f64,
            test_loss,
            lr,
        };
        let seconds = started.elapsed().as_secs_f64();
        progress(&entry, seconds);
        record.epochs.push(entry);
        record.seconds.push(seconds);

        let improved = best.as_ref().is_none_or(|(b, _, _)| test_loss < *b);
        if improved {
            best = Some((test_loss, epoch, net.clone()));
        }
        if let Some(dir) = run_dir {
            if improved {
                save_model(&dir.join(BEST_CHECKPOINT), &mut net, &data.preprocessing)?;
            }
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                save_model(
                    &dir.join(format!("epoch_{epoch:04}.chmapnet")),
                    &mut net,
                    &data.preprocessing,
                )?;
            }
            record.write_csv(&dir.join(RUN_RECORD))?;
            record.write_timing_csv(&dir.join(TIMING))?;
        }
    }
    if let Some(dir) = run_dir {
        save_model(&dir.join(LAST_CHECKPOINT), &mut net, &data.preprocessing)?;
    }
    let (_, best_epoch, net) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        net,
        record,
        best_epoch,
        data,
    })
}

/// Measured CSI at the selected positions, in subgrid order. Missing
/// entries are left out of the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub n: usize,
    pub alpha: usize,
    pub values: Vec<Option<Complex64>>,
}

impl Measurements {
    /// Samples `map` at every selected position.
    pub fn from_map(map: &ChannelMap, grid: &SelectionGrid) -> Result<Self> {
        ensure!(
            map.n == grid.n,
            Dimension,
            "map of size {} for a grid of {}",
            map.n,
            grid.n
        );
        Ok(Self {
            n: grid.n,
            alpha: grid.alpha,
            values: grid.full_indices().into_iter().map(|f| Some(map.values[f])).collect(),
        })
    }
}

/// Output handling for [`reconstruct_batch`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructOptions {
    pub decoding: Decoding,
    /// Copy measured values through at the selected positions.
    pub keep_measured: bool,
}

/// Reconstructs full maps from measurements, several at a time.
pub fn reconstruct_batch(
    measurements: &[Measurements],
    net: &mut ChannelMapNet<f32>,
    prep: &Preprocessing,
    options: ReconstructOptions,
) -> Result<Vec<ChannelMap>> {
    let grid = prep.grid()?;
    for m in measurements {
        ensure!(
            m.n == grid.n && m.alpha == grid.alpha && m.values.len() == grid.q,
            IncompatibleMeasurement,
            "measurements for N = {}, α = {} ({} points); the model expects N = {}, α = {} ({} points)",
            m.n,
            m.alpha,
            m.values.len(),
            grid.n,
            grid.alpha,
            grid.q
        );
    }
    let full = grid.full_indices();
    let vox = grid.n * grid.n * grid.n;
    let mut out = Vec::with_capacity(measurements.len());
    for chunk in measurements.chunks(8) {
        let mut x = Tensor::<f32>::zeros(&[chunk.len(), CHANNELS, grid.n, grid.n, grid.n]);
        let data = x.data_mut();
        for (b, m) in chunk.iter().enumerate() {
            for (s, v) in m.values.iter().enumerate() {
                if let Some(h) = v {
                    let t = prep.transform.apply(*h);
                    for c in 0..CHANNELS {
                        data[(b * CHANNELS + c) * vox + full[s]] = t[c] as f32;
                    }
                }
            }
        }
        let y = net.forward_cached(&x, Mode::Eval, false)?;
        for b in 0..chunk.len() {
            let slice: Vec<f64> = y.data()[b * CHANNELS * vox..][..CHANNELS * vox]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mut map = decode_channels(&slice, grid.n, prep.spacing_m, &prep.transform, options.decoding)?;
            if options.keep_measured {
                for (s, v) in chunk[b].values.iter().enumerate() {
                    if let Some(h) = v {
                        map.values[full[s]] = *h;
                    }
                }
            }
            out.push(map);
        }
    }
    Ok(out)
}

pub fn reconstruct(
    measurements: &Measurements,
    net: &mut ChannelMapNet<f32>,
    prep: &Preprocessing,
    options: ReconstructOptions,
) -> Result<ChannelMap> {
    Ok(reconstruct_batch(std::slice::from_ref(measurements), net, prep, options)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_examples() {
        let mut rng = Rng::seed_from_u64(0);
        let s = split_dataset(3240, 0.1, &mut rng).unwrap();
        assert_eq!(s.test.len(), 324);
        let s = split_dataset(10, 0.1, &mut rng).unwrap();
        assert_eq!(s.test.len(), 1);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(4, 0.1, &mut rng).is_err());
        assert!(split_dataset(1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn trailing_singleton_merges() {
        let order: Vec<usize> = (0..17).collect();
        let b = batches(&order, 8);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![8, 9]);
        let order: Vec<usize> = (0..18).collect();
        assert_eq!(batches(&order, 8).len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            test_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
