//! `chanmap`: generate channel-map datasets, train the reconstruction
//! network, run the trilinear baseline and evaluate.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use chanmap::baseline::{trilinear_baseline, Interpolation};
use chanmap::checkpoint::load_model;
use chanmap::config::RunConfig;
use chanmap::eval::{compare_many, export_slices, gain_map, MapTriple, SliceSpec};
use chanmap::model::ChannelMapNet;
use chanmap::rng::{stream, stream_rng};
use chanmap::sim::{generate_dataset, read_map_file, write_map_file, ChannelMap, MapFile, MapFileHeader, MapKind};
use chanmap::trainer::{self, reconstruct_batch, Measurements, RunRecord, Split};

#[derive(Parser)]
#[command(name = "chanmap", version, about = "Small-scale channel map reconstruction")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Defaults used when no configuration file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one environment and write ground-truth and measured map files.
    Generate,
    /// Train on a measured map file; writes a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Reconstruct full maps from the selected positions of a map file.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// Only receivers in the test half of this split file.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Trilinear reconstruction from the selected positions.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum)]
        interpolation: Option<InterpArg>,
    },
    /// Compare reconstructions with the ground truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        trilinear: PathBuf,
        /// Slices such as `x=8`; defaults to the grid midpoints.
        #[arg(long = "slice")]
        slices: Vec<SliceSpec>,
        /// Receiver whose slices are exported; defaults to the first.
        #[arg(long)]
        receiver: Option<usize>,
    },
    /// Export a run's loss curve as CSV.
    Losscurve {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    Complex,
    Db,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Full => RunConfig::default(),
        },
    };
    Ok(match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn read_maps(path: &Path) -> Result<MapFile> {
    read_map_file(path).with_context(|| format!("reading {}", path.display()))
}

fn test_ids(split: Option<&PathBuf>) -> Result<Option<BTreeSet<usize>>> {
    let Some(path) = split else { return Ok(None) };
    let split: Split = serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
    Ok(Some(split.test.into_iter().collect()))
}

/// Maps (with ids) of `file`, restricted to `ids` when given. Split files
/// index records by position.
fn select<'a>(file: &'a MapFile, ids: &Option<BTreeSet<usize>>) -> Vec<(usize, &'a ChannelMap)> {
    file.header
        .receiver_ids
        .iter()
        .zip(&file.maps)
        .enumerate()
        .filter(|(pos, _)| ids.as_ref().is_none_or(|s| s.contains(pos)))
        .map(|(_, (&id, m))| (id, m))
        .collect()
}

fn write_maps(path: &Path, source: &MapFileHeader, kind: MapKind, maps: &[(usize, ChannelMap)]) -> Result<()> {
    let header = MapFileHeader {
        kind,
        scenario: source.scenario.clone(),
        receivers: maps.len(),
        environment_seed: source.environment_seed,
        receiver_ids: maps.iter().map(|(id, _)| *id).collect(),
    };
    let values: Vec<ChannelMap> = maps.iter().map(|(_, m)| m.clone()).collect();
    write_map_file(path, &header, &values)?;
    println!("wrote {} ({} maps)", path.display(), maps.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match &cli.command {
        Command::Generate => {
            let ds = generate_dataset(&cfg.scenario, &cfg.dataset)?;
            write_map_file(&out.join("truth.chmap"), &ds.header(MapKind::GroundTruth), &ds.truth)?;
            write_map_file(&out.join("measured.chmap"), &ds.header(MapKind::Measured), &ds.measured)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            println!(
                "generated {} receivers on a {}³ grid in {}",
                ds.receivers.len(),
                cfg.scenario.grid_n,
                out.display()
            );
        }
        Command::Train { data } => {
            let file = read_maps(data)?;
            if file.header.kind != MapKind::Measured {
                eprintln!("warning: training on a {:?} map file", file.header.kind);
            }
            let alpha = file.header.scenario.alpha;
            let net = ChannelMapNet::new(cfg.model, &mut stream_rng(cfg.train.seed, stream::INIT, 0))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let outcome = trainer::train(&file.maps, alpha, net, &cfg.train, Some(&out), |e, secs| {
                println!(
                    "epoch {:>4}  train {:.6}  test {:.6}  lr {:.3e}  {secs:.1}s",
                    e.epoch, e.train_loss, e.test_loss, e.lr
                );
            })?;
            println!(
                "best epoch {} (test loss {:.6}); run written to {}",
                outcome.best_epoch,
                outcome.record.best().map_or(f64::NAN, |b| b.test_loss),
                out.display()
            );
        }
        Command::Reconstruct {
            model,
            measurements,
            split,
        } => {
            let (mut net, prep) = load_model::<f32>(model).with_context(|| format!("reading {}", model.display()))?;
            let file = read_maps(measurements)?;
            let grid = prep.grid()?;
            let chosen = select(&file, &test_ids(split.as_ref())?);
            let meas = chosen
                .iter()
                .map(|(_, m)| Measurements::from_map(m, &grid))
                .collect::<chanmap::Result<Vec<_>>>()?;
            let maps = reconstruct_batch(&meas, &mut net, &prep, cfg.reconstruct)?;
            let maps: Vec<(usize, ChannelMap)> = chosen.iter().map(|(id, _)| *id).zip(maps).collect();
            write_maps(&out.join("cnn.chmap"), &file.header, MapKind::Cnn, &maps)?;
        }
        Command::Baseline {
            data,
            split,
            interpolation,
        } => {
            let file = read_maps(data)?;
            let grid = chanmap::protocol::select_positions(file.header.scenario.grid_n, file.header.scenario.alpha)?;
            let mode = match interpolation {
                Some(InterpArg::Complex) => Interpolation::Complex,
                Some(InterpArg::Db) => Interpolation::Db,
                None => cfg.eval.interpolation,
            };
            let maps = select(&file, &test_ids(split.as_ref())?)
                .into_iter()
                .map(|(id, m)| Ok((id, trilinear_baseline(m, &grid, mode)?)))
                .collect::<chanmap::Result<Vec<_>>>()?;
            write_maps(&out.join("trilinear.chmap"), &file.header, MapKind::Trilinear, &maps)?;
        }
        Command::Eval {
            truth,
            cnn,
            trilinear,
            slices,
            receiver,
        } => {
            let truth = read_maps(truth)?;
            let cnn = read_maps(cnn)?;
            let tri = read_maps(trilinear)?;
            let n = truth.header.scenario.grid_n;
            let slices = if slices.is_empty() {
                cfg.eval.slices_for(n)
            } else {
                slices.clone()
            };
            let mut triples = Vec::new();
            for &id in &cnn.header.receiver_ids {
                let (Some(t), Some(c), Some(b)) = (truth.by_id(id), cnn.by_id(id), tri.by_id(id)) else {
                    bail!("receiver {id} is missing from the truth or trilinear file");
                };
                triples.push((
                    id,
                    MapTriple {
                        truth: t,
                        cnn: c,
                        trilinear: b,
                    },
                ));
            }
            if triples.is_empty() {
                bail!("no receivers to evaluate");
            }
            let pairs: Vec<MapTriple> = triples.iter().map(|(_, t)| *t).collect();
            let report = compare_many(&pairs, &slices, &truth.header.scenario.fingerprint())?;
            let table = report.to_table();
            print!("{table}");
            fs::write(out.join("report.txt"), &table)?;
            report.write_csv(&out.join("report.csv"))?;
            let id = receiver.unwrap_or(triples[0].0);
            let Some((_, t)) = triples.iter().find(|(r, _)| *r == id) else {
                bail!("receiver {id} was not evaluated");
            };
            let dir = out.join("slices");
            for (kind, map) in [
                (MapKind::GroundTruth, t.truth),
                (MapKind::Cnn, t.cnn),
                (MapKind::Trilinear, t.trilinear),
            ] {
                let g = gain_map(map, kind);
                export_slices(&g, &slices, &dir, &format!("r{id}_{}", chanmap::eval::kind_name(kind)))?;
            }
            println!("report and slices written to {}", out.display());
        }
        Command::Losscurve { run } => {
            let record = RunRecord::read_csv(&run.join(trainer::RUN_RECORD))
                .with_context(|| format!("reading the run record in {}", run.display()))?;
            let path = out.join("losscurve.csv");
            record.write_csv(&path)?;
            for e in &record.epochs {
                println!("{},{},{},{}", e.epoch, e.train_loss, e.test_loss, e.lr);
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
