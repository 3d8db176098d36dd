use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fdrnn::data::{load_dataset, marginal_baseline_nll, surrogate_chorales, Split, SurrogateSpec};
use fdrnn::losses::{Grid, LossKind};
use fdrnn::optim::spectral_radius;
use fdrnn::run::{
    default_field_grids, evaluate, export_field, random_search, run_rng, train, Checkpoint,
    RunConfig, RunStatus, SearchSpace, DEFAULT_FIELD_TARGET, DEFAULT_RUNS,
};

#[derive(Parser)]
#[command(
    name = "fdrnn",
    version,
    about = "Fast-dropout recurrent networks for piano-roll sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Record elapsed seconds in the metrics file.
        #[arg(long)]
        wallclock: bool,
    },
    /// Random search over a hyperparameter grid.
    Search {
        /// Search-space JSON; the built-in grid when omitted.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// NLL of a checkpoint on the unsplit sequences of a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export a single-unit loss field as CSV.
    Field {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = DEFAULT_FIELD_TARGET)]
        target: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 3, value_names = ["MIN", "MAX", "STEPS"], allow_negative_numbers = true)]
        mean_grid: Option<Vec<String>>,
        #[arg(long, num_args = 3, value_names = ["MIN", "MAX", "STEPS"], allow_negative_numbers = true)]
        var_grid: Option<Vec<String>>,
    },
    /// Spectral radius of a checkpoint's recurrent weights.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic chorale-like dataset in the dataset JSON format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// NLL of the per-note frequency predictor fitted on the train split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name)
        .with_context(|| format!("unknown split {name:?}, expected train, valid or test"))
}

fn parse_grid(args: Option<Vec<String>>, default: Grid) -> Result<Grid> {
    let Some(a) = args else { return Ok(default) };
    let min: f64 = a[0].parse().context("grid minimum")?;
    let max: f64 = a[1].parse().context("grid maximum")?;
    let steps: usize = a[2].parse().context("grid size")?;
    Ok(Grid::new(min, max, steps)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            out,
            seed,
            wallclock,
        } => {
            let mut cfg: RunConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.record_wallclock |= wallclock;
            let ds = load_dataset(&data)?;
            let rec = train(&cfg, &ds, Some(&out))?;
            let last = rec.metrics.last().context("no metrics recorded")?;
            println!(
                "epochs {} train_nll {:.6} valid_nll {:.6} best_valid_nll {:.6} spectral_radius {:.6}",
                last.epoch,
                last.train_nll,
                last.valid_nll,
                rec.best_valid_nll.unwrap_or(f64::NAN),
                last.spectral_radius
            );
            if rec.status != RunStatus::Completed {
                bail!("run did not complete: {:?}", rec.status);
            }
        }
        Command::Search {
            space,
            runs,
            data,
            out,
            seed,
        } => {
            let space: SearchSpace = match space {
                Some(p) => read_json(&p)?,
                None => SearchSpace::default(),
            };
            let ds = load_dataset(&data)?;
            let outcome = random_search(&space, runs, &ds, seed, Some(&out))?;
            println!(
                "selected run {} valid_nll {:.6} test_nll {:.6}",
                outcome.selected,
                outcome.best().best_valid_nll.unwrap_or(f64::NAN),
                outcome.test_nll
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&data)?;
            println!("{:.6}", evaluate(&ckpt, &ds, parse_split(&split)?)?);
        }
        Command::Field {
            loss,
            target,
            out,
            mean_grid,
            var_grid,
        } => {
            let kind = LossKind::parse(&loss).with_context(|| format!("unknown loss {loss:?}"))?;
            let (dm, dv) = default_field_grids();
            let rows = export_field(
                kind,
                target,
                &parse_grid(mean_grid, dm)?,
                &parse_grid(var_grid, dv)?,
                &out,
            )?;
            println!("{rows} rows written to {}", out.display());
        }
        Command::Spectrum { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let params = ckpt.params.to_params::<f64>()?;
            println!("{:.9}", spectral_radius(&params.w_rec));
        }
        Command::Synth {
            out,
            seed,
            train,
            valid,
            test,
        } => {
            let d = SurrogateSpec::default();
            let spec = SurrogateSpec {
                train: train.unwrap_or(d.train),
                valid: valid.unwrap_or(d.valid),
                test: test.unwrap_or(d.test),
                ..d
            };
            let file = surrogate_chorales(&spec, &mut run_rng(seed, 0))?;
            std::fs::write(&out, serde_json::to_string(&file)?)?;
            println!("wrote {}", out.display());
        }
        Command::Baseline { data, split } => {
            let ds = load_dataset(&data)?;
            println!("{:.6}", marginal_baseline_nll(&ds, parse_split(&split)?)?);
        }
    }
    Ok(())
}
