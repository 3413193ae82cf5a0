use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};
use simmatch::data::{load_cifar10, make_blobs, make_split, Benchmark, BlobsConfig, Split, SplitSpec};
use simmatch::eval::{emit_plots, evaluate, run_grid, AblationGrid, GridAxis};
use simmatch::train::{read_metrics, run, unlabeled_probe, Checkpoint, RunOptions, TrainConfig, DEFAULT_PROBE_LIMIT};

#[derive(Parser)]
#[command(name = "simmatch", version, about = "Semi-supervised training with labeled-memory pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run; writes metrics.jsonl, config.kv and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_PROBE_LIMIT)]
        probe_limit: usize,
    },
    /// Evaluate a checkpoint on the test set and the unlabeled pool.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_PROBE_LIMIT)]
        probe_limit: usize,
    },
    /// Run an ablation grid over one axis and several seeds.
    Grid {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// alpha, temperature, strategy or component_removal.
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render accuracy curves from metrics logs (`label=path` or `path`).
    Plot {
        #[arg(required = true)]
        logs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Moving-average window over evaluation points.
        #[arg(long, default_value_t = 1)]
        smoothing: usize,
    },
    /// Write the labeled split manifest (and optionally the data as CSV).
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also export a vector dataset as `split,label,features` CSV.
        #[arg(long)]
        columnar: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Cifar,
    Imagenet,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Blobs,
    Cifar10,
    Columnar,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    dataset: DatasetKind,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    labeled_per_class: usize,
    /// Unlabeled blob count.
    #[arg(long, default_value_t = 4000)]
    unlabeled: usize,
    #[arg(long, default_value_t = simmatch::data::TOY_DIM)]
    dim: usize,
    #[arg(long, default_value_t = simmatch::data::TOY_SPREAD)]
    spread: f64,
    /// Seed for data generation and the split; defaults to the run seed.
    #[arg(long)]
    data_seed: Option<u64>,
    /// CIFAR-10 binary directory or columnar CSV file.
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Labeled split manifest overriding the generated split.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Benchmark> {
        let seed = self.data_seed.unwrap_or(seed);
        let mut bench = match self.dataset {
            DatasetKind::Blobs => make_blobs(&BlobsConfig::new(
                self.classes,
                self.labeled_per_class,
                self.unlabeled,
                self.dim,
                self.spread,
                seed,
            ))?,
            DatasetKind::Cifar10 => {
                let dir = self.data_path.as_deref().context("--data-path is required for cifar10")?;
                let (train, test) = load_cifar10(dir)?;
                let name = "cifar10".to_string();
                let split = make_split(
                    &train,
                    &SplitSpec {
                        n_per_class: self.labeled_per_class,
                        seed,
                        dataset_id: name.clone(),
                    },
                )?;
                Benchmark {
                    name,
                    train,
                    test,
                    split,
                }
            }
            DatasetKind::Columnar => {
                let path = self.data_path.as_deref().context("--data-path is required for columnar")?;
                let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("columnar").to_string();
                Benchmark::read_columnar(path, &name, self.classes)?
            }
        };
        if let Some(manifest) = &self.manifest {
            bench.split = Split::read_manifest(manifest, &bench.split.dataset_id, &bench.train)?;
        }
        Ok(bench)
    }
}

fn config_keys() -> &'static [&'static str] {
    static KEYS: OnceLock<Vec<&'static str>> = OnceLock::new();
    KEYS.get_or_init(|| {
        TrainConfig::toy()
            .to_kv()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .map(|k| &*Box::leak(k.into_boxed_str()))
            .collect()
    })
}

/// Preset, optional run file, then one `--<field>` flag per config field.
struct ConfigArgs {
    preset: Preset,
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = match self.preset {
            Preset::Toy => TrainConfig::toy(),
            Preset::Cifar => TrainConfig::cifar(),
            Preset::Imagenet => TrainConfig::imagenet(),
        };
        let mut config = match &self.file {
            Some(path) => TrainConfig::load(path, base)?,
            None => base,
        };
        for (key, value) in &self.overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let overrides = config_keys()
            .iter()
            .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
            .collect();
        Ok(Self {
            preset: *m.get_one::<Preset>("preset").expect("defaulted"),
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides,
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd
            .arg(
                Arg::new("preset")
                    .long("preset")
                    .value_parser(clap::value_parser!(Preset))
                    .default_value("toy")
                    .help("Base hyperparameters"),
            )
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Flat `key = value` run file applied over the preset"),
            )
            .next_help_heading("Config fields");
        for &key in config_keys() {
            let flag: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
            cmd = cmd.arg(Arg::new(key).long(flag).value_name("VALUE"));
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train(config: TrainConfig, bench: &Benchmark, out: &Path, resume: Option<&Path>, stop_after: Option<u64>, probe_limit: usize) -> Result<()> {
    let resume = resume
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let output = run(
        &config,
        bench,
        RunOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            stop_after,
            probe_limit,
        },
    )?;
    if let Some(eval) = output.final_eval() {
        print_json(eval)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Cmd::Train {
            config,
            data,
            out,
            resume,
            stop_after,
            probe_limit,
        } => {
            let config = config.resolve()?;
            let bench = data.load(config.seed)?;
            train(config, &bench, &out, resume.as_deref(), stop_after, probe_limit)?;
        }
        Cmd::Eval {
            checkpoint,
            data,
            probe_limit,
        } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let bench = data.load(ckpt.config.seed)?;
            if bench.split.dataset_id != ckpt.dataset_id {
                bail!("checkpoint was trained on `{}`, not `{}`", ckpt.dataset_id, bench.split.dataset_id);
            }
            let probe = unlabeled_probe(&bench, probe_limit)?;
            print_json(&evaluate(&ckpt, &bench.test, Some(&probe))?)?;
        }
        Cmd::Grid {
            config,
            data,
            axis,
            values,
            seeds,
            out,
        } => {
            let grid = AblationGrid {
                axis: axis.parse::<GridAxis>()?,
                values,
                base: config.resolve()?,
                seeds,
            };
            let results = run_grid(&grid, |seed| data.load(seed).map_err(to_core), Some(&out))?;
            print!("{}", results.summary_text());
            let failed = results.results.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                bail!("{failed} grid runs failed; see {}", out.join("results.csv").display());
            }
        }
        Cmd::Plot { logs, out, smoothing } => {
            let runs = logs
                .iter()
                .map(|spec| {
                    let (label, path) = match spec.split_once('=') {
                        Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                        None => {
                            let p = PathBuf::from(spec);
                            let label = p
                                .parent()
                                .and_then(|d| d.file_name())
                                .map(|n| n.to_string_lossy().into_owned())
                                .unwrap_or_else(|| spec.clone());
                            (label, p)
                        }
                    };
                    Ok((label, read_metrics(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            for path in emit_plots(&runs, &out, smoothing)? {
                println!("{}", path.display());
            }
        }
        Cmd::Split {
            data,
            seed,
            out,
            columnar,
        } => {
            let bench = data.load(seed)?;
            bench.split.write_manifest(&out)?;
            if let Some(path) = columnar {
                bench.write_columnar(&path)?;
            }
            println!("{} labeled of {} ({})", bench.split.num_labeled(), bench.train.len(), bench.name);
        }
    }
    Ok(())
}

fn to_core(e: anyhow::Error) -> simmatch::Error {
    match e.downcast::<simmatch::Error>() {
        Ok(core) => core,
        Err(other) => simmatch::Error::InvalidInput(format!("{other:#}")),
    }
}
