use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drnet_core::config::PipelineConfig;
use drnet_core::pipeline::{self, Tasks};
use drnet_core::reconstruct::CombineMethod;
use drnet_core::Result;

/// Dissect a ConvNet into per-class channel importances and run cheap
/// sub-networks for class subsets.
#[derive(Parser)]
#[command(name = "drnet", version)]
struct Cli {
    /// TOML pipeline configuration. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory with the four MNIST IDX files.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Model file (.drnm).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Class importance vector file (.civ.csv).
    #[arg(long, global = true)]
    civ: Option<PathBuf>,
    /// Directory for reports and other artifacts.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base network and save it.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Seed for initialization and data order.
        #[arg(long)]
        train_seed: Option<u64>,
    },
    /// Optimize per-image gates and write one importance vector per class.
    Dissect {
        /// Training images per class.
        #[arg(long)]
        per_class_n: Option<usize>,
        /// L1 weight on the gates.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Combine class importance vectors into a run/skip mask (.cciv.csv).
    Reconstruct {
        /// Comma-separated class ids, at least two.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<usize>,
        #[command(flatten)]
        combine: CombineArgs,
        /// Output file; defaults to classes_<ids>.cciv.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one test image through a masked sub-network.
    Infer {
        /// Mask file from `reconstruct`.
        #[arg(long)]
        cciv: PathBuf,
        /// Index of the image in the test set.
        #[arg(long)]
        image: usize,
    },
    /// Compare full and sub-network accuracy on sub-tasks.
    Eval {
        #[command(flatten)]
        tasks: TaskArgs,
        #[command(flatten)]
        combine: CombineArgs,
    },
    /// Tabulate the running-channel fraction against the threshold.
    Sweep {
        #[command(flatten)]
        tasks: TaskArgs,
        #[arg(long)]
        method: Option<CombineMethod>,
        /// Comma-separated ascending thresholds; defaults to 21 steps up to the largest importance.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Class similarity matrix and layer-wise running channels.
    Analyze {
        #[command(flatten)]
        tasks: TaskArgs,
        #[command(flatten)]
        combine: CombineArgs,
        /// Importance above which a channel counts as used.
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

#[derive(Args)]
struct CombineArgs {
    /// union or xor.
    #[arg(long)]
    method: Option<CombineMethod>,
    /// Fixed threshold; otherwise chosen to meet --target.
    #[arg(long)]
    thr: Option<f64>,
    /// Running-channel fraction the chosen threshold must not exceed.
    #[arg(long)]
    target: Option<f64>,
}

#[derive(Args)]
struct TaskArgs {
    /// One sub-task given as comma-separated class ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "pairs")]
    classes: Option<Vec<usize>>,
    /// Number of random class pairs.
    #[arg(long)]
    pairs: Option<usize>,
    /// Seed for drawing the pairs.
    #[arg(long)]
    seed: Option<u64>,
}

impl TaskArgs {
    fn resolve(&self, cfg: &mut PipelineConfig) -> Tasks {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.pairs {
            cfg.reconstruct.pairs = p;
        }
        match &self.classes {
            Some(c) => Tasks::Classes(c.clone()),
            None => Tasks::RandomPairs {
                count: cfg.reconstruct.pairs,
                seed: cfg.seed,
            },
        }
    }
}

impl CombineArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(m) = self.method {
            cfg.reconstruct.method = m;
        }
        if let Some(t) = self.thr {
            cfg.reconstruct.threshold = Some(t);
        }
        if let Some(t) = self.target {
            cfg.reconstruct.target_fraction = t;
            if self.thr.is_none() {
                cfg.reconstruct.threshold = None;
            }
        }
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let paths = &mut cfg.paths;
    for (flag, slot) in [
        (&cli.data_dir, &mut paths.data_dir),
        (&cli.model, &mut paths.model),
        (&cli.civ, &mut paths.civ),
        (&cli.out_dir, &mut paths.output_dir),
    ] {
        if let Some(v) = flag {
            *slot = v.clone();
        }
    }
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = base_config(&cli)?;
    let report = match cli.command {
        Command::Train {
            epochs,
            learning_rate,
            batch_size,
            train_seed,
        } => {
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.seed, train_seed);
            pipeline::run_train(&cfg)?.to_string()
        }
        Command::Dissect {
            per_class_n,
            gamma,
            iterations,
        } => {
            set(&mut cfg.per_class_n, per_class_n);
            set(&mut cfg.dissect.gamma, gamma);
            set(&mut cfg.dissect.iterations, iterations);
            pipeline::run_dissect(&cfg)?.to_string()
        }
        Command::Reconstruct { classes, combine, out } => {
            combine.apply(&mut cfg);
            pipeline::run_reconstruct(&cfg, &classes, out.as_deref())?.to_string()
        }
        Command::Infer { cciv, image } => pipeline::run_infer(&cfg, Path::new(&cciv), image)?.to_string(),
        Command::Eval { tasks, combine } => {
            combine.apply(&mut cfg);
            let tasks = tasks.resolve(&mut cfg);
            pipeline::run_eval(&cfg, &tasks)?.to_string()
        }
        Command::Sweep {
            tasks,
            method,
            thresholds,
        } => {
            set(&mut cfg.reconstruct.method, method);
            let tasks = tasks.resolve(&mut cfg);
            pipeline::run_sweep(&cfg, &tasks, thresholds.as_deref())?.to_string()
        }
        Command::Analyze {
            tasks,
            combine,
            epsilon,
        } => {
            combine.apply(&mut cfg);
            set(&mut cfg.analyze.epsilon, epsilon);
            let tasks = tasks.resolve(&mut cfg);
            pipeline::run_analyze(&cfg, &tasks)?.to_string()
        }
    };
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
