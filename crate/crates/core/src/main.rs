use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mgpo::policy::PolicyParams;
use mgpo::rollout::Mode;
use mgpo::taskgen::{self, GenConfig};
use mgpo::trainer::{self, EvalSets, RunConfig, TrainOptions, TrainerError};

#[derive(Parser)]
#[command(name = "mgpo", about = "Grounding-then-answering RL on synthetic high-resolution search tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Id,
    Ood,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// TOML run configuration; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the counting environment defaults.
    #[arg(long)]
    counting: bool,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_pixels: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, TrainerError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.counting => RunConfig::counting(),
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = self.max_pixels {
            cfg.imaging.max_pixels = p;
        }
        if let Some(n) = self.iters {
            cfg.train.total_iterations = n;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a task dataset (manifest plus PPM images).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: u64,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        counting: bool,
    },
    /// Train a policy.
    Train {
        #[command(flatten)]
        run: Overrides,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the in- and out-of-distribution sets.
    Eval {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train both modes at each pixel budget and write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: Overrides,
        /// Comma-separated budgets; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<u64>>,
    },
    /// Greedy rollout of one dataset task, writing its transcript and crops.
    Replay {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
    },
    /// Align the evaluation records of two runs and write compare.csv.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        dump: bool,
    },
}

fn load_params(path: &Path, cfg: &RunConfig) -> Result<PolicyParams, TrainerError> {
    let params = trainer::load_checkpoint(path)?.params()?;
    if params.shape != cfg.policy_shape() {
        return Err(TrainerError::Config(format!(
            "checkpoint shape {:?} does not match config {:?}",
            params.shape,
            cfg.policy_shape()
        )));
    }
    Ok(params)
}

/// Uses the run directory's saved config when none is given explicitly.
fn with_run_config(run: &Overrides, checkpoint: &Path) -> Overrides {
    let mut run = run.clone();
    if run.config.is_none() && !run.counting {
        let saved = checkpoint.parent().and_then(Path::parent).map(|d| d.join(trainer::CONFIG_FILE));
        run.config = saved.filter(|p| p.exists());
    }
    run
}

fn run(cli: Cli) -> Result<(), TrainerError> {
    match cli.command {
        Command::GenData {
            out,
            count,
            split,
            config,
            counting,
        } => {
            let cfg = Overrides {
                config,
                counting,
                mode: None,
                seed: None,
                max_pixels: None,
                iters: None,
                out: None,
            }
            .resolve()?;
            let gen: GenConfig = match split {
                Split::Train => cfg.train_gen(),
                Split::Id => cfg.gen_eval_id.clone(),
                Split::Ood => cfg.gen_eval_ood.clone(),
            };
            let tasks = (0..count)
                .map(|i| taskgen::gen_task(&gen, cfg.question_kind, i))
                .collect::<Result<Vec<_>, _>>()?;
            taskgen::save_dataset(&tasks, &out)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let outcome = trainer::train(&cfg, None, TrainOptions { resume, stop_after: None })?;
            if let Some(last) = outcome.metrics.last() {
                println!("{}", serde_json::to_string(last).expect("metrics serialize"));
            }
        }
        Command::Eval { run, checkpoint } => {
            let cfg = with_run_config(&run, &checkpoint).resolve()?;
            let params = load_params(&checkpoint, &cfg)?;
            let sets = EvalSets::build(&cfg)?;
            let rcfg = cfg.rollout_config();
            let id = trainer::evaluate(&params, &sets.id, cfg.mode, &rcfg, None)?;
            let ood = trainer::evaluate(&params, &sets.ood, cfg.mode, &rcfg, None)?;
            println!("{}", serde_json::json!({ "id": id, "ood": ood }));
        }
        Command::Sweep { run, budgets } => {
            let cfg = run.resolve()?;
            let budgets = budgets.unwrap_or_else(|| cfg.sweep_budgets.clone());
            let rows = trainer::sweep_max_pixels(&cfg, &budgets, &[Mode::Mgpo, Mode::Grpo])?;
            print!("{}", trainer::sweep_csv(&rows));
        }
        Command::Replay {
            run,
            checkpoint,
            data,
            task,
        } => {
            let cfg = with_run_config(&run, &checkpoint).resolve()?;
            let params = load_params(&checkpoint, &cfg)?;
            let out = run.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let r = trainer::replay(&params, &cfg, &data, &task, &out)?;
            println!("{}", r.transcript.display());
            for v in &r.visuals {
                println!("{}", v.display());
            }
        }
        Command::Compare { a, b, out } => {
            let cmp = trainer::compare_dirs(&a, &b, &out)?;
            println!("{}", cmp.summary());
        }
        Command::Config { run, dump } => {
            let cfg = run.resolve()?;
            if dump {
                print!("{}", cfg.to_toml());
            } else {
                println!("configuration is valid");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
