use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlhf_harness::checkpoint::Checkpoint;
use mlhf_harness::config::{ExperimentConfig, OptimizerConfig};
use mlhf_harness::experiments::{ablate, meta_train, train, Workspace};
use mlhf_harness::plot::{emit_plots, PlotSpec};
use mlhf_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "mlhf", about = "Meta-learned Hessian-free optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the damping and preconditioner controllers.
    MetaTrain(RunArgs),
    /// Train the model with one optimizer.
    Train(RunArgs),
    /// Meta-train the four ablation configurations.
    Ablate(RunArgs),
    /// Render SVG charts from metrics CSVs.
    Plot {
        csvs: Vec<PathBuf>,
        #[arg(long = "metric", default_values_t = vec!["train_loss".to_string()])]
        metrics: Vec<String>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long)]
        log_time: bool,
    },
    /// Print a checkpoint's header and array summary.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, meta: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides)?,
            None => ExperimentConfig::default_spirals(&self.overrides)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        if let Some(name) = &self.optimizer {
            if cfg.optimizer.name() != name {
                cfg.optimizer = OptimizerConfig::default_for(name)?;
            }
        }
        if let Some(n) = self.steps {
            if meta {
                cfg.meta.iterations = n;
            } else {
                cfg.train.steps = n;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| HarnessError::io(&cfg.out, e))?;
    let path = cfg.out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| HarnessError::io(&path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(false)?;
            write_config(&cfg)?;
            let csv = cfg.out.join(format!("train_{}.csv", cfg.optimizer.name()));
            let s = train(&Workspace::new(cfg)?, &csv)?;
            match s.final_accuracy {
                Some(a) => println!("{}: {} steps, final loss {:.6}, test accuracy {:.4}", csv.display(), s.steps, s.final_loss, a),
                None => println!("{}: {} steps, final loss {:.6}", csv.display(), s.steps, s.final_loss),
            }
        }
        Command::MetaTrain(args) => {
            let cfg = args.resolve(true)?;
            write_config(&cfg)?;
            let (csv, ck) = (cfg.out.join("meta_train.csv"), cfg.out.join("controllers.ckpt"));
            let s = meta_train(&Workspace::new(cfg)?, &csv, &ck)?;
            println!(
                "{}: {} meta-iterations, {} divergences, final l_p average {:?}; controllers in {}",
                csv.display(),
                s.records.len(),
                s.divergences(),
                s.final_lp_avg(),
                ck.display()
            );
        }
        Command::Ablate(args) => {
            let cfg = args.resolve(true)?;
            write_config(&cfg)?;
            for (k, s) in ablate(&cfg, &cfg.out)?.iter().enumerate() {
                println!("config {}: {} final l_p average {:?}", k + 1, s.csv.display(), s.final_lp_avg());
            }
        }
        Command::Plot { csvs, metrics, out, log_time } => {
            let outcome = emit_plots(&csvs, &PlotSpec { metrics, log_wall_time: log_time, out_dir: out })?;
            for c in &outcome.charts {
                println!("{} ({} series)", c.path.display(), c.series);
            }
        }
        Command::InspectCheckpoint { path } => {
            let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            let ck = Checkpoint::from_bytes(&bytes)?;
            print!("{}", Checkpoint::header(&bytes).unwrap_or_default());
            let values: usize = ck.arrays.iter().map(|a| a.data.len()).sum();
            println!("{} arrays, {values} values, checksum ok", ck.arrays.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
