use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use np_lab::metrics::Mask;
use np_lab::models::{AttentionKind, ModelKind, VarianceMode};
use np_lab::taskgen::KernelFamily;
use np_lab::training::TrainConfig;
use np_lab::Result;
use np_lab_cli::*;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "np-lab", version, about = "Train and evaluate neural processes on GP regression tasks")]
struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (capped by NP_LAB_THREADS).
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample GP tasks into a line-delimited JSON dataset.
    Generate {
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(long)]
        family: Option<KernelFamily>,
    },
    /// Train a model and write checkpoints plus a CSV log.
    Train(TrainArgs),
    /// Score a checkpoint (or `exact-gp`) on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        mask: Option<Mask>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Draw the predictive mean and ±3σ band for one task as SVG.
    Plot {
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        task_index: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train and evaluate every cell of a parameter sweep.
    Ablate {
        #[command(flatten)]
        base: TrainArgs,
        /// Comma-separated values for each swept axis.
        #[arg(long, value_delimiter = ',')]
        sweep_lambda1: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sweep_lambda2: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sweep_beta: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sweep_n_context: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_enum::<AttentionKind>)]
        sweep_attention: Vec<AttentionKind>,
        #[arg(long, value_delimiter = ',', value_parser = parse_enum::<VarianceMode>)]
        sweep_variance_mode: Vec<VarianceMode>,
        #[arg(long)]
        eval_tasks: Option<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    family: Option<KernelFamily>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_parser = parse_enum::<AttentionKind>)]
    attention: Option<AttentionKind>,
    /// Use raw exponentiated scores instead of softmax weights.
    #[arg(long)]
    unnormalized_attention: bool,
    #[arg(long, value_parser = parse_enum::<VarianceMode>)]
    variance_mode: Option<VarianceMode>,
    /// Sets d_h, d_z and d_u together.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.model, self.model);
        set(&mut c.epochs, self.epochs);
        set(&mut c.data.family, self.family);
        set(&mut c.lr, self.lr);
        set(&mut c.beta, self.beta);
        set(&mut c.lambda1, self.lambda1);
        set(&mut c.lambda2, self.lambda2);
        set(&mut c.attention, self.attention);
        set(&mut c.variance_mode, self.variance_mode);
        set(&mut c.batches_per_epoch, self.batches_per_epoch);
        set(&mut c.batch_size, self.batch_size);
        if self.unnormalized_attention {
            c.normalize_attention = false;
        }
        if let Some(w) = self.width {
            c.dims.dh = w;
            c.dims.dz = w;
            c.dims.du = w;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let out = &cli.out;
    match cli.command {
        Command::Generate { n_tasks, family } => {
            set(&mut cfg.generate.n_tasks, n_tasks);
            set(&mut cfg.generate.data.family, family);
            let p = cmd_generate(&cfg.generate, out)?;
            println!("{}", p.display());
        }
        Command::Train(args) => {
            args.apply(&mut cfg.train);
            let p = cmd_train(&cfg.train, out)?;
            println!("{}", p.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            mask,
            samples,
        } => {
            let e = &mut cfg.eval;
            e.checkpoint = checkpoint.or(e.checkpoint.take());
            e.dataset = dataset.or(e.dataset.take());
            set(&mut e.mask, mask);
            set(&mut e.samples, samples);
            let r = cmd_eval(e, out, cli.jobs)?;
            println!(
                "{} mask={} ll={:.4} ece={:.4} points={}",
                r.model,
                r.mask.name(),
                r.ll,
                r.ece,
                r.n_points
            );
        }
        Command::Plot {
            checkpoint,
            tasks,
            task_index,
            samples,
        } => {
            let p = &mut cfg.plot;
            p.checkpoint = checkpoint.or(p.checkpoint.take());
            p.tasks = tasks.or(p.tasks.take());
            set(&mut p.task_index, task_index);
            set(&mut p.samples, samples);
            let path = cmd_plot(p, out)?;
            println!("{}", path.display());
        }
        Command::Ablate {
            base,
            sweep_lambda1,
            sweep_lambda2,
            sweep_beta,
            sweep_n_context,
            sweep_attention,
            sweep_variance_mode,
            eval_tasks,
        } => {
            base.apply(&mut cfg.train);
            let s = &mut cfg.ablate.sweep;
            for (axis, v) in [(&mut s.lambda1, sweep_lambda1), (&mut s.lambda2, sweep_lambda2), (&mut s.beta, sweep_beta)] {
                if !v.is_empty() {
                    *axis = v;
                }
            }
            if !sweep_n_context.is_empty() {
                s.n_context = sweep_n_context;
            }
            if !sweep_attention.is_empty() {
                s.attention = sweep_attention;
            }
            if !sweep_variance_mode.is_empty() {
                s.variance_mode = sweep_variance_mode;
            }
            set(&mut cfg.ablate.eval_tasks, eval_tasks);
            let rows = cmd_ablate(&cfg, out, cli.jobs)?;
            println!("{} cells -> {}", rows.len(), out.join(ABLATION_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
