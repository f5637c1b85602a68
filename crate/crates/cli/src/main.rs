//! `qttt` — command-line harness for the query-only test-time training
//! laboratory.
//!
//! Subcommands: `gen` (datasets), `theory-check` (randomized verification
//! suites), `flops` (budget tables), `train` (base-model checkpoint),
//! `run` (experiment sweeps), `report` (aggregate tables), `sweep-lr`
//! (adaptation learning-rate picker). Exit code 0 means every check or run
//! succeeded.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qttt_core::adapt::{sweep_learning_rates, AdaptationConfig};
use qttt_core::flops::{FlopModel, MatchMode};
use qttt_core::harness::{
    generate_dataset, report_from_dir, run_experiment, training_corpus, ExperimentConfig,
    TaskSpec,
};
use qttt_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use qttt_core::model::{
    tokens_from_bytes, train_base_model, ModelConfig, TrainConfig, VOCAB_SIZE,
};
use qttt_core::optim::{OptimKind, OptimizerConfig};
use qttt_core::tasks::{
    render_task_tokens, write_jsonl, BugType, PromptStyle, TaskKind,
};
use qttt_core::verification;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "qttt", version, about = "Query-only test-time training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Transactions,
    Code,
}

impl From<KindArg> for TaskKind {
    fn from(k: KindArg) -> TaskKind {
        match k {
            KindArg::Transactions => TaskKind::Transactions,
            KindArg::Code => TaskKind::Code,
        }
    }
}

#[derive(Args)]
struct TaskArgs {
    /// Task family to generate.
    #[arg(long, value_enum, default_value = "transactions")]
    kind: KindArg,
    /// Comma-separated length sweep: operations per log, or code lines.
    #[arg(long = "lengths", value_delimiter = ',', default_values_t = vec![25usize])]
    lengths: Vec<usize>,
    /// Number of seeded instances per length.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Base seed; instance i uses seed base + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Anomaly mix: "all" or a comma list of bug types (transactions).
    #[arg(long = "bug-mix", default_value = "all")]
    bug_mix: String,
    /// Accounts per transaction log.
    #[arg(long = "n-accounts", default_value_t = 3)]
    n_accounts: usize,
    /// Allow lengths outside the default 25..=500 range.
    #[arg(long)]
    wide: bool,
}

impl TaskArgs {
    fn to_spec(&self) -> Result<TaskSpec> {
        let bug_mix = if self.bug_mix == "all" {
            BugType::ALL_BUGS.to_vec()
        } else {
            self.bug_mix
                .split(',')
                .map(|s| {
                    BugType::parse(s.trim())
                        .with_context(|| format!("unknown bug type {s:?}"))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(TaskSpec {
            kind: self.kind.into(),
            lengths: self.lengths.clone(),
            seeds: (0..self.seeds as u64).map(|i| self.seed + i).collect(),
            bug_mix,
            n_accounts: self.n_accounts,
            wide: self.wide,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSONL dataset of synthetic long-context tasks.
    Gen {
        #[command(flatten)]
        task: TaskArgs,
        /// Output JSONL path.
        #[arg(long, default_value = "tasks.jsonl")]
        out: PathBuf,
    },
    /// Run the randomized verification suites for every analysis claim.
    TheoryCheck {
        /// Trials per suite.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the inference-compute budget table for one schedule.
    Flops {
        #[arg(long, default_value_t = 32)]
        layers: u64,
        #[arg(long, default_value_t = 4096)]
        dim: u64,
        #[arg(long = "mlp-ratio", default_value_t = 4)]
        mlp_ratio: u64,
        /// Context length T.
        #[arg(long, default_value_t = 100_000)]
        ctx: u64,
        /// Span length k.
        #[arg(long, default_value_t = 128)]
        span: u64,
        /// Adaptation steps N.
        #[arg(long, default_value_t = 32)]
        steps: u64,
        /// Emit JSON instead of aligned text.
        #[arg(long)]
        json: bool,
    },
    /// Train the desk-scale base model on rendered task documents.
    Train {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long = "mlp-ratio", default_value_t = 2)]
        mlp_ratio: usize,
        #[arg(long = "max-context", default_value_t = 4096)]
        max_context: usize,
        /// Disable rotary positions (ablation).
        #[arg(long = "no-rope")]
        no_rope: bool,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 256)]
        window: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
    },
    /// Run a configured experiment sweep; writes results.csv and traces.
    Run {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory (also honors
        /// QTTT_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a run directory into accuracy / attention-mass tables.
    Report {
        /// Directory containing results.csv.
        #[arg(long)]
        results: PathBuf,
    },
    /// Try several adaptation learning rates on one rendered task.
    SweepLr {
        #[command(flatten)]
        task: TaskArgs,
        /// Base-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1e-2, 3e-3, 1e-3, 3e-4, 1e-4])]
        rates: Vec<f64>,
        #[arg(long = "span-len", default_value_t = 16)]
        span_len: usize,
        #[arg(long = "n-steps", default_value_t = 32)]
        n_steps: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { task, out } => {
            let spec = task.to_spec()?;
            let tasks = generate_dataset(&spec)?;
            write_jsonl(&tasks, &out)?;
            let total_bytes: usize = tasks
                .iter()
                .map(|t| render_task_tokens(t, PromptStyle::Direct).len())
                .sum();
            println!(
                "wrote {} tasks to {} ({} lengths x {} seeds, mean render {} bytes)",
                tasks.len(),
                out.display(),
                spec.lengths.len(),
                spec.seeds.len(),
                total_bytes / tasks.len().max(1)
            );
            Ok(0)
        }
        Command::TheoryCheck { trials, seed } => {
            let mut reports = verification::run_all(trials, seed);
            reports.push(verification::check_wq_chain_rule(seed ^ 0x10));
            let mut failed = false;
            for r in &reports {
                println!("{}", r.summary_line());
                failed |= !r.passed();
            }
            Ok(if failed { 1 } else { 0 })
        }
        Command::Flops { layers, dim, mlp_ratio, ctx, span, steps, json } => {
            let model = FlopModel::new(layers, dim, mlp_ratio);
            let prefill = model.prefill_flops(ctx)?;
            let qttt = model.qttt_partial_flops(span, ctx, steps, false)?;
            let qttt_full = model.qttt_partial_flops(span, ctx, steps, true)?;
            let rule = model.matched_thinking_tokens(span, steps, ctx, MatchMode::RuleOfThumb)?;
            let exact = model.matched_thinking_tokens(span, steps, ctx, MatchMode::Exact)?;
            let gen_rule = model.gen_flops(rule, ctx);
            let bon = model.matched_bon_trajectories(&qttt, 512.min(rule.max(1)), ctx)?;
            if json {
                let v = serde_json::json!({
                    "model": {"layers": layers, "dim": dim, "mlp_ratio": mlp_ratio},
                    "context": ctx,
                    "span": span,
                    "steps": steps,
                    "c_quad": model.c_quad().to_string(),
                    "c_tok": model.c_tok().to_string(),
                    "prefill_flops": prefill.flops.to_string(),
                    "qttt_flops": qttt.flops.to_string(),
                    "qttt_flops_with_in_span": qttt_full.flops.to_string(),
                    "matched_thinking_tokens_rule": rule,
                    "matched_thinking_tokens_exact": exact,
                    "thinking_flops_at_rule": gen_rule.flops.to_string(),
                    "bon_trajectories_at_512_tokens": bon,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("model              L={layers} d={dim} r={mlp_ratio}");
                println!("context T          {ctx}");
                println!("schedule           k={span} N={steps}");
                println!("C_quad             {}", model.c_quad());
                println!("C_tok              {}", model.c_tok());
                println!("prefill            {}", prefill.flops);
                println!("qttt (k<<T form)   {}", qttt.flops);
                println!("qttt (+in-span)    {}", qttt_full.flops);
                println!("matched T_think    {rule} (rule of thumb 2Nk)");
                println!("matched T_think    {exact} (exact bisection)");
                println!("thinking at rule   {}", gen_rule.flops);
                println!("best-of-N @512tok  {bon}");
            }
            Ok(0)
        }
        Command::Train {
            task,
            layers,
            heads,
            dim,
            mlp_ratio,
            max_context,
            no_rope,
            steps,
            window,
            lr,
            out,
        } => {
            let spec = task.to_spec()?;
            let corpus = training_corpus(&spec)?;
            let config = ModelConfig {
                layers,
                heads,
                dim,
                mlp_ratio,
                vocab: VOCAB_SIZE,
                rope_enabled: !no_rope,
                max_context,
                tied_embeddings: false,
            };
            let train = TrainConfig {
                steps,
                window,
                seed: task.seed,
                optimizer: OptimizerConfig::adamw(lr),
            };
            let (params, report) = train_base_model(&config, &corpus, &train)?;
            save_checkpoint(&params, &out)?;
            println!(
                "trained {} steps on {} documents; loss {:.4} -> {:.4}; checkpoint {}",
                steps,
                corpus.len(),
                report.first_loss(),
                report.final_loss(),
                out.display()
            );
            Ok(0)
        }
        Command::Run { config, out } => {
            let mut config = ExperimentConfig::from_json_file(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            if let Some(out) = out {
                config.out_dir = out;
            } else if let Ok(env_out) = std::env::var("QTTT_OUT_DIR") {
                config.out_dir = PathBuf::from(env_out);
            }
            let artifacts = run_experiment(&config)?;
            println!(
                "{} rows -> {} ({} adaptation traces)",
                artifacts.rows.len(),
                artifacts.csv_path.display(),
                artifacts.n_traces
            );
            print!("{}", qttt_core::harness::report_tables(&artifacts.rows));
            Ok(0)
        }
        Command::Report { results } => {
            print!("{}", report_from_dir(&results)?);
            Ok(0)
        }
        Command::SweepLr { task, checkpoint, rates, span_len, n_steps } => {
            let params = load_checkpoint(&checkpoint)?;
            let spec = task.to_spec()?;
            let tasks = generate_dataset(&spec)?;
            let Some(instance) = tasks.first() else {
                bail!("task spec generated no instances");
            };
            let tokens = tokens_from_bytes(&render_task_tokens(instance, PromptStyle::Direct));
            let base = AdaptationConfig {
                n_steps,
                span_len,
                lr: 1e-3,
                optimizer: OptimKind::AdaptiveMoment,
                weight_decay: 0.01,
                grad_clip: 1.0,
                seed: task.seed,
            };
            let trials = sweep_learning_rates(&params, &tokens, &base, &rates)?;
            println!("{:<12}{:<18}{:<18}{}", "lr", "first-quarter", "last-quarter", "diverged");
            for t in &trials {
                println!(
                    "{:<12}{:<18.4}{:<18.4}{}",
                    t.lr, t.mean_loss_first_quarter, t.mean_loss_last_quarter, t.diverged
                );
            }
            Ok(0)
        }
    }
}
