use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use r3l::config::{RunConfig, Variant};
use r3l::harness::checkpoint::{self, Checkpoint};
use r3l::harness::experiments::{run_matrix, train_eval_gap};
use r3l::harness::goals::{load_goal_pool, save_goal_pool};
use r3l::harness::output::{emit_outputs, parse_metrics_csv};
use r3l::harness::pipeline::pretrain_vae;
use r3l::harness::{evaluate, EvalPolicy};
use r3l::training::{stream_rng, streams, Trainer};
use r3l::vae::VaeModel;
use r3l::vice::GoalPool;

const PLOTTED: &[&str] = &["train_metric", "train_success", "eval_metric", "eval_success"];

#[derive(Parser)]
#[command(name = "r3l", about = "Reset-free RL with learned rewards on simulated manipulation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and freeze the image representation, then save it.
    PretrainVae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate goal examples and store them as images plus a manifest.
    CollectGoals {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing checkpoints, metrics and plots to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a run checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a policy or run checkpoint on the task's start-state grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rollout: Option<usize>,
    },
    /// Steps-to-threshold over resets × observations × rewards.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final training pose distance beside grid evaluation.
    Gap {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-emit a metrics CSV and its learning curves.
    Plot {
        #[arg(long)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| r3l::Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let seed = std::env::var("R3L_SEED").ok();
    Ok(RunConfig::from_json_with_seed(&text, seed.as_deref())?)
}

fn out_dir(config: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| config.harness.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!(
            "{}_{}_seed{}",
            config.task,
            config.variant,
            config.loop_.seed
        )))
}

fn obtain_vae(config: &RunConfig, out: &Path) -> anyhow::Result<Option<Arc<VaeModel>>> {
    if !config.uses_vae() {
        return Ok(None);
    }
    let vae = match &config.harness.vae_checkpoint {
        Some(p) => checkpoint::load_vae(&Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?)?,
        None => {
            eprintln!("no vae checkpoint configured; pretraining one");
            let v = pretrain_vae(config)?;
            std::fs::create_dir_all(out)?;
            checkpoint::vae_checkpoint(&v)?.save(&out.join("vae.r3l"))?;
            v
        }
    };
    Ok(Some(Arc::new(vae)))
}

fn goal_targets(config: &RunConfig) -> anyhow::Result<Vec<r3l::env::EnvState>> {
    Ok(match config.variant {
        Variant::ResetController => config.reset_states()?,
        _ => vec![r3l::env::EnvState::goal(config.task)],
    })
}

fn pool_dirs(config: &RunConfig, root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    Ok(match config.variant {
        Variant::ResetController => (0..goal_targets(config)?.len())
            .map(|j| root.join(format!("state_{j}")))
            .collect(),
        _ => vec![root.to_path_buf()],
    })
}

fn load_pools(config: &RunConfig) -> anyhow::Result<Option<Vec<GoalPool>>> {
    let Some(root) = &config.harness.goal_pool_dir else {
        return Ok(None);
    };
    if config.reward != r3l::config::RewardMode::Vice {
        return Ok(None);
    }
    let pools = pool_dirs(config, root)?
        .iter()
        .map(|d| load_goal_pool(d, config.task, config.obs).with_context(|| format!("loading goals from {}", d.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Some(pools))
}

fn save_policy_checkpoints(t: &Trainer, out: &Path, from: usize) -> anyhow::Result<()> {
    for cp in &t.checkpoints[from..] {
        let ck = checkpoint::policy_checkpoint(&t.config, cp, t.vae.as_deref())?;
        ck.save(&out.join(format!("policy_{:06}.r3l", cp.epoch)))?;
    }
    Ok(())
}

fn train(config_path: &Path, out: Option<PathBuf>, resume: Option<PathBuf>) -> anyhow::Result<()> {
    let config = load_config(config_path)?;
    let out = out_dir(&config, out);
    std::fs::create_dir_all(&out)?;
    let mut t = match resume {
        Some(p) => checkpoint::restore(&Checkpoint::load(&p)?, Some(&config))?,
        None => {
            let vae = obtain_vae(&config, &out)?;
            let pools = load_pools(&config)?;
            Trainer::new(config, vae, pools)?
        }
    };
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    let every = t.config.harness.checkpoint_every;
    let mut saved = t.checkpoints.len();
    while !t.is_done() {
        if let Err(e) = t.run_epoch() {
            emit_outputs(&t.rows, &out, PLOTTED)?;
            checkpoint::snapshot(&t)?.save(&out.join("run_partial.r3l"))?;
            return Err(e).context(format!("epoch {} aborted; partial outputs in {}", t.epoch + 1, out.display()));
        }
        save_policy_checkpoints(&t, &out, saved)?;
        saved = t.checkpoints.len();
        if t.epoch % every == 0 {
            checkpoint::snapshot(&t)?.save(&out.join("run.r3l"))?;
        }
        if let Some(v) = t.forward_curve().last().filter(|c| c.0 == t.epoch) {
            eprintln!("epoch {:>5}  steps {:>8}  train metric {:.4}", t.epoch, t.env_steps, v.2);
        }
    }
    checkpoint::snapshot(&t)?.save(&out.join("run.r3l"))?;
    let report = evaluate(&EvalPolicy::from_trainer(&t)?, t.config.task, t.config.harness.eval_rollout, t.epoch)?;
    let mut rows = t.rows.clone();
    for (metric, value) in [("eval_metric", report.mean_metric()), ("eval_success", report.success_rate())] {
        rows.push(r3l::training::MetricRow {
            task: t.config.task.name().to_string(),
            variant: t.config.variant.name().to_string(),
            seed: t.config.loop_.seed,
            epoch: t.epoch,
            env_steps: t.env_steps,
            metric: metric.to_string(),
            value,
        });
    }
    std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    let files = emit_outputs(&rows, &out, PLOTTED)?;
    println!(
        "{} epochs, {} env steps, {} gradient steps; eval {}/{} successes, mean metric {:.4}",
        t.epoch,
        t.env_steps,
        t.grad_steps,
        report.successes(),
        report.outcomes.len(),
        report.mean_metric()
    );
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PretrainVae { config, out } => {
            let config = load_config(&config)?;
            let vae = pretrain_vae(&config)?;
            checkpoint::vae_checkpoint(&vae)?.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::CollectGoals { config, out } => {
            let config = load_config(&config)?;
            let mut rng = stream_rng(config.loop_.seed, streams::GOALS);
            for (target, dir) in goal_targets(&config)?.iter().zip(pool_dirs(&config, &out)?) {
                let pool = GoalPool::generate(
                    config.task,
                    target,
                    config.vice.goal_pool_size,
                    config.vice.goal_width,
                    config.obs,
                    &mut rng,
                )?;
                save_goal_pool(&pool, &dir)?;
                println!("wrote {} goal examples to {}", pool.len(), dir.display());
            }
        }
        Command::Train { config, out, resume } => train(&config, out, resume)?,
        Command::Eval { checkpoint: path, rollout } => {
            let ck = Checkpoint::load(&path)?;
            let (config, actor, vae) = checkpoint::read_policy(&ck)?;
            let rollout = rollout.unwrap_or(config.harness.eval_rollout);
            let task = config.task;
            let policy = EvalPolicy::new(config, actor, vae.map(Arc::new))?;
            let report = evaluate(&policy, task, rollout, ck.epoch as usize)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!(
                "successes {}/{}  mean metric {:.4}",
                report.successes(),
                report.outcomes.len(),
                report.mean_metric()
            );
        }
        Command::Matrix { config, out } => {
            let config = load_config(&config)?;
            let out = out_dir(&config, out);
            std::fs::create_dir_all(&out)?;
            let vae = obtain_vae(&RunConfig { obs: r3l::env::ObsMode::Image, ..config.clone() }, &out)?;
            let seeds: Vec<u64> = (0..config.harness.matrix_seeds as u64).map(|k| config.loop_.seed + k).collect();
            let table = run_matrix(&config, &seeds, vae)?;
            let text = table.render();
            std::fs::write(out.join("matrix.csv"), &text)?;
            std::fs::write(out.join("matrix.json"), serde_json::to_string_pretty(&table)?)?;
            print!("{text}");
        }
        Command::Gap { config } => {
            let config = load_config(&config)?;
            let out = out_dir(&config, None);
            let vae = obtain_vae(&config, &out)?;
            let g = train_eval_gap(config, vae)?;
            println!("variant,seed,env_steps,train_pose_distance,eval_pose_distance");
            println!("{},{},{},{},{}", g.variant, g.seed, g.env_steps, g.train, g.eval);
        }
        Command::Plot { metrics, out } => {
            if metrics.is_empty() {
                bail!(r3l::Error::Config("plot needs at least one --metrics file".into()));
            }
            let mut rows = Vec::new();
            for m in &metrics {
                rows.extend(parse_metrics_csv(&std::fs::read_to_string(m)?)?);
            }
            for f in emit_outputs(&rows, &out, PLOTTED)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<r3l::Error>()) {
        Some(r3l::Error::Config(_)) => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
