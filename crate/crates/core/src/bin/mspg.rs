use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mspg_core::harness::checkpoint;
use mspg_core::harness::config::{DatasetSpec, RunConfig};
use mspg_core::harness::run::{
    ablate, ablation_table, first_divergence, load_dataset, replay_schedule, schedule_columns, train, Float,
    TrainOptions, FINAL_EVAL_SEED,
};
use mspg_core::tensor::write_tensor;
use mspg_core::Error;

#[derive(Parser)]
#[command(name = "mspg", version, about = "Multi-scale GAN trainer with feedback scheduling and a DQN referee")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u64>,
    /// ring, shapes or dir:PATH
    #[arg(long)]
    dataset: Option<String>,
    /// Turn off the DQN referee.
    #[arg(long)]
    no_balance: bool,
    /// Turn off the monitor rules.
    #[arg(long)]
    no_apfl: bool,
    /// Turn off the auxiliary feature discriminator.
    #[arg(long)]
    no_afe: bool,
}

impl RunArgs {
    fn resolve(&self) -> mspg_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.parse::<DatasetSpec>()?;
        }
        cfg.balance &= !self.no_balance;
        cfg.apfl &= !self.no_apfl;
        cfg.afe &= !self.no_afe;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, balance.csv and checkpoint.mspc.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Stop after this many rounds in total and checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Continue from a checkpoint; its stored config wins over other flags.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint's averaged weights.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = FINAL_EVAL_SEED)]
        seed: u64,
        /// `.csv` writes one sample per line; anything else a tensor file.
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
    },
    /// Score a checkpoint's averaged weights.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = FINAL_EVAL_SEED)]
        seed: u64,
    },
    /// Train all 8 on/off combinations of rules, referee and auxiliary
    /// discriminator and write a summary table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Re-run training and log the per-round schedule.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        /// Take the config from this checkpoint; `--seed` must then match it.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "schedule.csv")]
        out: PathBuf,
        /// Metrics CSV or schedule log to compare against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn write_samples(samples: &mspg_core::tensor::Tensor<Float>, out: &Path) -> mspg_core::Result<()> {
    if out.extension().is_some_and(|e| e == "csv") {
        let per = samples.numel() / samples.shape()[0].max(1);
        let mut text = String::new();
        for row in samples.data().chunks(per.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        std::fs::write(out, text)?;
    } else {
        let mut buf = Vec::new();
        write_tensor(samples, &mut buf);
        std::fs::write(out, buf)?;
    }
    Ok(())
}

fn load_trainer(path: &Path) -> mspg_core::Result<mspg_core::apfl::Trainer<Float>> {
    let bytes = checkpoint::read(path)?;
    let cfg = checkpoint::read_config(&bytes)?;
    let (data, _) = load_dataset(&cfg)?;
    checkpoint::from_bytes(&bytes, data)
}

fn run(cmd: Command) -> mspg_core::Result<u8> {
    match cmd {
        Command::Train { run, out, stop_after, resume } => {
            let cfg = if resume.is_some() { RunConfig::default() } else { run.resolve()? };
            let resume = resume.map(|p| checkpoint::read(&p)).transpose()?;
            if let Some(b) = &resume {
                let stored = checkpoint::read_config(b)?;
                if run.seed.is_some_and(|s| s != stored.seed) {
                    return Err(Error::Config(format!("--seed does not match the checkpoint's seed {}", stored.seed)));
                }
            }
            let s = train(cfg, &TrainOptions { out: out.clone(), stop_after, resume })?;
            println!("ran {} rounds, next round {}", s.rounds_run, s.next_round);
            if let Some(why) = s.aborted {
                eprintln!("aborted: {why}");
                return Ok(3);
            }
            if let Some(c) = s.final_coverage {
                println!(
                    "covered {}/{} high-quality {:.4} quality {:.4}",
                    c.covered,
                    c.modes,
                    c.high_quality,
                    c.quality()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let t = load_trainer(&checkpoint)?;
            write_samples(&t.sample_ema(n, seed)?, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Eval { checkpoint, n, seed } => {
            let t = load_trainer(&checkpoint)?;
            let c = t.evaluate_ema(n, seed)?;
            println!(
                "round {} covered {}/{} high-quality {:.4} quality {:.4}",
                t.state.round,
                c.covered,
                c.modes,
                c.high_quality,
                c.quality()
            );
        }
        Command::Ablate { run, seeds, out } => {
            let base = run.resolve()?;
            let cells = ablate(&base, seeds, |c| eprintln!("{}", c.to_csv()))?;
            let table = ablation_table(&cells);
            std::fs::write(&out, &table)?;
            print!("{table}");
        }
        Command::Replay { run, checkpoint, out, compare } => {
            let (cfg, stored_seed) = match &checkpoint {
                Some(p) => {
                    let stored = checkpoint::read_config(&checkpoint::read(p)?)?;
                    let seed = stored.seed;
                    (RunConfig { seed: run.seed.unwrap_or(seed), ..stored }, Some(seed))
                }
                None => (run.resolve()?, None),
            };
            let log = replay_schedule(cfg, stored_seed)?;
            std::fs::write(&out, &log)?;
            println!("wrote {}", out.display());
            if let Some(p) = compare {
                let other = std::fs::read_to_string(&p)?;
                match first_divergence(&schedule_columns(&log)?, &schedule_columns(&other)?) {
                    None => println!("schedules match {}", p.display()),
                    Some(r) => println!("first divergence at round {r}"),
                }
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}
