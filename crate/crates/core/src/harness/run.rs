//! Drivers behind the CLI: training with CSV output and checkpoints, schedule
//! replay, and the on/off ablation grid.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::apfl::{RoundOutcome, Trainer};
use crate::error::{Error, Result};

use super::checkpoint;
use super::config::{DatasetSpec, RunConfig};
use super::datasets::{Dataset, IMAGE_SIDE};
use super::ingest::ingest_dir;
use super::metrics::{balance_csv_row, Coverage, BALANCE_HEADER, METRICS_HEADER, SCHEDULE_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BALANCE_FILE: &str = "balance.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mspc";
pub const CONFIG_FILE: &str = "config.cfg";

/// Samples drawn from the averaged weights for end-of-run scoring.
pub const FINAL_EVAL_SAMPLES: usize = 2000;
/// Seed of the latents used for end-of-run scoring.
pub const FINAL_EVAL_SEED: u64 = 0x5eed;

/// Training precision used by the drivers.
pub type Float = f32;

/// Builds the dataset a config names. Returns the number of skipped files for
/// directory datasets.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, usize)> {
    match &cfg.dataset {
        DatasetSpec::Ring => Ok((Dataset::Ring(cfg.ring_config()), 0)),
        DatasetSpec::Shapes => Ok((Dataset::Shapes, 0)),
        DatasetSpec::Dir(p) => {
            let ing = ingest_dir(p, IMAGE_SIDE)?;
            Ok((Dataset::Images(ing.images), ing.skipped))
        }
    }
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rounds_run: u64,
    /// Index of the next round (equals `rounds` when finished).
    pub next_round: u64,
    pub finished: bool,
    pub aborted: Option<String>,
    /// End-of-run averaged-weight score; absent when stopped early or aborted.
    pub final_coverage: Option<Coverage>,
}

/// Options of a file-producing training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Stop (and checkpoint) once this many rounds in total have run.
    pub stop_after: Option<u64>,
    /// Checkpoint bytes to continue from.
    pub resume: Option<Vec<u8>>,
}

/// Lines of `path` whose leading round number is below `round`, or `None` if
/// the file does not exist.
fn rows_before(path: &Path, round: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|r| r.parse::<u64>().ok()).is_some_and(|r| r < round))
        .map(str::to_string)
        .collect())
}

fn open_csv(path: &Path, header: &str, keep: &[String]) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for l in keep {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

/// Runs training, writing `metrics.csv`, `balance.csv` (when the referee is
/// on), `config.cfg`, and `checkpoint.mspc` into `opts.out`. A resumed run
/// keeps the CSV rows before the checkpoint round and appends after them.
pub fn train(cfg: RunConfig, opts: &TrainOptions) -> Result<RunSummary> {
    std::fs::create_dir_all(&opts.out)?;
    let mut trainer: Trainer<Float> = match &opts.resume {
        Some(bytes) => {
            let stored = checkpoint::read_config(bytes)?;
            let (data, _) = load_dataset(&stored)?;
            checkpoint::from_bytes(bytes, data)?
        }
        None => {
            let (data, _) = load_dataset(&cfg)?;
            Trainer::new(cfg, data)?
        }
    };
    std::fs::write(opts.out.join(CONFIG_FILE), trainer.cfg.to_text())?;
    let start = trainer.state.round;
    let metrics_path = opts.out.join(METRICS_FILE);
    let balance_path = opts.out.join(BALANCE_FILE);
    let mut metrics = open_csv(&metrics_path, METRICS_HEADER, &rows_before(&metrics_path, start)?)?;
    let mut balance = if trainer.cfg.balance {
        Some(open_csv(&balance_path, BALANCE_HEADER, &rows_before(&balance_path, start)?)?)
    } else {
        None
    };

    let mut aborted = None;
    while !trainer.finished() && opts.stop_after.is_none_or(|s| trainer.state.round < s) {
        let out = trainer.train_round()?;
        writeln!(metrics, "{}", out.row.to_csv())?;
        if let (Some(f), Some(b)) = (balance.as_mut(), out.balance.as_ref()) {
            writeln!(f, "{}", balance_csv_row(b))?;
        }
        if out.aborted.is_some() {
            aborted = out.aborted;
            break;
        }
    }
    metrics.flush()?;
    if let Some(f) = balance.as_mut() {
        f.flush()?;
    }
    if aborted.is_none() {
        checkpoint::save(&trainer, &opts.out.join(CHECKPOINT_FILE))?;
    }
    let finished = trainer.finished() && aborted.is_none();
    let final_coverage = if finished { Some(trainer.evaluate_ema(FINAL_EVAL_SAMPLES, FINAL_EVAL_SEED)?) } else { None };
    Ok(RunSummary {
        rounds_run: trainer.state.round - start,
        next_round: trainer.state.round,
        finished,
        aborted,
        final_coverage,
    })
}

/// Trains in memory and returns every round's outcome plus the final score.
pub fn train_in_memory(cfg: RunConfig) -> Result<(Vec<RoundOutcome>, Option<Coverage>)> {
    let (data, _) = load_dataset(&cfg)?;
    let mut t: Trainer<Float> = Trainer::new(cfg, data)?;
    let mut outs = Vec::new();
    while !t.finished() {
        let o = t.train_round()?;
        let stop = o.aborted.is_some();
        outs.push(o);
        if stop {
            return Ok((outs, None));
        }
    }
    let cov = t.evaluate_ema(FINAL_EVAL_SAMPLES, FINAL_EVAL_SEED)?;
    Ok((outs, Some(cov)))
}

fn schedule_row(o: &RoundOutcome) -> String {
    let r = &o.row;
    let triggers = if o.adjustments.is_empty() {
        "-".to_string()
    } else {
        o.adjustments.iter().map(|a| a.name()).collect::<Vec<_>>().join(";")
    };
    format!("{},{},{},{},{},{}", r.round, r.eta_g, r.eta_d, r.lambda_aux, r.action, triggers)
}

/// Re-runs training from round 0 and returns the per-round schedule log.
/// When `checkpoint_seed` is given it must match `cfg.seed`.
pub fn replay_schedule(cfg: RunConfig, checkpoint_seed: Option<u64>) -> Result<String> {
    if let Some(s) = checkpoint_seed.filter(|&s| s != cfg.seed) {
        return Err(Error::Config(format!("seed {} does not match the checkpoint's seed {s}", cfg.seed)));
    }
    let (data, _) = load_dataset(&cfg)?;
    let mut t: Trainer<Float> = Trainer::new(cfg, data)?;
    let mut log = format!("{SCHEDULE_HEADER}\n");
    while !t.finished() {
        let o = t.train_round()?;
        writeln!(log, "{}", schedule_row(&o)).expect("string write");
        if o.aborted.is_some() {
            break;
        }
    }
    Ok(log)
}

/// `(round, "eta_G,eta_D,lambda_aux,balance_action")` per data row of a
/// metrics CSV or schedule log, located by header name.
pub fn schedule_columns(csv: &str) -> Result<Vec<(u64, String)>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?.split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Format(format!("CSV has no {name} column")))
    };
    let idx = [col("round")?, col("eta_G")?, col("eta_D")?, col("lambda_aux")?, col("balance_action")?];
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let get = |i: usize| f.get(i).copied().ok_or_else(|| Error::Format(format!("short CSV row {l:?}")));
            let round = get(idx[0])?.parse().map_err(|_| Error::Format(format!("bad round in {l:?}")))?;
            Ok((round, format!("{},{},{},{}", get(idx[1])?, get(idx[2])?, get(idx[3])?, get(idx[4])?)))
        })
        .collect()
}

/// First round at which two schedules differ, including one ending early.
pub fn first_divergence(a: &[(u64, String)], b: &[(u64, String)]) -> Option<u64> {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return Some(x.0.min(y.0));
        }
    }
    match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Less => Some(b[a.len()].0),
        std::cmp::Ordering::Greater => Some(a[b.len()].0),
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub apfl: bool,
    pub balance: bool,
    pub afe: bool,
    pub seeds: usize,
    pub aborted: usize,
    pub mean_covered: f64,
    pub mean_high_quality: f64,
    pub mean_quality: f64,
}

pub const ABLATION_HEADER: &str = "apfl,balance,afe,seeds,aborted,mean_covered,mean_high_quality,mean_quality";

impl AblationCell {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.4},{:.4}",
            on_off(self.apfl),
            on_off(self.balance),
            on_off(self.afe),
            self.seeds,
            self.aborted,
            self.mean_covered,
            self.mean_high_quality,
            self.mean_quality
        )
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Every on/off combination of the monitor rules, the referee and the
/// auxiliary discriminator, in that bit order (all on first).
pub fn ablation_grid() -> Vec<(bool, bool, bool)> {
    (0..8u8).map(|i| (i & 4 == 0, i & 2 == 0, i & 1 == 0)).collect()
}

/// Trains every grid cell for seeds `base.seed .. base.seed + seeds` and
/// averages the final averaged-weight scores. Aborted runs score zero.
pub fn ablate(base: &RunConfig, seeds: u64, mut progress: impl FnMut(&AblationCell)) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for (apfl, balance, afe) in ablation_grid() {
        let mut cell = AblationCell {
            apfl,
            balance,
            afe,
            seeds: seeds as usize,
            aborted: 0,
            mean_covered: 0.0,
            mean_high_quality: 0.0,
            mean_quality: 0.0,
        };
        for s in 0..seeds {
            let cfg = RunConfig { apfl, balance, afe, seed: base.seed + s, ..base.clone() };
            match train_in_memory(cfg)?.1 {
                Some(c) => {
                    cell.mean_covered += c.covered as f64;
                    cell.mean_high_quality += c.high_quality;
                    cell.mean_quality += c.quality();
                }
                None => cell.aborted += 1,
            }
        }
        let n = seeds.max(1) as f64;
        cell.mean_covered /= n;
        cell.mean_high_quality /= n;
        cell.mean_quality /= n;
        progress(&cell);
        cells.push(cell);
    }
    Ok(cells)
}

/// Renders the grid as CSV with a header line.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for c in cells {
        writeln!(s, "{}", c.to_csv()).expect("string write");
    }
    s
}
