//! Command-line front end: single runs, seed sweeps and CT/no-CT comparison.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_config, ScenarioConfig};
use crate::engine::{run, Metrics};
use crate::error::{ConfigError, SimError};
use crate::mac::ModeSetting;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "oscmac",
    version,
    about = "Duty-cycled cooperative MAC simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario, or a sweep over seeds.
    Run(RunArgs),
    /// Run a scenario under both ct and noct and tabulate the difference.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `mac.mode`.
    #[arg(long)]
    pub mode: Option<ModeSetting>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Run seeds 0..K and write an aggregate.
    #[arg(long, value_name = "K")]
    pub sweep: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_name = "K", default_value_t = 1)]
    pub seeds: u64,
    /// JSON summary destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write each run's trace here.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run_command(&a),
        Command::Compare(a) => compare_command(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| {
        ConfigError::invalid(path.display().to_string(), format!("cannot read: {e}"))
    })?;
    parse_config(&text)
}

/// Config path with its extension removed.
fn stem(path: &Path) -> PathBuf {
    path.with_extension("")
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_to_files(
    config: &ScenarioConfig,
    seed: u64,
    trace: &Path,
    metrics: &Path,
) -> Result<Metrics, CliError> {
    let file = File::create(trace).map_err(|e| io_err(trace, e))?;
    let (m, _) = run(config, seed, BufWriter::new(file))?;
    write_json(metrics, &m)?;
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedLifetime {
    pub seed: u64,
    pub lifetime_s: f64,
    /// No node died; the lifetime is the run length.
    pub censored: bool,
    pub delivery_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub config_sha256: String,
    pub runs: Vec<SeedLifetime>,
    pub lifetime_mean_s: f64,
    pub lifetime_min_s: f64,
    pub lifetime_max_s: f64,
}

pub fn summarize(config_sha256: String, metrics: &[Metrics]) -> SweepSummary {
    let runs: Vec<SeedLifetime> = metrics
        .iter()
        .map(|m| {
            let (lifetime_s, censored) = m.lifetime_s();
            SeedLifetime {
                seed: m.seed,
                lifetime_s,
                censored,
                delivery_ratio: m.delivery_ratio,
            }
        })
        .collect();
    let values: Vec<f64> = runs.iter().map(|r| r.lifetime_s).collect();
    let n = values.len().max(1) as f64;
    SweepSummary {
        config_sha256,
        lifetime_mean_s: values.iter().sum::<f64>() / n,
        lifetime_min_s: values.iter().copied().fold(f64::INFINITY, f64::min),
        lifetime_max_s: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        runs,
    }
}

pub fn run_command(args: &RunArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(mode) = args.mode {
        config.mac.mode = mode;
    }
    let base = stem(&args.config);

    if let Some(k) = args.sweep {
        if k == 0 {
            return Err(ConfigError::invalid("--sweep", "must be at least 1").into());
        }
        let results: Vec<Result<Metrics, CliError>> = (0..k)
            .into_par_iter()
            .map(|seed| {
                let s = suffixed(&base, &format!(".seed{seed}"));
                run_to_files(
                    &config,
                    seed,
                    &suffixed(&s, ".trace.csv"),
                    &suffixed(&s, ".metrics.json"),
                )
            })
            .collect();
        let metrics = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let summary = summarize(config.hash(), &metrics);
        let out = suffixed(&base, ".sweep.json");
        write_json(&out, &summary)?;
        println!(
            "{k} runs; lifetime mean {:.3} s, min {:.3} s, max {:.3} s -> {}",
            summary.lifetime_mean_s,
            summary.lifetime_min_s,
            summary.lifetime_max_s,
            out.display()
        );
        return Ok(());
    }

    let trace = args
        .trace
        .clone()
        .or_else(|| config.output.trace.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| suffixed(&base, ".trace.csv"));
    let metrics = args
        .metrics
        .clone()
        .or_else(|| config.output.metrics.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| suffixed(&base, ".metrics.json"));
    let m = run_to_files(&config, args.seed, &trace, &metrics)?;
    println!(
        "seed {}: delivered {}/{} (dropped {}), collisions {}, first death {}, {} events -> {}, {}",
        m.seed,
        m.packets_delivered,
        m.packets_offered,
        m.packets_dropped,
        m.collisions,
        m.network_lifetime_first_death_s
            .map(|t| format!("{t:.3} s"))
            .unwrap_or_else(|| "none".into()),
        m.events_processed,
        trace.display(),
        metrics.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub mode: String,
    pub lifetime_s: f64,
    pub censored: bool,
    pub trn_death_s: Option<f64>,
    pub delivery_ratio: f64,
    pub energy_by_category_j: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub config_sha256_without_mode: String,
    pub rows: Vec<CompareRow>,
    pub ct_lifetime_mean_s: f64,
    pub noct_lifetime_mean_s: f64,
    /// CT mean lifetime over no-CT mean lifetime.
    pub lifetime_ratio: f64,
}

/// Runs both modes for seeds `0..seeds`. Traces go to `trace_dir` when given.
pub fn compare(
    config: &ScenarioConfig,
    config_path: &Path,
    seeds: u64,
    trace_dir: Option<&Path>,
) -> Result<CompareSummary, CliError> {
    let mut ct = config.clone();
    ct.mac.mode = ModeSetting::Ct;
    let mut noct = config.clone();
    noct.mac.mode = ModeSetting::Noct;
    if ct.hash_without_mode() != noct.hash_without_mode() {
        return Err(CliError::Runtime(
            "compared configs differ beyond mode".into(),
        ));
    }
    let name = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let jobs: Vec<(u64, &ScenarioConfig)> =
        (0..seeds).flat_map(|s| [(s, &ct), (s, &noct)]).collect();
    let results: Vec<Result<Metrics, CliError>> = jobs
        .par_iter()
        .map(|(seed, cfg)| match trace_dir {
            Some(dir) => {
                let path = dir.join(format!("{name}.seed{seed}.{}.trace.csv", cfg.mac.mode));
                let file = File::create(&path).map_err(|e| io_err(&path, e))?;
                Ok(run(cfg, *seed, BufWriter::new(file))?.0)
            }
            None => Ok(run(cfg, *seed, io::sink())?.0),
        })
        .collect();
    let metrics = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<CompareRow> = metrics
        .iter()
        .map(|m| {
            let (lifetime_s, censored) = m.lifetime_s();
            CompareRow {
                seed: m.seed,
                mode: m.mode.clone(),
                lifetime_s,
                censored,
                trn_death_s: m.trn_death_time_s,
                delivery_ratio: m.delivery_ratio,
                energy_by_category_j: m.energy_by_category_j.clone(),
            }
        })
        .collect();
    let mean = |mode: &str| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.lifetime_s)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (ct_mean, noct_mean) = (mean("ct"), mean("noct"));
    Ok(CompareSummary {
        config_sha256_without_mode: ct.hash_without_mode(),
        rows,
        ct_lifetime_mean_s: ct_mean,
        noct_lifetime_mean_s: noct_mean,
        lifetime_ratio: if noct_mean > 0.0 {
            ct_mean / noct_mean
        } else {
            f64::NAN
        },
    })
}

pub fn format_table(summary: &CompareSummary) -> String {
    let cats = ["transmit", "receive", "idle_listen", "sleep", "overhear"];
    let mut s = format!(
        "{:>4} {:>5} {:>12} {:>12} {:>8} {}\n",
        "seed",
        "mode",
        "lifetime_s",
        "trn_death_s",
        "deliv",
        cats.map(|c| format!("{c:>12}")).join(" ")
    );
    for r in &summary.rows {
        let life = format!("{:.3}{}", r.lifetime_s, if r.censored { "+" } else { "" });
        let trn = r
            .trn_death_s
            .map(|t| format!("{t:.3}"))
            .unwrap_or_else(|| "-".into());
        let energy: Vec<String> = cats
            .iter()
            .map(|c| {
                format!(
                    "{:>12.4e}",
                    r.energy_by_category_j.get(*c).copied().unwrap_or(0.0)
                )
            })
            .collect();
        s.push_str(&format!(
            "{:>4} {:>5} {:>12} {:>12} {:>8.3} {}\n",
            r.seed,
            r.mode,
            life,
            trn,
            r.delivery_ratio,
            energy.join(" ")
        ));
    }
    s.push_str(&format!(
        "lifetime ratio ct/noct: {:.4} (ct mean {:.3} s, noct mean {:.3} s; + marks runs with no death)\n",
        summary.lifetime_ratio, summary.ct_lifetime_mean_s, summary.noct_lifetime_mean_s
    ));
    s
}

pub fn compare_command(args: &CompareArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    if args.seeds == 0 {
        return Err(ConfigError::invalid("--seeds", "must be at least 1").into());
    }
    if let Some(dir) = &args.trace_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let summary = compare(&config, &args.config, args.seeds, args.trace_dir.as_deref())?;
    print!("{}", format_table(&summary));
    if let Some(out) = &args.out {
        write_json(out, &summary)?;
    }
    Ok(())
}
