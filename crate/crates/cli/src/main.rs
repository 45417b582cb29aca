//! `goodhart`: command-line front end to the tabular preference lab.
//!
//! Every subcommand prints the paths it wrote, one per line, and exits
//! nonzero if any run or check failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use goodhart::harness::experiment::Perturbation;
use goodhart::harness::oracle_check::oracle_check;
use goodhart::harness::presets::report_files;
use goodhart::harness::sweep::{write_summary, SweepSpec};
use goodhart::harness::{
    run_preset, run_sweep, tandem_check, ExperimentSpec, Lab, Preset, PresetOptions, DEFAULT_QUANTILE,
};

#[derive(Parser)]
#[command(name = "goodhart", version, about = "Online vs offline preference optimization on tabular worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world, golden model, SFT reference, datasets and proxy.
    GenWorld {
        /// Experiment spec (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a hyper-parameter grid and pool the curves.
    Sweep {
        /// Sweep spec (TOML) with a `[base]` experiment and grids.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay an online run's stream offline and compare parameters.
    TandemCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop the batch consumed at this zero-based step before replaying.
        #[arg(long, conflicts_with = "shuffle")]
        delete_batch: Option<usize>,
        /// Shuffle the stream at this level in [0, 1] before replaying.
        #[arg(long)]
        shuffle: Option<f64>,
        #[arg(long, default_value_t = 0)]
        shuffle_seed: u64,
    },
    /// Gradient, closed-form and optimal-classifier oracle batteries.
    OracleCheck {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a hypothesis preset (h1..h5).
    Preset {
        name: Preset,
        /// Preset options (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the dataset ablation bundle.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile table over pooled tradeoff CSVs from a single world.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_QUANTILE)]
        q: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_spec(config: Option<&Path>) -> Result<ExperimentSpec> {
    match config {
        Some(p) => ExperimentSpec::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentSpec::default()),
    }
}

fn load_options(config: Option<&Path>) -> Result<PresetOptions> {
    match config {
        Some(p) => PresetOptions::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PresetOptions::default()),
    }
}

/// `--out`, else the spec's `output_dir`.
fn out_dir(out: Option<PathBuf>, spec: &ExperimentSpec) -> Result<PathBuf> {
    match out.or_else(|| spec.output_dir.clone()) {
        Some(d) => Ok(d),
        None => bail!("no output directory: pass --out or set output_dir in the spec"),
    }
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<PathBuf> {
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(path.to_path_buf())
}

fn gen_world(spec: &ExperimentSpec, dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let lab = Lab::build(&spec.lab_spec())?;
    fs::create_dir_all(dir)?;
    let mut paths = vec![
        write_json(
            &dir.join("lab.json"),
            serde_json::json!({ "world_hash": lab.world_hash, "spec": lab.spec }),
        )?,
        write_json(&dir.join("world.json"), serde_json::to_value(&lab.world)?)?,
        write_json(&dir.join("golden.json"), serde_json::to_value(&lab.gm)?)?,
        write_json(&dir.join("behavior.json"), serde_json::to_value(&lab.behavior)?)?,
        write_json(&dir.join("sft.json"), serde_json::to_value(&lab.sft)?)?,
        write_json(&dir.join("proxy.json"), serde_json::to_value(&lab.proxy_fit)?)?,
    ];
    for (name, ds) in [("d_initial.jsonl", &lab.d_initial), ("d_golden.jsonl", &lab.d_golden)] {
        let p = dir.join(name);
        ds.save(&p)?;
        paths.push(p);
    }
    let p = dir.join("summary.json");
    write_summary(&p, &lab.world_hash, &[], &paths, serde_json::Value::Null)?;
    paths.push(p);
    Ok(paths)
}

/// Writes the outputs and reports whether everything succeeded.
fn execute(cmd: Command) -> Result<(Vec<PathBuf>, bool)> {
    match cmd {
        Command::GenWorld { config, out } => {
            let spec = load_spec(config.as_deref())?;
            let dir = out_dir(out, &spec)?;
            Ok((gen_world(&spec, &dir)?, true))
        }
        Command::Train { config, out } => {
            let spec = load_spec(config.as_deref())?;
            let dir = out_dir(out, &spec)?;
            let sweep = SweepSpec { base: spec, ..Default::default() };
            let rep = run_sweep(&sweep, Some(&dir))?;
            for r in rep.runs.iter().filter(|r| !r.ok) {
                eprintln!("run {} failed: {}", r.run_id, r.error.as_deref().unwrap_or("?"));
            }
            Ok((rep.paths.clone(), rep.failures() == 0))
        }
        Command::Sweep { config, out } => {
            let sweep = SweepSpec::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let rep = run_sweep(&sweep, Some(&out))?;
            for r in rep.runs.iter().filter(|r| !r.ok) {
                eprintln!("run {} failed: {}", r.run_id, r.error.as_deref().unwrap_or("?"));
            }
            eprintln!("{} runs, {} failed", rep.runs.len(), rep.failures());
            Ok((rep.paths.clone(), rep.failures() == 0))
        }
        Command::TandemCheck { config, out, delete_batch, shuffle, shuffle_seed } => {
            let spec = load_spec(config.as_deref())?;
            let dir = out_dir(out, &spec)?;
            let perturbation = match (delete_batch, shuffle) {
                (Some(index), _) => Perturbation::DeleteBatch { index },
                (None, Some(level)) => Perturbation::Shuffle { level, seed: shuffle_seed },
                (None, None) => Perturbation::None,
            };
            let lab = Lab::build(&spec.lab_spec())?;
            let rep = tandem_check(&spec, &lab, perturbation)?;
            eprintln!("{}", rep.summary_line());
            fs::create_dir_all(&dir)?;
            let p = write_json(
                &dir.join("tandem.json"),
                serde_json::json!({
                    "status": if rep.pass { "ok" } else { "failed" },
                    "world_hash": lab.world_hash,
                    "report": rep,
                }),
            )?;
            Ok((vec![p], rep.pass))
        }
        Command::OracleCheck { out, instances, seed } => {
            let (summary, paths) = oracle_check(&out, instances, seed)?;
            eprintln!(
                "gradient max rel err {:.2e}; closed-form max TV {:.2e}; classifier min accuracy {}",
                summary.gradient_max_rel_err, summary.closed_form_max_tv, summary.classifier_min_accuracy
            );
            Ok((paths, summary.pass))
        }
        Command::Preset { name, config, out } => {
            let rep = run_preset(name, &load_options(config.as_deref())?, Some(&out))?;
            eprintln!("{}: {} runs, {} failed", rep.preset, rep.runs.len(), rep.failures());
            Ok((rep.paths.clone(), rep.failures() == 0))
        }
        Command::Ablate { config, out } => {
            let rep = run_preset(Preset::Ablation, &load_options(config.as_deref())?, Some(&out))?;
            eprintln!("ablation: {} runs, {} failed", rep.runs.len(), rep.failures());
            Ok((rep.paths.clone(), rep.failures() == 0))
        }
        Command::Report { inputs, q, out } => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Ok((report_files(&inputs, q, &out)?, true))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok((paths, ok)) => {
            for p in paths {
                println!("{}", p.display());
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
