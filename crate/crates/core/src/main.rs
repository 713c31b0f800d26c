//! Command-line interface for running scenarios, batches, and trace metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spoofsim::config::{self, ScenarioConfig};
use spoofsim::sim;
use spoofsim::trace::{ScenarioTrace, TraceDims};
use spoofsim::Error;

#[derive(Parser)]
#[command(name = "spoofsim", version, about = "UAV GPS-spoofing scenario simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and export trace.csv / events.csv.
    Run {
        /// Scenario config file (TOML).
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset name (see `presets`).
        #[arg(long)]
        preset: Option<String>,
        /// Seed override (defaults to the config's seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch of seeded scenarios and export summary.csv.
    Batch {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Number of seeds (base, base+1, ...).
        #[arg(long)]
        seeds: u64,
        /// Base seed (defaults to the config's seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from an exported trace.
    Metrics {
        /// trace.csv path.
        #[arg(long)]
        trace: PathBuf,
        /// events.csv path (defaults to events.csv next to the trace).
        #[arg(long)]
        events: Option<PathBuf>,
        /// Config or preset the trace was produced with (for dimensions and
        /// bounds); defaults to the paper-v preset.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// List the built-in presets.
    Presets,
}

fn load_config(config: Option<PathBuf>, preset: Option<String>) -> Result<ScenarioConfig, Error> {
    match (config, preset) {
        (Some(path), None) => ScenarioConfig::from_path(&path),
        (None, Some(name)) => config::preset(&name),
        (None, None) => Err(Error::Config("provide --config FILE or --preset NAME".into())),
        (Some(_), Some(_)) => unreachable!("clap enforces exclusivity"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, preset, seed, out } => {
            let cfg = load_config(config, preset)?;
            let seed = seed.unwrap_or(cfg.run.seed);
            let run = sim::run_scenario(&cfg, seed);
            let (trace_path, events_path) = run.trace.export(&out)?;
            println!("trace:  {}", trace_path.display());
            println!("events: {}", events_path.display());
            print_metrics(&run.metrics);
            match run.error {
                None => Ok(()),
                Some(msg) => {
                    Err(Error::Numerical(format!("run aborted: {msg} (partial trace flushed)")))
                }
            }
        }
        Command::Batch { config, preset, seeds, seed, out } => {
            let cfg = load_config(config, preset)?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let base = seed.unwrap_or(cfg.run.seed);
            let seed_list: Vec<u64> = (0..seeds).map(|i| base + i).collect();
            let batch = sim::run_batch(&cfg, &seed_list)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.display().to_string(),
                source,
            })?;
            let path = out.join("summary.csv");
            std::fs::write(&path, batch.to_csv()).map_err(|source| Error::Io {
                path: path.display().to_string(),
                source,
            })?;
            println!("summary: {}", path.display());
            println!("runs:                {}", batch.rows.len());
            println!("detection rate:      {:.3}", batch.detection_rate());
            println!("escape success rate: {:.3}", batch.escape_success_rate());
            println!("goal rate:           {:.3}", batch.goal_rate());
            println!("emergency step rate: {:.4}", batch.emergency_step_rate());
            let failures = batch.rows.iter().filter(|m| m.error.is_some()).count();
            if failures > 0 {
                eprintln!("{failures} run(s) flagged errors; see summary.csv");
            }
            Ok(())
        }
        Command::Metrics { trace, events, config, preset } => {
            let cfg = match (config, preset) {
                (None, None) => config::preset("paper-v")?,
                (c, p) => load_config(c, p)?,
            };
            let model = cfg.system_model()?;
            let dims = TraceDims {
                n: model.state_dim(),
                m_u: model.input_dim(),
                m_g: model.gps_dim(),
                m_i: model.imu_dim(),
                m_s: model.rssi_dim(),
                n_a: model.pos_index.len(),
            };
            let text = std::fs::read_to_string(&trace).map_err(|source| Error::Io {
                path: trace.display().to_string(),
                source,
            })?;
            let mut parsed = ScenarioTrace::parse_csv(&text, dims)?;
            let events_path = events.unwrap_or_else(|| {
                trace.parent().unwrap_or_else(|| std::path::Path::new(".")).join("events.csv")
            });
            if events_path.exists() {
                let etext = std::fs::read_to_string(&events_path).map_err(|source| Error::Io {
                    path: events_path.display().to_string(),
                    source,
                })?;
                for line in etext.lines().skip(1) {
                    let mut parts = line.splitn(3, ',');
                    if let (Some(step), Some(name), Some(value)) =
                        (parts.next(), parts.next(), parts.next())
                    {
                        if let (Ok(step), Ok(value)) = (step.parse(), value.parse()) {
                            parsed.events.push(spoofsim::trace::Event {
                                step,
                                name: name.to_string(),
                                value,
                            });
                        }
                    }
                }
            }
            let metrics = sim::compute_metrics(&parsed, &cfg, cfg.run.seed, None);
            print_metrics(&metrics);
            Ok(())
        }
        Command::Presets => {
            for name in config::PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn print_metrics(m: &sim::RunMetrics) {
    let fmt_u = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
    let fmt_f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("steps run:          {}", m.steps);
    println!("range entry:        {}", fmt_u(m.first_entry));
    println!("detected:           {}", m.detected);
    println!("detection step:     {}", fmt_u(m.detection_step));
    println!(
        "detection latency:  {}",
        m.detection_latency.map_or("-".to_string(), |x| x.to_string())
    );
    println!("escape time:        {}", fmt_u(m.k_escape));
    println!("escape deadline:    {}", fmt_u(m.deadline));
    println!("range exit:         {}", fmt_u(m.first_exit));
    println!(
        "exit by deadline:   {}",
        m.exit_by_deadline.map_or("-".to_string(), |x| x.to_string())
    );
    println!("max error (attack): {}", fmt_f(m.max_error_attack));
    println!("error at exit:      {}", fmt_f(m.error_at_exit));
    println!("goal reached:       {} (step {})", m.goal_reached, fmt_u(m.goal_step));
    println!("emergency steps:    {}", m.emergency_steps);
    println!("velocity violations:{}", m.velocity_violations);
    if let Some(e) = &m.error {
        println!("run error:          {e}");
    }
}
