//! `b5sim`: run retinal motion compensation scenarios from the shell.

mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use b5sim::config::{parse_config, ScenarioConfig};
use b5sim::experiment::{
    compute_metrics, parse_sweep, run_scenario_with, sweep, write_metrics_csv,
    RunOptions, SweepRow, Trace,
};
use b5sim::presets;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "b5sim", version, about = "Closed-loop OCT-guided retinal motion compensation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace, metrics and plot.
    Simulate(SimulateArgs),
    /// Run every scenario of a sweep file and write one metrics table.
    Sweep(SweepArgs),
    /// Recompute metrics from an existing trace CSV.
    Report(ReportArgs),
    /// List the bundled presets, or print one.
    Presets {
        /// Print the TOML of this preset.
        name: Option<String>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Scenario config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Bundled preset name (see `b5sim presets`).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    no_plot: bool,
    #[arg(long)]
    no_trace: bool,
    #[arg(long)]
    no_metrics: bool,
    /// Also write the first N segmented volumes in binary form.
    #[arg(long, value_name = "N", default_value_t = 0)]
    dump_volumes: usize,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep file (TOML with `base`, optional `seeds` and `[[run]]` tables).
    #[arg(long = "config", value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the seed of every run (ignored when the file lists seeds).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace CSV written by `simulate`.
    #[arg(long, value_name = "PATH")]
    trace: PathBuf,
    /// Config the trace came from; supplies the motion period and kind.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["preset", "period"])]
    config: Option<PathBuf>,
    #[arg(long, value_name = "NAME", conflicts_with = "period")]
    preset: Option<String>,
    /// Motion period in seconds, when no config is at hand.
    #[arg(long, value_name = "S")]
    period: Option<f64>,
    /// Write the metrics CSV here instead of stdout.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// What one `simulate` invocation reads and writes.
#[derive(Debug, Clone)]
struct RunManifest {
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    seed: Option<u64>,
    trace: bool,
    metrics: bool,
    plot: bool,
    volumes: usize,
    force: bool,
}

impl RunManifest {
    fn outputs(&self) -> Vec<PathBuf> {
        let mut files = vec![self.out_dir.join("config.toml")];
        if self.trace {
            files.push(self.out_dir.join("trace.csv"));
        }
        if self.metrics {
            files.push(self.out_dir.join("metrics.csv"));
        }
        if self.plot {
            files.push(self.out_dir.join("plot.svg"));
        }
        files.extend((0..self.volumes).map(|i| volume_path(&self.out_dir, i)));
        files
    }

    /// Creates the output directory and checks nothing would be clobbered.
    fn prepare(&self) -> Result<()> {
        prepare_outputs(&self.out_dir, &self.outputs(), self.force)
    }
}

fn volume_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("volumes").join(format!("volume_{i:04}.b5sv"))
}

fn prepare_outputs(dir: &Path, files: &[PathBuf], force: bool) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if !force {
        if let Some(existing) = files.iter().find(|f| f.exists()) {
            bail!("{} already exists; pass --force to overwrite", existing.display());
        }
    }
    Ok(())
}

/// Writes via a temporary file in the target directory and renames it into
/// place, so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_config(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).map_err(|e| anyhow::anyhow!("{}:\n{e}", path.display()))
}

fn load_preset(name: &str) -> Result<ScenarioConfig> {
    let Some(result) = presets::load(name) else {
        let names: Vec<_> = presets::names().collect();
        bail!("unknown preset `{name}`; available: {}", names.join(", "));
    };
    Ok(result?)
}

fn resolve(source: &Source) -> Result<ScenarioConfig> {
    match (&source.config, &source.preset) {
        (Some(path), _) => read_config(path),
        (None, Some(name)) => load_preset(name),
        (None, None) => bail!("pass --config or --preset"),
    }
}

fn metrics_bytes(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf)?;
    Ok(buf)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let manifest = RunManifest {
        config_path: args.source.config.clone(),
        out_dir: args.out.clone(),
        seed: args.seed,
        trace: !args.no_trace,
        metrics: !args.no_metrics,
        plot: !args.no_plot,
        volumes: args.dump_volumes,
        force: args.force,
    };
    let mut config = resolve(&args.source)?;
    if let Some(seed) = manifest.seed {
        config.seed = seed;
    }
    manifest.prepare()?;

    let out = run_scenario_with(&config, &RunOptions { keep_volumes: manifest.volumes })?;
    let metrics = compute_metrics(&out.trace)?;
    let dir = &manifest.out_dir;

    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
    if manifest.trace {
        write_atomic(&dir.join("trace.csv"), out.trace.to_csv_string().as_bytes())?;
    }
    if manifest.metrics {
        let row = SweepRow::new(&config, metrics.clone());
        write_atomic(&dir.join("metrics.csv"), &metrics_bytes(&[row])?)?;
    }
    if manifest.plot {
        let title = config
            .label
            .clone()
            .or_else(|| manifest.config_path.as_ref().map(|p| p.display().to_string()))
            .unwrap_or_else(|| "scenario".into());
        write_atomic(&dir.join("plot.svg"), plot::render_svg(&out.trace, &title)?.as_bytes())?;
    }
    for (i, vol) in out.volumes.iter().enumerate() {
        let mut buf = Vec::new();
        vol.write_to(&mut buf)?;
        write_atomic(&volume_path(dir, i), &buf)?;
    }

    let lag = metrics.phase_lag_s.map_or("n/a".into(), |l| format!("{l:.2} s"));
    println!(
        "max deviation {:.1} µm, rms {:.1} µm, lag {lag}, drift {:.3} µm/s{}",
        metrics.max_deviation_um,
        metrics.rms_error_um,
        metrics.drift_slope_um_s,
        metrics.injection.map_or(String::new(), |o| format!(", injection {o}"))
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut configs = parse_sweep(&text).map_err(|e| anyhow::anyhow!("{}:\n{e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        if !text.lines().any(|l| l.trim_start().starts_with("seeds")) {
            configs.iter_mut().for_each(|c| c.seed = seed);
        }
    }
    let target = args.out.join("metrics.csv");
    prepare_outputs(&args.out, std::slice::from_ref(&target), args.force)?;
    let rows = sweep(&configs)?;
    write_atomic(&target, &metrics_bytes(&rows)?)?;
    println!("{} scenarios, wrote {}", rows.len(), target.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let file = fs::File::open(&args.trace).with_context(|| format!("opening {}", args.trace.display()))?;
    let mut trace = Trace::read_csv(file).with_context(|| format!("reading {}", args.trace.display()))?;
    let config = match (&args.config, &args.preset) {
        (Some(path), _) => Some(read_config(path)?),
        (None, Some(name)) => Some(load_preset(name)?),
        _ => None,
    };
    if let Some(c) = &config {
        trace.period_s = Some(c.motion.dominant_period());
        trace.kind = Some(c.kind);
    } else {
        trace.period_s = args.period;
    }
    let metrics = compute_metrics(&trace)?;
    let row = match &config {
        Some(c) => SweepRow::new(c, metrics),
        None => SweepRow {
            label: String::new(),
            config_hash: String::new(),
            seed: None,
            kind: None,
            metrics,
        },
    };
    let bytes = metrics_bytes(std::slice::from_ref(&row))?;
    match &args.out {
        Some(path) => {
            if path.exists() && !args.force {
                bail!("{} already exists; pass --force to overwrite", path.display());
            }
            write_atomic(path, &bytes)?;
        }
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

fn list_presets(name: Option<String>) -> Result<()> {
    match name {
        Some(name) => match presets::source(&name) {
            Some(text) => print!("{text}"),
            None => bail!("unknown preset `{name}`"),
        },
        None => {
            for n in presets::names() {
                println!("{n:<18} {}", presets::summary(n).unwrap_or(""));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Report(args) => report(args),
        Command::Presets { name } => list_presets(name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
