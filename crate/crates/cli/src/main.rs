//! `prevex`: prevalence intervals from imperfect-test counts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use prevex_core::interface::{
    curves_to_csv, estimate, parse_dataset, pvalue_curves, CurveGrid, DataFormat, DatasetFile, DatasetKind,
    EstimateConfig, RunMetadata,
};
use prevex_core::point::Method;
use prevex_core::simulation::{emit_table, run_cell, Preset, SimResult, SimScenario, TableFormat};
use prevex_core::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFERENCE: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "prevex", version, about = "Prevalence confidence intervals for imperfect diagnostic tests")]
struct Cli {
    /// Worker threads for the Monte Carlo engines (0 = all cores). Results do
    /// not depend on this setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimate and confidence intervals for a dataset.
    Estimate(EstimateArgs),
    /// p-value curves over a prevalence grid, as long-format CSV.
    Pcurve(PcurveArgs),
    /// Coverage simulation for a scenario file or a preset grid.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct InferenceArgs {
    /// Dataset file (JSON, or CSV for stratum/subject tables).
    #[arg(long)]
    data: PathBuf,
    /// Dataset format; inferred from the file extension when omitted.
    #[arg(long)]
    data_format: Option<DataFormat>,
    /// Comma-separated methods, e.g. delta,delta-logit,bootstrap,exact,hybrid-p.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Confidence level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Monte Carlo replicates (bootstrap, and per net point for inversion methods).
    #[arg(long = "B", default_value_t = 3000)]
    replicates: usize,
    /// Net points per free nuisance axis.
    #[arg(long, default_value_t = 30)]
    net: usize,
    /// Confidence level of each nuisance interval.
    #[arg(long, default_value_t = 0.999)]
    nuisance_level: f64,
    /// Master seed.
    #[arg(long, env = "PREVEX_SEED", default_value_t = 0)]
    seed: u64,
}

impl InferenceArgs {
    fn config(&self, kind: DatasetKind) -> EstimateConfig {
        let methods = self.methods.clone().unwrap_or_else(|| match kind {
            DatasetKind::Unweighted => vec![Method::Delta, Method::DeltaLogit, Method::Bootstrap, Method::Exact],
            _ => vec![Method::Delta, Method::DeltaLogit, Method::Bootstrap, Method::HybridLambda],
        });
        EstimateConfig {
            methods,
            level: self.level,
            replicates: self.replicates,
            net_points_per_axis: self.net,
            nuisance_level: self.nuisance_level,
            seed: self.seed,
            ..EstimateConfig::default()
        }
    }

    fn dataset(&self) -> Result<DatasetFile, Error> {
        let text = read_input(&self.data)?;
        let format = self
            .data_format
            .unwrap_or_else(|| DataFormat::from_path(&self.data.to_string_lossy()));
        parse_dataset(&text, format)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Output format.
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    /// Omit run metadata (wall time, threads) so repeated runs are byte-identical.
    #[arg(long)]
    deterministic_output: bool,
    /// Write the result here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PcurveArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    #[arg(long)]
    pi_min: f64,
    #[arg(long)]
    pi_max: f64,
    #[arg(long, default_value_t = 0.0005)]
    pi_step: f64,
    /// Write the curves here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["scenario", "preset"]))]
struct SimulateArgs {
    /// Scenario file: one scenario object or an array of them.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Built-in grid: table3, table4, table6 or table7.
    #[arg(long)]
    preset: Option<Preset>,
    /// Replications per cell (default 500 for presets, the file's value otherwise).
    #[arg(long)]
    replications: Option<usize>,
    /// Master seed (default 0 for presets, the file's value otherwise).
    #[arg(long, env = "PREVEX_SEED")]
    seed: Option<u64>,
    /// Run only the cell with this true specificity.
    #[arg(long)]
    q0: Option<f64>,
    /// Restrict to these methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Table format.
    #[arg(long, default_value = "csv")]
    format: TableFormat,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_input(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Validation {
        field: path.display().to_string(),
        message: format!("cannot read file: {e}"),
    })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    let result = match out {
        Some(path) => fs::write(path, text),
        None => std::io::stdout().lock().write_all(text.as_bytes()),
    };
    result.map_err(|e| Error::InferenceFailed(format!("cannot write output: {e}")))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation { .. } | Error::Parse { .. } => EXIT_VALIDATION,
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_INFERENCE,
    }
}

fn run_estimate(args: &EstimateArgs) -> Result<u8, Error> {
    let started = Instant::now();
    let file = args.inference.dataset()?;
    let cfg = args.inference.config(file.kind());
    let mut doc = estimate(&file, &cfg)?;
    if !args.deterministic_output {
        doc.metadata = Some(RunMetadata {
            wall_time_seconds: started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        });
    }
    let text = match args.format {
        OutputFormat::Json => doc.to_json()?,
        OutputFormat::Csv => doc.to_csv(),
    };
    write_output(args.out.as_deref(), &text)?;
    for f in &doc.failures {
        eprintln!("prevex: {} failed: {}", f.method, f.error);
    }
    Ok(if doc.failures.is_empty() { 0 } else { EXIT_INFERENCE })
}

fn run_pcurve(args: &PcurveArgs) -> Result<u8, Error> {
    let grid = CurveGrid {
        pi_min: args.pi_min,
        pi_max: args.pi_max,
        pi_step: args.pi_step,
    };
    grid.validate()?;
    let file = args.inference.dataset()?;
    let cfg = args.inference.config(file.kind());
    let curves = pvalue_curves(&file, &cfg, &grid)?;
    write_output(args.out.as_deref(), &curves_to_csv(&curves))?;
    Ok(0)
}

fn load_scenarios(path: &Path) -> Result<Vec<SimScenario>, Error> {
    let text = read_input(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let parsed = if value.is_array() {
        serde_json::from_value::<Vec<SimScenario>>(value)
    } else {
        serde_json::from_value::<SimScenario>(value).map(|s| vec![s])
    };
    parsed.map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}

fn run_simulate(args: &SimulateArgs) -> Result<u8, Error> {
    let mut scenarios = match (&args.scenario, args.preset) {
        (Some(path), _) => {
            let mut list = load_scenarios(path)?;
            for (i, s) in list.iter_mut().enumerate() {
                if let Some(r) = args.replications {
                    s.replications = r;
                }
                if let Some(seed) = args.seed {
                    s.seed = prevex_core::stochastics::SeedSpec::new(seed, i as u64);
                }
            }
            list
        }
        (None, Some(preset)) => preset.scenarios(args.replications.unwrap_or(500), args.seed.unwrap_or(0))?,
        (None, None) => return Err(Error::Usage("either --scenario or --preset is required".into())),
    };
    if let Some(q0) = args.q0 {
        scenarios.retain(|s| (s.q0 - q0).abs() < 1e-9);
        if scenarios.is_empty() {
            return Err(Error::Usage(format!("no cell with q0 = {q0}")));
        }
    }
    if let Some(methods) = &args.methods {
        for s in &mut scenarios {
            s.methods = methods.clone();
        }
    }
    for s in &scenarios {
        s.validate()?;
    }
    let results: Vec<SimResult> = scenarios.iter().map(run_cell).collect::<Result<_, _>>()?;
    write_output(args.out.as_deref(), &emit_table(&results, args.format)?)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("prevex: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let outcome = match &cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Pcurve(args) => run_pcurve(args),
        Command::Simulate(args) => run_simulate(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("prevex: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
