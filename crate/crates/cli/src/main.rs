use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fadeq::correction::FadeParams;
use fadeq::graph::{read_graph, Calibration, LayerGraph};
use fadeq::pipeline::{
    end_to_end_error, load_calibration, load_weights, run_quantization, Method, QuantReport,
    RunConfig, DEFAULT_QEP_ALPHA,
};
use fadeq::quant::QuantConfig;
use fadeq::report::{write_report, ReportFormat};
use fadeq::store::{read_store, write_store};
use fadeq::synth::{synthesize, SynthSpec, WeightDist};
use fadeq::{ErrorCategory, QuantError, WeightMatrix};

const EXIT_CODES: &str = "\
Exit codes:
    0  success
    2  usage error (bad flags or flag combination, nothing was read or written)
    3  I/O error (missing or unwritable file)
    4  format error (bad container magic, version, checksum, truncation, malformed graph JSON)
    5  validation error (shape mismatch, missing tensor, invalid graph or configuration)
    6  numerical error (Hessian not positive definite after damping, non-finite values)
  101  internal error (a bug; please report it)

Environment:
  FADEQ_THREADS  maximum number of worker threads (default: all cores)";

#[derive(Parser, Debug)]
#[command(name = "fadeq", version, about = "Layer-wise post-training weight quantization", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize every linear layer of a graph and write the quantized weights and a report.
    #[command(after_help = EXIT_CODES)]
    Quantize(QuantizeArgs),
    /// Run the fade pipeline and print per-layer diagnostics without writing weights.
    #[command(after_help = EXIT_CODES)]
    Diagnose(DiagnoseArgs),
    /// End-to-end error of qep over a grid of fixed alphas, plus one fade row, as CSV.
    #[command(after_help = EXIT_CODES)]
    Sweep(SweepArgs),
    /// Write a deterministic synthetic encoder-decoder chain (graph, weights, calibration).
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Rtn,
    Gptq,
    Qep,
    Fade,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Rtn => Method::Rtn,
            MethodArg::Gptq => Method::Gptq,
            MethodArg::Qep => Method::Qep,
            MethodArg::Fade => Method::Fade,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Gauss,
    Outlier,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Graph description (JSON).
    #[arg(long)]
    graph: PathBuf,
    /// Weight container.
    #[arg(long)]
    weights: PathBuf,
    /// Calibration container, one tensor per graph slot (features x samples).
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args, Debug)]
struct QuantFlags {
    /// Weight bit width.
    #[arg(long, default_value_t = 4)]
    bits: u32,
    /// Group size along the input dimension (graph nodes may override it).
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    /// Hessian damping as a fraction of the mean diagonal.
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    /// Seed for calibration subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use a seeded random subset of this many calibration samples.
    #[arg(long)]
    calib_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct FadeFlags {
    /// Weight of the RTN error term.
    #[arg(long)]
    k1: Option<f64>,
    /// Weight of the calibration gain term.
    #[arg(long)]
    k2: Option<f64>,
    /// Weight of the RTN/calibrated divergence term.
    #[arg(long)]
    k3: Option<f64>,
    /// Lower bound of the synthesized alpha.
    #[arg(long)]
    alpha_min: Option<f64>,
    /// Upper bound of the synthesized alpha.
    #[arg(long)]
    alpha_max: Option<f64>,
}

impl FadeFlags {
    fn any(&self) -> bool {
        self.k1.is_some()
            || self.k2.is_some()
            || self.k3.is_some()
            || self.alpha_min.is_some()
            || self.alpha_max.is_some()
    }

    fn params(&self) -> FadeParams {
        let d = FadeParams::default();
        FadeParams {
            k1: self.k1.unwrap_or(d.k1),
            k2: self.k2.unwrap_or(d.k2),
            k3: self.k3.unwrap_or(d.k3),
            alpha_min: self.alpha_min.unwrap_or(d.alpha_min),
            alpha_max: self.alpha_max.unwrap_or(d.alpha_max),
        }
    }
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_enum, default_value_t = MethodArg::Fade)]
    method: MethodArg,
    /// Fixed correction strength for qep (default 0.5).
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    quant: QuantFlags,
    #[command(flatten)]
    fade: FadeFlags,
    /// Output weight container.
    #[arg(long)]
    out: PathBuf,
    /// Report path; `.csv` writes per-layer CSV, anything else JSON.
    #[arg(long)]
    report: PathBuf,
    /// Include wall-clock timings in the report.
    #[arg(long)]
    timings: bool,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    quant: QuantFlags,
    #[command(flatten)]
    fade: FadeFlags,
    /// Optional report path; `.csv` writes per-layer CSV, anything else JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated alphas in [0, 1].
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    alpha_grid: String,
    /// Number of calibration subsets per grid point. With more than one, each
    /// seed draws `--calib-samples` samples (default: half of them).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    quant: QuantFlags,
    #[command(flatten)]
    fade: FadeFlags,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DistArg::Gauss)]
    dist: DistArg,
    /// Calibration samples per slot.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// Group size recorded on every linear node.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    out_calib: PathBuf,
    #[arg(long)]
    out_graph: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Quant(QuantError),
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        CliError::Quant(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Quant(e) => match e.category() {
                ErrorCategory::Io => 3,
                ErrorCategory::Format => 4,
                ErrorCategory::Validation => 5,
                ErrorCategory::Numerical => 6,
            },
        }
    }

    fn label(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage error",
            CliError::Quant(e) => match e.category() {
                ErrorCategory::Io => "I/O error",
                ErrorCategory::Format => "format error",
                ErrorCategory::Validation => "validation error",
                ErrorCategory::Numerical => "numerical error",
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{}: {m}", self.label()),
            CliError::Quant(e) => write!(f, "{}: {e}", self.label()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("FADEQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "FADEQ_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot configure {n} threads: {e}")))
}

fn run_config(method: Method, q: &QuantFlags, fade: &FadeFlags) -> CliResult<RunConfig> {
    let quant = QuantConfig::new(q.bits, q.group_size)
        .map_err(|e| usage(e.to_string()))?
        .with_damping(q.damping);
    let cfg = RunConfig {
        method,
        quant,
        fade: fade.params(),
        seed: q.seed,
        calib_samples: q.calib_samples,
        ..RunConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

struct Loaded {
    graph: LayerGraph,
    weights: std::collections::BTreeMap<String, WeightMatrix>,
    calib: Calibration,
}

fn load(inputs: &Inputs) -> CliResult<Loaded> {
    let graph = read_graph(&inputs.graph)?;
    let weights = load_weights(&graph, &read_store(&inputs.weights)?)?;
    let calib = load_calibration(&graph, &read_store(&inputs.calib)?)?;
    Ok(Loaded {
        graph,
        weights,
        calib,
    })
}

fn cmd_quantize(a: &QuantizeArgs) -> CliResult<()> {
    let method = Method::from(a.method);
    if a.alpha.is_some() && method != Method::Qep {
        return Err(usage("--alpha is only valid with --method qep"));
    }
    if a.fade.any() && method != Method::Fade {
        return Err(usage(
            "--k1/--k2/--k3/--alpha-min/--alpha-max are only valid with --method fade",
        ));
    }
    let mut cfg =
        run_config(method, &a.quant, &a.fade)?.with_alpha(a.alpha.unwrap_or(DEFAULT_QEP_ALPHA));
    cfg.record_timings = a.timings;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let l = load(&a.inputs)?;
    let outcome = run_quantization(&l.graph, &l.weights, &l.calib, &cfg)?;
    write_store(&outcome.to_store(&l.graph), &a.out)?;
    write_report(
        &outcome.report,
        &a.report,
        ReportFormat::from_path(&a.report),
    )?;
    println!(
        "{} layers quantized with {}; end-to-end error {:.6} (relative {:.6})",
        outcome.report.layers.len(),
        method,
        outcome.report.end_to_end.frobenius,
        outcome.report.end_to_end.relative
    );
    Ok(())
}

fn diagnostics_table(report: &QuantReport) -> String {
    let mut s = format!(
        "{:<20} {:>5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>7} {:>12}\n",
        "layer", "depth", "e_r", "e_calib", "e_stab", "gain", "score", "alpha", "out_err"
    );
    for l in &report.layers {
        let Some(d) = &l.diagnostics else { continue };
        let _ = writeln!(
            s,
            "{:<20} {:>5} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>7.4} {:>12.6}",
            l.layer_id,
            l.depth,
            d.e_r,
            d.e_calib,
            d.e_stab,
            d.delta_gain,
            d.score,
            l.alpha,
            l.output_error
        );
    }
    let _ = write!(
        s,
        "end-to-end error {:.6} (relative {:.6})",
        report.end_to_end.frobenius, report.end_to_end.relative
    );
    s
}

fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    let cfg = run_config(Method::Fade, &a.quant, &a.fade)?;
    let l = load(&a.inputs)?;
    let outcome = run_quantization(&l.graph, &l.weights, &l.calib, &cfg)?;
    if let Some(path) = &a.report {
        write_report(&outcome.report, path, ReportFormat::from_path(path))?;
    }
    println!("{}", diagnostics_table(&outcome.report));
    Ok(())
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|t| {
            let t = t.trim();
            let v: f64 = t
                .parse()
                .map_err(|_| usage(format!("invalid alpha '{t}' in --alpha-grid")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(usage(format!(
                    "alpha {v} in --alpha-grid is outside [0, 1]"
                )));
            }
            Ok(v)
        })
        .collect::<CliResult<Vec<f64>>>()?;
    if grid.is_empty() {
        return Err(usage("--alpha-grid is empty"));
    }
    Ok(grid)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let grid = parse_grid(&a.alpha_grid)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be >= 1"));
    }
    let base = run_config(Method::Qep, &a.quant, &a.fade)?;
    let l = load(&a.inputs)?;
    let n_total = l.graph.check_calibration(&l.calib)?;
    let subset = match (a.seeds, a.quant.calib_samples) {
        (_, Some(n)) => Some(n),
        (1, None) => None,
        (_, None) => Some((n_total / 2).max(1)),
    };

    // each seed's error is measured on the full calibration set
    let errors = |method: Method, alpha: f64| -> CliResult<Vec<f64>> {
        (0..a.seeds)
            .map(|i| {
                let cfg = RunConfig {
                    method,
                    seed: a.quant.seed.wrapping_add(i),
                    calib_samples: subset,
                    ..base.clone()
                }
                .with_alpha(alpha);
                let out = run_quantization(&l.graph, &l.weights, &l.calib, &cfg)?;
                Ok(end_to_end_error(&l.graph, &l.weights, &out.weights, &l.calib)?.frobenius)
            })
            .collect()
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| CliError::Quant(QuantError::Serialize(e.to_string()));
    w.write_record(["method", "alpha", "seeds", "mean_error", "std_error"])
        .map_err(ser)?;
    for &alpha in &grid {
        let (mean, std) = mean_std(&errors(Method::Qep, alpha)?);
        w.write_record([
            "qep".into(),
            alpha.to_string(),
            a.seeds.to_string(),
            mean.to_string(),
            std.to_string(),
        ])
        .map_err(ser)?;
    }
    let (mean, std) = mean_std(&errors(Method::Fade, DEFAULT_QEP_ALPHA)?);
    w.write_record([
        "fade".into(),
        String::new(),
        a.seeds.to_string(),
        mean.to_string(),
        std.to_string(),
    ])
    .map_err(ser)?;
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Quant(QuantError::Serialize(e.to_string())))?;
    match &a.out {
        Some(path) => write_file(path, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Quant(QuantError::io(path, e)))
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    if a.layers == 0 {
        return Err(usage("--layers must be >= 1"));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be >= 1"));
    }
    if a.group_size == Some(0) {
        return Err(usage("--group-size must be >= 1"));
    }
    let fixture = synthesize(&SynthSpec {
        layers: a.layers,
        seed: a.seed,
        dist: match a.dist {
            DistArg::Gauss => WeightDist::Gauss,
            DistArg::Outlier => WeightDist::Outlier,
        },
        samples: a.samples,
        group_size: a.group_size,
        ..SynthSpec::default()
    })?;
    fadeq::graph::write_graph(&fixture.graph, &a.out_graph)?;
    write_store(&fixture.weight_store(), &a.out_weights)?;
    write_store(&fixture.calib_store(), &a.out_calib)?;
    println!(
        "wrote {} linear layers, {} calibration samples",
        fixture.weights.len(),
        a.samples
    );
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fadeq: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
