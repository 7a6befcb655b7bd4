use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use kcsr::data::{
    generate_circles, read_csv_sequence, read_result_json, write_csv_sequence, write_result_json, CirclesConfig,
    CsvOptions, LabelColumn,
};
use kcsr::dp::{dp_segment_capped, DEFAULT_MAX_LEN};
use kcsr::kernels::{build_kernel_matrix, median_heuristic_sigma, MEDIAN_HEURISTIC_CAP};
use kcsr::metrics::{accuracy, nmi};
use kcsr::optim::{GdConfig, SgdConfig};
use kcsr::segmenter::{mkcsr_segment, Segmentation};
use kcsr::{kcsr_segment, skcsr_segment, DataSequence, KcsrError, KernelSpec, LambdaPolicy, SegmentationRequest};

/// Sequence segmentation by kernel clustering with sigmoid-relaxed boundaries.
///
/// Exit codes: 0 success, 1 bad input or I/O, 2 numerical failure,
/// 3 resource limit (full kernel above KCSR_MEM_CAP_BYTES).
#[derive(Parser, Debug)]
#[command(name = "kcsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment one sequence (kcsr, skcsr) or several jointly (mkcsr).
    Segment(SegmentArgs),
    /// Write a synthetic concentric-circles sequence.
    Synth(SynthArgs),
    /// Score predicted labels against ground truth.
    Eval(EvalArgs),
    /// Exact dynamic-programming segmentation for short sequences.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Kcsr,
    Skcsr,
    Mkcsr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KernelArg {
    Rbf,
    Linear,
}

#[derive(Args, Debug)]
struct CsvArgs {
    /// Field delimiter.
    #[arg(long, default_value_t = ',')]
    delimiter: char,

    /// Column holding ground-truth labels (header name or 0-based index).
    /// Defaults to a header column named `label`.
    #[arg(long)]
    label_column: Option<String>,
}

#[derive(Args, Debug)]
struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelArg::Rbf)]
    kernel: KernelArg,

    /// RBF width, or `auto` for the median pairwise distance.
    #[arg(long, default_value = "auto")]
    sigma: String,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Input CSV, one sample per row. Repeat for mkcsr.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,

    /// Number of segments (per sequence).
    #[arg(long)]
    k: usize,

    #[arg(long, value_enum, default_value_t = MethodArg::Kcsr)]
    method: MethodArg,

    /// Sigmoid steepness.
    #[arg(long, default_value_t = kcsr::segmenter::DEFAULT_ALPHA)]
    alpha: f64,

    /// Weight of the balanced-size term, or `auto`.
    #[arg(long, default_value = "auto")]
    lambda: String,

    #[command(flatten)]
    kernel: KernelArgs,

    /// Minibatch size (skcsr, mkcsr); default min(256, n).
    #[arg(long)]
    batch: Option<usize>,

    /// SGD updates; default enough for 50 passes and for the step to decay.
    #[arg(long)]
    iters: Option<usize>,

    /// Initial SGD step; default 0.1.
    #[arg(long)]
    eta0: Option<f64>,

    /// Per-update step decay; default 0.999.
    #[arg(long)]
    rho: Option<f64>,

    /// Heavy-ball momentum; default 0.9.
    #[arg(long)]
    momentum: Option<f64>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Gradient descent stops once the objective changes by at most this.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Gradient descent iteration limit.
    #[arg(long)]
    max_iters: Option<usize>,

    /// Start from evenly spaced boundaries instead of the flatter-sigmoid
    /// warm start.
    #[arg(long)]
    cold_start: bool,

    /// Result JSON path. Without it the JSON goes to stdout and the summary
    /// to stderr.
    #[arg(long)]
    output: Option<PathBuf>,

    /// Prefix for `<prefix>_tau.csv` and `<prefix>_objective.csv`.
    #[arg(long)]
    trace_out: Option<PathBuf>,

    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,

    /// Points per circle, comma separated. Default: four distinct counts
    /// drawn from [500, 1500].
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,

    #[arg(long, value_delimiter = ',', default_values_t = CirclesConfig::DEFAULT_RADII)]
    radii: Vec<f64>,

    /// Standard deviation of the radial noise.
    #[arg(long, default_value_t = CirclesConfig::DEFAULT_NOISE)]
    noise: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Result JSON written by `segment`.
    #[arg(long)]
    pred: PathBuf,

    /// CSV with a label column (or a single column of labels).
    #[arg(long)]
    truth: PathBuf,

    #[command(flatten)]
    csv: CsvArgs,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    input: PathBuf,

    #[arg(long)]
    k: usize,

    #[command(flatten)]
    kernel: KernelArgs,

    /// Refuse sequences longer than this.
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,

    /// Optional JSON output with boundaries and cost.
    #[arg(long)]
    output: Option<PathBuf>,

    #[command(flatten)]
    csv: CsvArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Segment(args) => cmd_segment(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The context chain down to the first library error, whose message
/// already includes its own cause.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.is::<KcsrError>() {
            break;
        }
    }
    parts.join(": ")
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|cause| cause.downcast_ref::<KcsrError>())
        .map_or(1, |e| e.exit_code() as u8)
}

/// Looks at the first line: any non-numeric field means it is a header.
fn sniff_header(path: &Path, delimiter: u8) -> anyhow::Result<Option<Vec<String>>> {
    let file = File::open(path).map_err(|source| KcsrError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|source| KcsrError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let fields: Vec<String> = first
        .trim_end_matches(['\r', '\n'])
        .split(delimiter as char)
        .map(|f| f.trim().to_string())
        .collect();
    let numeric = fields.iter().all(|f| f.parse::<f64>().is_ok());
    Ok((!numeric && !first.trim().is_empty()).then_some(fields))
}

fn csv_options(path: &Path, args: &CsvArgs) -> anyhow::Result<CsvOptions> {
    if !args.delimiter.is_ascii() {
        bail!(KcsrError::Input(format!("delimiter {:?} is not ASCII", args.delimiter)));
    }
    let delimiter = args.delimiter as u8;
    let header = sniff_header(path, delimiter)?;
    let label_column = match &args.label_column {
        Some(spec) => Some(match spec.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(spec.clone()),
        }),
        None => header
            .as_ref()
            .filter(|names| names.iter().any(|n| n == "label"))
            .map(|_| LabelColumn::Name("label".into())),
    };
    Ok(CsvOptions {
        delimiter,
        has_header: header.is_some(),
        label_column,
    })
}

fn read_sequence(path: &Path, args: &CsvArgs) -> anyhow::Result<DataSequence> {
    let options = csv_options(path, args)?;
    Ok(read_csv_sequence(path, &options)?)
}

fn kernel_spec(args: &KernelArgs, x: &DataSequence) -> anyhow::Result<KernelSpec> {
    match args.kernel {
        KernelArg::Linear => Ok(KernelSpec::Linear),
        KernelArg::Rbf => {
            let sigma = if args.sigma == "auto" {
                let sigma = median_heuristic_sigma(x, MEDIAN_HEURISTIC_CAP)?;
                eprintln!("sigma: {sigma} (median heuristic)");
                sigma
            } else {
                args.sigma.parse().map_err(|_| {
                    KcsrError::Input(format!("--sigma expects a number or `auto`, got `{}`", args.sigma))
                })?
            };
            Ok(KernelSpec::rbf(sigma)?)
        }
    }
}

fn sgd_config(args: &SegmentArgs, n: usize) -> SgdConfig {
    let mut sgd = SgdConfig::for_length(n);
    if let Some(rho) = args.rho {
        sgd.rho = rho;
    }
    if let Some(batch) = args.batch {
        sgd = sgd.with_batch(n, batch);
    } else {
        sgd = sgd.with_batch(n, sgd.batch);
    }
    if let Some(iters) = args.iters {
        sgd.iterations = iters;
    }
    if let Some(eta0) = args.eta0 {
        sgd.eta0 = eta0;
    }
    if let Some(momentum) = args.momentum {
        sgd.momentum = momentum;
    }
    sgd.seed = args.seed;
    sgd
}

fn cmd_segment(args: SegmentArgs) -> anyhow::Result<()> {
    if args.method != MethodArg::Mkcsr && args.inputs.len() > 1 {
        bail!(KcsrError::Input(format!(
            "{} inputs given; only mkcsr accepts more than one",
            args.inputs.len()
        )));
    }
    if args.method == MethodArg::Mkcsr && args.inputs.len() < 2 {
        bail!(KcsrError::Input(
            "mkcsr segments several sequences jointly; pass --input at least twice".into()
        ));
    }
    let lambda = match args.lambda.as_str() {
        "auto" => LambdaPolicy::Auto,
        v => LambdaPolicy::Fixed(
            v.parse()
                .map_err(|_| KcsrError::Input(format!("--lambda expects a number or `auto`, got `{v}`")))?,
        ),
    };
    let sequences = args
        .inputs
        .iter()
        .map(|p| read_sequence(p, &args.csv).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let n: usize = sequences.iter().map(DataSequence::len).sum();

    // the heuristic width is taken over all inputs together
    let spec = if sequences.len() == 1 {
        kernel_spec(&args.kernel, &sequences[0])?
    } else {
        let joined = kcsr::data::concat_sequences(sequences.clone())?;
        kernel_spec(&args.kernel, &joined.joined)?
    };

    let mut gd = GdConfig::default();
    if let Some(eps) = args.epsilon {
        gd.epsilon = eps;
    }
    if let Some(m) = args.max_iters {
        gd.max_iters = m;
    }
    let base = match args.method {
        MethodArg::Kcsr => SegmentationRequest {
            method: kcsr::Method::Kcsr(gd),
            ..SegmentationRequest::kcsr(args.k, spec)
        },
        MethodArg::Skcsr | MethodArg::Mkcsr => SegmentationRequest::skcsr(args.k, spec, sgd_config(&args, n)),
    };
    let request = SegmentationRequest {
        alpha: args.alpha,
        warm_start: !args.cold_start,
        ..base.with_lambda(lambda)
    };

    let started = Instant::now();
    let (segmentation, per_sequence) = match args.method {
        MethodArg::Kcsr => (kcsr_segment(&sequences[0], &request)?, Vec::new()),
        MethodArg::Skcsr => (skcsr_segment(&sequences[0], &request)?, Vec::new()),
        MethodArg::Mkcsr => {
            let multi = mkcsr_segment(&sequences, &request)?;
            (multi.global, multi.per_sequence)
        }
    };
    let elapsed = started.elapsed();
    info!("finished in {elapsed:?}");

    let summary = summary_lines(&segmentation, &per_sequence, &args.inputs, elapsed.as_secs_f64());
    match &args.output {
        Some(path) => {
            write_result_json(&segmentation.result, path)?;
            println!("{summary}");
        }
        None => {
            let json = serde_json::to_string_pretty(&segmentation.result)?;
            println!("{json}");
            eprintln!("{summary}");
        }
    }
    if let Some(prefix) = &args.trace_out {
        write_traces(prefix, &segmentation)?;
    }
    Ok(())
}

fn summary_lines(
    seg: &Segmentation,
    per_sequence: &[kcsr::SegmentationResult],
    inputs: &[PathBuf],
    secs: f64,
) -> String {
    let r = &seg.result;
    let join = |b: &[usize]| b.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
    let mut lines = vec![format!("method: {}", r.method), format!("k: {}", r.k)];
    if per_sequence.is_empty() {
        lines.push(format!("boundaries: {}", join(&r.boundaries)));
    } else {
        for (res, path) in per_sequence.iter().zip(inputs) {
            lines.push(format!("boundaries ({}): {}", path.display(), join(&res.boundaries)));
        }
    }
    let final_j = seg
        .full_objective_trace
        .last()
        .or(r.objective_trace.last())
        .map_or(f64::NAN, |t| t.1);
    lines.push(format!("objective: {final_j}"));
    if !seg.empty_segments.is_empty() {
        lines.push(format!("empty segments: {}", join(&seg.empty_segments)));
    }
    lines.push(format!("time: {secs:.3} s"));
    lines.join("\n")
}

fn write_traces(prefix: &Path, seg: &Segmentation) -> anyhow::Result<()> {
    let with_suffix = |suffix: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(suffix);
        PathBuf::from(name)
    };
    let tau_path = with_suffix("_tau.csv");
    let mut out = BufWriter::new(File::create(&tau_path).with_context(|| format!("creating {}", tau_path.display()))?);
    writeln!(out, "j,tau,label")?;
    for (j, (t, l)) in seg.result.tau.iter().zip(&seg.result.labels).enumerate() {
        writeln!(out, "{},{t},{l}", j + 1)?;
    }
    out.flush()?;

    let obj_path = with_suffix("_objective.csv");
    let mut out = BufWriter::new(File::create(&obj_path).with_context(|| format!("creating {}", obj_path.display()))?);
    writeln!(out, "iteration,objective,kind")?;
    for (t, v) in &seg.result.objective_trace {
        writeln!(out, "{t},{v},step")?;
    }
    for (t, v) in &seg.full_objective_trace {
        writeln!(out, "{t},{v},full")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let counts = match args.counts {
        Some(c) => c,
        None => CirclesConfig::random_counts(args.radii.len(), 500, 1500, args.seed),
    };
    let config = CirclesConfig {
        counts,
        radii: args.radii,
        noise_sd: args.noise,
        seed: args.seed,
    };
    let seq = generate_circles(&config)?;
    write_csv_sequence(&seq, &args.out)?;
    let counts: Vec<String> = config.counts.iter().map(ToString::to_string).collect();
    println!("counts: {}", counts.join(" "));
    Ok(())
}

fn truth_labels(path: &Path, args: &CsvArgs) -> anyhow::Result<Vec<usize>> {
    let options = csv_options(path, args)?;
    let seq = read_csv_sequence(path, &options)?;
    if let Some(labels) = seq.truth_labels {
        return Ok(labels);
    }
    if seq.dim() == 1 {
        return seq
            .samples
            .column(0)
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(anyhow!(KcsrError::Input(format!(
                        "{}: row {}: label {v} is not a positive integer",
                        path.display(),
                        row + 1
                    ))))
                }
            })
            .collect();
    }
    bail!(KcsrError::Input(format!(
        "{} has no label column; name it `label` or pass --label-column",
        path.display()
    )))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let pred = read_result_json(&args.pred)?;
    let truth = truth_labels(&args.truth, &args.csv)?;
    let acc = accuracy(&pred.labels, &truth)?;
    let score = nmi(&pred.labels, &truth)?;
    println!("ACC {acc:.4} NMI {score:.4}");
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> anyhow::Result<()> {
    let x = read_sequence(&args.input, &args.csv)?;
    if x.len() > args.max_len {
        bail!(KcsrError::Input(format!(
            "exact segmentation is limited to {} samples, got {}; raise --max-len or use `segment`",
            args.max_len,
            x.len()
        )));
    }
    let spec = kernel_spec(&args.kernel, &x)?;
    let kernel = build_kernel_matrix(&x, &spec)?;
    let solution = dp_segment_capped(&kernel, args.k, args.max_len)?;
    let boundaries: Vec<String> = solution.boundaries.iter().map(ToString::to_string).collect();
    println!("boundaries: {}", boundaries.join(" "));
    println!("cost: {}", solution.optimal_cost);
    if let Some(path) = &args.output {
        let file = File::create(path).map_err(|source| KcsrError::Io {
            path: path.clone(),
            source,
        })?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut out, &solution)?;
        writeln!(out)?;
        out.flush()?;
    }
    Ok(())
}
