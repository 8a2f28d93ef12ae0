use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use finc::covariance::DEFAULT_CHUNK;
use finc::oracle::MAX_ORACLE_SIZE;
use finc::pipeline::{
    self, run_bench, run_differential_clustering, run_oracle_check, run_tune, threads_from_env, with_threads,
    Bandwidth, RunConfig,
};
use finc::synth::{make_planted_scenario, write_scenario, ScenarioParams};
use finc::tensor_io::DataFormat;
use finc::{FincError, ModeThreshold, SpectrumRoute};

/// Differential clustering of embedding sets with random Fourier features.
///
/// Worker threads are capped by the FINC_THREADS environment variable.
/// Exit codes: 0 success, 2 input error, 3 numerical failure, 4 size guard.
#[derive(Parser)]
#[command(name = "finc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find modes over-represented in the test set and write a report.
    Run(RunArgs),
    /// Select the kernel bandwidth and the feature count.
    Tune(TuneArgs),
    /// Compare FINC eigenvalues with the exact-kernel oracle (small inputs only).
    Oracle(OracleArgs),
    /// Time accumulation and eigendecomposition on synthetic data.
    Bench(BenchArgs),
    /// Write a synthetic scenario with planted novel components.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Clone, Copy, ValueEnum)]
enum RouteArg {
    /// Eigendecompose the streamed 2r x 2r conditional covariance.
    Covariance,
    /// Thin QR of the weighted feature matrix; cheaper when n + m < 2r.
    SampleDual,
}

#[derive(Args)]
struct InputArgs {
    /// Test embeddings (.csv, or the binary format otherwise).
    #[arg(long)]
    test: PathBuf,
    /// Reference embeddings.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Skip the first line of CSV inputs.
    #[arg(long)]
    skip_header: bool,
    /// Novelty threshold: frequency ratio a mode must exceed.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "finc-out")]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "bandwidth", required = true, multiple = false, args = ["sigma2", "auto_sigma"])]
struct BandwidthArgs {
    /// Gaussian kernel bandwidth sigma^2.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Select the bandwidth from the data (see `finc tune`).
    #[arg(long)]
    auto_sigma: bool,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    bandwidth: BandwidthArgs,
    /// Number of random frequencies r (features are 2r-dimensional).
    #[arg(long, default_value_t = pipeline::DEFAULT_FEATURES)]
    features: usize,
    /// Maximum number of modes.
    #[arg(long, default_value_t = pipeline::DEFAULT_TOP_MODES)]
    top_modes: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Samples retrieved per mode.
    #[arg(long, default_value_t = pipeline::DEFAULT_TOP_K)]
    top_k: usize,
    /// Also score this set against every mode.
    #[arg(long)]
    score_unseen: Option<PathBuf>,
    /// Samples per feature block.
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    chunk: usize,
    #[arg(long, value_enum, default_value = "covariance")]
    route: RouteArg,
    /// Absolute eigenvalue floor for modes.
    #[arg(long, default_value_t = ModeThreshold::default().absolute)]
    min_eigenvalue: f64,
    /// Eigenvalue floor for modes relative to the largest eigenvalue.
    #[arg(long, default_value_t = ModeThreshold::default().relative)]
    relative_floor: f64,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Candidate feature counts, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = finc::tuning::DEFAULT_FEATURE_CANDIDATES)]
    candidates: Vec<usize>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Refuse inputs with more than this many samples in total.
    #[arg(long, default_value_t = MAX_ORACLE_SIZE)]
    max_size: usize,
    /// Feature counts for the error profile.
    #[arg(long, value_delimiter = ',')]
    profile_r: Vec<usize>,
    /// Basis seeds for the error profile.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    profile_seeds: Vec<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sample counts per set.
    #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 20_000, 40_000])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    chunk: usize,
    /// Timed rounds over all sizes; the fastest repetition of each size is reported.
    #[arg(long, default_value_t = pipeline::DEFAULT_BENCH_REPEATS)]
    repeats: usize,
    /// Also write the records as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    k_common: usize,
    #[arg(long, default_value_t = 3)]
    k_novel: usize,
    /// Test/reference weight ratio of the novel components; inf omits them from the reference.
    #[arg(long, default_value_t = f64::INFINITY)]
    rho_star: f64,
    #[arg(long, default_value_t = 3000)]
    n: usize,
    #[arg(long, default_value_t = 3000)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 20.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "finc-synth")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
}

fn data_format(format: Option<FormatArg>, skip_header: bool) -> Option<DataFormat> {
    format.map(|f| match f {
        FormatArg::Csv => DataFormat::Csv { skip_header },
        FormatArg::Binary => DataFormat::Binary,
    })
}

fn base_config(input: &InputArgs) -> RunConfig {
    let mut cfg = RunConfig::new(&input.test, &input.reference, &input.out);
    cfg.rho = input.rho;
    cfg.seed = input.seed;
    cfg.format = match (input.format, input.skip_header) {
        (None, true) => Some(DataFormat::Csv { skip_header: true }),
        (f, skip) => data_format(f, skip),
    };
    cfg
}

fn apply_kernel(cfg: &mut RunConfig, kernel: &KernelArgs) {
    cfg.sigma2 = match kernel.bandwidth.sigma2 {
        Some(s) => Bandwidth::Fixed(s),
        None => Bandwidth::Auto,
    };
    cfg.r = kernel.features;
    cfg.top_modes = kernel.top_modes;
}

fn run(args: RunArgs) -> Result<(), FincError> {
    let mut cfg = base_config(&args.input);
    apply_kernel(&mut cfg, &args.kernel);
    cfg.top_k = args.top_k;
    cfg.score_unseen = args.score_unseen;
    cfg.chunk = args.chunk;
    cfg.route = match args.route {
        RouteArg::Covariance => SpectrumRoute::Covariance,
        RouteArg::SampleDual => SpectrumRoute::SampleDual,
    };
    cfg.threshold = ModeThreshold {
        absolute: args.min_eigenvalue,
        relative: args.relative_floor,
    };
    let outcome = run_differential_clustering(&cfg)?;
    let body = &outcome.report.body;
    println!(
        "sigma2={} r={} rho={} modes={}",
        body.config.sigma2,
        body.config.r,
        body.config.rho,
        body.modes.len()
    );
    for mode in &body.modes {
        let head: Vec<String> = mode.top_k.iter().take(5).map(|(i, _)| i.to_string()).collect();
        println!("  mode {:>2}  eigenvalue {:.6}  top samples {}", mode.rank, mode.eigenvalue, head.join(","));
    }
    println!("report {}", outcome.report_path.display());
    Ok(())
}

fn tune(args: TuneArgs) -> Result<(), FincError> {
    let cfg = base_config(&args.input);
    let report = run_tune(&cfg, &args.candidates)?;
    let result = &report.body.result;
    println!(
        "sigma2={} (converged: {})  r={} (converged: {})",
        result.sigma2, result.bandwidth.converged, result.r, result.features.converged
    );
    println!("report {}", cfg.output.join("tuning.json").display());
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), FincError> {
    let mut cfg = base_config(&args.input);
    apply_kernel(&mut cfg, &args.kernel);
    let report = run_oracle_check(&cfg, args.max_size, &args.profile_r, &args.profile_seeds)?;
    let b = &report.body;
    println!("sigma2={} r={} top={}", b.sigma2, b.r, b.top);
    println!("{:>4} {:>12} {:>12} {:>10}", "i", "exact", "finc", "gap");
    for (i, (e, f)) in b.exact_top.iter().zip(&b.finc_top).enumerate() {
        println!("{:>4} {:>12.6} {:>12.6} {:>10.2e}", i + 1, e, f, (e - f).abs());
    }
    println!(
        "top l2 gap {:.4e}  top max gap {:.4e}  full l2 gap {:.4e}  oracle route gap {:.2e}",
        b.top_l2_gap, b.top_max_gap, b.full_l2_gap, b.oracle_route_gap
    );
    for rec in &b.profile {
        println!("  r={:<6} seed={:<4} l2 gap {:.4e}  top l2 gap {:.4e}", rec.r, rec.seed, rec.l2_gap, rec.top_l2_gap);
    }
    println!("report {}", cfg.output.join("oracle.json").display());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), FincError> {
    let records = run_bench(&args.sizes, args.dim, args.features, args.seed, args.chunk, args.repeats)?;
    println!(
        "{:>8} {:>10} {:>10} {:>10} {:>10} {:>7} {:>12}",
        "n", "accum_s", "final_s", "eig_s", "total_s", "ratio", "acc_bytes"
    );
    for r in &records {
        let ratio = r.ratio.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>7} {:>12}",
            r.n, r.accumulate_secs, r.finalize_secs, r.eigendecompose_secs, r.total_secs, ratio, r.accumulator_bytes
        );
    }
    if let Some(out) = args.out {
        pipeline::write_json(&records, &out)?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<(), FincError> {
    let params = ScenarioParams {
        k_common: args.k_common,
        k_novel: args.k_novel,
        rho_star: args.rho_star,
        n: args.n,
        m: args.m,
        d: args.dim,
        separation: args.separation,
        seed: args.seed,
    };
    let scenario = make_planted_scenario(params)?;
    let format = data_format(Some(args.format), false).unwrap();
    let files = write_scenario(&scenario, &args.out, format)?;
    println!("test {}", files.test.display());
    println!("reference {}", files.reference.display());
    println!("manifest {}", files.manifest.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<(), FincError> {
    match command {
        Command::Run(a) => run(a),
        Command::Tune(a) => tune(a),
        Command::Oracle(a) => oracle(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = threads_from_env().and_then(|threads| with_threads(threads, || dispatch(cli.command))?);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("finc: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
