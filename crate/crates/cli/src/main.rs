use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use patternkv::analysis::{
    channel_stats, generate_synthetic_stream, SyntheticStreamSpec, DEFAULT_OUTLIER_FACTOR,
};
use patternkv::engine::{
    run_scheme_comparison, with_raw_baseline, CacheKind, EngineConfig, Scheme, SchemeResult, Toggles,
    DEFAULT_GROUP_SIZE, DEFAULT_PATTERN_COUNT, DEFAULT_RESIDUAL_WINDOW, PATTERNKV_SCHEME, RAW_SCHEME,
};
use patternkv::gate::DEFAULT_ALPHA;
use patternkv::report::{InputEcho, RunReport};
use patternkv::trace::{read_trace, write_trace, TraceDtype, TraceHeader};
use patternkv::verify::{run_suite, SUITES};
use patternkv::{Error, KvStream, Result};

#[derive(Parser)]
#[command(
    name = "patternkv",
    version,
    about = "Pattern-aligned residual KV cache quantization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a token stream through one or more cache schemes and report
    /// error and storage metrics.
    Compare(CompareArgs),
    /// Run a self-check suite on fresh random instances.
    Verify(VerifyArgs),
    /// Print a trace header and per-channel magnitude statistics.
    Inspect(InspectArgs),
    /// Write a synthetic stream as a trace file.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeName {
    Raw,
    Patternkv,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "synthetic"])))]
struct CompareArgs {
    /// KV trace file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Synthetic stream spec file, or `default`.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    /// Prefill pattern count per head.
    #[arg(long, default_value_t = DEFAULT_PATTERN_COUNT)]
    patterns: usize,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long, default_value_t = DEFAULT_RESIDUAL_WINDOW)]
    residual_window: usize,
    /// Gate significance level.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Scheme to run; repeatable. A raw baseline is always included.
    #[arg(long = "scheme", value_enum)]
    schemes: Vec<SchemeName>,
    /// Quantize K without pattern alignment.
    #[arg(long)]
    no_k_pattern: bool,
    /// Quantize V without pattern alignment.
    #[arg(long)]
    no_v_pattern: bool,
    /// Do not add window centers as patterns during decode.
    #[arg(long)]
    no_new_pattern: bool,
    /// Always flatten V, skipping the gate.
    #[arg(long)]
    no_v_gate: bool,
    /// Gate K tokens as well as V.
    #[arg(long)]
    k_gate: bool,
    /// Pattern mining seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Flag channels whose mean |x| exceeds this multiple of the median.
    #[arg(long, default_value_t = DEFAULT_OUTLIER_FACTOR)]
    outlier_factor: f64,
    /// Also write every channel's statistics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F16,
    F32,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic stream spec file, or `default`.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    #[arg(long)]
    output: PathBuf,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_spec(arg: &str) -> Result<SyntheticStreamSpec> {
    if arg == "default" {
        return Ok(SyntheticStreamSpec::default());
    }
    let bytes = read_file(Path::new(arg))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::usage(format!("{arg} is not UTF-8")))?;
    SyntheticStreamSpec::parse(&text)
}

fn echo_trace(path: &Path, h: &TraceHeader) -> InputEcho {
    InputEcho::Trace {
        path: path.display().to_string(),
        num_layers: h.num_layers,
        num_kv_heads: h.num_kv_heads,
        head_dim: h.head_dim,
        dtype: h.dtype.name().to_string(),
        prefill_len: h.prefill_len,
        decode_steps: h.decode_steps,
    }
}

fn compare_config(a: &CompareArgs) -> EngineConfig {
    EngineConfig {
        bits: a.bits,
        pattern_count: a.patterns,
        group_size: a.group_size,
        residual_window: a.residual_window,
        alpha: a.alpha,
        seed: a.seed,
        toggles: Toggles {
            use_k_patterns: !a.no_k_pattern,
            use_v_patterns: !a.no_v_pattern,
            generate_new_patterns: !a.no_new_pattern,
            use_v_gate: !a.no_v_gate,
            use_k_gate: a.k_gate,
        },
        ..EngineConfig::default()
    }
}

fn print_summary(results: &[SchemeResult]) {
    println!(
        "{:<10} {:>8} {:>12} {:>12} {:>12} {:>9} {:>10}",
        "scheme", "tokens", "mse", "k_mse", "v_mse", "v_accept", "bits/tok"
    );
    for r in results {
        let m = &r.metrics;
        println!(
            "{:<10} {:>8} {:>12.6e} {:>12.6e} {:>12.6e} {:>9.3} {:>10.2}",
            r.name, m.committed_tokens, m.mse, m.k.mse, m.v.mse, m.v_gate_acceptance_rate, m.bits_per_token
        );
    }
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let start = Instant::now();
    let config = compare_config(&a);
    config.validate()?;

    let (stream, input): (KvStream, InputEcho) = match (&a.input, &a.synthetic) {
        (Some(path), None) => {
            let (header, stream) = read_trace(&read_file(path)?)?;
            (stream, echo_trace(path, &header))
        }
        (None, Some(spec_arg)) => {
            let spec = load_spec(spec_arg)?;
            let stream = generate_synthetic_stream(&spec)?.stream;
            (stream, InputEcho::Synthetic { spec })
        }
        _ => return Err(Error::usage("give exactly one of --input or --synthetic")),
    };

    let mut names = a.schemes.clone();
    if names.is_empty() {
        names = vec![SchemeName::Patternkv, SchemeName::Raw];
    }
    let mut schemes = Vec::new();
    for n in names {
        let scheme = match n {
            SchemeName::Patternkv => Scheme::new(PATTERNKV_SCHEME, config.clone()),
            SchemeName::Raw => Scheme::new(RAW_SCHEME, config.raw_baseline()),
        };
        if !schemes.iter().any(|s: &Scheme| s.name == scheme.name) {
            schemes.push(scheme);
        }
    }
    let results = run_scheme_comparison(&stream, &with_raw_baseline(schemes))?;

    let elapsed = start.elapsed().as_millis() as u64;
    let report = RunReport::new(a.seed, input, results, elapsed);
    let json = report.to_json()?;
    match &a.output {
        Some(path) => {
            write_file(path, format!("{json}\n").as_bytes())?;
            print_summary(&report.schemes);
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    if !SUITES.contains(&a.suite.as_str()) {
        return Err(Error::usage(format!(
            "unknown suite {:?}; expected one of {}",
            a.suite,
            SUITES.join(", ")
        )));
    }
    let report = run_suite(&a.suite, a.seed)?;
    for c in &report.checks {
        if c.passed() {
            println!("PASS {} ({} instances)", c.name, c.instances);
        } else {
            println!(
                "FAIL {} ({}/{} instances failed)",
                c.name, c.failures, c.instances
            );
            if let Some(r) = &c.reproducer {
                println!("  reproduce: {r}");
            }
        }
    }
    let passed = report.passed();
    println!(
        "suite {} seed {}: {}",
        report.suite,
        report.seed,
        if passed { "ok" } else { "FAILED" }
    );
    Ok(passed)
}

#[derive(serde::Serialize)]
struct ChannelRow {
    layer: usize,
    head: usize,
    kind: &'static str,
    channel: usize,
    mean_abs: f64,
    min: f64,
    max: f64,
    outlier: bool,
}

fn kind_name(kind: CacheKind) -> &'static str {
    match kind {
        CacheKind::K => "k",
        CacheKind::V => "v",
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    if a.outlier_factor.is_nan() || a.outlier_factor <= 0.0 {
        return Err(Error::usage("outlier factor must be positive"));
    }
    let (h, stream) = read_trace(&read_file(&a.input)?)?;
    println!("file          {}", a.input.display());
    println!("version       {}", h.version);
    println!("num_layers    {}", h.num_layers);
    println!("num_kv_heads  {}", h.num_kv_heads);
    println!("head_dim      {}", h.head_dim);
    println!("dtype         {}", h.dtype.name());
    println!("prefill_len   {}", h.prefill_len);
    println!("decode_steps  {}", h.decode_steps);
    println!();

    let stats = channel_stats(&stream, a.outlier_factor);
    println!(
        "{:>5} {:>4} {:>4} {:>12} {:>12} {:>12}  outliers (> {}x median)",
        "layer", "head", "kind", "median|x|", "max|x|", "range", a.outlier_factor
    );
    for s in &stats {
        let peak = s.mean_abs.iter().cloned().fold(0.0, f64::max);
        let lo = s.min.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.max.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let outliers: Vec<String> = s.outliers.iter().map(usize::to_string).collect();
        println!(
            "{:>5} {:>4} {:>4} {:>12.4} {:>12.4} {:>12.4}  {}",
            s.layer,
            s.head,
            kind_name(s.kind),
            s.median_mean_abs,
            peak,
            hi - lo,
            if outliers.is_empty() {
                "-".to_string()
            } else {
                outliers.join(",")
            }
        );
    }

    if let Some(path) = &a.csv {
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(format!("{}: {e}", path.display())));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for s in &stats {
            for c in 0..s.mean_abs.len() {
                w.serialize(ChannelRow {
                    layer: s.layer,
                    head: s.head,
                    kind: kind_name(s.kind),
                    channel: c,
                    mean_abs: s.mean_abs[c],
                    min: s.min[c],
                    max: s.max[c],
                    outlier: s.outliers.contains(&c),
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let stream = generate_synthetic_stream(&spec)?.stream;
    let dtype = match a.dtype {
        DtypeArg::F16 => TraceDtype::F16,
        DtypeArg::F32 => TraceDtype::F32,
    };
    let bytes = write_trace(&stream, dtype)?;
    write_file(&a.output, &bytes)?;
    println!(
        "wrote {} ({} layers x {} heads x {} dims, {} + {} tokens, {} bytes)",
        a.output.display(),
        stream.num_layers,
        stream.num_heads,
        stream.head_dim,
        stream.prefill_len,
        stream.decode_len,
        bytes.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Compare(a) => cmd_compare(a).map(|()| true),
        Command::Verify(a) => cmd_verify(a),
        Command::Inspect(a) => cmd_inspect(a).map(|()| true),
        Command::Synth(a) => cmd_synth(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // a failed self-check is a data failure, not a usage mistake
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("patternkv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
