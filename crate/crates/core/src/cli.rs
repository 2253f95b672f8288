//! `ehpc` command-line interface.
//!
//! Machine-readable output goes to stdout (or `-o`), summaries to stderr.
//! Exit codes: 0 success, 2 argument error, 3 I/O error, 4 validation error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::compressor::{compress_pipeline, render, Budget, CompressionConfig, InferenceMode, PoolKind};
use crate::cost::{cost_pipeline, sweep_grid, write_sweep_csv, CostParams, Sweep};
use crate::error::{Error, Result};
use crate::pilot::{
    accumulate_evidence, build_matrix, select_heads, synthesize_chain_case, synthesize_haystack, ChainVariable,
    EvaluatorHeadSet, EvidenceScoreMatrix, PilotManifest, MANIFEST_FILE,
};
use crate::presets::find_preset;
use crate::reference::{fabricate_trace, FabricationSpec, ModelConfig, ReferenceModel};
use crate::tokenizer;
use crate::trace::{read_trace, read_trace_file, validate_trace, write_trace_file, AttentionTrace};

const DEFAULT_OBSERVATION_WINDOW: usize = 16;
const DEFAULT_KERNEL: usize = 32;

const DEFAULT_FILLER: &str = "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. ";
const DEFAULT_NEEDLE: &str = " The secret number is 7481. ";
const DEFAULT_QUESTION: &str = " What is the secret number?";

#[derive(Debug, Parser)]
#[command(name = "ehpc", version, about = "Evaluator-head prompt compression toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the reference model (or a fabrication spec) and write an .ehpct trace
    Trace(TraceArgs),
    /// Detect evaluator heads from probe traces
    Detect(DetectArgs),
    /// Compress a prompt using evaluator-head attention from a trace
    Compress(CompressArgs),
    /// Report analytic prefill/decode attention costs
    Cost(CostArgs),
    /// Check a trace file against the container invariants
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub num_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 4096)]
    pub max_seq_len: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "tokens", "fabricate"])))]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Layers to capture (default: all)
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    /// Trailing attention rows to store per head (default: min(16, N))
    #[arg(long)]
    pub window: Option<usize>,
    /// UTF-8 prompt text, tokenized byte-level
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    /// Token ids separated by whitespace or commas
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    /// JSON fabrication spec with planted attention cells
    #[arg(long)]
    pub fabricate: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeKind {
    Qa,
    MultiHop,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("cases").required(true).args(["traces", "probe"])))]
pub struct DetectArgs {
    /// Directory of traces with a manifest of evidence positions
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Manifest path (default: <traces>/manifest.json)
    #[arg(long, requires = "traces")]
    pub manifest: Option<PathBuf>,
    /// Synthesize probes and trace them with the reference model
    #[arg(long)]
    pub probe: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = ProbeKind::Qa)]
    pub kind: ProbeKind,
    /// Probe lengths in tokens
    #[arg(long, value_delimiter = ',', default_values_t = [128usize, 256])]
    pub lengths: Vec<usize>,
    /// Needle depths (qa) or per-hop depths (multi-hop)
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.25, 0.5, 0.75, 1.0])]
    pub depths: Vec<f64>,
    #[arg(long)]
    pub needle: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    #[arg(long)]
    pub filler_file: Option<PathBuf>,
    /// Number of hops for multi-hop probes
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    /// Heads to select
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Heads JSON output (default: stdout)
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Write the evidence-score matrix as CSV
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Skip row-sum and causality checks when loading traces
    #[arg(long)]
    pub no_validate: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("head_source").required(true).args(["preset", "heads"])))]
#[command(group(ArgGroup::new("target").required(true).args(["budget", "ratio"])))]
pub struct CompressArgs {
    #[arg(short, long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub preset: Option<String>,
    /// Heads JSON file
    #[arg(long)]
    pub heads: Option<PathBuf>,
    /// Tokens to keep
    #[arg(long)]
    pub budget: Option<usize>,
    /// Target compression ratio N / kept
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Observation window (default: preset value, else 16)
    #[arg(long)]
    pub window: Option<usize>,
    /// Pooling kernel (default: preset value, else 32)
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long, value_enum, default_value_t = PoolKind::Average)]
    pub pool: PoolKind,
    /// Trailing tokens always kept (default: observation window)
    #[arg(long)]
    pub tail: Option<usize>,
    #[arg(long, value_enum, default_value_t = InferenceMode::Emi)]
    pub mode: InferenceMode,
    /// Compressed-prompt JSON output (default: stdout)
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Also write the rendered compressed text here
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub no_validate: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 32)]
    pub layers: u64,
    #[arg(long, default_value_t = 32)]
    pub heads: u64,
    #[arg(long, default_value_t = 128)]
    pub head_dim: u64,
    /// Prompt tokens
    #[arg(long, default_value_t = 4096)]
    pub n: u64,
    /// Generated tokens
    #[arg(long, default_value_t = 128)]
    pub t: u64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa2: f64,
    /// Sweep a parameter, e.g. kappa2=1..8 (repeatable; emits CSV)
    #[arg(long)]
    pub sweep: Vec<Sweep>,
    /// Emit CSV even without a sweep
    #[arg(long)]
    pub csv: bool,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p, e)),
            None => Ok(self.out.write_all(bytes)?),
        }
    }

    fn note(&mut self, msg: std::fmt::Arguments) {
        let _ = writeln!(self.err, "{msg}");
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut io = Io { out, err };
    let result = match cli.command {
        Command::Trace(a) => cmd_trace(&a, &mut io),
        Command::Detect(a) => cmd_detect(&a, &mut io),
        Command::Compress(a) => cmd_compress(&a, &mut io),
        Command::Cost(a) => cmd_cost(&a, &mut io),
        Command::Validate(a) => cmd_validate(&a, &mut io),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            e.exit_code()
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_token_file(path: &Path) -> Result<Vec<u32>> {
    read_text(path)?
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Argument(format!("{}: bad token id `{s}`", path.display())))
        })
        .collect()
}

fn summarize(trace: &AttentionTrace) -> String {
    format!(
        "L={} H={} N={} W={} layers={:?}",
        trace.num_layers, trace.num_heads, trace.seq_len, trace.window, trace.layers_present
    )
}

fn cmd_trace(args: &TraceArgs, io: &mut Io) -> Result<i32> {
    let trace = if let Some(spec_path) = &args.fabricate {
        let spec: FabricationSpec = serde_json::from_str(&read_text(spec_path)?)
            .map_err(|e| Error::Argument(format!("{}: {e}", spec_path.display())))?;
        fabricate_trace(&spec)?
    } else {
        let (ids, texts) = match (&args.input, &args.tokens) {
            (Some(path), _) => {
                let text = read_text(path)?;
                (tokenizer::encode(&text), Some(tokenizer::token_texts(&text)))
            }
            (None, Some(path)) => (parse_token_file(path)?, None),
            (None, None) => unreachable!("clap requires a source"),
        };
        let config = args.model.config();
        let capture: Vec<usize> = if args.layers.is_empty() {
            (0..config.num_layers).collect()
        } else {
            args.layers.clone()
        };
        let window = args.window.unwrap_or(DEFAULT_OBSERVATION_WINDOW.min(ids.len()));
        let mut trace = ReferenceModel::new(config)?.prefill(&ids, &capture, window)?;
        if texts.is_some() {
            trace.token_texts = texts;
        }
        trace
    };
    let bytes = write_trace_file(&trace, &args.output)?;
    io.note(format_args!(
        "wrote {} ({bytes} bytes): {}",
        args.output.display(),
        summarize(&trace)
    ));
    Ok(0)
}

fn probe_matrices(args: &DetectArgs, io: &mut Io) -> Result<Vec<EvidenceScoreMatrix>> {
    let filler = match &args.filler_file {
        Some(p) => read_text(p)?,
        None => DEFAULT_FILLER.to_string(),
    };
    let filler = tokenizer::encode(&filler);
    let needle = tokenizer::encode(args.needle.as_deref().unwrap_or(DEFAULT_NEEDLE));
    let question = tokenizer::encode(args.question.as_deref().unwrap_or(DEFAULT_QUESTION));

    let mut cases = Vec::new();
    for &len in &args.lengths {
        match args.kind {
            ProbeKind::Qa => {
                for &depth in &args.depths {
                    cases.push(synthesize_haystack(&filler, &needle, &question, len, depth)?);
                }
            }
            ProbeKind::MultiHop => {
                let var = ChainVariable {
                    name: tokenizer::encode("VAR"),
                    value: tokenizer::encode("7481"),
                    hops: args.hops,
                };
                cases.push(synthesize_chain_case(&[var], &filler, &question, len, &args.depths)?);
            }
        }
    }
    if cases.is_empty() {
        return Err(Error::Argument("no probe cases (empty --lengths or --depths)".into()));
    }
    let model = ReferenceModel::new(args.model.config())?;
    let layers: Vec<usize> = (0..model.config().num_layers).collect();
    io.note(format_args!("tracing {} probe case(s)", cases.len()));
    cases
        .par_iter()
        .map(|case| {
            let trace = model.prefill(&case.token_ids, &layers, 1)?;
            accumulate_evidence(&trace, &case.evidence)
        })
        .collect()
}

fn manifest_matrices(dir: &Path, args: &DetectArgs) -> Result<Vec<EvidenceScoreMatrix>> {
    let manifest_path = args.manifest.clone().unwrap_or_else(|| dir.join(MANIFEST_FILE));
    let manifest = PilotManifest::load(&manifest_path)?;
    if manifest.cases.is_empty() {
        return Err(Error::Argument(format!("{} lists no cases", manifest_path.display())));
    }
    let base = manifest_path.parent().unwrap_or(dir).to_path_buf();
    manifest
        .cases
        .par_iter()
        .map(|entry| {
            let trace = read_trace_file(&base.join(&entry.trace), !args.no_validate)?;
            accumulate_evidence(&trace, &entry.evidence)
        })
        .collect()
}

fn cmd_detect(args: &DetectArgs, io: &mut Io) -> Result<i32> {
    let per_case = match &args.traces {
        Some(dir) => manifest_matrices(dir, args)?,
        None => probe_matrices(args, io)?,
    };
    let matrix = build_matrix(&per_case)?;
    let heads = select_heads(&matrix, args.k)?;
    if let Some(path) = &args.matrix {
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    }
    let mut json = heads.to_json();
    json.push('\n');
    io.emit(args.output.as_deref(), json.as_bytes())?;
    io.note(format_args!(
        "averaged {} case(s); layer {} heads {:?}",
        matrix.cases_averaged, heads.layer, heads.heads
    ));
    Ok(0)
}

fn cmd_compress(args: &CompressArgs, io: &mut Io) -> Result<i32> {
    let (heads, preset_window, preset_kernel) = match (&args.preset, &args.heads) {
        (Some(name), _) => {
            let p = find_preset(name)?;
            (p.head_set(), p.observation_window, p.kernel)
        }
        (None, Some(path)) => (EvaluatorHeadSet::from_file(path)?, None, None),
        (None, None) => unreachable!("clap requires a head source"),
    };
    let observation_window = args
        .window
        .or(preset_window)
        .unwrap_or(DEFAULT_OBSERVATION_WINDOW);
    let budget = match (args.budget, args.ratio) {
        (Some(b), _) => Budget::Tokens(b),
        (None, Some(r)) => Budget::Ratio(r),
        (None, None) => unreachable!("clap requires a budget"),
    };
    let config = CompressionConfig {
        observation_window,
        kernel: args.kernel.or(preset_kernel).unwrap_or(DEFAULT_KERNEL),
        pool: args.pool,
        budget,
        protected_tail: args.tail.unwrap_or(observation_window),
        mode: args.mode,
    };
    config.validate()?;

    let trace = read_trace_file(&args.trace, !args.no_validate)?;
    let prompt = compress_pipeline(&trace, &heads, &config, &trace.token_ids)?;
    if let Some(path) = &args.text {
        let text = render(&prompt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let mut json = serde_json::to_string(&prompt.to_json()).expect("compressed prompt serializes");
    json.push('\n');
    io.emit(args.output.as_deref(), json.as_bytes())?;
    io.note(format_args!(
        "kept {}/{} tokens, kappa2 = {:.4} (layer {}, {} heads, {:?})",
        prompt.len(),
        prompt.original_len,
        prompt.achieved_kappa2,
        heads.layer,
        heads.k,
        config.mode
    ));
    Ok(0)
}

fn cmd_cost(args: &CostArgs, io: &mut Io) -> Result<i32> {
    let base = CostParams {
        layers: args.layers,
        heads: args.heads,
        head_dim: args.head_dim,
        prompt_len: args.n,
        generated: args.t,
        kappa1: args.kappa1,
        kappa2: args.kappa2,
    };
    if args.sweep.is_empty() && !args.csv {
        let report = cost_pipeline(&base)?;
        let mut json = serde_json::to_string(&report).expect("cost report serializes");
        json.push('\n');
        io.emit(args.output.as_deref(), json.as_bytes())?;
        io.note(format_args!(
            "prefill ratio {:.6}, speedup: {}",
            report.prefill_ratio,
            crate::cost::check_speedup(base.kappa1, base.kappa2)
        ));
    } else {
        let grid = sweep_grid(base, &args.sweep);
        let mut buf = Vec::new();
        write_sweep_csv(&grid, &mut buf)?;
        io.emit(args.output.as_deref(), &buf)?;
        io.note(format_args!("{} grid point(s)", grid.len()));
    }
    Ok(0)
}

fn cmd_validate(args: &ValidateArgs, io: &mut Io) -> Result<i32> {
    let file = std::fs::File::open(&args.path).map_err(|e| Error::io(&args.path, e))?;
    let trace = read_trace(std::io::BufReader::new(file), false).map_err(|e| match e {
        Error::Stream(source) => Error::io(&args.path, source),
        other => other,
    })?;
    let violations = validate_trace(&trace);
    for v in &violations {
        writeln!(io.out, "{v}")?;
    }
    if violations.is_empty() {
        io.note(format_args!("{}: ok ({})", args.path.display(), summarize(&trace)));
        Ok(0)
    } else {
        io.note(format_args!(
            "{}: {} violation(s)",
            args.path.display(),
            violations.len()
        ));
        Ok(4)
    }
}
