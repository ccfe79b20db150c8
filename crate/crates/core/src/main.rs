use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use editroll::augment::AugmentConfig;
use editroll::likelihood::{approx_notewise_ll, onade_notewise_ll, LLConfig};
use editroll::metrics::{self, Scale};
use editroll::midi::{self, QuantizeConfig, DEFAULT_TEMPO_BPM};
use editroll::nn::{load_model, loss_trace_csv, save_model, train, ScorerModel, TrainOptions, UNetConfig};
use editroll::sampler::{transcript_jsonl, EditSession, SamplerConfig};
use editroll::service::{serve, SessionService};
use editroll::{Error, PianoRoll};

#[derive(Parser)]
#[command(name = "editroll", version, about = "Edit-event piano-roll generation")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a directory of MIDI files into a piano-roll corpus.
    Ingest(IngestArgs),
    /// Train a scorer on a corpus.
    Train(TrainArgs),
    /// Generate or continue a piece with a trained scorer.
    Sample(SampleArgs),
    /// Corpus metrics and histogram distances.
    Eval(EvalArgs),
    /// Approximate notewise log likelihood of a target given an input.
    Likelihood(LikelihoodArgs),
    /// Run the session service.
    Serve(ServeArgs),
}

#[derive(Args, Clone, Copy)]
struct QuantArgs {
    #[arg(long, default_value_t = 16)]
    steps_per_bar: usize,
    #[arg(long, default_value_t = 8)]
    bars: usize,
    #[arg(long, default_value_t = 36)]
    pitch_offset: u8,
    #[arg(long, default_value_t = 46)]
    pitch_count: usize,
}

impl QuantArgs {
    fn config(&self) -> QuantizeConfig {
        QuantizeConfig {
            steps_per_bar: self.steps_per_bar,
            bars_per_sample: self.bars,
            pitch_offset: self.pitch_offset,
            pitch_count: self.pitch_count,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory: ingested JSON, loose roll JSON or MIDI files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    bn_momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 32)]
    base_filters: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Masking only, no extraneous notes (add-only model).
    #[arg(long)]
    mask_only: bool,
    #[arg(long, default_value_t = 0.0)]
    mask_min: f64,
    #[arg(long, default_value_t = 1.0)]
    mask_max: f64,
    #[arg(long, default_value_t = 0.0)]
    extra_min: f64,
    #[arg(long, default_value_t = 0.015)]
    extra_max: f64,
    #[arg(long, default_value_t = 4)]
    pairs_per_target: usize,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    max_removals: Option<usize>,
    /// Defaults to 2000, or 400 with --add-only.
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    protect_input: bool,
    #[arg(long)]
    add_only: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            max_removals: self.max_removals,
            max_iterations: self.max_iterations.unwrap_or(if self.add_only { 400 } else { 2000 }),
            protect_input: self.protect_input,
            add_only: self.add_only,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Conditioning input, MIDI or roll JSON.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for sample.mid, sample.json and transcript.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPO_BPM)]
    tempo: f64,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Generated corpus; omit to report the training corpus alone.
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    training: PathBuf,
    /// Scale pitch classes, comma separated (C = 0).
    #[arg(long, default_value = "0,2,4,5,7,9,11")]
    scale: String,
    /// Print an aligned table instead of JSON.
    #[arg(long)]
    table: bool,
    #[command(flatten)]
    quant: QuantArgs,
}

#[derive(Args)]
struct LikelihoodArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input roll, MIDI or roll JSON.
    #[arg(long)]
    input: PathBuf,
    /// Target roll, MIDI or roll JSON.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 1)]
    max_level: usize,
    #[arg(long, default_value_t = 64)]
    orderings: usize,
    #[arg(long, default_value_t = 8)]
    pool_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allow --max-level 2 and above.
    #[arg(long)]
    experimental_levels: bool,
    /// Add-only traversal for a model trained with --mask-only.
    #[arg(long)]
    onade: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 1800)]
    idle_timeout_secs: u64,
}

/// Exit status paired with its cause.
struct Failure {
    code: u8,
    error: Error,
}

const EXIT_DATA: u8 = 3;
const EXIT_MODEL: u8 = 4;

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Format(_) | Error::Version { .. } | Error::Numeric { .. } => EXIT_MODEL,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

fn model_failure(error: Error) -> Failure {
    Failure {
        code: EXIT_MODEL,
        error,
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Likelihood(a) => cmd_likelihood(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn ingest(a: IngestArgs) -> CliResult {
    let cfg = a.quant.config();
    cfg.validate()?;
    let samples = midi::ingest_dir(&a.input, &cfg)?;
    midi::write_corpus(&a.output, &samples)?;
    println!("{} samples written to {}", samples.len(), a.output.display());
    Ok(())
}

fn load_corpus(dir: &Path, cfg: &QuantizeConfig) -> CliResult<Vec<PianoRoll>> {
    cfg.validate()?;
    let rolls = midi::load_rolls(dir, cfg)?;
    if rolls.is_empty() {
        return Err(Error::Config(format!("no samples found in {}", dir.display())).into());
    }
    Ok(rolls)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let qcfg = a.quant.config();
    let corpus = load_corpus(&a.data, &qcfg)?;
    let aug = if a.mask_only {
        AugmentConfig {
            mask_fraction_range: (a.mask_min, a.mask_max),
            pairs_per_target: a.pairs_per_target,
            ..AugmentConfig::mask_only()
        }
    } else {
        AugmentConfig {
            mask_fraction_range: (a.mask_min, a.mask_max),
            extraneous_fraction_range: (a.extra_min, a.extra_max),
            pairs_per_target: a.pairs_per_target,
        }
    };
    let config = UNetConfig {
        depth: a.depth,
        base_filters: a.base_filters,
        kernel: 3,
        dropout_rate: a.dropout,
        time_steps: corpus[0].time_steps(),
        pitch_count: qcfg.pitch_count,
        pitch_offset: qcfg.pitch_offset,
    };
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        bn_momentum: a.bn_momentum,
        seed: a.seed,
    };
    let outcome = train(&corpus, &aug, config, &opts)?;
    save_model(&outcome.model, &a.out)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.out.with_extension("csv"));
    fs::write(&csv, loss_trace_csv(&outcome.loss_trace)).map_err(Error::from)?;
    println!(
        "trained {} parameters for {} epochs; checkpoint {} loss trace {}",
        outcome.model.parameter_count(),
        a.epochs,
        a.out.display(),
        csv.display()
    );
    Ok(())
}

fn open_model(path: &Path) -> CliResult<ScorerModel> {
    load_model(path).map_err(model_failure)
}

/// Read a roll from JSON or MIDI and fit it to the model grid.
fn read_roll(path: &Path, model: &ScorerModel) -> CliResult<PianoRoll> {
    let c = &model.config;
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let roll = if is_json {
        PianoRoll::from_json(&fs::read_to_string(path).map_err(Error::from)?)?
    } else {
        let cfg = QuantizeConfig {
            pitch_offset: c.pitch_offset,
            pitch_count: c.pitch_count,
            ..QuantizeConfig::default()
        };
        midi::midi_to_roll(&fs::read(path).map_err(Error::from)?, &cfg)?.roll
    };
    if roll.pitch_count() != c.pitch_count || roll.pitch_offset() != c.pitch_offset {
        return Err(Error::Shape(format!(
            "{} covers pitches {}+{}, the model {}+{}",
            path.display(),
            roll.pitch_offset(),
            roll.pitch_count(),
            c.pitch_offset,
            c.pitch_count
        ))
        .into());
    }
    Ok(roll.with_time_steps(c.time_steps)?)
}

fn cmd_sample(a: SampleArgs) -> CliResult {
    let model = open_model(&a.model)?;
    let cfg = a.sampler.config();
    cfg.validate()?;
    let start = match &a.input {
        Some(p) => read_roll(p, &model)?,
        None => PianoRoll::new(
            model.config.time_steps,
            model.config.pitch_count,
            model.config.pitch_offset,
        )?,
    };
    let mut session = EditSession::new(start, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome = session.run(&model, &cfg, &mut rng).map_err(|e| match e {
        Error::Numeric { .. } => model_failure(e),
        e => e.into(),
    })?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let qcfg = QuantizeConfig {
        pitch_offset: model.config.pitch_offset,
        pitch_count: model.config.pitch_count,
        ..QuantizeConfig::default()
    };
    let write = |name: &str, bytes: &[u8]| fs::write(a.out_dir.join(name), bytes).map_err(Error::from);
    write("sample.mid", &midi::export_midi(&outcome.roll, &qcfg, a.tempo)?)?;
    write("sample.json", outcome.roll.to_json().as_bytes())?;
    write("transcript.jsonl", transcript_jsonl(session.transcript()).as_bytes())?;
    let summary = serde_json::json!({
        "stop": outcome.stop,
        "steps": outcome.steps,
        "notes": outcome.roll.note_count(),
        "removals": session.removals_used(),
    });
    println!("{summary}");
    Ok(())
}

fn parse_scale(s: &str) -> CliResult<Scale> {
    let classes = s
        .split(',')
        .map(|c| c.trim().parse::<u8>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Config(format!("scale {s:?}: {e}")))?;
    Ok(Scale::from_classes(&classes))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let scale = parse_scale(&a.scale)?;
    let qcfg = a.quant.config();
    let training = load_corpus(&a.training, &qcfg)?;
    match &a.generated {
        None => {
            let r = metrics::report(&training, scale)?;
            if a.table {
                print!("{}", metrics::table(&[("Training Data", &r)]));
            } else {
                println!("{}", serde_json::to_string_pretty(&r).map_err(Error::from)?);
            }
        }
        Some(dir) => {
            let generated = load_corpus(dir, &qcfg)?;
            let cmp = metrics::evaluate_corpus(&generated, &training, scale)?;
            if a.table {
                print!(
                    "{}",
                    metrics::table(&[("Training Data", &cmp.training), ("Generated", &cmp.generated)])
                );
                println!(
                    "bhattacharyya {:.4}  ks df {}  D {:.4}  p {:.4}",
                    cmp.bhattacharyya, cmp.ks.df, cmp.ks.d, cmp.ks.p_value
                );
            } else {
                println!("{}", serde_json::to_string_pretty(&cmp).map_err(Error::from)?);
            }
        }
    }
    Ok(())
}

fn cmd_likelihood(a: LikelihoodArgs) -> CliResult {
    let model = open_model(&a.model)?;
    let input = read_roll(&a.input, &model)?;
    let target = read_roll(&a.target, &model)?;
    let cfg = LLConfig {
        max_level: a.max_level,
        orderings_per_level: a.orderings,
        pool_size: a.pool_size,
        seed: a.seed,
        experimental_levels: a.experimental_levels,
    };
    let result = if a.onade {
        onade_notewise_ll(&model, &input, &target, &cfg)?
    } else {
        approx_notewise_ll(&model, &input, &target, &cfg)?
    };
    println!("{}", result.to_json());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> CliResult {
    let model = open_model(&a.model)?;
    let service = SessionService::new(Arc::new(model)).with_idle_timeout(Duration::from_secs(a.idle_timeout_secs));
    let runtime = tokio::runtime::Runtime::new().map_err(Error::from)?;
    runtime.block_on(serve(Arc::new(service), a.addr))?;
    Ok(())
}
