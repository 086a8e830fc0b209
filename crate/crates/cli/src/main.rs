//! `echat`: generate data, pretrain the decoder, run both training stages,
//! evaluate and run single-utterance inference.
//!
//! Exit codes: 0 on success, 2 for usage errors, 1 for runtime failures.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use echat_core::data::io::{write_asr_split, write_dialogue_split};
use echat_core::data::{
    emotion_quota, gen_asr_corpus, gen_dialogue_corpus, load_corpus, split_corpus, synth_speech,
    EmotionLabel, SplitRatios, Tokenizer,
};
use echat_core::decoder::Stage;
use echat_core::metrics::{evaluate, score, EchoResponder, EvalReport, ModelResponder, Prediction};
use echat_core::model::EChatModel;
use echat_core::train::{
    pretrain_decoder, read_checkpoint, run_training, write_checkpoint, LogRecord, LossBreakdown,
};
use echat_core::Error;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "echat",
    version,
    about = "Emotion-sensitive spoken dialogue at desk scale"
)]
struct Cli {
    /// Leave out timing lines so stdout is identical across repeated runs.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus split into train/valid/test manifests.
    GenData(GenDataArgs),
    /// Train the decoder alone on text renderings of both tasks.
    Pretrain(PretrainArgs),
    /// Run training stage 1 (speech recognition) or 2 (emotional dialogue).
    Train(TrainArgs),
    /// Score a checkpoint, the echo fixture or a predictions file.
    Eval(EvalArgs),
    /// Respond to one synthesized utterance.
    Infer(InferArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Asr,
    Dialogue,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Longest generated text (ASR corpora only).
    #[arg(long, default_value_t = 20)]
    max_chars: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// JSONL loss log; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with `train.jsonl`, or a manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Emotion-loss weight; defaults to 0 in stage 1 and 0.1 in stage 2.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["ckpt", "echo", "rescore"]))]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Score gold outputs against themselves.
    #[arg(long)]
    echo: bool,
    /// Score an existing predictions dump instead of generating.
    #[arg(long)]
    rescore: Option<PathBuf>,
    #[arg(long, required_unless_present = "rescore")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    report: PathBuf,
    /// Predictions dump; defaults to the report path with a
    /// `.predictions.jsonl` extension.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long)]
    emotion: EmotionLabel,
    #[arg(long, default_value_t = 0)]
    speaker_seed: u64,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Encoding(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

struct Timer {
    start: Instant,
    enabled: bool,
}

impl Timer {
    fn report(&self, what: &str) {
        if self.enabled {
            println!("{what} took {:.2}s", self.start.elapsed().as_secs_f64());
        }
    }
}

fn resolve_seed(flag: Option<u64>, config: u64) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("ECHAT_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| {
            Failure::Usage(format!("ECHAT_SEED must be an unsigned integer, got {v:?}"))
        }),
        Err(_) => Ok(config),
    }
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

/// A manifest path from a data directory (or a manifest given directly).
fn manifest(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(format!("{split}.jsonl"))
    } else {
        data.to_path_buf()
    }
}

/// Either a file or stdout, one JSON object per line.
struct LogSink(Box<dyn Write>);

impl LogSink {
    fn open(path: Option<&Path>) -> CliResult<Self> {
        Ok(LogSink(match path {
            Some(p) => {
                ensure_parent(p)?;
                let f = fs::File::create(p)
                    .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", p.display())))?;
                Box::new(std::io::BufWriter::new(f))
            }
            None => Box::new(std::io::stdout()),
        }))
    }

    fn record(&mut self, step: usize, losses: &LossBreakdown) {
        let line = serde_json::to_string(&LogRecord::new(step, losses)).expect("plain numbers");
        // a broken log pipe should not abort training
        let _ = writeln!(self.0, "{line}");
    }
}

fn cmd_gen_data(args: GenDataArgs, timer: &Timer) -> CliResult {
    let seed = resolve_seed(args.seed, 0)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", args.out.display())))?;
    let n = args.n as usize;
    let ratios = SplitRatios::default();
    let sizes = match args.kind {
        Kind::Asr => {
            let corpus = gen_asr_corpus(n, seed, args.max_chars)?;
            let s = split_corpus(&corpus, ratios, seed)?;
            write_asr_split(&args.out, "train", &s.train)?;
            write_asr_split(&args.out, "valid", &s.valid)?;
            write_asr_split(&args.out, "test", &s.test)?;
            (s.train.len(), s.valid.len(), s.test.len())
        }
        Kind::Dialogue => {
            let corpus = gen_dialogue_corpus(n, seed)?;
            let s = split_corpus(&corpus, ratios, seed)?;
            write_dialogue_split(&args.out, "train", &s.train)?;
            write_dialogue_split(&args.out, "valid", &s.valid)?;
            write_dialogue_split(&args.out, "test", &s.test)?;
            print_emotion_table(n);
            (s.train.len(), s.valid.len(), s.test.len())
        }
    };
    println!(
        "wrote train/valid/test = {}/{}/{} examples to {}",
        sizes.0,
        sizes.1,
        sizes.2,
        args.out.display()
    );
    timer.report("gen-data");
    Ok(())
}

fn print_emotion_table(n: usize) {
    let counts = emotion_quota(n);
    println!("{:<10}{:>8}{:>8}", "emotion", "count", "share");
    for (e, c) in EmotionLabel::ALL.iter().zip(counts) {
        println!(
            "{:<10}{:>8}{:>7.1}%",
            e.name(),
            c,
            100.0 * c as f64 / n as f64
        );
    }
    println!("{:<10}{:>8}{:>7.1}%", "total", n, 100.0);
}

fn out_path(flag: Option<PathBuf>, cfg: &RunConfig, default_name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.out_dir.as_ref().map(|d| d.join(default_name)))
        .ok_or_else(|| {
            Failure::Usage("no output path: pass --out or set out_dir in the config".into())
        })
}

fn cmd_pretrain(args: PretrainArgs, timer: &Timer) -> CliResult {
    let cfg = RunConfig::load(args.config.as_deref()).map_err(Failure::Usage)?;
    let out = out_path(args.out, &cfg, "pretrained.ckpt")?;
    ensure_parent(&out)?;
    let mut pre = cfg.pretrain.clone();
    pre.seed = resolve_seed(args.seed, pre.seed)?;
    pre.steps = args.steps.unwrap_or(pre.steps);
    pre.batch_size = args.batch_size.unwrap_or(pre.batch_size);
    let mut log = LogSink::open(args.log.as_deref())?;
    let mut model = EChatModel::new(cfg.model(), pre.seed)?;
    pretrain_decoder(&mut model, &pre, |step, l| log.record(step, l))?;
    write_checkpoint(&out, &model)?;
    eprintln!("saved pretrained checkpoint to {}", out.display());
    timer.report("pretrain");
    Ok(())
}

fn cmd_train(args: TrainArgs, timer: &Timer) -> CliResult {
    let cfg = RunConfig::load(args.config.as_deref()).map_err(Failure::Usage)?;
    let stage = Stage::try_from(args.stage)?;
    if stage == Stage::Stage2 && args.init.is_none() {
        return Err(Failure::Usage(
            "stage 2 continues from a stage 1 checkpoint; pass it with --init".into(),
        ));
    }
    let data = args
        .data
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Failure::Usage("no training data: pass --data or set data_dir".into()))?;
    let train_manifest = manifest(&data, "train");
    require_file(&train_manifest, "training manifest")?;
    if let Some(init) = &args.init {
        require_file(init, "init checkpoint")?;
    }
    let out = out_path(args.out, &cfg, &format!("stage{}.ckpt", stage.number()))?;
    ensure_parent(&out)?;

    let mut tc = cfg.train.clone();
    tc.stage = stage;
    tc.seed = resolve_seed(args.seed, tc.seed)?;
    tc.steps = args.steps.unwrap_or(tc.steps);
    tc.batch_size = args.batch_size.unwrap_or(tc.batch_size);
    tc.lr = args.lr.unwrap_or(tc.lr);
    if args.alpha.is_some() {
        tc.alpha = args.alpha;
    }
    tc.validate()?;

    let mut log = LogSink::open(args.log.as_deref())?;
    let init = args.init.as_deref().map(read_checkpoint).transpose()?;
    let corpus = load_corpus(&train_manifest)?;
    let model = run_training(&corpus, &tc, cfg.model(), init, |step, l| {
        log.record(step, l)
    })?;
    write_checkpoint(&out, &model)?;
    eprintln!("saved {stage} checkpoint to {}", out.display());
    timer.report("train");
    Ok(())
}

fn read_predictions(path: &Path) -> CliResult<Vec<Prediction>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Failure::Runtime(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> CliResult {
    ensure_parent(path)?;
    fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_eval(args: EvalArgs, timer: &Timer) -> CliResult {
    let cfg = RunConfig::load(args.config.as_deref()).map_err(Failure::Usage)?;
    let stage = Stage::try_from(args.stage)?;
    let preds_path = args
        .predictions
        .clone()
        .unwrap_or_else(|| args.report.with_extension("predictions.jsonl"));
    let (report, predictions): (EvalReport, Vec<Prediction>) = if let Some(path) = &args.rescore {
        let preds = read_predictions(path)?;
        (score(&preds, stage)?, preds)
    } else {
        let data = args
            .data
            .as_deref()
            .expect("clap requires --data without --rescore");
        let m = manifest(data, &args.split);
        require_file(&m, "test manifest")?;
        if let Some(ckpt) = &args.ckpt {
            require_file(ckpt, "checkpoint")?;
        }
        let corpus = load_corpus(&m)?;
        match &args.ckpt {
            Some(ckpt) => {
                let model = read_checkpoint(ckpt)?;
                let mut responder = ModelResponder::new(&model);
                responder.prompt_stage1 = Tokenizer.encode_lossy(&cfg.train.prompt_stage1);
                responder.prompt_stage2 = Tokenizer.encode_lossy(&cfg.train.prompt_stage2);
                evaluate(&responder, &corpus, stage)?
            }
            None => evaluate(&EchoResponder, &corpus, stage)?,
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&args.report, &(json + "\n"))?;
    if args.rescore.as_deref() != Some(preds_path.as_path()) {
        let mut dump = String::new();
        for p in &predictions {
            dump.push_str(&serde_json::to_string(p).expect("prediction serializes"));
            dump.push('\n');
        }
        write_text(&preds_path, &dump)?;
    }
    println!("{}", report.summary());
    timer.report("eval");
    Ok(())
}

fn cmd_infer(args: InferArgs, timer: &Timer) -> CliResult {
    let cfg = RunConfig::load(args.config.as_deref()).map_err(Failure::Usage)?;
    if args.text.is_empty() {
        return Err(Failure::Usage("--text must not be empty".into()));
    }
    Tokenizer::validate(&args.text)?;
    require_file(&args.ckpt, "checkpoint")?;
    let model = read_checkpoint(&args.ckpt)?;
    if model.trained_stage < 2 {
        return Err(Failure::Runtime(format!(
            "checkpoint has completed stage {}; inference needs a stage 2 checkpoint",
            model.trained_stage
        )));
    }
    let speech = synth_speech(&args.text, args.emotion, args.speaker_seed)?;
    let prompt = Tokenizer.encode_lossy(&cfg.train.prompt_stage2);
    let r = model.respond(Stage::Stage2, &speech, &prompt, args.max_len)?;
    println!("response: {}", r.text);
    if let Some(e) = r.emotion {
        println!("emotion: {e}");
    }
    timer.report("infer");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let timer = Timer {
        start: Instant::now(),
        enabled: !cli.no_timing,
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &timer),
        Command::Pretrain(a) => cmd_pretrain(a, &timer),
        Command::Train(a) => cmd_train(a, &timer),
        Command::Eval(a) => cmd_eval(a, &timer),
        Command::Infer(a) => cmd_infer(a, &timer),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
