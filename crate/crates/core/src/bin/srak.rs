//! `srak`: corpus synthesis, classifier pretraining, attacker training,
//! evaluation and single-file inference.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ini::Ini;

use srak_core::audio::{self, Waveform};
use srak_core::corpus::{build_corpus, Corpus, CorpusConfig, MANIFEST_FILE};
use srak_core::eval::{self, EvalConfig};
use srak_core::losses::AttackLossConfig;
use srak_core::models::ClassifierKind;
use srak_core::trainer::{self, Checkpoint, TrainConfig, TrainError};

const DATA_ROOT_ENV: &str = "SRAK_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "srak",
    version,
    about = "Adversarial attacks on a raw-waveform speaker classifier",
    after_help = "Default paths live under $SRAK_DATA_ROOT (./data when unset).\nExit codes: 0 ok, 1 invalid input, 2 I/O error, 3 numeric failure."
)]
struct Cli {
    /// INI file with [corpus], [train], [attack] and [eval] sections; flags
    /// given on the command line win over it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the multi-speaker corpus (WAVs plus manifest).
    Corpus(CorpusArgs),
    /// Train a frame-level speaker or phoneme classifier.
    Pretrain(PretrainArgs),
    /// Train the attacker against frozen speaker and phoneme models.
    #[command(name = "attack-train", allow_negative_numbers = true)]
    AttackTrain(AttackArgs),
    /// Score an attacker on the test split.
    Evaluate(EvaluateArgs),
    /// Perturb one WAV file of any length.
    Infer(InferArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct CorpusArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of speakers (at least 2).
    #[arg(long, default_value_t = 20)]
    speakers: u32,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 40)]
    utterances: u32,
    /// Share of each speaker's utterances held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Output directory [default: $SRAK_DATA_ROOT/corpus, else data/corpus].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Speaker,
    Phoneme,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
struct PretrainArgs {
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Corpus directory [default: $SRAK_DATA_ROOT/corpus, else data/corpus].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint path [default: <data root>/<model>.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Frames sampled per epoch; 0 uses every frame.
    #[arg(long, default_value_t = 2048)]
    frames_per_epoch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AttackArgs {
    /// Frozen speaker checkpoint [default: <data root>/speaker.ckpt].
    #[arg(long)]
    speaker: Option<PathBuf>,
    /// Frozen phoneme checkpoint [default: <data root>/phoneme.ckpt].
    #[arg(long)]
    phoneme: Option<PathBuf>,
    /// Corpus directory [default: <data root>/corpus].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Attacker checkpoint path [default: <data root>/attacker.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight of the phoneme-preservation term.
    #[arg(long, default_value_t = 1.0)]
    lambda_phn: f64,
    /// Weight of the amplitude hinge.
    #[arg(long, default_value_t = 1000.0)]
    lambda_norm: f64,
    /// Amplitude below which perturbations are free.
    #[arg(long, default_value_t = 0.01)]
    margin: f64,
    /// Target speaker; omit for a non-targeted attack.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Frames sampled per epoch; 0 uses every frame.
    #[arg(long, default_value_t = 2048)]
    frames_per_epoch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing checkpoint.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Attacker checkpoint [default: <data root>/attacker.ckpt].
    #[arg(long)]
    attacker: Option<PathBuf>,
    /// Speaker checkpoint [default: <data root>/speaker.ckpt].
    #[arg(long)]
    speaker: Option<PathBuf>,
    /// Corpus directory [default: <data root>/corpus].
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Report directory [default: <data root>/eval].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report the rate at which this speaker is predicted.
    #[arg(long)]
    target: Option<usize>,
    /// Also write the perturbation band energies.
    #[arg(long)]
    spectrum: bool,
    /// Linear bands for --spectrum.
    #[arg(long, default_value_t = 8)]
    bands: usize,
    /// Hop between classifier frames within an utterance.
    #[arg(long, default_value_t = 1600)]
    hop: usize,
    /// Replace existing reports.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Attacker checkpoint [default: <data root>/attacker.ckpt].
    #[arg(long)]
    attacker: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Replace an existing output file.
    #[arg(long)]
    force: bool,
}

/// Config file values plus the parsed flags and where each came from.
struct Source<'a> {
    ini: Option<&'a Ini>,
    section: &'static str,
    matches: &'a ArgMatches,
}

impl Source<'_> {
    fn from_cli(&self, id: &str) -> bool {
        matches!(self.matches.value_source(id), Some(ValueSource::CommandLine))
    }

    fn file<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some(raw) = self.ini.and_then(|i| i.get_from(Some(self.section), key)) else {
            return Ok(None);
        };
        raw.trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow!(ConfigError(format!("[{}] {key} = {raw:?} is not valid", self.section))))
    }

    /// Command line, then config file, then the flag default.
    fn pick<T: FromStr>(&self, id: &str, flag: T) -> Result<T> {
        if self.from_cli(id) {
            return Ok(flag);
        }
        Ok(self.file(id)?.unwrap_or(flag))
    }

    fn pick_opt<T: FromStr>(&self, id: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        if self.ini.and_then(|i| i.get_from(Some(self.section), id)).map(str::trim) == Some("none") {
            return Ok(None);
        }
        self.file(id)
    }

    fn pick_path(&self, id: &str, flag: Option<PathBuf>, default: PathBuf) -> Result<PathBuf> {
        Ok(self.pick_opt(id, flag)?.unwrap_or(default))
    }
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(ConfigError(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_echo(path: &Path, sections: &[(&str, Vec<(&str, String)>)]) -> Result<()> {
    let mut ini = Ini::new();
    for (name, entries) in sections {
        let mut sec = ini.with_section(Some(*name));
        for (k, v) in entries {
            sec.set(*k, v.as_str());
        }
    }
    ini.write_to_file(path).with_context(|| format!("writing {}", path.display()))
}

fn opt_str(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |t| t.to_string())
}

fn parent_dir(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_corpus(a: CorpusArgs, src: Source) -> Result<()> {
    let cfg = CorpusConfig {
        seed: src.pick("seed", a.seed)?,
        num_speakers: src.pick("speakers", a.speakers)?,
        utterances_per_speaker: src.pick("utterances", a.utterances)?,
        test_fraction: src.pick("test_fraction", a.test_fraction)?,
    };
    let out = src.pick_path("out", a.out, data_root().join("corpus"))?;
    cfg.validate()?;
    refuse_existing(&out.join(MANIFEST_FILE), a.force)?;
    let manifest = build_corpus(&cfg, &out)?;
    write_echo(
        &out.join("config.ini"),
        &[(
            "corpus",
            vec![
                ("seed", cfg.seed.to_string()),
                ("speakers", cfg.num_speakers.to_string()),
                ("utterances", cfg.utterances_per_speaker.to_string()),
                ("test_fraction", cfg.test_fraction.to_string()),
                ("out", out.display().to_string()),
            ],
        )],
    )?;
    println!("wrote {} utterances to {}", manifest.records.len(), out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs, src: Source) -> Result<()> {
    let kind = match a.model {
        ModelArg::Speaker => ClassifierKind::Speaker,
        ModelArg::Phoneme => ClassifierKind::Phoneme,
    };
    let cfg = TrainConfig {
        epochs: src.pick("epochs", a.epochs)?,
        learning_rate: src.pick("lr", a.lr)?,
        batch_size: src.pick("batch_size", a.batch_size)?,
        frames_per_epoch: src.pick("frames_per_epoch", a.frames_per_epoch)?,
        seed: src.pick("seed", a.seed)?,
        ..TrainConfig::pretrain()
    };
    cfg.validate()?;
    let corpus_dir = src.pick_path("corpus", a.corpus, data_root().join("corpus"))?;
    let out = a.out.unwrap_or_else(|| data_root().join(format!("{}.ckpt", kind.as_str())));
    refuse_existing(&out, a.force)?;
    let corpus = load_corpus(&corpus_dir)?;
    let run = match kind {
        ClassifierKind::Speaker => trainer::pretrain_speaker(&corpus, &cfg)?,
        ClassifierKind::Phoneme => trainer::pretrain_phoneme(&corpus, &cfg)?,
    };
    parent_dir(&out)?;
    run.checkpoint().save(&out)?;
    let r = &run.report;
    let mut metrics = String::new();
    for (i, l) in r.epoch_losses.iter().enumerate() {
        metrics.push_str(&format!("epoch {i} loss {l:.6}\n"));
    }
    metrics.push_str(&format!("train frame accuracy {:.4}\n", r.train_frame_accuracy));
    metrics.push_str(&format!("test frame accuracy {:.4}\n", r.test_frame_accuracy));
    if let Some(s) = r.test_sentence_accuracy {
        metrics.push_str(&format!("test sentence accuracy {s:.4}\n"));
    }
    fs::write(sibling(&out, ".metrics.txt"), &metrics)?;
    write_echo(&sibling(&out, ".config.ini"), &[("train", train_echo(&cfg, &corpus_dir, Some(kind.as_str())))])?;
    print!("{metrics}");
    println!("wrote {}", out.display());
    Ok(())
}

fn train_echo(cfg: &TrainConfig, corpus: &Path, model: Option<&str>) -> Vec<(&'static str, String)> {
    let mut v = vec![
        ("epochs", cfg.epochs.to_string()),
        ("lr", cfg.learning_rate.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("frames_per_epoch", cfg.frames_per_epoch.to_string()),
        ("seed", cfg.seed.to_string()),
        ("frame_len", cfg.frame_len.to_string()),
        ("hop", cfg.hop.to_string()),
        ("corpus", corpus.display().to_string()),
    ];
    if let Some(m) = model {
        v.push(("model", m.to_string()));
    }
    v
}

fn cmd_attack_train(a: AttackArgs, src: Source) -> Result<()> {
    let root = data_root();
    let cfg = TrainConfig {
        learning_rate: src.pick("lr", a.lr)?,
        epochs: src.pick("epochs", a.epochs)?,
        batch_size: src.pick("batch_size", a.batch_size)?,
        frames_per_epoch: src.pick("frames_per_epoch", a.frames_per_epoch)?,
        seed: src.pick("seed", a.seed)?,
        loss: AttackLossConfig {
            lambda_phn: src.pick("lambda_phn", a.lambda_phn)?,
            lambda_norm: src.pick("lambda_norm", a.lambda_norm)?,
            margin: src.pick("margin", a.margin)?,
            target: src.pick_opt("target", a.target)?,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    cfg.loss.validate(usize::MAX)?;
    let speaker_path = src.pick_path("speaker", a.speaker, root.join("speaker.ckpt"))?;
    let phoneme_path = src.pick_path("phoneme", a.phoneme, root.join("phoneme.ckpt"))?;
    let corpus_dir = src.pick_path("corpus", a.corpus, root.join("corpus"))?;
    let out = a.out.unwrap_or_else(|| root.join("attacker.ckpt"));
    refuse_existing(&out, a.force)?;
    let speaker = load_ckpt(&speaker_path)?.classifier(ClassifierKind::Speaker)?;
    let phoneme = load_ckpt(&phoneme_path)?.classifier(ClassifierKind::Phoneme)?;
    let corpus = load_corpus(&corpus_dir)?;
    let run = trainer::train_attacker(&corpus, &speaker, &phoneme, &cfg, |l| {
        if l.batch == 0 {
            eprintln!("epoch {} {} fooled {:.3}", l.epoch, l.loss, l.fooled_fraction);
        }
    })?;
    parent_dir(&out)?;
    run.checkpoint().save(&out)?;
    fs::write(sibling(&out, ".log"), run.log_text())?;
    let mut echo = train_echo(&cfg, &corpus_dir, None);
    echo.extend([
        ("lambda_phn", cfg.loss.lambda_phn.to_string()),
        ("lambda_norm", cfg.loss.lambda_norm.to_string()),
        ("margin", cfg.loss.margin.to_string()),
        ("target", opt_str(cfg.loss.target)),
        ("speaker", speaker_path.display().to_string()),
        ("phoneme", phoneme_path.display().to_string()),
    ]);
    write_echo(&sibling(&out, ".config.ini"), &[("attack", echo)])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, src: Source) -> Result<()> {
    let root = data_root();
    let cfg = EvalConfig {
        hop: src.pick("hop", a.hop)?,
        target: src.pick_opt("target", a.target)?,
    };
    let spectrum = a.spectrum || src.file::<bool>("spectrum")?.unwrap_or(false);
    let bands: usize = src.pick("bands", a.bands)?;
    if cfg.hop == 0 || bands == 0 {
        bail!(ConfigError("hop and bands must be positive".into()));
    }
    let attacker_path = src.pick_path("attacker", a.attacker, root.join("attacker.ckpt"))?;
    let speaker_path = src.pick_path("speaker", a.speaker, root.join("speaker.ckpt"))?;
    let corpus_dir = src.pick_path("corpus", a.corpus, root.join("corpus"))?;
    let out = src.pick_path("out", a.out, root.join("eval"))?;
    refuse_existing(&out.join("report.txt"), a.force)?;
    let attacker = load_ckpt(&attacker_path)?.attacker()?;
    let speaker = load_ckpt(&speaker_path)?.classifier(ClassifierKind::Speaker)?;
    let corpus = load_corpus(&corpus_dir)?;
    let test = eval::test_set(&corpus);
    let (report, deltas) = eval::evaluate(&attacker, &speaker, &test, &cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let text = report.to_text();
    fs::write(out.join("report.txt"), &text)?;
    fs::write(out.join("report.jsonl"), report.to_json_lines())?;
    if spectrum {
        let rate = test.first().map_or(audio::SAMPLE_RATE, |(_, u)| u.waveform.sample_rate);
        let b = eval::perturbation_spectrum(&deltas, bands, rate as f64)?;
        fs::write(out.join("spectrum.txt"), b.to_text())?;
        print!("{}", b.to_text());
    }
    write_echo(
        &out.join("config.ini"),
        &[(
            "eval",
            vec![
                ("hop", cfg.hop.to_string()),
                ("target", opt_str(cfg.target)),
                ("spectrum", spectrum.to_string()),
                ("bands", bands.to_string()),
                ("attacker", attacker_path.display().to_string()),
                ("speaker", speaker_path.display().to_string()),
                ("corpus", corpus_dir.display().to_string()),
            ],
        )],
    )?;
    print!("{}", text.split_once("\n\n").map_or(text.as_str(), |(_, agg)| agg));
    Ok(())
}

fn cmd_infer(a: InferArgs, src: Source) -> Result<()> {
    let attacker_path = src.pick_path("attacker", a.attacker, data_root().join("attacker.ckpt"))?;
    refuse_existing(&a.output, a.force)?;
    let attacker = load_ckpt(&attacker_path)?.attacker()?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let (wave, encoding) = audio::decode_wav_encoded(&bytes)?;
    let adv = attacker.perturb(&wave.samples)?;
    let out = Waveform::new(adv, wave.sample_rate);
    parent_dir(&a.output)?;
    audio::save_wav(&out, &a.output, encoding)?;
    // score what was actually written
    let written = audio::load_wav(&a.output)?;
    let snr = eval::snr(&wave.samples, &written.samples).map_or_else(|e| format!("n/a ({e})"), |v| format!("{v:.2}"));
    println!("{}\tsnr_db={snr}", a.output.display());
    Ok(())
}

/// 1 for invalid input, 2 for I/O trouble, 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if matches!(cause.downcast_ref::<TrainError>(), Some(TrainError::NonFinite(_))) {
            return 3;
        }
    }
    1
}

fn run(matches: &ArgMatches) -> Result<()> {
    let cli = Cli::from_arg_matches(matches)?;
    let ini = match &cli.config {
        Some(p) => Some(Ini::load_from_file(p).map_err(|e| match e {
            ini::Error::Io(io) => anyhow::Error::new(io).context(format!("reading {}", p.display())),
            ini::Error::Parse(pe) => anyhow!(ConfigError(format!("{}: {pe}", p.display()))),
        })?),
        None => None,
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let section = match name {
        "corpus" => "corpus",
        "pretrain" => "train",
        "attack-train" | "infer" => "attack",
        _ => "eval",
    };
    let src = Source {
        ini: ini.as_ref(),
        section,
        matches: sub,
    };
    match cli.command {
        Command::Corpus(a) => cmd_corpus(a, src),
        Command::Pretrain(a) => cmd_pretrain(a, src),
        Command::AttackTrain(a) => cmd_attack_train(a, src),
        Command::Evaluate(a) => cmd_evaluate(a, src),
        Command::Infer(a) => cmd_infer(a, src),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
