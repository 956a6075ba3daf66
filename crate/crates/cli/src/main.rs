use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barnn::config::{Config, Task};
use barnn::datagen::{
    format_tokens, gen_ring_corpus, read_trajectories, sinusoid_split, write_ring_corpus, write_trajectories,
};
use barnn::inference::{ensemble_rollout, evaluate, RolloutOptions};
use barnn::metrics::ValidityTable;
use barnn::rnn::{RnnModel, RnnVariant};
use barnn::{Checkpoint, Error, Forecaster, Trajectory, Variant};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "barnn", version, about = "Train and evaluate Bayesian autoregressive and recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sinusoid dataset or a ring-language corpus.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a CSV training log.
    Train(TrainArgs),
    /// Roll out a forecaster on a test set and print one metrics CSV row.
    Eval(EvalArgs),
    /// Draw ring strings or ensemble trajectories from a trained model.
    Sample(SampleArgs),
}

/// Flags mirroring the config file keys. Flags win over the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// barnn, mc-dropout, plain-mlp, static (sinusoid) or barnn, lstm (rings).
    #[arg(long)]
    model: Option<String>,
    /// tvamp or loguniform.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long = "lambda-kl")]
    lambda_kl: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "wd", alias = "weight-decay")]
    weight_decay: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long = "encoder-hidden")]
    encoder_hidden: Option<String>,
    #[arg(long = "encoder-depth")]
    encoder_depth: Option<String>,
    #[arg(long = "encoder-time")]
    encoder_time: Option<String>,
    #[arg(long = "detach-prior")]
    detach_prior: Option<String>,
    #[arg(long = "sigma2-fixed")]
    sigma2_fixed: Option<String>,
    /// Ensemble size D.
    #[arg(long)]
    ensemble: Option<String>,
    /// step or trajectory.
    #[arg(long)]
    resampling: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<String>,
    #[arg(long = "max-len")]
    max_len: Option<String>,
    #[arg(long = "max-rings")]
    max_rings: Option<String>,
    /// stochastic, map or deterministic.
    #[arg(long = "sample-mode")]
    sample_mode: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(Error::from)?;
                let mut c = Config::default();
                c.apply(&barnn::config::parse_kv(&text).map_err(usage)?).map_err(usage)?;
                c
            }
            None => Config::default(),
        };
        let flags = [
            ("task", &self.task),
            ("model", &self.model),
            ("prior", &self.prior),
            ("dropout", &self.dropout),
            ("lambda_kl", &self.lambda_kl),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("batch_size", &self.batch_size),
            ("window", &self.window),
            ("hidden", &self.hidden),
            ("encoder_hidden", &self.encoder_hidden),
            ("encoder_depth", &self.encoder_depth),
            ("encoder_time", &self.encoder_time),
            ("detach_prior", &self.detach_prior),
            ("sigma2_fixed", &self.sigma2_fixed),
            ("ensemble", &self.ensemble),
            ("resampling", &self.resampling),
            ("seed", &self.seed),
            ("clip_norm", &self.clip_norm),
            ("max_len", &self.max_len),
            ("max_rings", &self.max_rings),
            ("sample_mode", &self.sample_mode),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(usage)?;
            }
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Number of training trajectories (sinusoid).
    #[arg(long, default_value_t = 1024)]
    train: usize,
    /// Number of test trajectories (sinusoid).
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Number of strings (rings).
    #[arg(long, default_value_t = 20000)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training set: sinusoid CSV or ring corpus.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path with a `.log.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Not needed for `--model static`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    /// Single deterministic rollout with posterior-mean weights.
    #[arg(long)]
    map: bool,
    /// Append the row to this file instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Initial states for sinusoid ensembles.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Number of strings (rings).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Write samples here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Core(e) if e.is_io_or_format() => EXIT_IO,
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| {
        io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?))
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = a.cfg.resolve()?;
    std::fs::create_dir_all(&a.out).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", a.out.display())))?;
    match cfg.task {
        Task::Sinusoid => {
            if a.train == 0 || a.test == 0 {
                return Err(CliError::Usage("--train and --test must be positive".into()));
            }
            let (train, test) = sinusoid_split(a.train, a.test, cfg.seed)?;
            for (name, data) in [("train.csv", &train), ("test.csv", &test)] {
                let path = a.out.join(name);
                let mut w = create(&path)?;
                write_trajectories(&mut w, data)?;
                w.flush()?;
                println!("{}: {} trajectories", path.display(), data.len());
            }
        }
        Task::Rings => {
            if a.n == 0 {
                return Err(CliError::Usage("--n must be positive".into()));
            }
            let corpus = gen_ring_corpus(a.n, cfg.max_rings, cfg.max_len, cfg.seed).map_err(usage)?;
            let path = a.out.join("rings.txt");
            let mut w = create(&path)?;
            write_ring_corpus(&mut w, &corpus)?;
            w.flush()?;
            println!("{}: {} strings", path.display(), corpus.len());
        }
    }
    Ok(())
}

fn read_sinusoid(path: &Path) -> CliResult<Vec<Trajectory>> {
    Ok(read_trajectories(open(path)?)?)
}

enum Job {
    Forecast(Forecaster, Vec<Trajectory>),
    Rings(RnnModel, Vec<barnn::RingString>),
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = a.cfg.resolve()?;
    let job = match cfg.task {
        Task::Sinusoid => {
            let variant = cfg.variant().map_err(usage)?;
            if variant == Variant::Static {
                return Err(CliError::Usage(
                    "the static baseline has no parameters; evaluate it directly with `eval --model static`".into(),
                ));
            }
            let model = Forecaster::new(variant, cfg.forecaster_config(), cfg.seed).map_err(usage)?;
            Job::Forecast(model, read_sinusoid(&a.data)?)
        }
        Task::Rings => {
            let variant = RnnVariant::parse(&cfg.model).map_err(usage)?;
            let model = RnnModel::new(variant, cfg.rnn_config(), cfg.seed).map_err(usage)?;
            Job::Rings(model, barnn::datagen::read_ring_corpus(open(&a.data)?)?)
        }
    };

    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log.csv"));
    let mut log = create(&log_path)?;
    writeln!(log, "epoch,fit_loss,kl_loss,total_loss")?;
    log.flush()?;
    let quiet = a.quiet;
    let mut log_err: Option<io::Error> = None;
    let mut on_epoch = |l: &barnn::forecaster::EpochLog| {
        let line = format!("{},{:e},{:e},{:e}", l.epoch, l.fit, l.kl, l.total);
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        if !quiet {
            eprintln!("epoch {:>5}  fit {:.4e}  kl {:.4e}  total {:.4e}", l.epoch, l.fit, l.kl, l.total);
        }
    };

    let ck = match job {
        Job::Forecast(mut model, data) => {
            model.train(&data, &cfg.schedule(), &cfg.train_options(), &mut on_epoch)?;
            model.to_checkpoint()
        }
        Job::Rings(mut model, corpus) => {
            model.train(&corpus, &cfg.rnn_schedule(), &cfg.rnn_train_options(), &mut on_epoch)?;
            model.to_checkpoint()
        }
    };
    if let Some(e) = log_err {
        return Err(e.into());
    }
    ck.save(&a.out)?;
    if !quiet {
        eprintln!("wrote {} and {}", a.out.display(), log_path.display());
    }
    Ok(())
}

fn load_forecaster(cfg: &Config, checkpoint: &Option<PathBuf>) -> CliResult<Forecaster> {
    match checkpoint {
        Some(path) => Ok(Forecaster::from_checkpoint(&Checkpoint::load(path)?)?),
        None if cfg.variant().map_err(usage)? == Variant::Static => {
            Ok(Forecaster::new(Variant::Static, cfg.forecaster_config(), cfg.seed).map_err(usage)?)
        }
        None => Err(CliError::Usage("--checkpoint is required unless --model static".into())),
    }
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = a.cfg.resolve()?;
    if cfg.task == Task::Rings {
        return Err(CliError::Usage("eval scores sinusoid forecasters; use `sample` for ring models".into()));
    }
    let model = load_forecaster(&cfg, &a.checkpoint)?;
    if cfg.ensemble == 1 && !a.map {
        eprintln!("warning: ensemble of 1 has no epistemic spread; NLL and ECE use the floored variance");
    }
    let test = read_sinusoid(&a.test)?;
    let (report, forecast) = evaluate(&model, &test, &cfg.eval_options(a.map))?;
    let row = format!(
        "{},{},{},{},{:e},{:e},{:e},{:e}",
        model.variant.model_name(),
        model.variant.prior_name(),
        cfg.seed,
        forecast.size(),
        report.mse,
        report.rmse,
        report.nll,
        report.ece
    );
    let header = "model,prior,seed,D,mse,rmse,nll,ece";
    match &a.out {
        Some(path) => {
            let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{header}")?;
            }
            writeln!(f, "{row}")?;
        }
        None => println!("{header}\n{row}"),
    }
    Ok(())
}

fn sample(a: SampleArgs) -> CliResult {
    let cfg = a.cfg.resolve()?;
    let checkpoint = match &a.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let is_rnn = checkpoint.as_ref().and_then(|c| c.meta("kind")) == Some("rnn");
    if is_rnn || (cfg.task == Task::Rings && checkpoint.is_none()) {
        let model = match &checkpoint {
            Some(ck) => RnnModel::from_checkpoint(ck)?,
            None => return Err(CliError::Usage("--checkpoint is required for ring sampling".into())),
        };
        if a.n == 0 {
            return Err(CliError::Usage("--n must be positive".into()));
        }
        let samples = model.sample(a.n, cfg.max_len, cfg.sample_mode, cfg.seed)?;
        let table = ValidityTable::from_samples(&samples)?;
        let mut w = output(&a.out)?;
        if a.out.is_some() {
            for s in &samples {
                writeln!(w, "{}", format_tokens(s))?;
            }
            w.flush()?;
        }
        println!("validity {:.4} ({} of {})", table.validity(), (table.validity() * table.total() as f64).round(), table.total());
        println!("rings,valid,total,fraction");
        for (rings, (valid, total)) in &table.by_rings {
            println!("{rings},{valid},{total},{:.4}", *valid as f64 / *total as f64);
        }
        return Ok(());
    }

    let model = match checkpoint {
        Some(ck) => Forecaster::from_checkpoint(&ck)?,
        None => load_forecaster(&cfg, &None)?,
    };
    let test = match &a.test {
        Some(p) => read_sinusoid(p)?,
        None => return Err(CliError::Usage("--test is required for sinusoid ensembles".into())),
    };
    let y0: Vec<f64> = test.iter().map(|t| t.y[0]).collect();
    let steps = barnn::datagen::SINUSOID_STEPS;
    let opts = RolloutOptions {
        resampling: cfg.resampling,
        mode: cfg.sample_mode,
        ..RolloutOptions::stochastic(steps)
    };
    let members = ensemble_rollout(&model, &y0, &opts, cfg.ensemble, cfg.seed)?;
    let mut w = output(&a.out)?;
    let mut header = String::from("member,trajectory");
    for t in 0..=steps {
        header.push_str(&format!(",y{t}"));
    }
    writeln!(w, "{header}")?;
    for (i, m) in members.iter().enumerate() {
        for r in 0..y0.len() {
            let mut line = format!("{i},{r}");
            for v in m.row(r) {
                line.push(',');
                line.push_str(&barnn::datagen::fmt_f64(*v));
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}
