//! `setpool`: generate synthetic data, train the aggregation agent, evaluate
//! and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or format error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use setpool::experiment::{
    self, evaluate, prepare, Baseline, EvalOptions, ExperimentConfig, MetricsLog, Model, Phase,
    PgrMode, Protocol, CHECKPOINT_VERSION,
};
use setpool::synth::{self, FeatureSetCollection};
use setpool::{Error, Result};

#[derive(Parser)]
#[command(name = "setpool", version, about = "Learned attention pooling over embedding sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a feature file.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a training phase. An existing checkpoint at --out is resumed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature file; defaults to the dataset named in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PhaseArg::Rl)]
        phase: PhaseArg,
        /// Overrides the run seed (and the generator seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Total episode target, counting episodes already in the checkpoint.
        #[arg(long)]
        episodes: Option<u64>,
        /// Per-episode CSV log; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the probe and gallery sets.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for summary.json and curve CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, value_enum)]
        pgr: Option<PgrArg>,
    },
    /// Print a checkpoint's config, progress and parameter counts.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Rl,
    Temporal,
    Mlpgr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Verify,
    ClosedId,
    OpenId,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Meanpool,
    Maxpool,
    Dac,
    DacBinary,
}

#[derive(Clone, Copy, ValueEnum)]
enum PgrArg {
    None,
    Pf,
    Ml,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Rl => Phase::Rl,
            PhaseArg::Temporal => Phase::Temporal,
            PhaseArg::Mlpgr => Phase::Mlpgr,
        }
    }
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Verify => Protocol::Verify,
            ProtocolArg::ClosedId => Protocol::ClosedId,
            ProtocolArg::OpenId => Protocol::OpenId,
        }
    }
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Meanpool => Baseline::Meanpool,
            BaselineArg::Maxpool => Baseline::Maxpool,
            BaselineArg::Dac => Baseline::Dac,
            BaselineArg::DacBinary => Baseline::DacBinary,
        }
    }
}

impl From<PgrArg> for PgrMode {
    fn from(p: PgrArg) -> Self {
        match p {
            PgrArg::None => PgrMode::None,
            PgrArg::Pf => PgrMode::ParameterFree,
            PgrArg::Ml => PgrMode::MetricLearning,
        }
    }
}

fn read_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut c = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        c.seed = s;
        c.dataset.generate.seed = s;
    }
    Ok(c)
}

fn load_data(data: Option<&Path>, config: &ExperimentConfig) -> Result<FeatureSetCollection> {
    match data {
        Some(p) => synth::read_features(p),
        None => experiment::load_dataset(config),
    }
}

fn gen(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let c = read_config(config, seed)?;
    let coll = synth::generate(&c.dataset.generate)?;
    synth::write_features(&coll, out)?;
    log::info!(
        "wrote {} records in {} sets to {}",
        coll.len(),
        coll.sets().len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    phase: Phase,
    seed: Option<u64>,
    episodes: Option<u64>,
    metrics: Option<&Path>,
) -> Result<()> {
    let mut model = if out.exists() {
        let m = Model::load(out)?;
        if let Some(path) = config {
            let mut c = read_config(path, seed)?;
            c.agent.episodes = m.config.agent.episodes;
            if c != m.config {
                return Err(Error::Config(format!(
                    "{} was trained with a different config",
                    out.display()
                )));
            }
        }
        log::info!("resuming {} at episode {}", out.display(), m.progress.episodes);
        m
    } else {
        let path = config.ok_or_else(|| Error::Config("--config is required for a new run".into()))?;
        let c = read_config(path, seed)?;
        let coll = load_data(data, &c)?;
        Model::init(c, &coll)?
    };
    if let Some(n) = episodes {
        model.set_episode_target(n);
    }
    let coll = load_data(data, &model.config)?;
    if coll.embed_dim() != model.embed_dim() {
        return Err(Error::Dimension {
            what: "dataset embedding",
            expected: model.embed_dim(),
            got: coll.embed_dim(),
        });
    }
    let sets = prepare(&coll);
    let metrics_path = match metrics {
        Some(p) => p.to_path_buf(),
        None => {
            let mut s = out.as_os_str().to_owned();
            s.push(".metrics.csv");
            PathBuf::from(s)
        }
    };
    let mut log = MetricsLog::open(&metrics_path)?;
    model.train_phase(phase, &sets, |m| log.record(m))?;
    model.save(out)?;
    log::info!("saved {} after {} episodes", out.display(), model.progress.episodes);
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    protocol: Option<Protocol>,
    baseline: Option<Baseline>,
    pgr: Option<PgrMode>,
) -> Result<()> {
    let mut model = Model::load(checkpoint)?;
    let coll = load_data(data, &model.config)?;
    if coll.embed_dim() != model.embed_dim() {
        return Err(Error::Dimension {
            what: "dataset embedding",
            expected: model.embed_dim(),
            got: coll.embed_dim(),
        });
    }
    let mut opts = EvalOptions::from_model(&model);
    if let Some(p) = protocol {
        opts.protocol = p;
    }
    if let Some(b) = baseline {
        opts.baseline = b;
    }
    if let Some(p) = pgr {
        opts.pgr = p;
    }
    if opts.protocol == Protocol::OpenId && opts.early_stop.is_some() {
        return Err(Error::Config(
            "softmax termination cannot be used with open-set identification".into(),
        ));
    }
    if opts.pgr == PgrMode::ParameterFree {
        model.ensure_pose_axis(&coll);
    }
    let report = evaluate(&model, &prepare(&coll), &opts)?;
    if let Some(dir) = out {
        report.write_to(dir)?;
    }
    println!("{}", report.summary_json());
    Ok(())
}

fn inspect(checkpoint: &Path) -> Result<()> {
    let m = Model::load(checkpoint)?;
    let p = &m.progress;
    println!("checkpoint: {}", checkpoint.display());
    println!("format version: {CHECKPOINT_VERSION}");
    println!("episodes: {}", p.episodes);
    println!("head warmup done: {}", p.warmup_done);
    println!("temporal steps: {}", p.temporal_steps);
    println!("pgr steps: {}", p.pgr_steps);
    println!("learning rates: policy {:e}, value {:e}", m.lr_policy, m.lr_value);
    println!("replay pool: {} / {}", m.pool.len(), m.pool.capacity());
    println!("classes: {}", m.classes.len());
    println!("parameters:");
    let counts = m.parameter_counts();
    for (name, n) in &counts {
        println!("  {name}: {n}");
    }
    println!("  total: {}", counts.iter().map(|(_, n)| n).sum::<usize>());
    println!("config:");
    print!("{}", m.config_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => gen(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            phase,
            seed,
            episodes,
            metrics,
        } => train(
            config.as_deref(),
            data.as_deref(),
            &out,
            phase.into(),
            seed,
            episodes,
            metrics.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            data,
            out,
            protocol,
            baseline,
            pgr,
        } => eval(
            &checkpoint,
            data.as_deref(),
            out.as_deref(),
            protocol.map(Into::into),
            baseline.map(Into::into),
            pgr.map(Into::into),
        ),
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
