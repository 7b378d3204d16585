//! The `rnnbf` command line: scene simulation, training, separation and
//! evaluation driven by one TOML run configuration.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use rnnbf::array_sim::{generate_manifest, load_manifest, save_manifest, synthesize_scene, SceneWavs};
use rnnbf::beamformer::{BeamformerKind, NormMode};
use rnnbf::config::{Provenance, RunConfig, Source};
use rnnbf::eval::{evaluate, System};
use rnnbf::signal::{load_wav, save_wav, WavFormat, WaveBuffer};
use rnnbf::train::{LoadedModel, Trainer};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "RNNBF_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] rnnbf::Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(rnnbf::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "rnnbf", version, about = "Neural and mask-based beamforming for target speech separation")]
pub struct Cli {
    /// Worker threads; 1 makes every command bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a stratified scene manifest and its WAV files.
    Simulate(SimulateArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Separate the target from one multichannel WAV.
    Separate(SeparateArgs),
    /// Score a checkpoint or an oracle-mask beamformer on a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set training.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Total optimizer steps, counting those already in a resumed checkpoint.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from this checkpoint with its stored configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also train the mask estimator for classic beamformers.
    #[arg(long)]
    pub train_crf: bool,
    /// mvdr, gev, rnn-gev or grnn-bf.
    #[arg(long)]
    pub kind: Option<BeamformerKind>,
    /// mask-norm or layer-norm (recurrent kinds).
    #[arg(long)]
    pub norm: Option<NormMode>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target direction of arrival in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub doa: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "system", required = true, multiple = false, args = ["ckpt", "classic"])]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Oracle-mask beamformer: mvdr or gev.
    #[arg(long)]
    pub classic: Option<BeamformerKind>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving report.tsv and report.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `--config` and apply `--set` plus command-specific overrides; flags
/// win over the file and are marked as such in the echo.
pub fn resolve_config(args: &ConfigArgs, extra: &[(&str, toml::Value)]) -> CliResult<(RunConfig, Provenance)> {
    let mut table: toml::Table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    let mut flagged = Vec::new();
    for s in &args.set {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        insert_dotted(&mut table, key, value)?;
        flagged.push(key.to_string());
    }
    for (key, value) in extra {
        insert_dotted(&mut table, key, value.clone())?;
        flagged.push(key.to_string());
    }
    let text = toml::to_string(&table).map_err(|e| usage(e.to_string()))?;
    let (cfg, mut prov) = RunConfig::parse(&text)?;
    for key in flagged {
        prov.mark(&key, Source::Flag);
    }
    cfg.validate()?;
    Ok((cfg, prov))
}

// bare words become strings so `--set beamformer.kind=gev` works unquoted
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("'{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn echo(cfg: &RunConfig, prov: &Provenance) {
    for line in cfg.echo(prov).lines() {
        eprintln!("config: {line}");
    }
}

fn read_manifest(path: &Path) -> CliResult<Vec<rnnbf::array_sim::ManifestEntry>> {
    if !path.is_file() {
        return Err(usage(format!("manifest {} does not exist", path.display())));
    }
    load_manifest(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be positive"));
    }
    let (cfg, prov) = resolve_config(&a.cfg, &[])?;
    echo(&cfg, &prov);
    let mut entries = match generate_manifest(a.scenes, a.seed, &cfg.array) {
        Err(rnnbf::Error::Manifest(m)) => return Err(usage(m)),
        r => r?,
    };
    std::fs::create_dir_all(&a.out).map_err(rnnbf::Error::from)?;
    entries.par_iter_mut().try_for_each(|e| -> rnnbf::Result<()> {
        let scene = synthesize_scene(&e.scene_spec()?, e.num_samples, &cfg.array, &cfg.stft)?;
        let dir = a.out.join(&e.scene_id);
        std::fs::create_dir_all(&dir)?;
        let wavs = SceneWavs {
            mixture: format!("{}/mixture.wav", e.scene_id),
            target: format!("{}/target.wav", e.scene_id),
            noise: format!("{}/noise.wav", e.scene_id),
        };
        save_wav(a.out.join(&wavs.mixture), &scene.mixture, WavFormat::Float32)?;
        save_wav(a.out.join(&wavs.target), &scene.target_clean, WavFormat::Float32)?;
        save_wav(a.out.join(&wavs.noise), &scene.noise_plus_interference, WavFormat::Float32)?;
        e.wavs = Some(wavs);
        Ok(())
    })?;
    save_manifest(a.out.join("manifest.jsonl"), &entries)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()).map_err(rnnbf::Error::from)?;
    println!("wrote {} scenes to {}", entries.len(), a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.manifest)?;
    let loaded = match &a.resume {
        Some(path) => {
            let overridden = a.cfg.config.is_some()
                || !a.cfg.set.is_empty()
                || a.train_crf
                || a.kind.is_some()
                || a.norm.is_some()
                || a.lr.is_some()
                || a.seed.is_some();
            if overridden {
                return Err(usage("only --steps may change when resuming; the configuration comes from the checkpoint"));
            }
            let mut lm = LoadedModel::load(path)?;
            if let Some(steps) = a.steps {
                lm.config.training.steps = steps;
            }
            let mut prov = Provenance::default();
            if a.steps.is_some() {
                prov.mark("training.steps", Source::Flag);
            }
            echo(&lm.config, &prov);
            lm
        }
        None => {
            let mut extra = Vec::new();
            if let Some(s) = a.steps {
                extra.push(("training.steps", toml::Value::Integer(as_int(s)?)));
            }
            if a.train_crf {
                extra.push(("training.train_crf", toml::Value::Boolean(true)));
            }
            if let Some(k) = a.kind {
                extra.push(("beamformer.kind", toml::Value::String(k.name().into())));
            }
            if let Some(n) = a.norm {
                let name = match n {
                    NormMode::MaskNorm => "mask-norm",
                    NormMode::LayerNorm => "layer-norm",
                };
                extra.push(("beamformer.normalization", toml::Value::String(name.into())));
            }
            if let Some(lr) = a.lr {
                extra.push(("training.lr", toml::Value::Float(lr)));
            }
            if let Some(s) = a.seed {
                extra.push(("training.seed", toml::Value::Integer(as_int(s)?)));
            }
            let (cfg, prov) = resolve_config(&a.cfg, &extra)?;
            echo(&cfg, &prov);
            LoadedModel::fresh(&cfg)?
        }
    };
    let log_every = loaded.config.training.log_every.max(1);
    let last = loaded.config.training.steps;
    let mut trainer = Trainer::new(loaded, &manifest)?;
    println!("step\tloss\tsi_snr");
    trainer.run(&a.out, |r| {
        if r.step % log_every == 0 || r.step == last {
            println!("{}\t{:.4}\t{:.4}", r.step, r.loss, r.si_snr);
        }
    })?;
    Ok(())
}

fn as_int(v: u64) -> CliResult<i64> {
    i64::try_from(v).map_err(|_| usage(format!("{v} is out of range")))
}

pub fn cmd_separate(a: &SeparateArgs) -> CliResult<()> {
    let doa = a
        .doa
        .ok_or_else(|| usage("--doa is required: the directional feature needs the target direction"))?;
    let lm = LoadedModel::load(&a.ckpt)?;
    let wave = load_wav(&a.input)?;
    let mics = lm.config.mics();
    if wave.channels() != mics {
        return Err(usage(format!(
            "{} has {} channels, the model expects {mics}",
            a.input.display(),
            wave.channels()
        )));
    }
    if wave.sample_rate() != lm.config.array.sample_rate {
        return Err(usage(format!(
            "{} is sampled at {} Hz, the model expects {} Hz",
            a.input.display(),
            wave.sample_rate(),
            lm.config.array.sample_rate
        )));
    }
    let out = lm.model.separate(&lm.store, &wave, doa)?;
    save_wav(&a.out, &WaveBuffer::mono(out, wave.sample_rate())?, WavFormat::Float32)?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let manifest = read_manifest(&a.manifest)?;
    let report = match (&a.ckpt, a.classic) {
        (Some(path), _) => {
            if a.cfg.config.is_some() || !a.cfg.set.is_empty() {
                return Err(usage("--config and --set do not apply with --ckpt"));
            }
            let lm = LoadedModel::load(path)?;
            evaluate(&System::Model(&lm), &lm.config, &manifest)?
        }
        (None, Some(kind)) => {
            if kind.is_recurrent() {
                return Err(usage(format!("--classic takes mvdr or gev, not {kind}")));
            }
            let (cfg, prov) = resolve_config(&a.cfg, &[])?;
            echo(&cfg, &prov);
            evaluate(&System::Oracle(kind), &cfg, &manifest)?
        }
        (None, None) => unreachable!("clap requires one system"),
    };
    std::fs::create_dir_all(&a.out).map_err(rnnbf::Error::from)?;
    let tsv = report.to_tsv(true);
    std::fs::write(a.out.join("report.tsv"), &tsv).map_err(rnnbf::Error::from)?;
    std::fs::write(a.out.join("report.jsonl"), report.to_jsonl()).map_err(rnnbf::Error::from)?;
    print!("{}", report.to_tsv(false));
    Ok(())
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => cmd_separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
