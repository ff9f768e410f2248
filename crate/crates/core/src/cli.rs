//! Command-line interface and the run configuration.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad flags or config,
//! unreadable data, a missing prerequisite phase), 2 when a phase fails while
//! running.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{describe, synthesize, Corpus, DataFiles, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{WganConfig, DEFAULT_MMD_SCALES};
use crate::models::ArchConfig;
use crate::pipeline::{self, ClrKind, Phase, RunDir, RunReport, TrainPlan, Variant};

/// Settings of a pre-training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainPlan {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 5e-3,
            max_epochs: 500,
            patience: 10,
            min_delta: 1e-5,
        }
    }
}

/// Settings of a fine-tuning phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetunePlan {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub n_f: usize,
    pub n_uf: usize,
    pub decay: f64,
}

impl Default for FinetunePlan {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-5,
            n_f: 5,
            n_uf: 5,
            decay: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic corpus. Used when `data` is absent.
    pub synth: Option<SynthSpec>,
    /// TSV files of a real corpus.
    pub data: Option<DataFiles>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub loss: ClrKind,
    pub lambda: f64,
    pub transmitter: bool,
    pub repeats: usize,
    pub train_frac: f64,
    pub standardize: bool,
    pub temperature: f64,
    pub mmd_scales: Vec<f64>,
    pub wgan: WganConfig,
    pub arch: ArchConfig,
    pub pretrain_high: PretrainPlan,
    pub finetune_high: FinetunePlan,
    pub pretrain_low: PretrainPlan,
    pub finetune_low: FinetunePlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: None,
            data: None,
            out_dir: PathBuf::from("runs/cleit"),
            seed: 0,
            loss: ClrKind::Contrastive,
            lambda: 0.8,
            transmitter: true,
            repeats: 3,
            train_frac: 0.9,
            standardize: true,
            temperature: 1.0,
            mmd_scales: DEFAULT_MMD_SCALES.to_vec(),
            wgan: WganConfig::default(),
            arch: ArchConfig::default(),
            pretrain_high: PretrainPlan::default(),
            finetune_high: FinetunePlan::default(),
            pretrain_low: PretrainPlan::default(),
            finetune_low: FinetunePlan::default(),
        }
    }
}

impl RunConfig {
    /// Checks every field and fills in the synthetic corpus when no data
    /// source is given.
    pub fn validate(mut self) -> Result<Self> {
        match (&self.synth, &self.data) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("`synth` and `data` are mutually exclusive".into()))
            }
            (None, None) => self.synth = Some(SynthSpec::default()),
            _ => {}
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if let Some(d) = &self.data {
            for (name, p) in d.paths() {
                if !p.is_file() {
                    return Err(Error::Config(format!("data.{name}: no such file {}", p.display())));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac must be in (0, 1), got {}", self.train_frac)));
        }
        if self.mmd_scales.is_empty() || self.mmd_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("mmd_scales must be non-empty and positive".into()));
        }
        self.arch.validate()?;
        for phase in Phase::ALL {
            self.plan(phase, self.loss, self.seed).validate()?;
        }
        Ok(self)
    }

    pub fn variant(&self) -> Variant {
        Variant {
            clr: self.loss,
            transmitter: self.transmitter,
        }
    }

    pub fn plan(&self, phase: Phase, clr: ClrKind, seed: u64) -> TrainPlan {
        let (pre, fine) = match phase {
            Phase::PretrainHigh => (Some(&self.pretrain_high), None),
            Phase::PretrainLow => (Some(&self.pretrain_low), None),
            Phase::FinetuneHigh => (None, Some(&self.finetune_high)),
            Phase::FinetuneLow => (None, Some(&self.finetune_low)),
        };
        let base = TrainPlan {
            phase,
            batch_size: 0,
            lr: 0.0,
            lambda: self.lambda,
            decay: 1.0,
            n_f: 0,
            n_uf: 0,
            max_epochs: 0,
            patience: 0,
            min_delta: 0.0,
            clr,
            temperature: self.temperature,
            mmd_scales: self.mmd_scales.clone(),
            wgan: self.wgan,
            seed,
        };
        match (pre, fine) {
            (Some(p), _) => TrainPlan {
                batch_size: p.batch_size,
                lr: p.lr,
                max_epochs: p.max_epochs,
                patience: p.patience,
                min_delta: p.min_delta,
                ..base
            },
            (_, Some(f)) => TrainPlan {
                batch_size: f.batch_size,
                lr: f.lr,
                max_epochs: f.max_epochs,
                patience: f.patience,
                min_delta: f.min_delta,
                n_f: f.n_f,
                n_uf: f.n_uf,
                decay: f.decay,
                ..base
            },
            (None, None) => unreachable!("every phase has a plan"),
        }
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match (&self.data, &self.synth) {
            (Some(d), _) => d.load(),
            (None, Some(s)) => Ok(synthesize(s)?.corpus),
            (None, None) => synthesize(&SynthSpec::default()).map(|s| s.corpus),
        }
    }
}

/// Reads, defaults and validates a JSON configuration file.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()
}

#[derive(Debug, Parser)]
#[command(name = "cleit", version, about = "Cross-level information transmission for two-domain multi-task regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus as TSV files.
    Synth(SynthArgs),
    /// Stage 1: VAE pre-training on the high domain.
    PretrainHigh(RunArgs),
    /// Stage 2: supervised fine-tuning on the high domain.
    FinetuneHigh(RunArgs),
    /// Stage 3: aligned VAE pre-training on the low domain.
    PretrainLow(RunArgs),
    /// Stage 4: gradual-unfreezing fine-tuning on the low domain.
    FinetuneLow(RunArgs),
    /// Evaluate stage-4 checkpoints on the test partition.
    Evaluate(RunArgs),
    /// All stages and evaluation, resuming from existing checkpoints.
    RunAll(RunArgs),
    /// Loss × transmitter sweep sharing the high-domain stages.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub no_transmitter: bool,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Use the synthetic corpus (optionally a SynthSpec JSON file).
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub synth: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated loss kinds.
    #[arg(long, default_value = "contrastive,mmd,wgan,none")]
    pub losses: String,
    /// Comma-separated transmitter settings (`on`, `off`).
    #[arg(long, default_value = "on,off")]
    pub transmitter: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthSpec JSON; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(l) = &self.loss {
            cfg.loss = l.parse()?;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if self.no_transmitter {
            cfg.transmitter = false;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(s) = &self.synth {
            if cfg.data.is_some() {
                return Err(Error::Config("--synth conflicts with `data` in the config".into()));
            }
            cfg.synth = Some(if s.is_empty() {
                cfg.synth.take().unwrap_or_default()
            } else {
                let text = fs::read_to_string(s)
                    .map_err(|e| Error::Config(format!("cannot read {s}: {e}")))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("synth spec: {e}")))?
            });
        }
        cfg.validate()
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(f).collect()
}

fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::Config(format!("transmitter setting must be on or off, got `{other}`"))),
    }
}

/// Writes the effective configuration before anything else happens.
fn snapshot_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn require(dir: &RunDir, phase: Phase) -> Result<()> {
    if dir.join(phase.as_str()).has_checkpoint() {
        Ok(())
    } else {
        Err(Error::MissingPhase(phase.to_string()))
    }
}

fn load_prepared(cfg: &RunConfig) -> Result<pipeline::Prepared> {
    pipeline::prepare(&cfg.load_corpus()?, cfg.standardize)
}

fn write_single(cfg: &RunConfig, method: pipeline::MethodReport) -> Result<()> {
    let report = RunReport {
        seed: cfg.seed,
        methods: vec![method],
    };
    pipeline::write_reports(&cfg.out_dir, &report)?;
    print!("{}", pipeline::comparison_tsv(&report));
    Ok(())
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let mut spec = match &a.config {
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("synth spec: {e}")))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            spec.validate()?;
            fs::create_dir_all(&a.out_dir)?;
            fs::write(a.out_dir.join("synth_spec.json"), serde_json::to_vec_pretty(&spec)?)?;
            let data = synthesize(&spec).map_err(|e| e.in_phase("synth"))?;
            let files = DataFiles::write(&data.corpus, &a.out_dir).map_err(|e| e.in_phase("synth"))?;
            fs::write(a.out_dir.join("data_files.json"), serde_json::to_vec_pretty(&files)?)?;
            print!("{}", describe(&data.corpus));
            Ok(())
        }
        Command::PretrainHigh(a) | Command::FinetuneHigh(a) => {
            let cfg = a.resolve()?;
            snapshot_config(&cfg)?;
            let prep = load_prepared(&cfg)?;
            let dir = RunDir::new(&cfg.out_dir);
            let upto = if matches!(command, Command::PretrainHigh(_)) {
                Phase::PretrainHigh
            } else {
                require(&dir, Phase::PretrainHigh)?;
                // rerun stage 2 on top of the stored stage 1
                let fdir = cfg.out_dir.join(Phase::FinetuneHigh.as_str());
                if fdir.exists() {
                    fs::remove_dir_all(&fdir)?;
                }
                Phase::FinetuneHigh
            };
            if upto == Phase::PretrainHigh {
                let pdir = cfg.out_dir.join(Phase::PretrainHigh.as_str());
                if pdir.exists() {
                    fs::remove_dir_all(&pdir)?;
                }
            }
            pipeline::train_high(&cfg, &prep, &dir, true, upto)?;
            Ok(())
        }
        Command::PretrainLow(a) => {
            let cfg = a.resolve()?;
            snapshot_config(&cfg)?;
            let dir = RunDir::new(&cfg.out_dir);
            require(&dir, Phase::FinetuneHigh)?;
            let prep = load_prepared(&cfg)?;
            let high = pipeline::load_high(&cfg, &prep, &dir)?;
            let pdir = cfg.out_dir.join(Phase::PretrainLow.as_str());
            if pdir.exists() {
                fs::remove_dir_all(&pdir)?;
            }
            pipeline::train_low_pretrain(&cfg, &prep, &high, cfg.variant(), &dir, true)?;
            Ok(())
        }
        Command::FinetuneLow(a) => {
            let cfg = a.resolve()?;
            snapshot_config(&cfg)?;
            let dir = RunDir::new(&cfg.out_dir);
            require(&dir, Phase::FinetuneHigh)?;
            require(&dir, Phase::PretrainLow)?;
            let prep = load_prepared(&cfg)?;
            let high = pipeline::load_high(&cfg, &prep, &dir)?;
            // stage 3 is loaded from its checkpoint; stage 4 is retrained
            let pre = pipeline::train_low_pretrain(&cfg, &prep, &high, cfg.variant(), &dir, true)?;
            let fdir = cfg.out_dir.join(Phase::FinetuneLow.as_str());
            if fdir.exists() {
                fs::remove_dir_all(&fdir)?;
            }
            let report =
                pipeline::train_low_finetune(&cfg, &prep, &high, &pre, &cfg.variant().name(), &dir, true)?;
            write_single(&cfg, report)
        }
        Command::Evaluate(a) => {
            let cfg = a.resolve()?;
            let dir = RunDir::new(&cfg.out_dir);
            let prep = load_prepared(&cfg)?;
            let report = pipeline::evaluate_low(&cfg, &prep, cfg.variant(), &dir)?;
            write_single(&cfg, report)
        }
        Command::RunAll(a) => {
            let cfg = a.resolve()?;
            snapshot_config(&cfg)?;
            let corpus = cfg.load_corpus()?;
            let report = pipeline::run_all(&cfg, &corpus)?;
            print!("{}", pipeline::comparison_tsv(&report));
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = a.run.resolve()?;
            let losses = parse_list(&a.losses, |s| s.parse::<ClrKind>())?;
            let transmitters = parse_list(&a.transmitter, parse_switch)?;
            if losses.is_empty() || transmitters.is_empty() {
                return Err(Error::Config("--losses and --transmitter must not be empty".into()));
            }
            snapshot_config(&cfg)?;
            let corpus = cfg.load_corpus()?;
            let report = pipeline::ablate(&cfg, &corpus, &losses, &transmitters)?;
            print!("{}", pipeline::comparison_tsv(&report));
            Ok(())
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("error: {}", first_line(&e.to_string()));
            }
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", first_line(&e.to_string()));
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn first_line(s: &str) -> String {
    let s = s.trim_start_matches("error: ");
    s.lines().next().unwrap_or_default().trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        let fine = cfg.plan(Phase::FinetuneLow, cfg.loss, 0);
        let pre = cfg.plan(Phase::PretrainHigh, cfg.loss, 0);
        assert_eq!(pre.batch_size, 64);
        assert_eq!(pre.lr, 5e-3);
        assert_eq!(fine.lr, 1e-4);
        assert_eq!(fine.decay, 0.8);
        assert_eq!(cfg.lambda, 0.8);
        assert_eq!(cfg.arch.z_dim, 128);
        assert_eq!(cfg.synth, Some(SynthSpec::default()));
    }

    #[test]
    fn bad_lambda_names_the_field() {
        let e = parse_config(r#"{"lambda": 1.5}"#).unwrap_err();
        assert!(e.to_string().contains("lambda"), "{e}");
        assert!(e.is_validation());
    }

    #[test]
    fn unknown_loss_and_field_are_rejected() {
        assert!(parse_config(r#"{"loss": "cosine"}"#).is_err());
        assert!(parse_config(r#"{"lamda": 0.5}"#).is_err());
    }

    #[test]
    fn effective_config_is_a_fixpoint() {
        let cfg = parse_config(r#"{"seed": 4, "loss": "mmd", "pretrain_low": {"max_epochs": 7}}"#).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }

    #[test]
    fn contradictory_sources_rejected() {
        let files = DataFiles {
            high_unlabeled: "a".into(),
            low_unlabeled: "a".into(),
            high_labeled: "a".into(),
            low_labeled: "a".into(),
            labels: "a".into(),
            test_low: "a".into(),
            test_labels: "a".into(),
        };
        let cfg = RunConfig {
            synth: Some(SynthSpec::default()),
            data: Some(files),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(run_command(["cleit", "run-all", "--bogus"]), 1);
    }
}
