//! Command-line layer: a typed key registry shared by the config file
//! loader and the flag parser, the five subcommands, and exit-code mapping.

mod commands;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Command};

use crate::checkpoint::CheckpointError;
use crate::completion::CompletionError;
use crate::datagen::DataError;
use crate::evalkit::EvalError;
use crate::flowmatch::FlowError;
use crate::network::NetworkError;
use crate::sampler::SampleError;

pub use commands::{
    cmd_complete, cmd_diagnose, cmd_eval, cmd_sample, cmd_train, CompleteOutcome, CouplingRow, DiagnoseOutcome,
    EvalRow, SampleOutcome, TrainOutcome, TwinResult, DIAGNOSE_HEADER,
};

pub const COMMANDS: [&str; 5] = ["train", "sample", "eval", "complete", "diagnose"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Count,
    Seed,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    /// Comma-separated values of the inner kind.
    List(&'static Kind),
}

#[derive(Clone, Copy, Debug)]
pub struct ConfigKey {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
    pub kind: Kind,
    pub commands: &'static [&'static str],
}

impl ConfigKey {
    pub fn applies_to(&self, command: &str) -> bool {
        self.commands.contains(&command)
    }

    /// Help line as printed by `--help`.
    pub fn help_line(&self) -> String {
        let shown = if self.default.is_empty() { "none" } else { self.default };
        format!("{} [default: {}]", self.help, shown)
    }
}

const ALL: &[&str] = &COMMANDS;
const DATA: &[&str] = &["train", "eval", "complete", "diagnose"];
const FIT: &[&str] = &["train", "complete", "diagnose"];
const INFER: &[&str] = &["sample", "eval", "complete"];
const NET: &[&str] = &["train", "diagnose"];

const NORMS: &[&str] = &["log", "linear"];
const FIT_LIST: Kind = Kind::List(&Kind::Choice(NORMS));

macro_rules! key {
    ($name:literal, $default:literal, $kind:expr, $commands:expr, $help:literal) => {
        ConfigKey {
            name: $name,
            default: $default,
            help: $help,
            kind: $kind,
            commands: $commands,
        }
    };
}

/// Every configuration key, its default and the commands that read it.
pub const REGISTRY: &[ConfigKey] = &[
    key!("seed", "0", Kind::Seed, ALL, "Master seed; every random stream is derived from it"),
    key!("height", "32", Kind::Count, DATA, "Generated scene height in pixels"),
    key!("width", "32", Kind::Count, DATA, "Generated scene width in pixels"),
    key!("difficulty", "standard", Kind::Choice(&["easy", "standard"]), DATA, "Scene generator difficulty"),
    key!("gt-count", "512", Kind::Count, &["train", "complete", "diagnose"], "Number of ground-truth training scenes"),
    key!("eval-count", "64", Kind::Count, &["eval", "complete", "diagnose"], "Number of held-out evaluation scenes"),
    key!("manifest", "", Kind::Text, &["train", "eval"], "Manifest of image/depth pairs used instead of generated scenes"),
    key!("norm", "log", Kind::Choice(NORMS), &["train", "diagnose"], "Depth normalisation space"),
    key!("preset", "desk", Kind::Choice(&["desk", "paper"]), &["train"], "Preset supplying batch-size, lr and ema-rate unless given explicitly"),
    key!("steps", "3000", Kind::Count, &["train"], "Optimiser steps"),
    key!("batch-size", "16", Kind::Count, FIT, "Training batch size"),
    key!("lr", "3e-4", Kind::Float, FIT, "Adam learning rate"),
    key!("ema-rate", "0.999", Kind::Float, FIT, "EMA decay of the inference weights"),
    key!("sigma-min", "1e-8", Kind::Float, NET, "Path noise floor"),
    key!("t-s", "0.4", Kind::Float, NET, "Noise-augmentation time of the starting image"),
    key!("start", "image", Kind::Choice(&["image", "noise"]), &["train"], "Starting distribution of the flow"),
    key!("log-every", "100", Kind::Count, FIT, "Steps between log rows"),
    key!("base-width", "16", Kind::Count, NET, "Channels at the first UNet level"),
    key!("depth-levels", "2", Kind::Count, NET, "Number of UNet downsamplings"),
    key!("time-embed-dim", "64", Kind::Count, NET, "Width of the sinusoidal time embedding"),
    key!("teacher-ratio", "0", Kind::Float, &["train"], "Pseudo-labelled fraction k of the ground-truth count; 0 disables distillation"),
    key!("teacher", "", Kind::Text, &["train"], "Teacher checkpoint; trained from scratch when empty"),
    key!("teacher-steps", "1500", Kind::Count, &["train"], "Teacher optimiser steps"),
    key!("unlabeled-count", "256", Kind::Count, &["train"], "Unlabelled images offered to the teacher"),
    key!("out", "model.ckpt", Kind::Text, &["train"], "Checkpoint to write"),
    key!("log", "", Kind::Text, &["train", "complete"], "Training log CSV; next to the checkpoint when empty"),
    key!("checkpoint", "model.ckpt", Kind::Text, INFER, "Checkpoint to load"),
    key!("nfe", "4", Kind::List(&Kind::Count), INFER, "Euler steps; eval accepts a comma list"),
    key!("ensemble", "10", Kind::Count, &["sample", "eval", "complete", "diagnose"], "Ensemble members per image"),
    key!("use-ema", "true", Kind::Bool, &["sample", "eval", "complete", "diagnose"], "Infer with the EMA weights"),
    key!("out-dir", ".", Kind::Text, &["sample"], "Directory for the PFM outputs"),
    key!("fit-space", "log", FIT_LIST, &["eval", "complete", "diagnose"], "Affine alignment space; eval accepts a comma list"),
    key!("edge-threshold", "0.1", Kind::Float, &["eval"], "Sobel magnitude threshold on normalised depth"),
    key!("edge-tolerance", "1", Kind::Count, &["eval"], "Edge matching tolerance in pixels"),
    key!("unc-quantile", "0.8", Kind::Float, &["eval"], "Spread quantile separating the uncertain pixels"),
    key!("report", "metrics.csv", Kind::Text, &["eval"], "CSV file that metric rows are appended to"),
    key!("label", "synthetic", Kind::Text, &["eval"], "Dataset label in the report"),
    key!("keep-fraction", "0.02", Kind::Float, &["complete"], "Fraction of ground-truth pixels observed"),
    key!("finetune-steps", "1500", Kind::Count, &["complete"], "Completion fine-tuning steps"),
    key!("completion-out", "completion.ckpt", Kind::Text, &["complete"], "Completion checkpoint to write"),
    key!("completion-report", "completion.csv", Kind::Text, &["complete"], "CSV file that base and completed rows are appended to"),
    key!("coupling-batches", "10", Kind::Count, &["diagnose"], "Batches in the coupling diagnostic"),
    key!("coupling-size", "32", Kind::Count, &["diagnose"], "Scenes per coupling batch"),
    key!("twin", "false", Kind::Bool, &["diagnose"], "Also train image-start and noise-start twins"),
    key!("twin-steps", "1500", Kind::Count, &["diagnose"], "Optimiser steps for each twin"),
    key!("diagnose-report", "diagnose.csv", Kind::Text, &["diagnose"], "Diagnostics CSV (overwritten)"),
];

pub fn lookup(name: &str) -> Option<&'static ConfigKey> {
    REGISTRY.iter().find(|k| k.name == name)
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` does not apply to `{command}`")]
    NotForCommand { key: String, command: String },
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("config line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("cannot read config file {path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

fn check_kind(kind: Kind, value: &str) -> Result<(), String> {
    match kind {
        Kind::Count => value.parse::<usize>().map(drop).map_err(|e| e.to_string()),
        Kind::Seed => value.parse::<u64>().map(drop).map_err(|e| e.to_string()),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            Ok(_) => Err("must be finite".into()),
            Err(e) => Err(e.to_string()),
        },
        Kind::Bool => parse_bool(value).map(drop).ok_or_else(|| "expected true or false".into()),
        Kind::Text => Ok(()),
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(format!("expected one of {}", options.join(", ")))
            }
        }
        Kind::List(inner) => {
            if value.trim().is_empty() {
                return Err("empty list".into());
            }
            value.split(',').try_for_each(|v| check_kind(*inner, v.trim()))
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Resolved key values for one command: defaults, then the config file,
/// then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<&'static str, String>,
    explicit: BTreeSet<&'static str>,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Result<Self, ConfigError> {
        if !COMMANDS.contains(&command) {
            return Err(ConfigError::Usage(format!("unknown command `{command}`")));
        }
        let values = REGISTRY
            .iter()
            .filter(|k| k.applies_to(command))
            .map(|k| (k.name, k.default.to_string()))
            .collect();
        Ok(Self {
            command: command.to_string(),
            values,
            explicit: BTreeSet::new(),
        })
    }

    /// Merge order: defaults, `file` (`key=value` lines), `flags`.
    pub fn resolve(command: &str, file: Option<&str>, flags: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::defaults(command)?;
        if let Some(text) = file {
            cfg.apply_file(text)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Keys known to the registry but read by another command are accepted
    /// and ignored, so one file can serve several commands.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let key = lookup(k).ok_or_else(|| ConfigError::UnknownKey(k.to_string()))?;
            if key.applies_to(&self.command) {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        let key = lookup(name).ok_or_else(|| ConfigError::UnknownKey(name.to_string()))?;
        if !key.applies_to(&self.command) {
            return Err(ConfigError::NotForCommand {
                key: name.to_string(),
                command: self.command.clone(),
            });
        }
        check_kind(key.kind, value).map_err(|reason| ConfigError::Invalid {
            key: name.to_string(),
            value: value.to_string(),
            reason,
        })?;
        self.values.insert(key.name, value.to_string());
        self.explicit.insert(key.name);
        Ok(())
    }

    /// Whether `name` was set by the file or a flag.
    pub fn is_explicit(&self, name: &str) -> bool {
        self.explicit.contains(name)
    }

    pub fn text(&self, name: &str) -> &str {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("key `{name}` is not read by `{}`", self.command))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> T {
        self.text(name)
            .parse()
            .unwrap_or_else(|_| panic!("`{name}` was validated on entry"))
    }

    pub fn count(&self, name: &str) -> usize {
        self.parsed(name)
    }

    pub fn seed(&self) -> u64 {
        self.parsed("seed")
    }

    pub fn float(&self, name: &str) -> f64 {
        self.parsed(name)
    }

    pub fn flag(&self, name: &str) -> bool {
        parse_bool(self.text(name)).expect("validated on entry")
    }

    pub fn list(&self, name: &str) -> Vec<String> {
        self.text(name).split(',').map(|s| s.trim().to_string()).collect()
    }

    /// A list key that must hold exactly one value.
    pub fn single(&self, name: &str) -> Result<String, ConfigError> {
        let values = self.list(name);
        if values.len() == 1 {
            Ok(values[0].clone())
        } else {
            Err(ConfigError::Invalid {
                key: name.into(),
                value: self.text(name).into(),
                reason: format!("`{}` takes a single value", self.command),
            })
        }
    }

    /// `key=value` lines in registry order.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Completion(#[from] CompletionError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl CliError {
    /// 1 for usage and configuration errors, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

const ABOUT: &[(&str, &str)] = &[
    ("train", "Train a depth flow model and write a checkpoint"),
    ("sample", "Predict depth and its spread for PPM/PGM images"),
    ("eval", "Evaluate a checkpoint on held-out scenes"),
    ("complete", "Fine-tune a checkpoint for sparse depth completion and compare it with the base model"),
    ("diagnose", "Coupling costs and the starting-distribution ablation"),
];

pub fn build_cli() -> Command {
    let mut app = Command::new("depthflow")
        .about("Flow-matching monocular depth estimation on generated scenes")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in ABOUT {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value file applied before the flags"),
        );
        for key in REGISTRY.iter().filter(|k| k.applies_to(name)) {
            sub = sub.arg(
                Arg::new(key.name)
                    .long(key.name)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(key.help_line()),
            );
        }
        if *name == "sample" {
            sub = sub.arg(
                Arg::new("images")
                    .value_name("IMAGE")
                    .num_args(1..)
                    .required(true)
                    .help("PPM or PGM images"),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

/// Parse `args` (program name first), run the command and return the exit
/// code.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match build_cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let (command, sub) = matches.subcommand().expect("subcommand required");
    let result = (|| -> Result<(), CliError> {
        let file = match sub.get_one::<String>("config") {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| ConfigError::File {
                path: p.into(),
                source,
            })?),
            None => None,
        };
        let flags: Vec<(String, String)> = REGISTRY
            .iter()
            .filter(|k| k.applies_to(command))
            .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
            .collect();
        let cfg = RunConfig::resolve(command, file.as_deref(), &flags)?;
        match command {
            "train" => cmd_train(&cfg, out).map(drop),
            "sample" => {
                let images: Vec<PathBuf> = sub.get_many::<String>("images").into_iter().flatten().map(PathBuf::from).collect();
                cmd_sample(&cfg, &images, out).map(drop)
            }
            "eval" => cmd_eval(&cfg, out).map(drop),
            "complete" => cmd_complete(&cfg, out).map(drop),
            "diagnose" => cmd_diagnose(&cfg, out).map(drop),
            other => Err(ConfigError::Usage(format!("unknown command `{other}`")).into()),
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_defaults_are_valid() {
        let mut seen = BTreeSet::new();
        for k in REGISTRY {
            assert!(seen.insert(k.name), "duplicate key {}", k.name);
            assert!(!k.commands.is_empty(), "{} is read by nothing", k.name);
            assert!(k.commands.iter().all(|c| COMMANDS.contains(c)));
            if k.kind != Kind::Text {
                check_kind(k.kind, k.default).unwrap_or_else(|e| panic!("default of {}: {e}", k.name));
            }
        }
    }

    #[test]
    fn sampling_defaults() {
        let cfg = RunConfig::defaults("sample").unwrap();
        assert_eq!((cfg.count("ensemble"), cfg.single("nfe").unwrap().as_str()), (10, "4"));
        assert!(cfg.flag("use-ema"));
        assert_eq!(RunConfig::defaults("complete").unwrap().float("keep-fraction"), 0.02);
    }

    #[test]
    fn merge_order_is_defaults_file_flags() {
        let file = "# comment\nsteps = 50\nlr=1e-3\n\nnfe=2\n";
        let flags = vec![("steps".to_string(), "7".to_string())];
        let cfg = RunConfig::resolve("train", Some(file), &flags).unwrap();
        assert_eq!(cfg.count("steps"), 7);
        assert_eq!(cfg.float("lr"), 1e-3);
        assert!(cfg.is_explicit("lr") && !cfg.is_explicit("batch-size"));
        assert_eq!(cfg.count("batch-size"), 16);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(matches!(RunConfig::resolve("train", Some("stepz=1"), &[]), Err(ConfigError::UnknownKey(k)) if k == "stepz"));
        assert!(matches!(RunConfig::resolve("train", Some("steps"), &[]), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::resolve("train", Some("steps=-1"), &[]), Err(ConfigError::Invalid { .. })));
        assert!(matches!(RunConfig::resolve("train", Some("lr=inf"), &[]), Err(ConfigError::Invalid { .. })));
        assert!(matches!(RunConfig::resolve("eval", Some("fit-space=log,cubic"), &[]), Err(ConfigError::Invalid { .. })));
        let flags = vec![("nfe".to_string(), "2".to_string())];
        assert!(matches!(RunConfig::resolve("train", None, &flags), Err(ConfigError::NotForCommand { .. })));
        let cfg = RunConfig::resolve("sample", None, &[("nfe".into(), "1,2".into())]).unwrap();
        assert!(cfg.single("nfe").is_err());
    }

    #[test]
    fn help_lists_every_key_and_default() {
        for name in COMMANDS {
            let mut app = build_cli();
            let sub = app.find_subcommand_mut(name).unwrap();
            let help = sub.render_long_help().to_string();
            for key in REGISTRY.iter().filter(|k| k.applies_to(name)) {
                assert!(help.contains(&format!("--{} <VALUE>", key.name)), "{name}: --{} missing", key.name);
                assert!(help.contains(&key.help_line()), "{name}: help line of {} missing:\n{help}", key.name);
            }
            for key in REGISTRY.iter().filter(|k| !k.applies_to(name)) {
                assert!(!help.contains(&format!("--{} ", key.name)), "{name} offers --{}", key.name);
            }
        }
    }

    #[test]
    fn exit_codes() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["depthflow", "--help"], &mut out, &mut err), 0);
        assert_eq!(run(["depthflow", "train", "--bogus", "1"], &mut out, &mut err), 1);
        assert_eq!(run(["depthflow", "train", "--steps", "x"], &mut out, &mut err), 1);
        assert_eq!(run(["depthflow"], &mut out, &mut err), 1);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.ckpt");
        let code = run(
            ["depthflow", "eval", "--checkpoint", missing.to_str().unwrap()],
            &mut out,
            &mut err,
        );
        assert_eq!(code, 2);
    }
}
