//! Command-line front end: `gen-data`, `train`, `adapt`, `evaluate` and
//! `diagnose`, driven by a sectioned TOML file plus `--section.key value`
//! overrides.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O or
//! file-format error, 4 numeric abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{
    generate_corpus, make_trials, read_corpus, read_manifest, read_trials, select_from_manifest, split_corpus,
    write_atomic, write_corpus, write_manifest, write_trials, CorpusSpec, LabeledCorpus, Utterance,
};
use crate::embedder::EmbedderConfig;
use crate::error::{Error, Result};
use crate::eval::{
    bootstrap_ranked_probabilities, eer, extract_all, format_scores, kl_to_uniform, score_trials, EerReport,
};
use crate::head::{LossKind, LossSpec};
use crate::model::Model;
use crate::schedule::{p_average, DropConfig, DropMode, ProbabilityLogits};
use crate::trainer::{self, default_halvings, sample_enrolment, RunOutcome, TrainConfig, Validation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric(_) | Error::DegenerateEmbedding(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// One configuration key. Defaults are TOML literals; `"auto"` means the
/// value is derived as the help text says.
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec {
        key: "seed",
        default: "0",
        help: "top-level seed; every random stream derives from it",
    },
    KeySpec {
        key: "corpus.n_speakers",
        default: "50",
        help: "classes generated",
    },
    KeySpec {
        key: "corpus.utts_per_speaker",
        default: "20",
        help: "utterances per class",
    },
    KeySpec {
        key: "corpus.frames_per_utt",
        default: "50",
        help: "frames per utterance",
    },
    KeySpec {
        key: "corpus.feat_dim",
        default: "20",
        help: "features per frame",
    },
    KeySpec {
        key: "corpus.speaker_spread",
        default: "1.0",
        help: "std of class means",
    },
    KeySpec {
        key: "corpus.frame_noise",
        default: "0.5",
        help: "std of per-frame noise",
    },
    KeySpec {
        key: "corpus.skew_factor",
        default: "0.0",
        help: "shift of the first half of class means, in [0, 1]",
    },
    KeySpec {
        key: "corpus.train_class_fraction",
        default: "0.8",
        help: "fraction of classes used for training",
    },
    KeySpec {
        key: "corpus.target_trials",
        default: "400",
        help: "same-class trials drawn from the test split",
    },
    KeySpec {
        key: "corpus.nontarget_trials",
        default: "400",
        help: "different-class trials drawn from the test split",
    },
    KeySpec {
        key: "model.hidden",
        default: "[64, 64]",
        help: "widths of the frame-level layers",
    },
    KeySpec {
        key: "model.embed_dim",
        default: "32",
        help: "embedding dimension d",
    },
    KeySpec {
        key: "model.leaky_slope",
        default: "0.01",
        help: "negative slope of the leaky rectifier",
    },
    KeySpec {
        key: "model.eps_std",
        default: "1e-6",
        help: "floor of the pooled standard deviation",
    },
    KeySpec {
        key: "loss.kind",
        default: "\"cosface\"",
        help: "softmax | cosface | arcface | sphereface | adacos",
    },
    KeySpec {
        key: "loss.scale",
        default: "\"auto\"",
        help: "logit scale s; auto = 30, or the AdaCos initial scale",
    },
    KeySpec {
        key: "loss.margin",
        default: "\"auto\"",
        help: "margin m; auto = 0.35 cosface, 0.2 arcface, 4 sphereface",
    },
    KeySpec {
        key: "loss.adacos_reset_on_refresh",
        default: "true",
        help: "reset the AdaCos scale when the class set changes",
    },
    KeySpec {
        key: "drop.mode",
        default: "\"none\"",
        help: "none | dropclass | dropadapt | dropadapt_combine | drop_random | drop_only_data",
    },
    KeySpec {
        key: "drop.P",
        default: "25",
        help: "refresh period in iterations",
    },
    KeySpec {
        key: "drop.D",
        default: "20",
        help: "classes dropped per refresh",
    },
    KeySpec {
        key: "drop.probability_logits",
        default: "\"raw\"",
        help: "logits of the average probability: raw | scaled_cosine",
    },
    KeySpec {
        key: "drop.probability_scale",
        default: "\"auto\"",
        help: "scale for scaled_cosine; auto = loss scale",
    },
    KeySpec {
        key: "train.iterations",
        default: "2000",
        help: "training steps",
    },
    KeySpec {
        key: "train.batch_size",
        default: "16",
        help: "examples per batch, one per class",
    },
    KeySpec {
        key: "train.frames_per_example",
        default: "40",
        help: "random crop length",
    },
    KeySpec {
        key: "train.lr",
        default: "0.2",
        help: "initial learning rate",
    },
    KeySpec {
        key: "train.momentum",
        default: "0.5",
        help: "classical momentum",
    },
    KeySpec {
        key: "train.lr_halving",
        default: "\"auto\"",
        help: "halving steps; auto = 60, 80, 90, 110 of every 120 iterations",
    },
    KeySpec {
        key: "train.adapt_iterations",
        default: "500",
        help: "fine-tuning steps for adapt",
    },
    KeySpec {
        key: "train.adapt_lr_halving",
        default: "[]",
        help: "halving steps during adapt",
    },
    KeySpec {
        key: "train.enrol_fraction",
        default: "1.0",
        help: "fraction of enrolment utterances used by adapt",
    },
    KeySpec {
        key: "train.eval_every",
        default: "0",
        help: "score the test trials every N steps; 0 = never",
    },
    KeySpec {
        key: "eval.n_bootstrap",
        default: "300",
        help: "bootstrap replicas for diagnose",
    },
];

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let mut out = String::from("Configuration keys (file sections or --section.key value overrides):\n");
    for k in KEYS {
        out.push_str(&format!("  {:<30} {:<10} {}\n", k.key, k.default, k.help));
    }
    out
}

/// Closest registered key by edit distance of the key name, preferring
/// keys of the same section.
fn nearest_key(unknown: &str) -> &'static str {
    let (section, bare) = unknown.rsplit_once('.').unwrap_or(("", unknown));
    KEYS.iter()
        .map(|k| {
            let (k_section, name) = k.key.rsplit_once('.').unwrap_or(("", k.key));
            let same = if k_section == section { 1.0 } else { 0.0 };
            (strsim::normalized_levenshtein(bare, name) + 0.1 * same, k.key)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
        .expect("key registry is not empty")
}

fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`; did you mean `{}`?", nearest_key(key)))
}

/// Parses an override value as a TOML literal, or as a bare string.
fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Every key resolved to a value: file, then overrides, then defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, toml::Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str("", &[]).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        let mut values = BTreeMap::new();
        for (name, value) in table {
            match value {
                toml::Value::Table(section) => {
                    for (key, v) in section {
                        if matches!(v, toml::Value::Table(_)) {
                            return Err(Error::Config(format!("`{name}.{key}` is nested too deeply")));
                        }
                        values.insert(format!("{name}.{key}"), v);
                    }
                }
                v => {
                    values.insert(name, v);
                }
            }
        }
        for (key, text) in overrides {
            values.insert(key.clone(), parse_literal(text));
        }
        if let Some(key) = values.keys().find(|k| !KEYS.iter().any(|s| s.key == k.as_str())) {
            return Err(unknown_key(key));
        }
        for spec in KEYS {
            values
                .entry(spec.key.to_string())
                .or_insert_with(|| parse_literal(spec.default));
        }
        let config = RunConfig { values };
        config.check()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Resolved keys as a TOML document.
    pub fn to_toml(&self) -> String {
        let mut root = toml::Table::new();
        for (key, value) in &self.values {
            match key.split_once('.') {
                None => {
                    root.insert(key.clone(), value.clone());
                }
                Some((section, name)) => {
                    root.entry(section.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                        .as_table_mut()
                        .expect("section is a table")
                        .insert(name.to_string(), value.clone());
                }
            }
        }
        toml::to_string(&root).expect("plain values serialise")
    }

    pub fn values(&self) -> &BTreeMap<String, toml::Value> {
        &self.values
    }

    fn value(&self, key: &str) -> &toml::Value {
        self.values.get(key).expect("every registered key is resolved")
    }

    fn is_auto(&self, key: &str) -> bool {
        self.value(key).as_str() == Some("auto")
    }

    fn bad(&self, key: &str, want: &str) -> Error {
        Error::validation(key, format!("expected {want}, got `{}`", self.value(key)))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        self.value(key)
            .as_integer()
            .and_then(|i| usize::try_from(i).ok())
            .ok_or_else(|| self.bad(key, "a non-negative integer"))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v = self.value(key);
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| self.bad(key, "a number"))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.value(key).as_bool().ok_or_else(|| self.bad(key, "true or false"))
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.value(key).as_str().ok_or_else(|| self.bad(key, "a string"))
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.value(key)
            .as_array()
            .and_then(|a| {
                a.iter()
                    .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()))
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| self.bad(key, "a list of non-negative integers"))
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.is_auto(key) {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    /// Type-checks every key and the value ranges that do not depend on data.
    fn check(&self) -> Result<()> {
        self.corpus_spec()?.validate()?;
        let fraction = self.f64("corpus.train_class_fraction")?;
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::validation("corpus.train_class_fraction", "must lie in (0, 1)"));
        }
        self.usize("corpus.target_trials")?;
        self.usize("corpus.nontarget_trials")?;
        self.embedder_config(1)?.validate()?;
        self.loss_spec(2)?.validate()?;
        self.drop_config()?;
        self.probability_logits(2)?;
        let n = 2 + self.drop_config()?.count;
        self.train_config(n)?;
        self.adapt_config(n)?;
        let enrol = self.f64("train.enrol_fraction")?;
        if !(enrol > 0.0 && enrol <= 1.0) {
            return Err(Error::validation("train.enrol_fraction", "must lie in (0, 1]"));
        }
        self.usize("train.eval_every")?;
        if self.usize("eval.n_bootstrap")? == 0 {
            return Err(Error::validation("eval.n_bootstrap", "must be >= 1"));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.value("seed")
            .as_integer()
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| self.bad("seed", "a non-negative integer"))
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            n_speakers: self.usize("corpus.n_speakers")?,
            utts_per_speaker: self.usize("corpus.utts_per_speaker")?,
            frames_per_utt: self.usize("corpus.frames_per_utt")?,
            feat_dim: self.usize("corpus.feat_dim")?,
            speaker_spread: self.f64("corpus.speaker_spread")?,
            frame_noise: self.f64("corpus.frame_noise")?,
            skew_factor: self.f64("corpus.skew_factor")?,
            seed: self.seed()?,
        })
    }

    pub fn embedder_config(&self, feat_dim: usize) -> Result<EmbedderConfig> {
        Ok(EmbedderConfig {
            feat_dim,
            hidden: self.usize_list("model.hidden")?,
            embed_dim: self.usize("model.embed_dim")?,
            leaky_slope: self.f64("model.leaky_slope")?,
            eps_std: self.f64("model.eps_std")?,
        })
    }

    pub fn loss_spec(&self, n_classes: usize) -> Result<LossSpec> {
        let kind: LossKind = self.str("loss.kind")?.parse()?;
        let mut spec = LossSpec::default_for(kind, n_classes);
        if let Some(s) = self.opt_f64("loss.scale")? {
            spec.scale = s;
        }
        if let Some(m) = self.opt_f64("loss.margin")? {
            spec.margin = m;
        }
        spec.adacos_reset_on_refresh = self.bool("loss.adacos_reset_on_refresh")?;
        Ok(spec)
    }

    pub fn drop_config(&self) -> Result<DropConfig> {
        Ok(DropConfig {
            mode: self.str("drop.mode")?.parse()?,
            period: self.usize("drop.P")?,
            count: self.usize("drop.D")?,
        })
    }

    pub fn probability_logits(&self, n_classes: usize) -> Result<ProbabilityLogits> {
        match self.str("drop.probability_logits")? {
            "raw" => Ok(ProbabilityLogits::Raw),
            "scaled_cosine" => {
                let scale = match self.opt_f64("drop.probability_scale")? {
                    Some(s) => s,
                    None => self.loss_spec(n_classes)?.scale,
                };
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::validation("drop.probability_scale", "must be finite and > 0"));
                }
                Ok(ProbabilityLogits::ScaledCosine { scale })
            }
            other => Err(Error::validation(
                "drop.probability_logits",
                format!("expected raw or scaled_cosine, got `{other}`"),
            )),
        }
    }

    /// Training recipe for a head of `n_classes` rows.
    pub fn train_config(&self, n_classes: usize) -> Result<TrainConfig> {
        let iterations = self.usize("train.iterations")?;
        let lr_halving = if self.is_auto("train.lr_halving") {
            default_halvings(iterations)
        } else {
            self.usize_list("train.lr_halving")?
        };
        let config = TrainConfig {
            iterations,
            batch_size: self.usize("train.batch_size")?,
            frames_per_example: self.usize("train.frames_per_example")?,
            lr: self.f64("train.lr")?,
            momentum: self.f64("train.momentum")?,
            lr_halving,
            loss: self.loss_spec(n_classes)?,
            drop: self.drop_config()?,
            probability_logits: self.probability_logits(n_classes)?,
            seed: self.seed()?,
        };
        config.validate(n_classes)?;
        Ok(config)
    }

    /// Fine-tuning recipe: the training recipe with the adapt budget.
    pub fn adapt_config(&self, n_classes: usize) -> Result<TrainConfig> {
        let config = TrainConfig {
            iterations: self.usize("train.adapt_iterations")?,
            lr_halving: self.usize_list("train.adapt_lr_halving")?,
            ..self.train_config(n_classes)?
        };
        config.validate(n_classes)?;
        Ok(config)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dropclass",
    version,
    about = "Class-dropping training and adaptation of embedding extractors",
    after_help = keys_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, its split manifests and trials.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model from scratch (modes none and dropclass).
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a trained checkpoint (every mode except dropclass).
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Enrolment manifest [default: <data>/enrol.tsv].
        #[arg(long)]
        enrol: Option<PathBuf>,
    },
    /// Score trials with cosine similarity and report the EER.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest of the utterances to embed [default: <data>/test.tsv].
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Trial list [default: <data>/trials.tsv].
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Ranked class probabilities with bootstrap bands, and KL-to-uniform.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest of the utterances to diagnose [default: <data>/train.tsv].
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Bootstrap replicas; overrides eval.n_bootstrap.
        #[arg(long)]
        n_bootstrap: Option<usize>,
    },
}

type Overrides = Vec<(String, String)>;

/// Pulls `--section.key value`, `--section.key=value` and `--seed value`
/// out of the arguments; the rest goes to the argument parser.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(name) = arg.to_str().and_then(|s| s.strip_prefix("--")).map(str::to_string) else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match name.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (name.clone(), None),
        };
        if !(key.contains('.') || key == "seed") {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Runs the command line `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match dispatch(cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Honours `DCK_THREADS` for intra-step parallelism.
fn configure_threads() -> Result<()> {
    let Ok(text) = std::env::var("DCK_THREADS") else {
        return Ok(());
    };
    let n: usize = text
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("DCK_THREADS must be a positive integer, got `{text}`")))?;
    // A pool may already exist when several commands run in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<()> {
    let load = |common: &Common| -> Result<RunConfig> {
        if let Some(p) = &common.config {
            require_file(p)?;
        }
        RunConfig::load(common.config.as_deref(), overrides)
    };
    match command {
        Command::GenData { common } => {
            let config = load(&common)?;
            cmd_gen_data(&config, &common.out)
        }
        Command::Train { common, data } => {
            let config = load(&common)?;
            cmd_train(&config, &data, &common.out)
        }
        Command::Adapt {
            common,
            checkpoint,
            data,
            enrol,
        } => {
            let config = load(&common)?;
            cmd_adapt(&config, &checkpoint, &data, enrol.as_deref(), &common.out)
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            manifest,
            trials,
        } => {
            let config = load(&common)?;
            let manifest = manifest.unwrap_or_else(|| data.join(TEST_MANIFEST));
            let trials = trials.unwrap_or_else(|| data.join(TRIALS_FILE));
            cmd_evaluate(&config, &checkpoint, &data, &manifest, &trials, &common.out)
        }
        Command::Diagnose {
            common,
            checkpoint,
            data,
            manifest,
            n_bootstrap,
        } => {
            let config = load(&common)?;
            let manifest = manifest.unwrap_or_else(|| data.join(TRAIN_MANIFEST));
            let n = match n_bootstrap {
                Some(n) => n,
                None => config.usize("eval.n_bootstrap")?,
            };
            cmd_diagnose(&config, &checkpoint, &data, &manifest, n, &common.out)
        }
    }
}

pub const CORPUS_FILE: &str = "corpus.dck";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const ENROL_MANIFEST: &str = "enrol.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";
pub const TRIALS_FILE: &str = "trials.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.dckm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REFRESH_FILE: &str = "refresh.tsv";
pub const PROBABILITY_FILE: &str = "p_average.csv";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const SCORES_FILE: &str = "scores.tsv";
pub const EER_FILE: &str = "eer.json";
pub const RANKED_FILE: &str = "ranked.csv";
pub const KL_FILE: &str = "kl.json";

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("cannot serialise JSON: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// The utterances a manifest selects from the corpus in `data`.
pub fn load_split(data: &Path, manifest: &Path) -> Result<LabeledCorpus> {
    let corpus = read_corpus(data.join(CORPUS_FILE))?;
    select_from_manifest(&corpus, &read_manifest(manifest)?)
}

pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let spec = config.corpus_spec()?;
    let seed = config.seed()?;
    let corpus = generate_corpus(&spec)?;
    let split = split_corpus(&corpus, config.f64("corpus.train_class_fraction")?, seed)?;
    let trials = make_trials(
        &split.test,
        config.usize("corpus.target_trials")?,
        config.usize("corpus.nontarget_trials")?,
        seed,
    )?;
    create_out(out)?;
    let parts = [&split.train, &split.enrol, &split.test];
    write_corpus(&LabeledCorpus::merged(&parts), out.join(CORPUS_FILE))?;
    write_manifest(&parts, out.join(MANIFEST_FILE))?;
    write_manifest(&[&split.train], out.join(TRAIN_MANIFEST))?;
    write_manifest(&[&split.enrol], out.join(ENROL_MANIFEST))?;
    write_manifest(&[&split.test], out.join(TEST_MANIFEST))?;
    write_trials(&trials, out.join(TRIALS_FILE))?;
    write_atomic(&out.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    log::info!(
        "{} utterances: {} train / {} enrol / {} test, {} trials",
        corpus.len(),
        split.train.len(),
        split.enrol.len(),
        split.test.len(),
        trials.trials.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SourceCheckpoint {
    path: String,
    sha256: String,
    iterations: u64,
    lr: f64,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    mode: String,
    config: &'a BTreeMap<String, toml::Value>,
    source_checkpoint: Option<SourceCheckpoint>,
    iterations_run: usize,
    total_iterations: u64,
    final_lr: f64,
    head_rows: usize,
    /// True when every class row still takes part (none, dropclass,
    /// drop_only_data).
    head_full_size: bool,
    active_classes: &'a [usize],
    refreshes: usize,
    final_kl_full: Option<f64>,
    final_kl_active: Option<f64>,
    aborted: Option<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes checkpoint, metrics, refresh records and run manifest; a numeric
/// abort is reported after its last-good checkpoint is on disk.
fn write_run(
    command: &str,
    config: &RunConfig,
    outcome: RunOutcome,
    mode: DropMode,
    source: Option<SourceCheckpoint>,
    out: &Path,
) -> Result<()> {
    create_out(out)?;
    outcome.model.write(out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(METRICS_FILE), outcome.log.to_csv().as_bytes())?;
    write_atomic(&out.join(REFRESH_FILE), outcome.log.refresh_records().as_bytes())?;
    write_atomic(
        &out.join(PROBABILITY_FILE),
        outcome.log.probability_records().as_bytes(),
    )?;
    let head_rows = if mode.masks_head() {
        outcome.model.head_rows().len()
    } else {
        outcome.model.n_classes()
    };
    let manifest = RunManifest {
        command,
        seed: config.seed()?,
        mode: mode.to_string(),
        config: config.values(),
        source_checkpoint: source,
        iterations_run: outcome.log.rows.len(),
        total_iterations: outcome.model.iterations,
        final_lr: outcome.model.lr,
        head_rows,
        head_full_size: head_rows == outcome.model.n_classes(),
        active_classes: &outcome.model.active,
        refreshes: outcome.log.refreshes.len(),
        final_kl_full: outcome.final_kl_full,
        final_kl_active: outcome.final_kl_active,
        aborted: outcome.aborted.as_ref().map(ToString::to_string),
    };
    write_json(&out.join(RUN_MANIFEST_FILE), &manifest)?;
    match outcome.aborted {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn validation_inputs(config: &RunConfig, data: &Path) -> Result<Option<(LabeledCorpus, crate::corpus::TrialList)>> {
    if config.usize("train.eval_every")? == 0 {
        return Ok(None);
    }
    require_file(&data.join(TEST_MANIFEST))?;
    require_file(&data.join(TRIALS_FILE))?;
    Ok(Some((
        load_split(data, &data.join(TEST_MANIFEST))?,
        read_trials(data.join(TRIALS_FILE))?,
    )))
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let mode = config.drop_config()?.mode;
    if !matches!(mode, DropMode::None | DropMode::DropClass) {
        return Err(Error::validation(
            "drop.mode",
            format!("{mode} is an adaptation mode; use adapt"),
        ));
    }
    require_file(&data.join(CORPUS_FILE))?;
    require_file(&data.join(TRAIN_MANIFEST))?;
    let train = load_split(data, &data.join(TRAIN_MANIFEST))?;
    let n_classes = train.n_classes;
    let train_config = config.train_config(n_classes)?;
    let feat_dim = train
        .feat_dim()
        .ok_or_else(|| Error::EmptyData("training manifest selects no utterances".into()))?;
    let validation = validation_inputs(config, data)?;
    let model = Model::init(
        config.embedder_config(feat_dim)?,
        n_classes,
        train_config.lr,
        config.seed()?,
    )?;
    let every = config.usize("train.eval_every")?;
    let outcome = trainer::train(
        &train_config,
        model,
        &train,
        &[],
        validation
            .as_ref()
            .map(|(test, trials)| Validation { test, trials, every }),
    )?;
    write_run("train", config, outcome, mode, None, out)
}

pub fn cmd_adapt(config: &RunConfig, checkpoint: &Path, data: &Path, enrol: Option<&Path>, out: &Path) -> Result<()> {
    let mode = config.drop_config()?.mode;
    if mode == DropMode::DropClass {
        return Err(Error::validation(
            "drop.mode",
            "dropclass is a training mode; use train",
        ));
    }
    require_file(checkpoint)?;
    require_file(&data.join(CORPUS_FILE))?;
    require_file(&data.join(TRAIN_MANIFEST))?;
    let enrol_path = match enrol {
        Some(p) => {
            require_file(p)?;
            Some(p.to_path_buf())
        }
        None => Some(data.join(ENROL_MANIFEST)).filter(|p| p.is_file()),
    };
    if mode.needs_enrolment() && enrol_path.is_none() {
        return Err(Error::validation(
            "enrol",
            format!("{mode} needs an enrolment manifest (--enrol)"),
        ));
    }
    let source_bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let model = Model::decode(&source_bytes)?;
    let train = load_split(data, &data.join(TRAIN_MANIFEST))?;
    let enrol_corpus = enrol_path.map(|p| load_split(data, &p)).transpose()?;
    let enrol_all: Vec<&Utterance> = enrol_corpus.iter().flat_map(|c| c.utterances.iter()).collect();
    let enrol_used = if enrol_all.is_empty() {
        if mode.needs_enrolment() {
            return Err(Error::EmptyData(format!("{mode} needs enrolment utterances")));
        }
        Vec::new()
    } else {
        sample_enrolment(&enrol_all, config.f64("train.enrol_fraction")?, config.seed()?)?
    };
    let adapt_config = config.adapt_config(model.n_classes())?;
    let validation = validation_inputs(config, data)?;
    let every = config.usize("train.eval_every")?;
    let source = SourceCheckpoint {
        path: checkpoint.display().to_string(),
        sha256: sha256_hex(&source_bytes),
        iterations: model.iterations,
        lr: model.lr,
    };
    let outcome = trainer::adapt(
        &adapt_config,
        model,
        &train,
        &enrol_used,
        validation
            .as_ref()
            .map(|(test, trials)| Validation { test, trials, every }),
    )?;
    write_run("adapt", config, outcome, mode, Some(source), out)
}

pub fn cmd_evaluate(
    _config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    manifest: &Path,
    trials: &Path,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    require_file(&data.join(CORPUS_FILE))?;
    require_file(manifest)?;
    require_file(trials)?;
    let model = Model::read(checkpoint)?;
    let test = load_split(data, manifest)?;
    let trials = read_trials(trials)?;
    trials.validate_against(&test)?;
    let utts: Vec<&Utterance> = test.utterances.iter().collect();
    let embeddings = extract_all(&model.embedder, &utts)?;
    let scored = score_trials(&embeddings, &trials)?;
    let result = eer(&scored)?;
    if result.degenerate {
        log::warn!("all trial scores are equal; the EER is degenerate");
    }
    create_out(out)?;
    write_atomic(&out.join(SCORES_FILE), format_scores(&trials, &scored).as_bytes())?;
    write_json(&out.join(EER_FILE), &EerReport::new(&result, &scored))?;
    log::info!("EER {:.4} at threshold {:.4}", result.eer, result.threshold);
    Ok(())
}

#[derive(Serialize)]
struct KlReport {
    kl_to_uniform: f64,
}

pub fn cmd_diagnose(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    manifest: &Path,
    n_bootstrap: usize,
    out: &Path,
) -> Result<()> {
    require_file(checkpoint)?;
    require_file(&data.join(CORPUS_FILE))?;
    require_file(manifest)?;
    let model = Model::read(checkpoint)?;
    let corpus = load_split(data, manifest)?;
    let logits = config.probability_logits(model.n_classes())?;
    let weight = model.head.weight.view();
    let report = bootstrap_ranked_probabilities(&model.embedder, weight, &corpus, n_bootstrap, config.seed()?, logits)?;
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let p = p_average(&model.embedder, weight, &utts, logits)?;
    let kl = kl_to_uniform(p.as_slice().expect("contiguous"));
    create_out(out)?;
    write_atomic(&out.join(RANKED_FILE), report.to_csv().as_bytes())?;
    write_json(&out.join(KL_FILE), &KlReport { kl_to_uniform: kl })?;
    log::info!("KL-to-uniform {kl:.6} nats over {} utterances", utts.len());
    Ok(())
}
