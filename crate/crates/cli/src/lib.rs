//! Command-line front end for the habitat classification pipeline.
//!
//! Every subcommand writes its artifacts plus a `run_config.json` into its
//! output directory; `habclass --config <run_config.json>` replays a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
pub mod plot;

pub use commands::resolve_train_config;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const RUN_CONFIG_VERSION: u32 = 1;
/// Artifacts that record wall-clock measurements and so differ between runs.
pub const NONDETERMINISTIC_ARTIFACTS: &[&str] = &["timing.json"];

#[derive(Parser, Debug)]
#[command(
    name = "habclass",
    version,
    about = "Habitat classification from ground-level imagery",
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    /// Replay a persisted run configuration instead of running a subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for a replay (defaults to the recorded one).
    #[arg(long, requires = "config")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(tag = "command", content = "params", rename_all = "kebab-case")]
pub enum Command {
    /// Stratified train/val/test split of a manifest.
    Split(SplitArgs),
    /// Generate a synthetic toy dataset.
    Toydata(ToyArgs),
    /// Train a classifier (supervised or two-stage contrastive).
    Train(TrainArgs),
    /// Metrics report from a predictions file or a checkpoint.
    Eval(EvalArgs),
    /// Confusion matrix (counts and per-true-class) with heatmap.
    Cm(CmArgs),
    /// Signed difference of two confusion matrices.
    CmDelta(CmDeltaArgs),
    /// Export encoder embeddings for one split.
    Embed(EmbedArgs),
    /// Calinski-Harabasz and Davies-Bouldin indices, overall and per group.
    ClusterQuality(ClusterArgs),
    /// GradCAM overlays for records of one split.
    Gradcam(GradcamArgs),
    /// Draw the stratified review subset for the annotation benchmark.
    ExpertSubset(ExpertSubsetArgs),
    /// Score annotators (and optionally a model) on the review subset.
    ExpertScore(ExpertScoreArgs),
    /// Pairwise top-1 agreement between participants.
    Agree(AgreeArgs),
    /// Check a persisted run configuration and list every problem.
    Validate(ValidateArgs),
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.75)]
    pub train: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_of_train: f64,
    #[arg(long, default_value_t = 0.25)]
    pub test: f64,
    #[arg(long, default_value_t = 4)]
    pub min_test_count: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
    /// `separable` or `confusable-pair`.
    #[arg(long, default_value = "separable")]
    pub difficulty: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image root (defaults to the manifest's directory).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// `supervised` or `supcon`.
    #[arg(long, default_value = "supervised")]
    pub paradigm: String,
    /// `toy` or `full`; explicit flags override preset values.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub probe_lr: Option<f64>,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    #[arg(long)]
    pub projection_dim: Option<usize>,
    #[arg(long)]
    pub projection_hidden: Option<usize>,
    #[arg(long)]
    pub resize: Option<u32>,
    #[arg(long)]
    pub crop: Option<u32>,
    #[arg(long)]
    pub rotation: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: u32,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EvalArgs {
    /// Existing predictions file; otherwise `--checkpoint` is run.
    #[arg(long, required_unless_present = "checkpoint")]
    pub predictions: Option<PathBuf>,
    #[arg(long, conflicts_with = "predictions", requires_all = ["manifest", "split"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// `l3`, or `l2` to aggregate predictions to coarse groups.
    #[arg(long, default_value = "l3")]
    pub level: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CmArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value = "l3")]
    pub level: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CmDeltaArgs {
    /// Matrix CSV written by `cm` (typically `cm_normalized.csv`).
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Restrict to one split of this assignment.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Explicit sample ids (comma separated); overrides `--limit`.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
    /// `predicted`, `truth`, or an L3 code.
    #[arg(long, default_value = "predicted")]
    pub target: String,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ExpertSubsetArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ExpertScoreArgs {
    /// Review subset manifest written by `expert-subset`.
    #[arg(long)]
    pub subset: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub annotations: Vec<PathBuf>,
    /// Model predictions to score as an extra participant.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct AgreeArgs {
    /// Review subset; model predictions are restricted to it.
    #[arg(long)]
    pub subset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub annotations: Vec<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ValidateArgs {
    /// A `run_config.json`.
    pub config: PathBuf,
}

impl Command {
    pub fn name(&self) -> String {
        serde_json::to_value(self).expect("command serializes")["command"]
            .as_str()
            .expect("tagged")
            .to_string()
    }

    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        Some(match self {
            Command::Split(a) => &mut a.out,
            Command::Toydata(a) => &mut a.out,
            Command::Train(a) => &mut a.out,
            Command::Eval(a) => &mut a.out,
            Command::Cm(a) => &mut a.out,
            Command::CmDelta(a) => &mut a.out,
            Command::Embed(a) => &mut a.out,
            Command::ClusterQuality(a) => &mut a.out,
            Command::Gradcam(a) => &mut a.out,
            Command::ExpertSubset(a) => &mut a.out,
            Command::ExpertScore(a) => &mut a.out,
            Command::Agree(a) => &mut a.out,
            Command::Validate(_) => return None,
        })
    }

    pub fn out(&self) -> Option<&Path> {
        Some(match self {
            Command::Split(a) => &a.out,
            Command::Toydata(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Cm(a) => &a.out,
            Command::CmDelta(a) => &a.out,
            Command::Embed(a) => &a.out,
            Command::ClusterQuality(a) => &a.out,
            Command::Gradcam(a) => &a.out,
            Command::ExpertSubset(a) => &a.out,
            Command::ExpertScore(a) => &a.out,
            Command::Agree(a) => &a.out,
            Command::Validate(_) => return None,
        })
    }

    /// Fills every preset-dependent default so the persisted parameters
    /// are explicit.
    pub fn resolved(&self) -> Result<Command> {
        Ok(match self {
            Command::Train(a) => Command::Train(commands::resolve_train_args(a)?),
            other => other.clone(),
        })
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub params: serde_json::Value,
}

impl RunConfig {
    pub fn from_command(command: &Command) -> Result<Self> {
        let out_dir = command
            .out()
            .context("this subcommand does not produce a run configuration")?
            .to_path_buf();
        let value = serde_json::to_value(command.resolved()?)?;
        let params = value["params"].clone();
        Ok(RunConfig {
            format_version: RUN_CONFIG_VERSION,
            command: command.name(),
            seed: params.get("seed").and_then(|s| s.as_u64()),
            out_dir,
            params,
        })
    }

    /// The command this configuration describes, writing to `out` (or the
    /// recorded directory).
    pub fn to_command(&self, out: Option<&Path>) -> Result<Command> {
        if self.format_version != RUN_CONFIG_VERSION {
            bail!("unsupported run configuration version {}", self.format_version);
        }
        let mut params = self.params.clone();
        if let (Some(seed), Some(map)) = (self.seed, params.as_object_mut()) {
            map.insert("seed".into(), seed.into());
        }
        let tagged = serde_json::json!({ "command": self.command, "params": params });
        let mut command: Command =
            serde_json::from_value(tagged).with_context(|| format!("invalid parameters for `{}`", self.command))?;
        let target = out.map(Path::to_path_buf).unwrap_or_else(|| self.out_dir.clone());
        match command.out_mut() {
            Some(o) => *o = target,
            None => bail!("`{}` cannot be replayed", self.command),
        }
        Ok(command)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Every problem with a run configuration, reported together. Empty means
/// the configuration is usable.
pub fn validate_config(config: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    if config.format_version != RUN_CONFIG_VERSION {
        out.push(format!("unsupported format_version {}", config.format_version));
    }
    let command = match config.to_command(None) {
        Ok(c) => c,
        Err(e) => {
            out.push(format!("{e:#}"));
            return out;
        }
    };
    out.extend(commands::diagnostics(&command));
    out
}

/// Runs one command: creates the output directory, records the run
/// configuration, then produces the artifacts.
pub fn execute(command: &Command) -> Result<()> {
    if let Command::Validate(a) = command {
        let config = RunConfig::read(&a.config)?;
        let problems = validate_config(&config);
        if problems.is_empty() {
            println!("ok");
            return Ok(());
        }
        for p in &problems {
            println!("{p}");
        }
        bail!("{} problem(s) in {}", problems.len(), a.config.display());
    }
    let problems = commands::diagnostics(command);
    if !problems.is_empty() {
        bail!("{}", problems.join("; "));
    }
    let config = RunConfig::from_command(command)?;
    let out = config.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RUN_CONFIG_FILE), config.to_json())
        .with_context(|| format!("writing run configuration to {}", out.display()))?;
    commands::dispatch(&command.resolved()?, &out)
}

pub fn run(cli: Cli) -> Result<()> {
    match (cli.config, cli.command) {
        (Some(path), None) => {
            let config = RunConfig::read(&path)?;
            execute(&config.to_command(cli.out.as_deref())?)
        }
        (None, Some(command)) => execute(&command),
        _ => bail!("give a subcommand or --config <run_config.json>"),
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run(Cli::try_parse_from(args)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_is_mandatory_for_stochastic_commands() {
        for args in [
            vec!["habclass", "split", "--manifest", "m.csv", "--out", "o"],
            vec!["habclass", "toydata", "--out", "o"],
            vec!["habclass", "train", "--manifest", "m", "--split", "s", "--out", "o"],
            vec![
                "habclass",
                "expert-subset",
                "--manifest",
                "m",
                "--split",
                "s",
                "--out",
                "o",
            ],
        ] {
            let err = Cli::try_parse_from(&args).unwrap_err();
            assert!(err.to_string().contains("--seed"), "{args:?}: {err}");
        }
    }

    #[test]
    fn run_config_round_trips_and_resolves_presets() {
        let cli = Cli::try_parse_from([
            "habclass",
            "train",
            "--manifest",
            "m.csv",
            "--split",
            "s.csv",
            "--seed",
            "3",
            "--epochs",
            "2",
            "--out",
            "o",
        ])
        .unwrap();
        let command = cli.command.unwrap();
        let config = RunConfig::from_command(&command).unwrap();
        assert_eq!(config.seed, Some(3));
        assert_eq!(config.params["epochs"], 2);
        assert_eq!(config.params["lr"], 1e-3);
        assert_eq!(config.params["crop"], 56);
        let back = config.to_command(None).unwrap();
        assert_eq!(back, command.resolved().unwrap());
        assert_eq!(back.out(), Some(Path::new("o")));
        let moved = config.to_command(Some(Path::new("elsewhere"))).unwrap();
        assert_eq!(moved.out(), Some(Path::new("elsewhere")));
    }

    #[test]
    fn validation_reports_every_problem() {
        let config = RunConfig {
            format_version: RUN_CONFIG_VERSION,
            command: "train".into(),
            seed: Some(1),
            out_dir: "o".into(),
            params: serde_json::json!({
                "manifest": "m", "split": "s", "paradigm": "supcon", "preset": "toy",
                "lr": -1.0, "batch_size": 1, "temperature": 0.0, "crop": 80, "resize": 64,
                "embed_dim": 32, "patch_size": 8, "depth": 2, "images": null, "taxonomy": null,
                "epochs": null, "weight_decay": null, "probe_lr": null, "probe_epochs": null,
                "projection_dim": null, "projection_hidden": null, "rotation": null
            }),
        };
        let problems = validate_config(&config);
        assert!(problems.len() >= 4, "{problems:?}");
        let missing_seed = RunConfig {
            seed: None,
            params: serde_json::json!({"manifest": "m"}),
            ..config
        };
        let problems = validate_config(&missing_seed);
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("invalid parameters"), "{problems:?}");
    }
}
