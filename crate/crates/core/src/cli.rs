//! Command-line front end: one subcommand per pipeline stage, a layered
//! TOML configuration and a run manifest in every output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::DiversityReport;
use crate::dataset::{generate_benchmark, generate_pretext_dataset, load_dataset, save_dataset, BenchmarkConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    dataset_ground_truth, predict_dataset, read_ground_truth, read_predictions, write_ground_truth, write_predictions,
    EvalProtocol, EvalReport, ThresholdSet,
};
use crate::featbank::{generate_bank, load_bank, save_bank, write_file, BankConfig};
use crate::nn::checkpoint::{load_attention_dump, save_attention_dump};
use crate::nn::{ModelConfig, Profile};
use crate::study::median;
use crate::synthesis::SynthesisParams;
use crate::trainer::{finetune, load_model, pretrain, FinetuneInit, RunOptions, TrainConfig, CHECKPOINT_DIR};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: ThresholdSet,
    /// Detections kept per video.
    pub top_k: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: ThresholdSet::AnetStyle,
            top_k: 100,
            batch_size: 16,
        }
    }
}

/// Every tunable of the pipeline. Files and `--set` overrides are merged
/// onto the defaults of the chosen profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub bank: BankConfig,
    /// Pre-training synthesis.
    pub synthesis: SynthesisParams,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn defaults(profile: Profile) -> Self {
        let bank = BankConfig::default();
        let benchmark = BenchmarkConfig::default();
        Self {
            profile,
            model: ModelConfig::for_profile(profile, bank.feature_dim, 32),
            synthesis: SynthesisParams {
                categories: Some(benchmark.background_categories),
                ..SynthesisParams::default()
            },
            bank,
            benchmark,
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }

    /// Defaults, then the file, then `key=value` overrides in order.
    pub fn resolve(profile: Profile, file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = toml::Table::try_from(Self::defaults(profile))
            .map_err(|e| Error::Config(format!("defaults do not serialize: {e}")))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let user: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if user.contains_key("profile") {
                return Err(Error::Config(format!("{}: choose the profile with --profile", path.display())));
            }
            merge(&mut tree, user);
        }
        for s in sets {
            apply_set(&mut tree, s)?;
        }
        let cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.pretrain.validate()?;
        cfg.finetune.validate()?;
        cfg.bank.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("bank".to_string(), self.bank.seed),
            ("synthesis".to_string(), self.synthesis.seed),
            ("benchmark".to_string(), self.benchmark.seed),
            ("pretrain".to_string(), self.pretrain.seed),
            ("finetune".to_string(), self.finetune.seed),
        ])
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets a dotted key in `tree`; unknown leaves are rejected when the tree is
/// deserialized. The value is read as a TOML literal, or as a bare string
/// when it is not one.
fn apply_set(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {assignment}: expected KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for p in path {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("--set: unknown key {key}"))),
        };
    }
    node.insert((*last).to_string(), value);
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "ltp", version, about = "Long-term pre-training for temporal action detection on synthetic features")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML file merged over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of the command's primary random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data generation; 1 is the reference setting.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Override a config key, e.g. `--set pretrain.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic clip feature bank.
    GenBank,
    /// Synthesize a pre-training dataset from a bank.
    Synth {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Generate the downstream train/test benchmark from a bank.
    GenBenchmark {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Pre-train on freshly synthesized sequences.
    Pretrain {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune on a downstream dataset.
    Finetune {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Pre-training run or checkpoint directory to warm-start from.
        #[arg(long, required_unless_present = "scratch", conflicts_with = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Train from a fresh initialization instead.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset, or a predictions file.
    Eval {
        #[arg(long, requires = "dataset", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "ground_truth")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Option<ThresholdSet>,
    },
    /// Per-layer attention diversity of a checkpoint on a dataset.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Merge evaluation runs into one comparison table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Re-execute a run from its manifest.
    Replay { manifest: PathBuf },
}

/// A fully resolved command, as stored in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenBank,
    Synth {
        bank: PathBuf,
        count: usize,
    },
    GenBenchmark {
        bank: PathBuf,
    },
    Pretrain {
        bank: PathBuf,
        resume: bool,
    },
    Finetune {
        train: PathBuf,
        val: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        resume: bool,
    },
    Eval {
        checkpoint: Option<PathBuf>,
        dataset: Option<PathBuf>,
        predictions: Option<PathBuf>,
        ground_truth: Option<PathBuf>,
    },
    Analyze {
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    Report {
        runs: Vec<PathBuf>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenBank => "gen-bank",
            Invocation::Synth { .. } => "synth",
            Invocation::GenBenchmark { .. } => "gen-benchmark",
            Invocation::Pretrain { .. } => "pretrain",
            Invocation::Finetune { .. } => "finetune",
            Invocation::Eval { .. } => "eval",
            Invocation::Analyze { .. } => "analyze",
            Invocation::Report { .. } => "report",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        match self {
            Invocation::GenBank => {}
            Invocation::Synth { bank, .. } | Invocation::GenBenchmark { bank } | Invocation::Pretrain { bank, .. } => {
                v.push(bank)
            }
            Invocation::Finetune { train, val, checkpoint, .. } => {
                v.push(train);
                v.extend(val.as_deref());
                v.extend(checkpoint.as_deref());
            }
            Invocation::Eval {
                checkpoint,
                dataset,
                predictions,
                ground_truth,
            } => {
                for p in [checkpoint, dataset, predictions, ground_truth].into_iter().flatten() {
                    v.push(p);
                }
            }
            Invocation::Analyze { checkpoint, dataset } => {
                v.push(checkpoint);
                v.push(dataset);
            }
            Invocation::Report { runs } => v.extend(runs.iter().map(PathBuf::as_path)),
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub invocation: Invocation,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub tool_version: String,
    /// Absent until the command finishes.
    pub wall_clock_seconds: Option<f64>,
}

/// Writes `run_manifest.json` into `dir` through a temporary file.
pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let tmp = dir.join(format!("{RUN_MANIFEST}.partial"));
    let json = serde_json::to_vec_pretty(m).expect("manifest serializes");
    write_file(&tmp, &json)?;
    let dst = dir.join(RUN_MANIFEST);
    fs::rename(&tmp, &dst).map_err(|e| Error::io(dst, e))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let path = if path.is_dir() { path.join(RUN_MANIFEST) } else { path.to_path_buf() };
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&text).map_err(|e| {
        let off = crate::featbank::json_error_offset(&text, &e);
        Error::format(&path, off, e.to_string())
    })
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// A run directory's checkpoint, or the path itself when it is one.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let inner = p.join(CHECKPOINT_DIR);
    if inner.is_dir() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn resolve(cli: &Cli) -> Result<(Invocation, PipelineConfig)> {
    let g = &cli.global;
    let mut cfg = PipelineConfig::resolve(g.profile.unwrap_or(Profile::Desk), g.config.as_deref(), &g.set)?;
    let inv = match &cli.command {
        Command::GenBank => {
            if let Some(s) = g.seed {
                cfg.bank.seed = s;
            }
            Invocation::GenBank
        }
        Command::Synth { bank, count } => {
            if let Some(s) = g.seed {
                cfg.synthesis.seed = s;
            }
            Invocation::Synth {
                bank: absolute(bank),
                count: *count,
            }
        }
        Command::GenBenchmark { bank } => {
            if let Some(s) = g.seed {
                cfg.benchmark.seed = s;
            }
            Invocation::GenBenchmark { bank: absolute(bank) }
        }
        Command::Pretrain { bank, resume } => {
            if let Some(s) = g.seed {
                cfg.pretrain.seed = s;
            }
            Invocation::Pretrain {
                bank: absolute(bank),
                resume: *resume,
            }
        }
        Command::Finetune {
            train,
            val,
            checkpoint,
            scratch,
            train_fraction,
            resume,
        } => {
            if let Some(s) = g.seed {
                cfg.finetune.seed = s;
            }
            if let Some(f) = train_fraction {
                cfg.finetune.train_fraction = *f;
            }
            cfg.finetune.validate()?;
            Invocation::Finetune {
                train: absolute(train),
                val: val.as_deref().map(absolute),
                checkpoint: if *scratch { None } else { checkpoint.as_deref().map(absolute) },
                resume: *resume,
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            predictions,
            ground_truth,
            protocol,
        } => {
            if let Some(p) = protocol {
                cfg.eval.protocol = *p;
            }
            if checkpoint.is_none() && predictions.is_none() {
                return Err(Error::Usage("eval needs --checkpoint and --dataset, or --predictions and --ground-truth".into()));
            }
            Invocation::Eval {
                checkpoint: checkpoint.as_deref().map(absolute),
                dataset: dataset.as_deref().map(absolute),
                predictions: predictions.as_deref().map(absolute),
                ground_truth: ground_truth.as_deref().map(absolute),
            }
        }
        Command::Analyze { checkpoint, dataset } => Invocation::Analyze {
            checkpoint: absolute(checkpoint),
            dataset: absolute(dataset),
        },
        Command::Report { runs } => Invocation::Report {
            runs: runs.iter().map(|r| absolute(r)).collect(),
        },
        Command::Replay { .. } => unreachable!("replay is handled before resolution"),
    };
    Ok((inv, cfg))
}

/// Runs `inv` into `out`, bracketed by the run manifest.
pub fn execute(inv: &Invocation, cfg: &PipelineConfig, out: &Path, threads: Option<usize>) -> Result<()> {
    for input in inv.inputs() {
        if !input.exists() {
            return Err(Error::Usage(format!("input {} does not exist", input.display())));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let out = absolute(out);
    if inv.inputs().iter().any(|i| absolute(i) == out) {
        return Err(Error::Usage("output directory must differ from the inputs".into()));
    }
    let mut manifest = RunManifest {
        invocation: inv.clone(),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        inputs: inv.inputs().into_iter().map(Path::to_path_buf).collect(),
        out: out.clone(),
        threads,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: None,
    };
    write_manifest(&out, &manifest)?;
    let start = Instant::now();
    let prefetch = threads != Some(1);
    run(inv, cfg, &out, prefetch)?;
    manifest.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    write_manifest(&out, &manifest)
}

fn run(inv: &Invocation, cfg: &PipelineConfig, out: &Path, prefetch: bool) -> Result<()> {
    match inv {
        Invocation::GenBank => save_bank(&generate_bank(&cfg.bank)?, out),
        Invocation::Synth { bank, count } => {
            let bank = load_bank(bank)?;
            let ds = generate_pretext_dataset(&bank, &cfg.synthesis, *count, cfg.pretrain.p_cond, cfg.pretrain.allow_joint)?;
            save_dataset(&ds, out)
        }
        Invocation::GenBenchmark { bank } => {
            let bank = load_bank(bank)?;
            let (train, test) = generate_benchmark(&bank, &cfg.benchmark)?;
            save_dataset(&train, &out.join("train"))?;
            save_dataset(&test, &out.join("test"))
        }
        Invocation::Pretrain { bank, resume } => {
            let bank = load_bank(bank)?;
            let opts = RunOptions {
                out: Some(out.to_path_buf()),
                resume: *resume,
                stop_after: None,
                prefetch,
            };
            pretrain(&bank, &cfg.synthesis, &cfg.model, &cfg.pretrain, &opts).map(|_| ())
        }
        Invocation::Finetune {
            train,
            val,
            checkpoint,
            resume,
        } => {
            let train = load_dataset(train)?;
            let val = val.as_deref().map(load_dataset).transpose()?;
            let pre = checkpoint.as_deref().map(|c| load_model(&checkpoint_dir(c))).transpose()?;
            let init = match &pre {
                Some(m) => FinetuneInit::Pretrained(m),
                None => FinetuneInit::Scratch(&cfg.model),
            };
            let opts = RunOptions {
                out: Some(out.to_path_buf()),
                resume: *resume,
                stop_after: None,
                prefetch,
            };
            let res = finetune(init, &train, val.as_ref(), &cfg.finetune, &opts)?;
            let summary = serde_json::json!({
                "train_fraction": cfg.finetune.train_fraction,
                "train_videos": train.len(),
                "subset_size": crate::trainer::data_fraction_split(train.len(), cfg.finetune.train_fraction, cfg.finetune.seed)?.len(),
                "warm_start": checkpoint.is_some(),
                "epoch_losses": res.epoch_losses,
                "val_losses": res.val_losses,
            });
            write_file(&out.join("finetune.json"), &serde_json::to_vec_pretty(&summary).expect("summary serializes"))
        }
        Invocation::Eval {
            checkpoint,
            dataset,
            predictions,
            ground_truth,
        } => {
            let protocol = EvalProtocol::of(cfg.eval.protocol);
            let (preds, gts) = match (checkpoint, dataset, predictions, ground_truth) {
                (Some(c), Some(d), _, _) => {
                    let model = load_model(&checkpoint_dir(c))?;
                    let ds = load_dataset(d)?;
                    let preds = predict_dataset(&model, &ds, cfg.eval.batch_size, cfg.eval.top_k)?;
                    (preds, dataset_ground_truth(&ds))
                }
                (_, _, Some(p), Some(g)) => (read_predictions(p)?, read_ground_truth(g)?),
                _ => return Err(Error::Usage("eval inputs are incomplete".into())),
            };
            write_predictions(&out.join("predictions.jsonl"), &preds)?;
            write_ground_truth(&out.join("ground_truth.jsonl"), &gts)?;
            EvalReport::compute(&preds, &gts, &protocol)?.save(out)
        }
        Invocation::Analyze { checkpoint, dataset } => {
            let model = load_model(&checkpoint_dir(checkpoint))?;
            let ds = load_dataset(dataset)?;
            let maps = crate::analysis::capture_attention(&model, &ds, cfg.eval.batch_size, || {
                crate::nn::Graph::new().with_capture()
            })?;
            let dump = out.join("attention");
            save_attention_dump(&dump, &maps)?;
            DiversityReport::from_maps(&load_attention_dump(&dump)?).save(out)
        }
        Invocation::Report { runs } => report(runs, out),
    }
}

/// One evaluation run in a merged report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub protocol: ThresholdSet,
    /// `ltp`, `scratch`, or `unknown` when the checkpoint has no manifest.
    pub init: String,
    pub train_fraction: Option<f64>,
    pub points: Vec<(f64, f64)>,
    pub average_map: f64,
}

/// Reads evaluation run directories and writes `report.csv` and
/// `report.json`, sorted by training fraction then run id.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("eval.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rep: EvalReport = serde_json::from_slice(&text)
            .map_err(|e| Error::format(&path, crate::featbank::json_error_offset(&text, &e), e.to_string()))?;
        let m = read_manifest(dir)?;
        let origin = match &m.invocation {
            Invocation::Eval { checkpoint: Some(c), .. } => {
                let run = if c.ends_with(CHECKPOINT_DIR) { c.parent().unwrap_or(c) } else { c.as_path() };
                read_manifest(run).ok()
            }
            _ => None,
        };
        let (init, fraction) = match origin.as_ref().map(|o| (&o.invocation, &o.config)) {
            Some((Invocation::Finetune { checkpoint, .. }, c)) => (
                if checkpoint.is_some() { "ltp" } else { "scratch" },
                Some(c.finetune.train_fraction),
            ),
            _ => ("unknown", None),
        };
        let run_id = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push(ReportRow {
            run_id,
            protocol: rep.protocol.threshold_set,
            init: init.to_string(),
            train_fraction: fraction,
            points: rep
                .protocol
                .report_points
                .iter()
                .filter_map(|&t| rep.map.at(t).map(|m| (t, m)))
                .collect(),
            average_map: rep.map.average,
        });
    }
    if rows.windows(2).any(|w| w[0].protocol != w[1].protocol) {
        return Err(Error::Usage("runs were evaluated with different protocols".into()));
    }
    rows.sort_by(|a, b| {
        a.train_fraction
            .unwrap_or(f64::INFINITY)
            .total_cmp(&b.train_fraction.unwrap_or(f64::INFINITY))
            .then(a.run_id.cmp(&b.run_id))
    });
    let mut csv = String::from("run_id,init,train_fraction");
    if let Some(r) = rows.first() {
        for (t, _) in &r.points {
            csv.push_str(&format!(",map@{t:.2}"));
        }
    }
    csv.push_str(",avg\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}",
            r.run_id,
            r.init,
            r.train_fraction.map_or(String::new(), |f| f.to_string())
        ));
        for (_, m) in &r.points {
            csv.push_str(&format!(",{m:.6}"));
        }
        csv.push_str(&format!(",{:.6}\n", r.average_map));
    }
    let mut gaps = Vec::new();
    let mut fractions: Vec<f64> = rows.iter().filter_map(|r| r.train_fraction).collect();
    fractions.dedup();
    for f in fractions {
        let pick = |init: &str| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.init == init && r.train_fraction == Some(f))
                .map(|r| r.average_map)
                .collect()
        };
        let (l, s) = (pick("ltp"), pick("scratch"));
        if !l.is_empty() && !s.is_empty() {
            gaps.push(serde_json::json!({
                "train_fraction": f,
                "median_ltp": median(l),
                "median_scratch": median(s),
            }));
        }
    }
    write_file(&out.join("report.csv"), csv.as_bytes())?;
    let json = serde_json::json!({ "rows": rows, "gaps": gaps });
    write_file(&out.join("report.json"), &serde_json::to_vec_pretty(&json).expect("report serializes"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a second initialization only happens in-process (tests) and is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Replay { manifest } = &cli.command {
        let m = read_manifest(manifest)?;
        let inv = match m.invocation {
            Invocation::Pretrain { bank, .. } => Invocation::Pretrain { bank, resume: false },
            Invocation::Finetune {
                train, val, checkpoint, ..
            } => Invocation::Finetune {
                train,
                val,
                checkpoint,
                resume: false,
            },
            other => other,
        };
        let out = g.out.clone().unwrap_or(m.out);
        return execute(&inv, &m.config, &out, g.threads.or(Some(1)));
    }
    let (inv, cfg) = resolve(cli)?;
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::Usage(format!("{} needs --out", inv.name())))?;
    execute(&inv, &cfg, &out, g.threads)
}

/// Exit status for an error: 2 for bad input, 3 for runtime failures.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_usage() {
        2
    } else {
        3
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            if code == 3 {
                if let Some(out) = &cli.global.out {
                    let diag = out.join(crate::trainer::DIAGNOSTIC_FILE);
                    if out.is_dir() && !diag.exists() {
                        let body = serde_json::json!({ "error": e.to_string() });
                        let _ = write_file(&diag, body.to_string().as_bytes());
                    }
                }
            }
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_existing_keys_only() {
        let cfg = PipelineConfig::resolve(Profile::Desk, None, &["pretrain.epochs=3".into(), "eval.protocol=thumos_style".into()])
            .unwrap();
        assert_eq!(cfg.pretrain.epochs, 3);
        assert_eq!(cfg.eval.protocol, ThresholdSet::ThumosStyle);
        assert!(PipelineConfig::resolve(Profile::Desk, None, &["pretrain.nope=1".into()]).is_err());
        assert!(PipelineConfig::resolve(Profile::Desk, None, &["nosection.x=1".into()]).is_err());
        assert!(PipelineConfig::resolve(Profile::Desk, None, &["pretrain.epochs".into()]).is_err());
    }

    #[test]
    fn profile_changes_the_model() {
        let paper = PipelineConfig::resolve(Profile::Paper, None, &[]).unwrap();
        assert_eq!(paper.model.hidden_dim, 256);
        assert_eq!(paper.model.num_queries, 40);
        assert_eq!(PipelineConfig::defaults(Profile::Desk).model.hidden_dim, 64);
    }
}
