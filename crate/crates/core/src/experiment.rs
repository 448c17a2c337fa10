//! Experiment configuration, run directories and the command
//! implementations behind the `protoseg` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::{AttentionConfig, AttentionVariant};
use crate::data::{generate_synthetic_dataset, load_dataset, Dataset, DatasetMeta, Split, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::protohead::ProtoHeadConfig;
use crate::trainer::{
    config_digest, evaluate, Checkpoint, EpisodeLog, EvalConfig, ModelConfig, Stage, TrainConfig, Trainer,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PROTOSEG_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32×32 inputs, narrow encoder.
    #[default]
    Desk,
    /// 128×128 inputs, wide encoder.
    Full,
}

impl Preset {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Preset::Desk => EncoderConfig::desk(),
            Preset::Full => EncoderConfig::full(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Replaces the preset encoder when set.
    pub encoder: Option<EncoderConfig>,
    pub attention: AttentionConfig,
    pub head: ProtoHeadConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Dataset root; `synth` defaults to `<run-dir>/dataset`.
    pub dataset: Option<PathBuf>,
    pub preset: Preset,
    /// Seed of every stage; per-stage seed keys are overwritten by it.
    pub seed: u64,
    /// Output root; falls back to `$PROTOSEG_OUT`, then `runs`.
    pub output: Option<PathBuf>,
    pub eval_split: Split,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            preset: Preset::Desk,
            seed: 42,
            output: None,
            eval_split: Split::Test,
            synth: SynthConfig::default(),
            model: ModelSection::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return Error::ConfigKey(rest[..end].to_string());
        }
    }
    Error::Config(msg)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies one `dotted.key=value` override. The value is parsed as JSON
    /// and taken as a plain string when that fails.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let path: Vec<&str> = key.split('.').collect();
        if path.len() > 1 && path.last() == Some(&"seed") {
            return Err(Error::ConfigKey(format!("{key} (stage seeds follow the top-level `seed`)")));
        }
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in &path {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(*part))
                .ok_or_else(|| Error::ConfigKey(key.to_string()))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Propagates the seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.eval.seed = self.seed;
        self.pretrain.stage = Stage::Pretrain;
        self.finetune.stage = Stage::Finetune;
        let invalid = |e: Error| Error::Config(e.to_string());
        self.synth.validate().map_err(invalid)?;
        self.pretrain.validate().map_err(invalid)?;
        self.finetune.validate().map_err(invalid)?;
        self.model().validate().map_err(invalid)?;
        Ok(self)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.model.encoder.clone().unwrap_or_else(|| self.preset.encoder()),
            attention_variant: AttentionVariant::None,
            attention: self.model.attention.clone(),
            head: self.model.head.clone(),
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::NoSamples(PathBuf::from("<no dataset configured>")))
    }
}

/// Output directory of one command invocation.
#[derive(Clone, Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub id: String,
    pub digest: String,
    pub seed: u64,
}

impl Run {
    /// Creates `<root>/<timestamp>-<digest prefix>[-n]`.
    pub fn create(root: &Path, digest: &str, seed: u64) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S").to_string();
        let base = format!("{stamp}-{}", &digest[..8]);
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let mut id = base.clone();
        let mut n = 1;
        while root.join(&id).exists() {
            id = format!("{base}-{n}");
            n += 1;
        }
        let dir = root.join(&id);
        fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run {
            dir,
            id,
            digest: digest.to_string(),
            seed,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<PathBuf> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn stamp(&self, mut value: Value) -> Value {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("seed".into(), json!(self.seed));
            obj.insert("config_digest".into(), json!(self.digest));
            obj.insert("run_id".into(), json!(self.id));
        }
        value
    }

    fn write_config(&self, command: &str, config: &ExperimentConfig, extra: Value) -> Result<()> {
        let record = self.stamp(json!({ "command": command, "config": config, "arguments": extra }));
        self.write_json("config.json", &record)?;
        Ok(())
    }
}

/// Digest of what a command computes: the configuration without output or
/// dataset locations, plus content identifiers of its inputs.
fn digest_of(command: &str, config: &ExperimentConfig, inputs: &Value) -> Result<String> {
    let mut cfg = serde_json::to_value(config)?;
    if let Some(obj) = cfg.as_object_mut() {
        obj.remove("output");
        obj.remove("dataset");
    }
    config_digest(&json!({ "command": command, "config": cfg, "inputs": inputs }))
}

/// Outcome of a command, printed by the binary as one JSON line.
#[derive(Clone, Debug, Serialize)]
pub struct CommandOutcome {
    pub command: String,
    pub run_dir: PathBuf,
    pub seed: u64,
    pub config_digest: String,
    pub artifacts: Vec<PathBuf>,
}

pub fn run_synth(config: &ExperimentConfig) -> Result<CommandOutcome> {
    let extra = json!({});
    let digest = digest_of("synth", config, &extra)?;
    let run = Run::create(&config.output_root(), &digest, config.seed)?;
    run.write_config("synth", config, extra)?;
    let root = config.dataset.clone().unwrap_or_else(|| run.path("dataset"));
    let meta: DatasetMeta = generate_synthetic_dataset(&root, &config.synth)?;
    let summary = run.write_json(
        "summary.json",
        &run.stamp(json!({ "command": "synth", "dataset": root, "meta": meta })),
    )?;
    Ok(CommandOutcome {
        command: "synth".into(),
        run_dir: run.dir.clone(),
        seed: config.seed,
        config_digest: digest,
        artifacts: vec![root, summary],
    })
}

fn open_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let path = config.dataset_path()?;
    match load_dataset(path) {
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::NoSamples(path.to_path_buf()))
        }
        other => other,
    }
}

fn train_run(
    command: &str,
    config: &ExperimentConfig,
    mut trainer: Trainer,
    dataset: &Dataset,
    extra: Value,
) -> Result<CommandOutcome> {
    let digest = trainer.digest.clone();
    let run = Run::create(&config.output_root(), &digest, config.seed)?;
    run.write_config(command, config, extra)?;
    let log_path = run.path("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut last: Option<EpisodeLog> = None;
    trainer.run(&dataset.split(Split::Train), |record| {
        let line = run.stamp(serde_json::to_value(record)?);
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        last = Some(record.clone());
        Ok(())
    })?;
    let ckpt_path = run.path("checkpoint.bin");
    trainer.checkpoint().save(&ckpt_path)?;
    let summary = run.write_json(
        "summary.json",
        &run.stamp(json!({
            "command": command,
            "episodes": trainer.episode,
            "final": last,
            "checkpoint": ckpt_path,
        })),
    )?;
    Ok(CommandOutcome {
        command: command.into(),
        run_dir: run.dir.clone(),
        seed: config.seed,
        config_digest: digest,
        artifacts: vec![ckpt_path, log_path, summary],
    })
}

pub fn run_pretrain(config: &ExperimentConfig) -> Result<CommandOutcome> {
    let dataset = open_dataset(config)?;
    let trainer = Trainer::pretrain(&config.model(), &config.pretrain)?;
    train_run("pretrain", config, trainer, &dataset, json!({}))
}

pub fn run_finetune(config: &ExperimentConfig, checkpoint: &Path) -> Result<CommandOutcome> {
    let dataset = open_dataset(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::finetune(&ckpt, &config.finetune)?;
    let extra = json!({ "checkpoint": checkpoint, "checkpoint_digest": ckpt.config_digest });
    train_run("finetune", config, trainer, &dataset, extra)
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub config_digest: String,
    pub checkpoint_digest: String,
    pub n_train: usize,
    pub n_test: usize,
    pub k: usize,
    pub attention: AttentionVariant,
    pub bidirectional: bool,
    pub episodes: usize,
    pub aggregation: String,
    pub metrics: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub pooled: Option<BTreeMap<String, f64>>,
}

fn metric_map(report: &MetricReport) -> BTreeMap<String, f64> {
    MetricReport::FIELDS
        .iter()
        .zip(report.values())
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub fn run_eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<CommandOutcome> {
    let dataset = open_dataset(config)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let extra = json!({ "checkpoint": checkpoint, "checkpoint_digest": ckpt.config_digest });
    let inputs = json!({ "checkpoint": ckpt.config_digest, "dataset": config_digest(&dataset.meta)? });
    let digest = digest_of("eval", config, &inputs)?;
    let result = evaluate(&ckpt.net, &dataset.split(config.eval_split), &config.eval)?;
    let run = Run::create(&config.output_root(), &digest, config.seed)?;
    run.write_config("eval", config, extra)?;
    let train = ckpt.train.clone().unwrap_or_default();
    let record = EvalRecord {
        seed: config.seed,
        config_digest: digest.clone(),
        checkpoint_digest: ckpt.config_digest.clone(),
        n_train: train.episode_spec.n_ways,
        n_test: config.eval.spec.n_ways,
        k: config.eval.spec.k_shots,
        attention: ckpt.model.attention_variant,
        bidirectional: ckpt.stage == Stage::Finetune && train.loss.bidirectional,
        episodes: config.eval.episodes,
        aggregation: "episode-mean".into(),
        metrics: metric_map(&result.summary.mean),
        std: metric_map(&result.summary.std),
        pooled: result.pooled.as_ref().map(metric_map),
    };
    let metrics = run.write_json("metrics.json", &record)?;
    let csv = format!(
        "{},seed,config_digest\n{},{},{}\n",
        MetricReport::csv_header(),
        result.summary.mean.csv_row(),
        config.seed,
        digest
    );
    let csv_path = run.write_text("metrics.csv", &csv)?;
    let mut lines = String::new();
    for ep in &result.per_episode {
        let line = run.stamp(serde_json::to_value(ep)?);
        writeln!(lines, "{line}").expect("writing to a string");
    }
    let episodes = run.write_text("episodes.jsonl", &lines)?;
    Ok(CommandOutcome {
        command: "eval".into(),
        run_dir: run.dir.clone(),
        seed: config.seed,
        config_digest: digest,
        artifacts: vec![metrics, csv_path, episodes],
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}` (markdown|csv|json)"))),
        }
    }
}

fn read_record(dir: &Path) -> Result<EvalRecord> {
    let path = dir.join("metrics.json");
    if !path.is_file() {
        return Err(Error::Report(format!("{} holds no evaluation output (metrics.json)", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

/// Renders evaluation runs as one table in report column order; the
/// best value of each metric column is marked.
pub fn emit_report(run_dirs: &[PathBuf], format: ReportFormat) -> Result<String> {
    if run_dirs.is_empty() {
        return Err(Error::Report("no run directories given".into()));
    }
    let records = run_dirs.iter().map(|d| read_record(d)).collect::<Result<Vec<_>>>()?;
    let schema: Vec<&String> = records[0].metrics.keys().collect();
    for (dir, r) in run_dirs.iter().zip(&records).skip(1) {
        let other: Vec<&String> = r.metrics.keys().collect();
        if other != schema {
            let missing: Vec<_> = schema.iter().filter(|k| !r.metrics.contains_key(**k)).collect();
            let extra: Vec<_> = other.iter().filter(|k| !records[0].metrics.contains_key(**k)).collect();
            return Err(Error::Report(format!(
                "metric schema of {} differs from {}: missing {:?}, extra {:?}",
                dir.display(),
                run_dirs[0].display(),
                missing,
                extra
            )));
        }
    }
    let value = |r: &EvalRecord, field: &str| r.metrics.get(field).copied().unwrap_or(f64::NAN);
    let best: Vec<f64> = MetricReport::FIELDS
        .iter()
        .map(|f| records.iter().map(|r| value(r, f)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let out = match format {
        ReportFormat::Markdown => {
            let mut s = String::new();
            let header: Vec<&str> = ["n_train", "n_test", "k"]
                .into_iter()
                .chain(MetricReport::COLUMNS)
                .chain(["seed", "config"])
                .collect();
            writeln!(s, "| {} |", header.join(" | ")).unwrap();
            writeln!(s, "|{}", "---|".repeat(header.len())).unwrap();
            for r in &records {
                let cells: Vec<String> = MetricReport::FIELDS
                    .iter()
                    .zip(&best)
                    .map(|(f, &b)| {
                        let v = value(r, f);
                        if v == b {
                            format!("**{:.2}**", 100.0 * v)
                        } else {
                            format!("{:.2}", 100.0 * v)
                        }
                    })
                    .collect();
                writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} |",
                    r.n_train,
                    r.n_test,
                    r.k,
                    cells.join(" | "),
                    r.seed,
                    &r.config_digest[..12.min(r.config_digest.len())]
                )
                .unwrap();
            }
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("n_train,n_test,k,{},seed,config_digest\n", MetricReport::csv_header());
            for r in &records {
                let cells: Vec<String> = MetricReport::FIELDS.iter().map(|f| format!("{:.6}", value(r, f))).collect();
                writeln!(s, "{},{},{},{},{},{}", r.n_train, r.n_test, r.k, cells.join(","), r.seed, r.config_digest).unwrap();
            }
            s
        }
        ReportFormat::Json => {
            let mut obj = serde_json::Map::new();
            for (f, &b) in MetricReport::FIELDS.iter().zip(&best) {
                obj.insert(
                    f.to_string(),
                    json!({ "values": records.iter().map(|r| value(r, f)).collect::<Vec<_>>(), "best": b }),
                );
            }
            obj.insert(
                "runs".into(),
                json!(run_dirs
                    .iter()
                    .zip(&records)
                    .map(|(d, r)| json!({
                        "run_dir": d,
                        "n_train": r.n_train,
                        "n_test": r.n_test,
                        "k": r.k,
                        "seed": r.seed,
                        "config_digest": r.config_digest,
                    }))
                    .collect::<Vec<_>>()),
            );
            serde_json::to_string_pretty(&Value::Object(obj))? + "\n"
        }
    };
    Ok(out)
}

pub fn run_report(config: &ExperimentConfig, run_dirs: &[PathBuf], format: ReportFormat) -> Result<CommandOutcome> {
    let text = emit_report(run_dirs, format)?;
    let extra = json!({ "runs": run_dirs, "format": format });
    let run_digests = run_dirs
        .iter()
        .map(|d| {
            let path = d.join("metrics.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: Value = serde_json::from_str(&text)?;
            Ok(record["config_digest"].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let digest = digest_of("report", config, &json!({ "runs": run_digests, "format": format }))?;
    let run = Run::create(&config.output_root(), &digest, config.seed)?;
    run.write_config("report", config, extra)?;
    let path = run.write_text(&format!("report.{}", format.extension()), &text)?;
    Ok(CommandOutcome {
        command: "report".into(),
        run_dir: run.dir.clone(),
        seed: config.seed,
        config_digest: digest,
        artifacts: vec![path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides() {
        let mut c = ExperimentConfig::default();
        c.set("finetune.episodes=7").unwrap();
        c.set("finetune.attention=sa").unwrap();
        c.set("eval.spec.k_shots=1").unwrap();
        assert_eq!(c.finetune.episodes, 7);
        assert_eq!(c.finetune.attention, AttentionVariant::Sa);
        assert_eq!(c.eval.spec.k_shots, 1);
        assert!(matches!(c.set("finetune.bogus=1"), Err(Error::ConfigKey(k)) if k == "finetune.bogus"));
        assert!(matches!(c.set("pretrain.seed=3"), Err(Error::ConfigKey(_))));
        assert!(matches!(c.set("finetune.episodes=lots"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_file_keys_are_named() {
        let err = ExperimentConfig::from_json(r#"{"seed": 1, "colour": "red"}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigKey(k) if k == "colour"));
        assert_eq!(err_code(r#"{"pretrain": {"episods": 3}}"#), 2);
    }

    fn err_code(text: &str) -> i32 {
        ExperimentConfig::from_json(text).unwrap_err().exit_code()
    }

    #[test]
    fn resolve_propagates_seed() {
        let c = ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        }
        .resolve()
        .unwrap();
        assert_eq!((c.pretrain.seed, c.finetune.seed, c.eval.seed, c.synth.seed), (9, 9, 9, 9));
        assert_eq!(c.pretrain.episode_spec.n_ways, 8);
        assert_eq!(c.finetune.episode_spec.n_ways, 2);
    }
}
