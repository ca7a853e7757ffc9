//! Subcommand front end. Every stage reads its upstream artifacts from the
//! output directory, writes its own under `<out>/<stage>/`, and records a
//! `manifest-<stage>.json` with input and output hashes, the resolved
//! configuration and the stage seed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, PostRecord, Schema, UserSample};
use crate::error::Error;
use crate::graph::{self, ClusterPartition, ExportFormat};
use crate::hmm::{AicRow, FitOptions, Hmm};
use crate::linkage::{self, LinkageNetwork};
use crate::rng::stage_seed;
use crate::synth::{self, SynthSpec};
use crate::topics::{self, DocTopicMatrix, LdaConfig};
use crate::trajectories::{self, AlphabetMode, Observations, Report, TouristCriteria, TrajectoryModel};

pub const OUT_DIR_ENV: &str = "IDEOTRACE_OUT";
pub const ARTIFACT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ideotrace", version, about = "Topic linkage networks and user trajectory models for forum archives")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set cluster.restarts=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Parse the archive into the native post format.
    Ingest,
    /// Classify target-forum newcomers (clean, special-purpose, other).
    Sample,
    /// Fit or import document-topic weights and drop listed topics.
    Topics,
    /// Text- and user-level linkage networks.
    Linkage,
    /// Linkage graph, Louvain clusters, cluster shares and graph export.
    Cluster,
    /// Fit the trajectory HMM with AIC state selection.
    Trajectories,
    /// State profile, population, transition and conditional-residence tables.
    Report,
    /// Generate a planted synthetic corpus and a run config for it.
    Synth,
    /// Run every stage from ingest to report.
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Sample => "sample",
            Command::Topics => "topics",
            Command::Linkage => "linkage",
            Command::Cluster => "cluster",
            Command::Trajectories => "trajectories",
            Command::Report => "report",
            Command::Synth => "synth",
            Command::Pipeline => "pipeline",
        }
    }
}

const STAGES: [Command; 7] = [
    Command::Ingest,
    Command::Sample,
    Command::Topics,
    Command::Linkage,
    Command::Cluster,
    Command::Trajectories,
    Command::Report,
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing artifact: {what} (run `{producer}` first)")]
    MissingArtifact { what: String, producer: &'static str },
    #[error(transparent)]
    Data(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(Error::Json(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub sample: SampleConfig,
    pub topics: TopicsConfig,
    pub cluster: ClusterConfig,
    pub trajectories: TrajectoriesConfig,
    pub synth: SynthConfig,
}

/// Input files. Empty strings mean "not supplied".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub archive: String,
    pub doc_topics: String,
    pub drop_topics: String,
    pub blocked_forums: String,
    pub topic_labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// `native` or `pushshift`.
    pub schema: String,
    pub target_forum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub window_start: i64,
    pub window_end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicsConfig {
    pub n_topics: usize,
    /// Document-topic prior; 0 selects 50 / n_topics.
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub bigram_min_count: u64,
    pub bigram_threshold: f64,
    pub exemplar_min_weight: f64,
    pub exemplar_min_tokens: usize,
    pub exemplars_per_topic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub threshold: f64,
    pub resolution: f64,
    pub restarts: usize,
    /// `graphml`, `dot` or `json`.
    pub format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoriesConfig {
    /// `cluster` or `topic`.
    pub alphabet: String,
    pub candidates: Vec<usize>,
    pub restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub tourist_max_dwell: f64,
    pub tourist_max_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `micro` or `paper`; ignored when `spec` is set.
    pub preset: String,
    /// Path to a synth spec TOML.
    pub spec: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: "out".into(),
            paths: PathsConfig::default(),
            ingest: IngestConfig::default(),
            sample: SampleConfig::default(),
            topics: TopicsConfig::default(),
            cluster: ClusterConfig::default(),
            trajectories: TrajectoriesConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            archive: String::new(),
            doc_topics: String::new(),
            drop_topics: String::new(),
            blocked_forums: String::new(),
            topic_labels: String::new(),
        }
    }
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            schema: "native".into(),
            target_forum: String::new(),
        }
    }
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            window_start: 0,
            window_end: 4_102_444_800,
        }
    }
}

impl Default for TopicsConfig {
    fn default() -> Self {
        TopicsConfig {
            n_topics: 100,
            alpha: 0.0,
            beta: 0.01,
            sweeps: 1000,
            burn_in: 200,
            bigram_min_count: corpus::DEFAULT_BIGRAM_MIN_COUNT,
            bigram_threshold: corpus::DEFAULT_BIGRAM_THRESHOLD,
            exemplar_min_weight: 0.5,
            exemplar_min_tokens: 20,
            exemplars_per_topic: 5,
        }
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            threshold: 0.0,
            resolution: 1.0,
            restarts: 10,
            format: "graphml".into(),
        }
    }
}

impl Default for TrajectoriesConfig {
    fn default() -> Self {
        TrajectoriesConfig {
            alphabet: "cluster".into(),
            candidates: (1..=12).collect(),
            restarts: 5,
            tol: 1e-6,
            max_iter: 1000,
            tourist_max_dwell: 2.0,
            tourist_max_distance: 0.1,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            preset: "micro".into(),
            spec: String::new(),
        }
    }
}

/// Rejects keys that do not exist in the default configuration, naming the
/// full key path.
fn check_keys(reference: &toml::Table, given: &toml::Table, prefix: &str) -> CliResult<()> {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (reference.get(key), value) {
            (None, _) => return Err(usage(format!("invalid config key `{path}`"))),
            (Some(toml::Value::Table(r)), toml::Value::Table(g)) => check_keys(r, g, &path)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(usage(format!("config key `{path}` must be a table")))
            }
            _ => {}
        }
    }
    Ok(())
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| usage(format!("config key `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `overrides` and validates every key path.
    pub fn load(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let reference = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        check_keys(&reference, &table, "")?;
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> CliResult<()> {
        Schema::by_name(&self.ingest.schema).map_err(|e| usage(e.to_string()))?;
        self.cluster.format.parse::<ExportFormat>().map_err(|e| usage(e.to_string()))?;
        self.trajectories.alphabet.parse::<AlphabetMode>().map_err(|e| usage(e.to_string()))?;
        if self.sample.window_start >= self.sample.window_end {
            return Err(usage("sample.window_start must precede sample.window_end"));
        }
        if self.trajectories.candidates.is_empty() {
            return Err(usage("trajectories.candidates is empty"));
        }
        Ok(())
    }

    fn require_input(&self, key: &str, value: &str) -> CliResult<PathBuf> {
        if value.is_empty() {
            return Err(usage(format!("config key `{key}` must name an input file")));
        }
        let p = PathBuf::from(value);
        if !p.exists() {
            return Err(usage(format!("config key `{key}`: {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn optional_input(&self, key: &str, value: &str) -> CliResult<Option<PathBuf>> {
        if value.is_empty() {
            Ok(None)
        } else {
            self.require_input(key, value).map(Some)
        }
    }

    fn target_forum(&self) -> CliResult<&str> {
        if self.ingest.target_forum.is_empty() {
            Err(usage("config key `ingest.target_forum` is not set"))
        } else {
            Ok(&self.ingest.target_forum)
        }
    }
}

/// Removes the lock file when the run ends.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(usage(format!(
                "output directory {} is in use by another run (remove {} if stale)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let mut hasher = Sha256::new();
    let mut f = BufReader::new(File::open(path)?);
    loop {
        let buf = f.fill_buf()?;
        if buf.is_empty() {
            break;
        }
        hasher.update(buf);
        let n = buf.len();
        f.consume(n);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Tracks the files a stage reads and writes for its manifest.
struct Stage<'a> {
    name: &'static str,
    out: &'a Path,
    config: &'a RunConfig,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    fn new(name: &'static str, out: &'a Path, config: &'a RunConfig) -> CliResult<Self> {
        fs::create_dir_all(out.join(name))?;
        Ok(Stage {
            name,
            out,
            config,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn dir(&self) -> PathBuf {
        self.out.join(self.name)
    }

    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    /// An upstream artifact, which must already exist.
    fn artifact(&mut self, producer: Command, file: &str, what: &str) -> CliResult<PathBuf> {
        let path = self.out.join(producer.name()).join(file);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what: what.to_string(),
                producer: producer.name(),
            });
        }
        Ok(self.input(&path))
    }

    fn create(&mut self, file: &str) -> CliResult<BufWriter<File>> {
        let path = self.dir().join(file);
        self.outputs.push(path.clone());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn produced(&mut self, file: &str) -> PathBuf {
        let path = self.dir().join(file);
        self.outputs.push(path.clone());
        path
    }

    fn finish(self) -> CliResult<()> {
        let rel = |p: &Path| {
            p.strip_prefix(self.out)
                .map(|r| r.display().to_string())
                .unwrap_or_else(|_| p.display().to_string())
        };
        let hashes = |paths: &[PathBuf]| -> CliResult<Vec<FileHash>> {
            paths
                .iter()
                .map(|p| Ok(FileHash { path: rel(p), sha256: sha256_file(p)? }))
                .collect()
        };
        let manifest = serde_json::json!({
            "command": self.name,
            "artifact_version": ARTIFACT_VERSION,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "root_seed": self.config.seed,
            "stage_seed": self.seed,
            "config": self.config,
            "inputs": hashes(&self.inputs)?,
            "outputs": hashes(&self.outputs)?,
        });
        let mut f = BufWriter::new(File::create(self.out.join(format!("manifest-{}.json", self.name)))?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        writeln!(f)?;
        f.flush()?;
        log::info!("{}: wrote {} artifacts", self.name, self.outputs.len());
        Ok(())
    }
}

fn read_posts(path: &Path) -> CliResult<Vec<PostRecord>> {
    let parsed = corpus::parse_archive(BufReader::new(File::open(path)?), &Schema::native())?;
    Ok(parsed.records)
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn read_topic_labels(path: &Path) -> CliResult<HashMap<usize, String>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(Error::from)?;
    let mut out = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(Error::from)?;
        let bad = || Error::Parse { line: i + 2, reason: "expected `topic,label`".into() };
        let topic = rec.get(0).ok_or_else(bad)?.trim();
        let topic: usize = topic.trim_start_matches('t').parse().map_err(|_| bad())?;
        out.insert(topic, rec.get(1).ok_or_else(bad)?.trim().to_string());
    }
    Ok(out)
}

fn write_partition(stage: &mut Stage, partition: &ClusterPartition) -> CliResult<()> {
    let mut f = stage.create("partition.csv")?;
    partition.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

fn read_partition(path: &Path) -> CliResult<ClusterPartition> {
    let mut topic_ids = Vec::new();
    let mut assignment = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate().skip(1) {
        let bad = || Error::Parse { line: i + 1, reason: "expected `t<topic>,<cluster>`".into() };
        let (t, c) = line.split_once(',').ok_or_else(bad)?;
        topic_ids.push(t.trim_start_matches('t').parse().map_err(|_| bad())?);
        assignment.push(c.parse().map_err(|_| bad())?);
    }
    Ok(ClusterPartition {
        assignment,
        topic_ids,
        modularity: f64::NAN,
        resolution: f64::NAN,
    })
}

fn read_aic_table(path: &Path) -> CliResult<Vec<AicRow>> {
    let mut rows = Vec::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate().skip(1) {
        let bad = || Error::Parse { line: i + 1, reason: "malformed AIC row".into() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad().into());
        }
        rows.push(AicRow {
            n_states: f[0].parse().map_err(|_| bad())?,
            log_likelihood: f[1].parse().map_err(|_| bad())?,
            free_parameters: f[2].parse().map_err(|_| bad())?,
            aic: f[3].parse().map_err(|_| bad())?,
            iterations: f[4].parse().map_err(|_| bad())?,
            converged: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

fn run_ingest(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("ingest", out, config)?;
    let archive = config.require_input("paths.archive", &config.paths.archive)?;
    let archive = stage.input(&archive);
    let schema = Schema::by_name(&config.ingest.schema)?;
    let parsed = corpus::parse_archive(BufReader::new(File::open(&archive)?), &schema)?;
    let mut records = parsed.records;
    records.sort_by(|a, b| (a.created, &a.id).cmp(&(b.created, &b.id)));
    let mut f = stage.create("posts.jsonl")?;
    corpus::write_archive(&mut f, &records)?;
    f.flush()?;
    let forums: BTreeMap<&str, usize> = records.iter().fold(BTreeMap::new(), |mut m, p| {
        *m.entry(p.forum.as_str()).or_insert(0) += 1;
        m
    });
    let mut f = stage.create("summary.json")?;
    serde_json::to_writer_pretty(
        &mut f,
        &serde_json::json!({ "records": records.len(), "skipped": parsed.skipped, "forums": forums }),
    )?;
    writeln!(f)?;
    f.flush()?;
    stage.finish()
}

fn run_sample(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("sample", out, config)?;
    let target = config.target_forum()?.to_string();
    let posts = read_posts(&stage.artifact(Command::Ingest, "posts.jsonl", "ingested posts")?)?;
    let blocked: HashSet<String> = match config.optional_input("paths.blocked_forums", &config.paths.blocked_forums)? {
        Some(p) => read_lines(&stage.input(&p))?.into_iter().collect(),
        None => HashSet::new(),
    };
    let target_posts: Vec<PostRecord> = posts.iter().filter(|p| p.forum == target).cloned().collect();
    if target_posts.is_empty() {
        return Err(Error::invalid(format!("no posts in target forum {target:?}")).into());
    }
    let sample = corpus::build_clean_sample(
        &target_posts,
        &posts,
        &blocked,
        (config.sample.window_start, config.sample.window_end),
    )?;
    let mut f = stage.create("users.tsv")?;
    sample.write_manifest(&mut f)?;
    f.flush()?;
    let mut f = stage.create("summary.json")?;
    serde_json::to_writer_pretty(
        &mut f,
        &serde_json::json!({
            "newcomers": sample.users.len(),
            "clean": sample.clean().count(),
            "special": sample.special().count(),
        }),
    )?;
    writeln!(f)?;
    f.flush()?;
    stage.finish()
}

fn target_posts(config: &RunConfig, stage: &mut Stage) -> CliResult<Vec<PostRecord>> {
    let target = config.target_forum()?.to_string();
    let posts = read_posts(&stage.artifact(Command::Ingest, "posts.jsonl", "ingested posts")?)?;
    Ok(posts.into_iter().filter(|p| p.forum == target).collect())
}

fn run_topics(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("topics", out, config)?;
    let posts = target_posts(config, &mut stage)?;
    let tc = &config.topics;
    let tokenized = corpus::preprocess(&posts, &corpus::default_stoplist(), tc.bigram_min_count, tc.bigram_threshold)?;
    let raw = match config.optional_input("paths.doc_topics", &config.paths.doc_topics)? {
        Some(p) => topics::import_doc_topics(File::open(stage.input(&p))?)?,
        None => {
            let seed = stage_seed(config.seed, "topics");
            stage.seed = Some(seed);
            let mut lda = LdaConfig::with_defaults(tc.n_topics, seed);
            if tc.alpha > 0.0 {
                lda.alpha = tc.alpha;
            }
            lda.beta = tc.beta;
            lda.sweeps = tc.sweeps;
            lda.burn_in = tc.burn_in;
            let (matrix, words) = topics::fit_topics(&tokenized, &lda)?;
            let mut f = stage.create("topic_words.txt")?;
            words.write_report(&mut f, 15)?;
            f.flush()?;
            let mut f = stage.create("vocabulary.tsv")?;
            tokenized.vocabulary.write_tsv(&mut f)?;
            f.flush()?;
            matrix
        }
    };
    let mut f = stage.create("raw_doc_topics.csv")?;
    raw.write_csv(&mut f)?;
    f.flush()?;
    let drop = match config.optional_input("paths.drop_topics", &config.paths.drop_topics)? {
        Some(p) => topics::read_topic_list(File::open(stage.input(&p))?)?,
        None => HashSet::new(),
    };
    let filtered = topics::filter_topics(&raw, &drop)?;
    let mut f = stage.create("doc_topics.csv")?;
    filtered.matrix.write_csv(&mut f)?;
    f.flush()?;
    let mut f = stage.create("exemplars.txt")?;
    for &t in filtered.matrix.topic_ids() {
        let ex = topics::topic_exemplars(
            &filtered.matrix,
            &tokenized,
            t,
            tc.exemplar_min_weight,
            tc.exemplar_min_tokens,
            tc.exemplars_per_topic,
        )?;
        topics::write_exemplar_report(&mut f, t, &ex)?;
    }
    f.flush()?;
    let mut f = stage.create("summary.json")?;
    serde_json::to_writer_pretty(
        &mut f,
        &serde_json::json!({
            "documents": filtered.matrix.n_docs(),
            "topics": filtered.matrix.n_topics(),
            "dropped_topics": drop.len(),
            "zero_mass_rows": filtered.zero_mass_rows.len(),
        }),
    )?;
    writeln!(f)?;
    f.flush()?;
    stage.finish()
}

fn read_doc_topics(stage: &mut Stage) -> CliResult<DocTopicMatrix> {
    let path = stage.artifact(Command::Topics, "doc_topics.csv", "document-topic matrix")?;
    Ok(topics::import_doc_topics(File::open(path)?)?)
}

fn run_linkage(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("linkage", out, config)?;
    let matrix = read_doc_topics(&mut stage)?;
    let posts = target_posts(config, &mut stage)?;
    let authors: HashMap<String, String> = posts.into_iter().map(|p| (p.id, p.author)).collect();
    let text = linkage::text_linkage(&matrix)?;
    let user = linkage::user_linkage(&matrix, &authors)?;
    let mut f = stage.create("text.csv")?;
    text.write_csv(&mut f)?;
    f.flush()?;
    let mut f = stage.create("user.csv")?;
    user.write_csv(&mut f)?;
    f.flush()?;
    let finite = |x: f64| if x.is_finite() { serde_json::json!(x) } else { serde_json::Value::Null };
    let mut f = stage.create("summary.json")?;
    serde_json::to_writer_pretty(
        &mut f,
        &serde_json::json!({
            "text_mutual_information": finite(linkage::mutual_information(&text)),
            "user_mutual_information": finite(linkage::mutual_information(&user)),
            "text_user_correlation": linkage::linkage_correlation(&text, &user)?.map(finite),
            "documents": text.n_units,
            "users": user.n_units,
        }),
    )?;
    writeln!(f)?;
    f.flush()?;
    stage.finish()
}

fn run_cluster(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("cluster", out, config)?;
    let seed = stage_seed(config.seed, "cluster");
    stage.seed = Some(seed);
    let net_path = stage.artifact(Command::Linkage, "text.csv", "text linkage network")?;
    let network = LinkageNetwork::read_csv(BufReader::new(File::open(net_path)?))?;
    let matrix = read_doc_topics(&mut stage)?;
    let cc = &config.cluster;
    let format: ExportFormat = cc.format.parse()?;
    let g = graph::build_linkage_graph(&network, cc.threshold)?;
    let partition = graph::louvain_best(&g, cc.resolution, seed, cc.restarts)?;
    write_partition(&mut stage, &partition)?;
    let mut f = stage.create(&format!("graph.{}", format.extension()))?;
    graph::export_graph(&g, &partition, format, &mut f)?;
    f.flush()?;
    let names = match config.optional_input("paths.topic_labels", &config.paths.topic_labels)? {
        Some(p) => trajectories::cluster_names(&partition, &read_topic_labels(&stage.input(&p))?),
        None => (0..partition.n_clusters()).map(|c| format!("c{c}")).collect(),
    };
    let shares = graph::cluster_shares(&matrix, &partition)?;
    let mut f = stage.create("shares.csv")?;
    writeln!(f, "cluster,name,topics,share")?;
    for (c, members) in partition.members().iter().enumerate() {
        let topics: Vec<String> = members.iter().map(|t| format!("t{t}")).collect();
        writeln!(f, "{c},{},{},{:?}", names[c], topics.join(" "), shares.get(&c).copied().unwrap_or(0.0))?;
    }
    f.flush()?;
    let mut f = stage.create("summary.json")?;
    serde_json::to_writer_pretty(
        &mut f,
        &serde_json::json!({
            "clusters": partition.n_clusters(),
            "modularity": partition.modularity,
            "resolution": partition.resolution,
            "edges": g.edges().len(),
            "threshold": cc.threshold,
            "names": names,
        }),
    )?;
    writeln!(f)?;
    f.flush()?;
    stage.finish()
}

/// Rebuilds the observation sequences from upstream artifacts.
fn observations(config: &RunConfig, stage: &mut Stage) -> CliResult<Observations> {
    let posts = target_posts(config, stage)?;
    let sample_path = stage.artifact(Command::Sample, "users.tsv", "user sample")?;
    let sample = UserSample::read_manifest(BufReader::new(File::open(sample_path)?))?;
    let matrix = read_doc_topics(stage)?;
    let mode: AlphabetMode = config.trajectories.alphabet.parse()?;
    let mut obs = match mode {
        AlphabetMode::Topic => trajectories::build_topic_sequences(&posts, &matrix, &sample)?,
        AlphabetMode::Cluster => {
            let part_path = stage.artifact(Command::Cluster, "partition.csv", "cluster partition")?;
            let partition = read_partition(&part_path)?;
            let mut obs = trajectories::build_observation_sequences(&posts, &matrix, &partition, &sample)?;
            if let Some(p) = config.optional_input("paths.topic_labels", &config.paths.topic_labels)? {
                obs.content_labels = trajectories::cluster_names(&partition, &read_topic_labels(&stage.input(&p))?);
            }
            obs
        }
    };
    if obs.users.is_empty() {
        return Err(Error::invalid("no clean users with posts to model").into());
    }
    obs.data.labels[..obs.content_labels.len()].clone_from_slice(&obs.content_labels);
    Ok(obs)
}

fn criteria(config: &RunConfig) -> TouristCriteria {
    TouristCriteria {
        max_dwell: config.trajectories.tourist_max_dwell,
        max_distance: config.trajectories.tourist_max_distance,
    }
}

fn run_trajectories(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("trajectories", out, config)?;
    let seed = stage_seed(config.seed, "trajectories");
    stage.seed = Some(seed);
    let obs = observations(config, &mut stage)?;
    let tc = &config.trajectories;
    let opts = FitOptions {
        tol: tc.tol,
        max_iter: tc.max_iter,
        structure: None,
    };
    let model = trajectories::fit_trajectory_model(&obs, &tc.candidates, tc.restarts, seed, &opts, criteria(config))?;
    let mut f = stage.create("model.hmm")?;
    model.hmm.write_text(&mut f)?;
    f.flush()?;
    let mut f = stage.create("aic.csv")?;
    crate::hmm::Selection {
        best: crate::hmm::FitResult {
            model: model.hmm.clone(),
            log_likelihood: f64::NAN,
            iterations: 0,
            converged: true,
            history: Vec::new(),
            free_parameters: 0,
        },
        table: model.aic_table.clone(),
    }
    .write_table(&mut f)?;
    f.flush()?;
    let mut f = stage.create("sequences.csv")?;
    writeln!(f, "author,symbols")?;
    for (u, seq) in obs.users.iter().zip(&obs.data.sequences) {
        let labels: Vec<&str> = seq.iter().map(|&o| obs.data.labels[o].as_str()).collect();
        writeln!(f, "{},{}", u.author, labels.join(" "))?;
    }
    f.flush()?;
    stage.finish()
}

fn run_report(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("report", out, config)?;
    let model_path = stage.artifact(Command::Trajectories, "model.hmm", "trajectory model")?;
    let aic_path = stage.artifact(Command::Trajectories, "aic.csv", "trajectory model selection table")?;
    let hmm = Hmm::read_text(BufReader::new(File::open(model_path)?))?;
    let table = read_aic_table(&aic_path)?;
    let obs = observations(config, &mut stage)?;
    let model = TrajectoryModel::analyse(hmm, table, &obs, criteria(config))?;
    let report = Report::build(&model, &obs)?;
    report.write(&stage.dir(), &model, &obs)?;
    for f in ["profile.csv", "transitions.csv", "populations.csv", "conditional.csv", "report.json"] {
        stage.produced(f);
    }
    stage.finish()
}

fn run_synth(config: &RunConfig, out: &Path) -> CliResult<()> {
    let mut stage = Stage::new("synth", out, config)?;
    let mut spec = match config.optional_input("synth.spec", &config.synth.spec)? {
        Some(p) => SynthSpec::from_toml(&fs::read_to_string(stage.input(&p))?)?,
        None => SynthSpec::preset(&config.synth.preset).map_err(|e| usage(e.to_string()))?,
    };
    spec.seed = stage_seed(config.seed, "synth");
    stage.seed = Some(spec.seed);
    let corpus = synth::generate_corpus(&spec)?;
    let dir = stage.dir();
    corpus.write(&dir)?;
    for f in ["archive.jsonl", "doc_topics.csv", "topic_labels.csv", "blocked.txt", "planted_users.csv", "spec.toml"] {
        stage.produced(f);
    }
    let abs = |f: &str| -> CliResult<String> { Ok(fs::canonicalize(dir.join(f))?.display().to_string()) };
    let (start, end) = corpus.window();
    let mut run = RunConfig {
        seed: config.seed,
        out_dir: fs::canonicalize(out)?.display().to_string(),
        paths: PathsConfig {
            archive: abs("archive.jsonl")?,
            doc_topics: abs("doc_topics.csv")?,
            drop_topics: String::new(),
            blocked_forums: abs("blocked.txt")?,
            topic_labels: abs("topic_labels.csv")?,
        },
        ingest: IngestConfig {
            schema: "native".into(),
            target_forum: spec.target_forum.clone(),
        },
        sample: SampleConfig {
            window_start: start,
            window_end: end,
        },
        topics: TopicsConfig {
            exemplar_min_tokens: spec.tokens_per_post / 2,
            ..config.topics.clone()
        },
        cluster: config.cluster.clone(),
        trajectories: config.trajectories.clone(),
        synth: config.synth.clone(),
    };
    if config.synth.preset == "paper" && config.synth.spec.is_empty() {
        // bracket the planted seven states while keeping the fit to a few minutes
        run.trajectories.candidates = (2..=9).collect();
        run.trajectories.restarts = 3;
    }
    fs::write(stage.produced("run.toml"), run.to_toml())?;
    stage.finish()
}

/// Runs one command with an already loaded configuration, writing under
/// `out`.
pub fn execute(command: Command, config: &RunConfig, out: &Path) -> CliResult<()> {
    let _lock = OutputLock::acquire(out)?;
    let stages: Vec<Command> = if command == Command::Pipeline { STAGES.to_vec() } else { vec![command] };
    for c in stages {
        log::info!("running {}", c.name());
        match c {
            Command::Ingest => run_ingest(config, out)?,
            Command::Sample => run_sample(config, out)?,
            Command::Topics => run_topics(config, out)?,
            Command::Linkage => run_linkage(config, out)?,
            Command::Cluster => run_cluster(config, out)?,
            Command::Trajectories => run_trajectories(config, out)?,
            Command::Report => run_report(config, out)?,
            Command::Synth => run_synth(config, out)?,
            Command::Pipeline => unreachable!("pipeline expands to stages"),
        }
    }
    Ok(())
}

/// Output directory: the environment override if set, else the config's.
pub fn output_dir(config: &RunConfig) -> PathBuf {
    match std::env::var(OUT_DIR_ENV) {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&config.out_dir),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = (|| {
        let text = match &cli.config {
            Some(p) => fs::read_to_string(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let config = RunConfig::load(&text, &cli.overrides)?;
        execute(cli.command, &config, &output_dir(&config))
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::load(&c.to_toml(), &[]).unwrap(), c);
        assert_eq!(RunConfig::load("", &[]).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::load(
            "seed = 3\n[cluster]\nrestarts = 4\n",
            &[
                "cluster.resolution=0.5".into(),
                "ingest.target_forum=TheRedPill".into(),
                "trajectories.candidates=[2,3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.cluster.restarts, 4);
        assert_eq!(c.cluster.resolution, 0.5);
        assert_eq!(c.ingest.target_forum, "TheRedPill");
        assert_eq!(c.trajectories.candidates, vec![2, 3]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::load("[cluster]\nrestart = 4\n", &[]).unwrap_err();
        assert!(err.to_string().contains("cluster.restart"), "{err}");
        assert_eq!(err.exit_code(), EXIT_USAGE);
        let err = RunConfig::load("", &["trajectories.alphabet_size=3".into()]).unwrap_err();
        assert!(err.to_string().contains("trajectories.alphabet_size"), "{err}");
        assert!(RunConfig::load("", &["cluster.format=svg".into()]).is_err());
    }

    #[test]
    fn report_needs_trajectory_model() {
        let dir = tempfile::tempdir().unwrap();
        let err = execute(Command::Report, &RunConfig::default(), dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "missing artifact: trajectory model (run `trajectories` first)");
        assert_eq!(err.exit_code(), EXIT_DATA);
        // the lock is released after a failed run
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn concurrent_runs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let _held = OutputLock::acquire(dir.path()).unwrap();
        let err = execute(Command::Synth, &RunConfig::default(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }
}
