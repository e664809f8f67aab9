//! Command-line front end: dataset generation, clustering, evaluation,
//! conflict graphs and k-sweeps.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 method error.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caae::{self, CaaeConfig, CaaeError};
use crate::coloring::{self, clustering_valid, ColoringError, Graph, Validity};
use crate::dataset::{self, DatasetError, EncodeError, EncodedDataset, LabeledDataset};
use crate::envs::EnvId;
use crate::metrics::{self, MetricsError, ReportRecord};
use crate::pgkmeans::{self, PgkConfig, PgkError, DEFAULT_MAX_ITERS};
use crate::policies::{Family, FamilyKind};

pub const ASSIGNMENT_FILE: &str = "assignment.txt";
pub const REPORT_FILE: &str = "report.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_METHOD: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Method(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Method(_) => EXIT_METHOD,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EncodeError> for CliError {
    fn from(e: EncodeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ColoringError> for CliError {
    fn from(e: ColoringError) -> Self {
        match e {
            ColoringError::Horizon { .. } | ColoringError::ZeroColors => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NotApplicable | MetricsError::DegenerateK { .. } => CliError::Method(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PgkError> for CliError {
    fn from(e: PgkError) -> Self {
        match e {
            PgkError::ZeroClusters | PgkError::ZeroIterations | PgkError::ZeroRuns => CliError::Usage(e.to_string()),
            _ => CliError::Method(e.to_string()),
        }
    }
}

impl From<CaaeError> for CliError {
    fn from(e: CaaeError) -> Self {
        match e {
            CaaeError::ZeroClusters | CaaeError::Config(_) => CliError::Usage(e.to_string()),
            CaaeError::EmptyDataset | CaaeError::EmptyTrajectory(_) | CaaeError::Encode(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Method(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pgkmeans,
    Caae,
    ReturnKmeans,
    LatentKmeans,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pgkmeans => "pgkmeans",
            Method::Caae => "caae",
            Method::ReturnKmeans => "return-kmeans",
            Method::LatentKmeans => "latent-kmeans",
        }
    }
}

/// Settings shared by every clustering method; each method reads the
/// fields it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodParams {
    pub method: Method,
    pub k: usize,
    /// Merge target for PG-Kmeans.
    pub k_star: Option<usize>,
    pub best_of: usize,
    pub max_iters: usize,
    pub epochs: usize,
    pub alpha: f64,
    /// Policy family for PG-Kmeans; defaults by action space.
    pub family: Option<FamilyKind>,
}

impl MethodParams {
    pub fn new(method: Method, k: usize) -> Self {
        Self {
            method,
            k,
            k_star: None,
            best_of: 1,
            max_iters: DEFAULT_MAX_ITERS,
            epochs: caae::DEFAULT_EPOCHS,
            alpha: caae::DEFAULT_ALPHA,
            family: None,
        }
    }

    fn check(&self) -> Result<(), CliError> {
        if self.k == 0 {
            return Err(CliError::Usage("k must be at least 1".into()));
        }
        if let Some(ks) = self.k_star {
            if ks == 0 || ks > self.k {
                return Err(CliError::Usage(format!("k-star must be in 1..={}, got {ks}", self.k)));
            }
            if self.method != Method::Pgkmeans {
                return Err(CliError::Usage("k-star only applies to pgkmeans".into()));
            }
        }
        if self.best_of == 0 || self.max_iters == 0 {
            return Err(CliError::Usage("best-of and max-iters must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CliError::Usage(format!(
                "alpha must be a non-negative number, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Result of one clustering run.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutcome {
    pub assignment: Vec<usize>,
    pub iterations: Option<usize>,
    /// Final `J` for PG-Kmeans, final training loss for the autoencoders.
    pub final_value: Option<f64>,
    pub curve: Vec<f64>,
}

/// Runs one clustering method on the trajectories of `dataset`. Labels are
/// dropped before anything else happens.
pub fn run_method(dataset: &LabeledDataset, params: &MethodParams, seed: u64) -> Result<MethodOutcome, CliError> {
    params.check()?;
    let dataset = dataset.without_labels();
    if dataset.is_empty() {
        return Err(CliError::Data("dataset has no trajectories".into()));
    }
    match params.method {
        Method::Pgkmeans => {
            let data = EncodedDataset::new(&dataset)?;
            let kind = params
                .family
                .unwrap_or_else(|| FamilyKind::default_for(dataset.meta.actions));
            let mut cfg = PgkConfig::new(params.k, Family::from_kind(kind));
            cfg.k_star = params.k_star;
            cfg.max_iters = params.max_iters;
            cfg.seed = seed;
            let run = pgkmeans::best_of_n(&data, params.best_of, &cfg)?;
            Ok(MethodOutcome {
                assignment: run.assignment,
                iterations: Some(run.iterations),
                final_value: Some(run.objective),
                curve: run.objective_history,
            })
        }
        Method::Caae | Method::LatentKmeans => {
            let data = EncodedDataset::new(&dataset)?;
            let mut cfg = CaaeConfig {
                epochs: params.epochs,
                alpha: params.alpha,
                ..CaaeConfig::default()
            };
            if params.method == Method::LatentKmeans {
                // A plain autoencoder: no pull towards centroids.
                cfg.alpha = 0.0;
                cfg.separation_weight = 0.0;
                cfg.revive_dead_centroids = false;
                cfg.reseed_epochs = 0;
            }
            let (model, log) = caae::train(&data, params.k, &cfg, seed)?;
            let assignment = match params.method {
                Method::Caae => model.assign(&data)?,
                _ => metrics::latent_kmeans_baseline(&model.encode_dataset(&data)?, params.k, seed)?,
            };
            Ok(MethodOutcome {
                assignment,
                iterations: Some(log.len()),
                final_value: log.last().map(|e| e.total),
                curve: log.iter().map(|e| e.total).collect(),
            })
        }
        Method::ReturnKmeans => Ok(MethodOutcome {
            assignment: metrics::return_kmeans_baseline(&dataset, params.k, seed)?,
            iterations: None,
            final_value: None,
            curve: Vec::new(),
        }),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "trajclust",
    version,
    about = "Cluster offline trajectories by the policy that generated them"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out experts and write a labelled dataset.
    Gen(GenArgs),
    /// Cluster a dataset without looking at its labels.
    Cluster(ClusterArgs),
    /// Score an assignment against the labels of a dataset.
    Eval(EvalArgs),
    /// Build the conflict graph of a dataset.
    Graph(GraphArgs),
    /// Turn an edge-list graph into a dataset with that conflict graph.
    Reduce(ReduceArgs),
    /// Run a method over a range of k and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub env: EnvId,
    /// Episodes per expert.
    #[arg(long)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expert ids (default: all experts of the environment).
    #[arg(long, value_delimiter = ',')]
    pub experts: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub k_star: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub best_of: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = caae::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = caae::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long)]
    pub family: Option<FamilyKind>,
    /// Seeds to run, comma separated; each gets its own report line.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub assignment: PathBuf,
    /// Directory whose report file receives the score.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Assignment file to validate against the graph.
    #[arg(long)]
    pub check: Option<PathBuf>,
    /// Grid cell for matching continuous observations.
    #[arg(long)]
    pub cell: Option<f64>,
    /// Write the graph as an edge list.
    #[arg(long)]
    pub edges_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[arg(long)]
    pub edges: PathBuf,
    /// Trajectory length (default: maximum degree plus one).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep description, TOML or `key = value` lines.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run_from(std::env::args_os())
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Reduce(a) => cmd_reduce(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let experts = a.experts.unwrap_or_else(|| (0..a.env.expert_count()).collect());
    let ds = dataset::generate(a.env, &experts, a.episodes, a.seed).map_err(|e| match e {
        DatasetError::NoEpisodes | DatasetError::NoExperts | DatasetError::Env(_) => CliError::Usage(e.to_string()),
        e => e.into(),
    })?;
    let mut text = Vec::new();
    dataset::write_dataset(&ds, &mut text)?;
    write_atomic(&a.out, &text)?;
    println!("trajectories {}", ds.len());
    let mut hist = BTreeMap::new();
    for &l in ds.labels.iter().flatten() {
        *hist.entry(l).or_insert(0usize) += 1;
    }
    for (label, count) in hist {
        println!("label {label} (expert {}): {count}", experts[label]);
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<LabeledDataset, CliError> {
    dataset::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_cluster(a: ClusterArgs) -> Result<(), CliError> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let params = MethodParams {
        method: a.method,
        k: a.k,
        k_star: a.k_star,
        best_of: a.best_of,
        max_iters: a.max_iters,
        epochs: a.epochs,
        alpha: a.alpha,
        family: a.family,
    };
    params.check()?;
    let ds = load_dataset(&a.data)?.without_labels();
    let outcomes = in_pool(a.jobs, || {
        a.seeds
            .par_iter()
            .map(|&seed| run_method(&ds, &params, seed))
            .collect::<Result<Vec<_>, _>>()
    })??;
    fs::create_dir_all(&a.out)?;
    let mut records = Vec::new();
    for (&seed, outcome) in a.seeds.iter().zip(&outcomes) {
        let record = ReportRecord {
            run_id: format!("{}-{}-k{}-seed{seed}", params.method.name(), ds.meta.env, params.k),
            method: params.method.name().into(),
            env: ds.meta.env.clone(),
            k: params.k,
            k_star: params.k_star,
            seed,
            iterations: outcome.iterations,
            final_value: outcome.final_value,
            report: metrics::cluster_report(&outcome.assignment, None, Some(&outcome.curve))?,
        };
        print!("seed {seed}: sizes {:?}", record.report.sizes);
        if let Some(it) = record.iterations {
            print!(" iterations {it}");
        }
        if let Some(v) = record.final_value {
            print!(" final {v:.6}");
        }
        println!();
        if a.seeds.len() > 1 {
            write_atomic(
                &a.out.join(format!("assignment-seed{seed}.txt")),
                &assignment_text(&outcome.assignment),
            )?;
        }
        records.push(record);
    }
    write_atomic(&a.out.join(ASSIGNMENT_FILE), &assignment_text(&outcomes[0].assignment))?;
    append_reports(&a.out.join(REPORT_FILE), &records)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let truth = ds
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("{}: dataset has no labels", a.data.display())))?;
    let pred = read_assignment(&a.assignment)?;
    let score = metrics::nmi(&pred, truth)?;
    println!("{score:.3}");
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir)?;
        let k = pred.iter().max().map_or(0, |m| m + 1);
        let record = ReportRecord {
            run_id: format!("eval-{}", a.assignment.display()),
            method: "eval".into(),
            env: ds.meta.env.clone(),
            k,
            k_star: None,
            seed: ds.meta.seed,
            iterations: None,
            final_value: None,
            report: metrics::cluster_report(&pred, Some(truth), None)?,
        };
        append_reports(&dir.join(REPORT_FILE), &[record])?;
    }
    Ok(())
}

fn cmd_graph(a: GraphArgs) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let graph = match a.cell {
        Some(c) if c > 0.0 && c.is_finite() => coloring::build_graph_with_cell(&ds.trajectories, c),
        Some(c) => return Err(CliError::Usage(format!("cell must be positive, got {c}"))),
        None => coloring::build_graph(&ds.trajectories),
    };
    println!("nodes {}", graph.node_count());
    println!("edges {}", graph.edge_count());
    println!("max degree {}", graph.max_degree());
    if let Some(path) = a.edges_out {
        write_atomic(&path, graph.to_edge_list().as_bytes())?;
    }
    if let Some(path) = a.check {
        let assignment = read_assignment(&path)?;
        match clustering_valid(&graph, &assignment)? {
            Validity::Valid => println!("valid"),
            Validity::Violated(u, v) => println!("invalid: {u} {v}"),
        }
    }
    Ok(())
}

fn cmd_reduce(a: ReduceArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.edges).map_err(|e| CliError::Data(format!("{}: {e}", a.edges.display())))?;
    let graph = Graph::parse_edge_list(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.edges.display())))?;
    let horizon = a.horizon.unwrap_or(graph.max_degree() + 1);
    let ds = coloring::reduce_from_graph(&graph, horizon)?;
    let mut out = Vec::new();
    dataset::write_dataset(&ds, &mut out)?;
    write_atomic(&a.out, &out)?;
    println!("trajectories {} horizon {horizon}", ds.len());
    Ok(())
}

/// A list of integers written as a TOML array, a single integer, a comma
/// list (`"0,1,5"`) or a range (`"4..9"`, `"4..=8"`).
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum IntList {
    One(u64),
    Many(Vec<u64>),
    Text(String),
}

impl IntList {
    pub fn values(&self) -> Result<Vec<u64>, String> {
        let text = match self {
            IntList::One(v) => return Ok(vec![*v]),
            IntList::Many(v) => return Ok(v.clone()),
            IntList::Text(t) => t.trim(),
        };
        let num = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad integer `{s}` in `{text}`"))
        };
        if let Some((lo, hi)) = text.split_once("..=") {
            return Ok((num(lo)?..=num(hi)?).collect());
        }
        if let Some((lo, hi)) = text.split_once("..") {
            return Ok((num(lo)?..num(hi)?).collect());
        }
        text.split(',').map(num).collect()
    }
}

/// One sweep: the method runs on a fresh dataset per seed, once per `k`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub env: String,
    #[serde(default)]
    pub experts: Option<IntList>,
    pub episodes: usize,
    pub method: Method,
    pub k: IntList,
    #[serde(default)]
    pub k_star: Option<usize>,
    #[serde(default)]
    pub best_of: Option<usize>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub family: Option<String>,
    pub seeds: IntList,
}

impl SweepConfig {
    /// Reads TOML, falling back to plain `key = value` lines whose values
    /// are taken as TOML where they parse and as strings otherwise.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table = match toml::from_str::<toml::Table>(text) {
            Ok(t) => t,
            Err(_) => key_value_table(text)?,
        };
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("sweep config: {}", e.message())))
    }
}

fn key_value_table(text: &str) -> Result<toml::Table, CliError> {
    let mut table = toml::Table::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("sweep config line {}: expected key = value", i + 1)))?;
        let value = value.trim();
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.trim().replace('-', "_"), parsed);
    }
    Ok(table)
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub mean_nmi: f64,
    pub std: f64,
}

/// Runs the sweep. Returns the table rows and every run's report record.
pub fn run_sweep(cfg: &SweepConfig, jobs: usize) -> Result<(Vec<SweepRow>, Vec<ReportRecord>), CliError> {
    let env = EnvId::from_str(&cfg.env).map_err(|e| CliError::Usage(e.to_string()))?;
    let usage = CliError::Usage;
    let ks: Vec<usize> = cfg.k.values().map_err(usage)?.into_iter().map(|k| k as usize).collect();
    let seeds = cfg.seeds.values().map_err(usage)?;
    let experts: Vec<usize> = match &cfg.experts {
        Some(e) => e.values().map_err(usage)?.into_iter().map(|x| x as usize).collect(),
        None => (0..env.expert_count()).collect(),
    };
    if ks.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one k and one seed".into()));
    }
    let family = cfg
        .family
        .as_deref()
        .map(FamilyKind::from_str)
        .transpose()
        .map_err(CliError::Usage)?;
    let base = MethodParams {
        k_star: cfg.k_star,
        best_of: cfg.best_of.unwrap_or(1),
        max_iters: cfg.max_iters.unwrap_or(DEFAULT_MAX_ITERS),
        epochs: cfg.epochs.unwrap_or(caae::DEFAULT_EPOCHS),
        alpha: cfg.alpha.unwrap_or(caae::DEFAULT_ALPHA),
        family,
        ..MethodParams::new(cfg.method, 1)
    };
    for &k in &ks {
        MethodParams { k, ..base.clone() }.check()?;
    }

    in_pool(jobs, || {
        let datasets = seeds
            .par_iter()
            .map(|&seed| -> Result<_, CliError> {
                let ds =
                    dataset::generate(env, &experts, cfg.episodes, seed).map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(dataset::shuffle_and_strip(&ds, Some(seed))?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tasks: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..seeds.len()).map(move |s| (k, s))).collect();
        let records = tasks
            .par_iter()
            .map(|&(k, s)| {
                let (ds, truth) = &datasets[s];
                let params = MethodParams { k, ..base.clone() };
                let out = run_method(ds, &params, seeds[s])?;
                Ok(ReportRecord {
                    run_id: format!("sweep-{}-{}-k{k}-seed{}", params.method.name(), env.name(), seeds[s]),
                    method: params.method.name().into(),
                    env: env.name().into(),
                    k,
                    k_star: params.k_star,
                    seed: seeds[s],
                    iterations: out.iterations,
                    final_value: out.final_value,
                    report: metrics::cluster_report(&out.assignment, Some(truth), Some(&out.curve))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let rows = ks
            .iter()
            .map(|&k| {
                let scores: Vec<f64> = records
                    .iter()
                    .filter(|r| r.k == k)
                    .filter_map(|r| r.report.nmi)
                    .collect();
                let (mean_nmi, std) = metrics::mean_std(&scores);
                SweepRow { k, mean_nmi, std }
            })
            .collect();
        Ok((rows, records))
    })?
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mean_nmi,std\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.k, r.mean_nmi, r.std));
    }
    out
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    let cfg = SweepConfig::parse(&text)?;
    let (rows, records) = run_sweep(&cfg, a.jobs)?;
    fs::create_dir_all(&a.out)?;
    let csv = sweep_csv(&rows);
    write_atomic(&a.out.join(SWEEP_FILE), csv.as_bytes())?;
    append_reports(&a.out.join(REPORT_FILE), &records)?;
    print!("{csv}");
    Ok(())
}

fn in_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    if jobs == 0 {
        return Err(CliError::Usage("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Method(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn assignment_text(assignment: &[usize]) -> Vec<u8> {
    let mut out = String::with_capacity(assignment.len() * 2);
    for c in assignment {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out.into_bytes()
}

/// Reads one cluster id per line; blank lines are skipped.
pub fn read_assignment(path: &Path) -> Result<Vec<usize>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| {
            CliError::Data(format!(
                "{}: line {}: `{line}` is not a cluster id",
                path.display(),
                i + 1
            ))
        })?);
    }
    Ok(out)
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append_reports(path: &Path, records: &[ReportRecord]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    metrics::write_reports(records, &mut buf)?;
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&buf)?;
    Ok(())
}
