//! Command-line front end: config resolution, run directories, manifests and
//! the fixed metrics CSV format.
//!
//! Exit codes: 0 success, 1 scientific-check failure, 2 config or input
//! error, 3 runtime error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agent::{train, MetricsRow, TrainConfig, TrainOutcome, METRICS_COLUMNS};
use crate::empowerment::{channel_capacity, DiscreteChannel};
use crate::error::Error;
use crate::metrics::{build_graph_labeled, linear_probe, shortest_path_kernel, KernelConfig};
use crate::mi::{mi_bench, BenchConfig, Family};
use crate::theory::{bound_suite_with_fault, probe_suite, ProbeExperimentConfig, SuiteReport};

pub const MANIFEST_FORMAT: &str = "primi-manifest/1";
pub const METRICS_FORMAT: &str = "primi-metrics/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "primi", version, about = "Prioritized-information world models on factored distractor environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted config path and JSON value, e.g. `model.lr=1e-3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Gaussian,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    T1,
    T3,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the world model and agent.
    Train {
        #[command(flatten)]
        common: Common,
        /// Environment steps collected by the learned policy.
        #[arg(long)]
        steps: Option<usize>,
        /// One of no-emp-policy, no-emp-repr, reconstruction. Repeatable.
        #[arg(long)]
        ablate: Vec<String>,
        /// Start from the large-network preset instead of the desk defaults.
        #[arg(long)]
        large_preset: bool,
    },
    /// Capacity of a discrete channel given as JSON rows `p(z'|a)`.
    Capacity {
        #[command(flatten)]
        common: Common,
        spec: PathBuf,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
    },
    /// Compare trained MI bounds against an exact oracle.
    MiBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = FamilyArg::Gaussian)]
        family: FamilyArg,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        dims: usize,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Similarity kernel and probes between latent and ground-truth points.
    Metric {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// The first column of each file is an integer vertex label.
        #[arg(long)]
        labeled: bool,
    },
    /// Exact bound suite (t3) or controllability probes (t1).
    Theory {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        suite: Suite,
        /// Inflate every left-hand side so the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train every (variant, seed) pair and summarise.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        /// Comma-separated variants: full, or ablation names.
        #[arg(long, value_delimiter = ',', default_value = "full,no-emp-policy,reconstruction")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => EXIT_CHECK_FAILED,
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Check(_) => "check_failed",
            Failure::Config(_) => "config",
            Failure::Runtime(_) => "runtime",
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn input_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error ({}): {}", f.kind(), f.message());
            f.code()
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult<()> {
    match cmd {
        Command::Train {
            common,
            steps,
            ablate,
            large_preset,
        } => cmd_train(&common, steps, &ablate, large_preset),
        Command::Capacity {
            common,
            spec,
            tol,
            max_iter,
        } => cmd_capacity(&common, &spec, tol, max_iter),
        Command::MiBench {
            common,
            family,
            rho,
            dims,
            n,
            noise,
        } => {
            let family = match family {
                FamilyArg::Gaussian => Family::Gaussian { rho, dims },
                FamilyArg::Discrete => Family::Discrete { n, noise },
            };
            cmd_mi_bench(&common, family)
        }
        Command::Metric {
            common,
            latents,
            gt,
            labeled,
        } => cmd_metric(&common, &latents, &gt, labeled),
        Command::Theory {
            common,
            suite,
            inject_fault,
        } => cmd_theory(&common, suite, inject_fault),
        Command::Grid {
            common,
            seeds,
            variants,
            jobs,
        } => cmd_grid(&common, &seeds, &variants, jobs),
    }
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

/// Objects carrying one of these keys are enum variants and are replaced
/// wholesale rather than merged.
const TAG_KEYS: [&str; 2] = ["kind", "family"];

fn merge(base: &mut Value, patch: Value, path: &str) -> CmdResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !TAG_KEYS.iter().any(|k| b.contains_key(*k)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Failure::Config(format!("unknown config field `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn apply_override(cfg: &mut Value, spec: &str) -> CmdResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        if part.is_empty() {
            return Err(Failure::Config(format!("override `{spec}` has an empty key segment")));
        }
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(cfg, patch, "")
}

/// Defaults, then the config file, then overrides.
pub fn resolve_config<T: Serialize + DeserializeOwned>(defaults: T, file: Option<&Path>, overrides: &[String]) -> CmdResult<T> {
    let mut v = serde_json::to_value(&defaults).map_err(io_err)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
        merge(&mut v, patch, "")?;
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    serde_json::from_value(v).map_err(|e| Failure::Config(e.to_string()))
}

/// SHA-256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialise");
    let digest = Sha256::digest(&bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// Run artifacts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config: Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    pub exit_status: i32,
    pub error: Option<String>,
}

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

struct RunDir {
    dir: PathBuf,
    command: &'static str,
    config: Value,
    config_hash: String,
    seed: Option<u64>,
    started: f64,
    outputs: Vec<String>,
}

impl RunDir {
    fn open<T: Serialize>(dir: &Path, command: &'static str, cfg: &T, seed: Option<u64>) -> CmdResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(format!("cannot create {}: {e}", dir.display())))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            command,
            config: serde_json::to_value(cfg).map_err(io_err)?,
            config_hash: config_hash(cfg),
            seed,
            started: now_unix(),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CmdResult<()> {
        write_atomic(&self.dir.join(name), bytes).map_err(|e| io_err(format!("cannot write {name}: {e}")))?;
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CmdResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(io_err)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Writes the manifest and passes `result` through.
    fn finish(self, result: CmdResult<()>) -> CmdResult<()> {
        let (status, error) = match &result {
            Ok(()) => (EXIT_OK, None),
            Err(f) => (f.code(), Some(f.message().to_string())),
        };
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            command: self.command.into(),
            config: self.config,
            config_hash: self.config_hash,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started,
            finished_unix: now_unix(),
            outputs: self.outputs,
            exit_status: status,
            error,
        };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(io_err)?;
        s.push('\n');
        write_atomic(&self.dir.join("manifest.json"), s.as_bytes()).map_err(io_err)?;
        result
    }
}

pub fn metrics_header() -> String {
    METRICS_COLUMNS.join(",")
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = metrics_header();
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Parses a metrics CSV, rejecting any header other than the fixed one.
pub fn parse_metrics_csv(text: &str) -> crate::Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Invalid("empty metrics file".into()))?;
    if header != metrics_header() {
        return Err(Error::Invalid(format!("unexpected metrics header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != METRICS_COLUMNS.len() {
            return Err(Error::Invalid(format!("metrics row {} has {} cells", i + 1, cells.len())));
        }
        let int = |c: &str| {
            c.parse::<usize>()
                .map_err(|e| Error::Invalid(format!("metrics row {}: {e}", i + 1)))
        };
        let opt = |c: &str| -> crate::Result<Option<f64>> {
            if c.is_empty() {
                Ok(None)
            } else {
                c.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Invalid(format!("metrics row {}: {e}", i + 1)))
            }
        };
        rows.push(MetricsRow {
            step: int(cells[0])?,
            episode: int(cells[1])?,
            ret: opt(cells[2])?,
            mi_bound: opt(cells[3])?,
            forward_kl: opt(cells[4])?,
            empowerment_bound: opt(cells[5])?,
            reward_loglik: opt(cells[6])?,
            constraint_total: opt(cells[7])?,
            lambda: opt(cells[8])?,
            policy_entropy: opt(cells[9])?,
            value_loss: opt(cells[10])?,
            policy_loss: opt(cells[11])?,
            wallclock_s: opt(cells[12])?,
            sim_kernel: opt(cells[13])?,
            probe_r2_splus: opt(cells[14])?,
            probe_r2_stilde: opt(cells[15])?,
            probe_r2_ds: opt(cells[16])?,
        });
    }
    Ok(rows)
}

/// Reads a CSV of real vectors, one point per line. Blank lines are skipped.
pub fn read_points(path: &Path) -> CmdResult<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| input_err(format!("cannot read {}: {e}", path.display())))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| input_err(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if let Some(first) = pts.first().map(Vec::len) {
            if first != row.len() {
                return Err(input_err(format!("{} line {}: ragged row", path.display(), i + 1)));
            }
        }
        pts.push(row);
    }
    Ok(pts)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn out_dir(common: &Common, fallback: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(fallback))
}

/// Resolves the training config as `train` would.
pub fn train_config(common: &Common, steps: Option<usize>, ablate: &[String], large_preset: bool) -> CmdResult<TrainConfig> {
    let base = if large_preset { TrainConfig::large_preset() } else { TrainConfig::default() };
    let mut cfg = resolve_config(base, common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.total_env_steps = s;
    }
    for a in ablate {
        cfg.ablation.apply(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_train_artifacts(run: &mut RunDir, cfg: &TrainConfig, out: &TrainOutcome) -> CmdResult<()> {
    run.write("metrics.csv", metrics_csv(&out.rows).as_bytes())?;
    let mut ck = out.model.to_param_file();
    ck.insert("policy", &out.policy.net);
    ck.insert("value", &out.value.net);
    ck.extra.insert("config_hash".into(), Value::String(config_hash(cfg)));
    ck.extra.insert("lambda".into(), serde_json::json!(out.lagrangian.lambda));
    run.write("checkpoint.json", ck.to_json()?.as_bytes())?;
    let mut replay = Vec::new();
    out.replay.write_ndjson(&cfg.env, &mut replay)?;
    run.write("replay.ndjson", &replay)?;
    run.write_json("eval.json", &out.eval)?;
    Ok(())
}

fn train_into(dir: &Path, cfg: &TrainConfig) -> CmdResult<TrainOutcome> {
    let mut run = RunDir::open(dir, "train", cfg, Some(cfg.seed))?;
    let result = train(cfg).map_err(Failure::from);
    match result {
        Ok(out) => {
            let written = write_train_artifacts(&mut run, cfg, &out);
            run.finish(written)?;
            Ok(out)
        }
        Err(f) => {
            let record = serde_json::json!({"kind": f.kind(), "message": f.message()});
            run.write_json("error.json", &record)?;
            Err(run.finish(Err(f)).unwrap_err())
        }
    }
}

fn cmd_train(common: &Common, steps: Option<usize>, ablate: &[String], large_preset: bool) -> CmdResult<()> {
    let cfg = train_config(common, steps, ablate, large_preset)?;
    let dir = out_dir(common, &format!("train-seed{}", cfg.seed));
    let out = train_into(&dir, &cfg)?;
    println!(
        "episodes {} env steps {} final lambda {:.6}",
        out.rows.last().map(|r| r.episode).unwrap_or(0),
        out.rows.last().map(|r| r.step).unwrap_or(0),
        out.lagrangian.lambda
    );
    println!("eval return {:.6}", out.eval.mean_return);
    match out.eval.sim_kernel {
        Some(s) => println!("sim_kernel {s:.6}"),
        None => println!("sim_kernel n/a"),
    }
    println!(
        "probe_r2 splus {:.6} stilde {:.6} ds {:.6}",
        out.eval.probe_r2_splus, out.eval.probe_r2_stilde, out.eval.probe_r2_ds
    );
    println!("wrote {}", dir.display());
    Ok(())
}

/// Channel spec: either an array of rows or `{"rows": [...]}`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ChannelSpec {
    Rows(Vec<Vec<f64>>),
    Object { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Serialize)]
struct CapacityReport {
    capacity_nats: f64,
    capacity_bits: f64,
    iterations: usize,
    converged: bool,
    input_distribution: Vec<f64>,
}

fn cmd_capacity(common: &Common, spec: &Path, tol: f64, max_iter: usize) -> CmdResult<()> {
    let text = fs::read_to_string(spec).map_err(|e| input_err(format!("cannot read {}: {e}", spec.display())))?;
    let rows = match serde_json::from_str::<ChannelSpec>(&text).map_err(|e| input_err(format!("{}: {e}", spec.display())))? {
        ChannelSpec::Rows(r) | ChannelSpec::Object { rows: r } => r,
    };
    let ch = DiscreteChannel::from_rows(&rows).map_err(input_err)?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Failure::Config("tol must be positive and max-iter at least 1".into()));
    }
    let (cap, state) = channel_capacity(&ch, tol, max_iter)?;
    let report = CapacityReport {
        capacity_nats: cap,
        capacity_bits: cap / std::f64::consts::LN_2,
        iterations: state.iterations,
        converged: state.converged,
        input_distribution: state.pi.clone(),
    };
    println!("capacity {:.6} nats {:.6} bits", report.capacity_nats, report.capacity_bits);
    println!("iterations {} converged {}", report.iterations, report.converged);
    if let Some(dir) = &common.out {
        let cfg = serde_json::json!({"spec": rows, "tol": tol, "max_iter": max_iter});
        let mut run = RunDir::open(dir, "capacity", &cfg, None)?;
        let r = run.write_json("capacity.json", &report);
        run.finish(r)?;
    }
    Ok(())
}

fn cmd_mi_bench(common: &Common, family: Family) -> CmdResult<()> {
    family.validate()?;
    let mut cfg = resolve_config(BenchConfig::default(), common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let rep = mi_bench(family, &cfg)?;
    println!("{:<14} {:>10} {:>10}", "bound", "estimate", "std_err");
    println!("{:<14} {:>10.5} {:>10}", "oracle", rep.oracle, "-");
    for (name, e) in [
        ("nce-inclusive", &rep.nce_inclusive),
        ("nce-exclusive", &rep.nce_exclusive),
        ("nwj", &rep.nwj),
        ("ba-recon", &rep.ba),
    ] {
        println!("{:<14} {:>10.5} {:>10.5}", name, e.value, e.std_err);
    }
    if let Some(t) = rep.ba_total {
        println!("{:<14} {:>10.5} {:>10}", "ba-total", t, "-");
    }
    if let Some(dir) = &common.out {
        let full = serde_json::json!({"family": family, "bench": cfg});
        let mut run = RunDir::open(dir, "mi-bench", &full, Some(cfg.seed))?;
        let r = run.write_json("mi_bench.json", &rep);
        run.finish(r)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub kernel: KernelConfig,
    /// Seed of the probe's held-out split.
    pub probe_seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            kernel: KernelConfig::default(),
            probe_seed: 0,
        }
    }
}

fn split_labels(points: Vec<Vec<f64>>, labeled: bool, path: &Path) -> CmdResult<(Vec<usize>, Vec<Vec<f64>>)> {
    if !labeled {
        return Ok(((1..=points.len()).collect(), points));
    }
    let mut labels = Vec::with_capacity(points.len());
    let mut rest = Vec::with_capacity(points.len());
    for (i, mut p) in points.into_iter().enumerate() {
        if p.len() < 2 {
            return Err(input_err(format!("{} row {}: needs a label and coordinates", path.display(), i + 1)));
        }
        let l = p.remove(0);
        if l < 0.0 || l.fract() != 0.0 {
            return Err(input_err(format!("{} row {}: label {l} is not a nonnegative integer", path.display(), i + 1)));
        }
        labels.push(l as usize);
        rest.push(p);
    }
    Ok((labels, rest))
}

fn cmd_metric(common: &Common, latents: &Path, gt: &Path, labeled: bool) -> CmdResult<()> {
    let mut cfg = resolve_config(MetricConfig::default(), common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.probe_seed = s;
    }
    let (la, za) = split_labels(read_points(latents)?, labeled, latents)?;
    let (lb, gb) = split_labels(read_points(gt)?, labeled, gt)?;
    if za.len() != gb.len() {
        return Err(input_err(format!("{} has {} points but {} has {}", latents.display(), za.len(), gt.display(), gb.len())));
    }
    // pair rows by label so that row order does not matter
    let mut order_a: Vec<usize> = (0..la.len()).collect();
    let mut order_b: Vec<usize> = (0..lb.len()).collect();
    order_a.sort_by_key(|&i| la[i]);
    order_b.sort_by_key(|&i| lb[i]);
    for (&i, &j) in order_a.iter().zip(&order_b) {
        if la[i] != lb[j] {
            return Err(input_err("latent and ground-truth labels differ"));
        }
    }
    let labels: Vec<usize> = order_a.iter().map(|&i| la[i]).collect();
    let za: Vec<Vec<f64>> = order_a.iter().map(|&i| za[i].clone()).collect();
    let gb: Vec<Vec<f64>> = order_b.iter().map(|&j| gb[j].clone()).collect();
    let ga = build_graph_labeled(&za, &labels).map_err(input_err)?;
    let gg = build_graph_labeled(&gb, &labels).map_err(input_err)?;
    let sim = shortest_path_kernel(&ga, &gg, &cfg.kernel)?;
    println!("sim_kernel {sim:.6}");
    let probe = if za.len() > za[0].len() + 1 {
        let p = linear_probe(&za, &gb, cfg.probe_seed)?;
        println!("probe_r2 {:.6} train {:.6} test {:.6}", p.r2, p.train, p.test);
        Some(p)
    } else {
        println!("probe_r2 n/a (too few points)");
        None
    };
    if let Some(dir) = &common.out {
        let mut run = RunDir::open(dir, "metric", &cfg, Some(cfg.probe_seed))?;
        let r = run.write_json("metric.json", &serde_json::json!({"sim_kernel": sim, "probe": probe}));
        run.finish(r)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSuiteConfig {
    pub seed: u64,
    pub mdps: usize,
    pub abstractions_per_mdp: usize,
    /// Amount added to each left-hand side by `--inject-fault`.
    pub fault_size: f64,
}

impl Default for BoundSuiteConfig {
    fn default() -> Self {
        BoundSuiteConfig {
            seed: 2024,
            mdps: 5,
            abstractions_per_mdp: 3,
            fault_size: 1e3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSuiteConfig {
    pub experiment: ProbeExperimentConfig,
    pub seeds: Vec<u64>,
    /// Required `R²(s⁺) − R²(ds⁻)`.
    pub margin: f64,
}

impl Default for ProbeSuiteConfig {
    fn default() -> Self {
        ProbeSuiteConfig {
            experiment: ProbeExperimentConfig::default(),
            seeds: vec![0, 1, 2, 3],
            margin: 0.3,
        }
    }
}

fn cmd_theory(common: &Common, suite: Suite, inject_fault: bool) -> CmdResult<()> {
    match suite {
        Suite::T3 => {
            let mut cfg = resolve_config(BoundSuiteConfig::default(), common.config.as_deref(), &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let fault = if inject_fault { cfg.fault_size } else { 0.0 };
            let reports = bound_suite_with_fault(cfg.seed, cfg.mdps, cfg.abstractions_per_mdp, fault)?;
            let rep = SuiteReport::new(cfg.seed, reports);
            for (i, r) in rep.instances.iter().enumerate() {
                println!(
                    "instance {i:>2} lhs {:+.6e} rhs {:.6e} {}",
                    r.lhs,
                    r.rhs,
                    if r.holds { "holds" } else { "VIOLATED" }
                );
            }
            let json = serde_json::to_string_pretty(&rep).map_err(io_err)?;
            println!("{json}");
            if let Some(dir) = &common.out {
                let mut run = RunDir::open(dir, "theory", &serde_json::json!({"suite": "t3", "inject_fault": inject_fault, "config": cfg}), Some(cfg.seed))?;
                let r = run.write_json("theory_t3.json", &rep);
                run.finish(r)?;
            }
            if rep.all_hold {
                Ok(())
            } else {
                let bad = rep.instances.iter().filter(|r| !r.holds).count();
                Err(Failure::Check(format!("{bad} of {} instances violate the bound", rep.instances.len())))
            }
        }
        Suite::T1 => {
            let mut cfg = resolve_config(ProbeSuiteConfig::default(), common.config.as_deref(), &common.overrides)?;
            if let Some(s) = common.seed {
                cfg.seeds = (0..cfg.seeds.len() as u64).map(|i| s + i).collect();
            }
            if inject_fault {
                cfg.experiment.updates = 0;
            }
            let rep = probe_suite(&cfg.experiment, &cfg.seeds, cfg.margin)?;
            for r in &rep.runs {
                println!(
                    "seed {} trained splus {:.4} ds {:.4} gap {:+.4} | control gap {:+.4}",
                    r.seed,
                    r.trained.splus,
                    r.trained.ds,
                    r.trained.gap(),
                    r.control.gap()
                );
            }
            println!(
                "trained passes {}/{} control passes {}/{} -> {}",
                rep.trained_passes,
                rep.runs.len(),
                rep.control_passes,
                rep.runs.len(),
                if rep.holds { "holds" } else { "fails" }
            );
            if let Some(dir) = &common.out {
                let mut run = RunDir::open(dir, "theory", &serde_json::json!({"suite": "t1", "inject_fault": inject_fault, "config": cfg}), None)?;
                let r = run.write_json("theory_t1.json", &rep);
                run.finish(r)?;
            }
            if rep.holds {
                Ok(())
            } else {
                Err(Failure::Check("probe ordering does not hold on a majority of seeds".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub seed: u64,
    /// Mean return over the last quarter of policy episodes.
    pub tail_return: f64,
    pub eval_return: f64,
    pub sim_kernel: Option<f64>,
    pub probe_r2_splus: f64,
    pub probe_r2_ds: f64,
}

/// Mean return of the last quarter (at least one) of `returns`.
pub fn tail_mean(returns: &[f64]) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    let k = (returns.len() / 4).max(1);
    returns[returns.len() - k..].iter().sum::<f64>() / k as f64
}

/// Applies a grid variant name to a base config.
pub fn variant_config(base: &TrainConfig, variant: &str, seed: u64) -> crate::Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if variant != "full" {
        cfg.ablation.apply(variant)?;
    }
    Ok(cfg)
}

fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("variant,seed,tail_return,eval_return,sim_kernel,probe_r2_splus,probe_r2_ds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.tail_return,
            r.eval_return,
            r.sim_kernel.map(|v| v.to_string()).unwrap_or_default(),
            r.probe_r2_splus,
            r.probe_r2_ds
        );
    }
    s
}

fn cmd_grid(common: &Common, seeds: &[u64], variants: &[String], jobs: usize) -> CmdResult<()> {
    let base = train_config(common, None, &[], false)?;
    let mut runs = Vec::new();
    for v in variants {
        for &s in seeds {
            runs.push((v.clone(), variant_config(&base, v, s)?));
        }
    }
    let root = out_dir(common, "grid");
    let mut run = RunDir::open(&root, "grid", &serde_json::json!({"base": base, "seeds": seeds, "variants": variants}), None)?;
    let jobs = jobs.max(1);
    let mut results: Vec<Option<CmdResult<GridRow>>> = (0..runs.len()).map(|_| None).collect();
    for (chunk_runs, chunk_out) in runs.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|sc| {
            let handles: Vec<_> = chunk_runs
                .iter()
                .map(|(v, cfg)| {
                    let dir = root.join(v).join(format!("seed-{}", cfg.seed));
                    sc.spawn(move || {
                        let out = train_into(&dir, cfg)?;
                        Ok(GridRow {
                            variant: v.clone(),
                            seed: cfg.seed,
                            tail_return: tail_mean(&out.episode_returns),
                            eval_return: out.eval.mean_return,
                            sim_kernel: out.eval.sim_kernel,
                            probe_r2_splus: out.eval.probe_r2_splus,
                            probe_r2_ds: out.eval.probe_r2_ds,
                        })
                    })
                })
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Failure::Runtime("grid worker panicked".into()))));
            }
        });
    }
    let rows = match results.into_iter().flatten().collect::<CmdResult<Vec<_>>>() {
        Ok(rows) => rows,
        Err(f) => return run.finish(Err(f)),
    };
    let r = run.write("summary.csv", grid_csv(&rows).as_bytes());
    for row in &rows {
        println!(
            "{:<16} seed {:>3} tail return {:>8.3} eval return {:>8.3} sim {}",
            row.variant,
            row.seed,
            row.tail_return,
            row.eval_return,
            row.sim_kernel.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
        );
    }
    run.finish(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg: TrainConfig = resolve_config(
            TrainConfig::default(),
            None,
            &["model.lr=0.01".into(), "env.reward_mode=dense".into(), "seed=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.lr, 0.01);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.env.reward_mode, crate::env::RewardMode::Dense);
    }

    #[test]
    fn unknown_override_is_config_error() {
        let r: CmdResult<TrainConfig> = resolve_config(TrainConfig::default(), None, &["model.nope=1".into()]);
        assert_eq!(r.unwrap_err().code(), EXIT_CONFIG);
    }

    #[test]
    fn tagged_enum_replaced_wholesale() {
        let cfg: TrainConfig = resolve_config(
            TrainConfig::default(),
            None,
            &[r#"env.topology={"kind":"grid","width":3,"height":3}"#.into()],
        )
        .unwrap();
        assert_eq!(cfg.env.topology, crate::env::Topology::Grid { width: 3, height: 3 });
    }

    #[test]
    fn metrics_round_trip_and_header_check() {
        let rows = vec![
            MetricsRow {
                step: 3,
                episode: 1,
                ret: Some(0.25),
                ..Default::default()
            },
            MetricsRow {
                step: 4,
                episode: 1,
                lambda: Some(1.0 / 3.0),
                ..Default::default()
            },
        ];
        let text = metrics_csv(&rows);
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        let swapped = text.replacen("step,episode", "episode,step", 1);
        assert!(parse_metrics_csv(&swapped).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&TrainConfig::default()), config_hash(&TrainConfig::default()));
        let mut c = TrainConfig::default();
        c.seed = 1;
        assert_ne!(config_hash(&c), config_hash(&TrainConfig::default()));
    }

    #[test]
    fn tail_mean_uses_last_quarter() {
        assert_eq!(tail_mean(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 4.0, 4.0]), 4.0);
        assert_eq!(tail_mean(&[2.0]), 2.0);
    }
}
