//! Command-line harness. Every subcommand resolves its flags and optional JSON
//! config into a serialisable job, runs it, and writes a run manifest next to
//! its primary output so `replay` can rerun it exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imitation::{
    evaluate_policy, ingest, parse_fcd, read_dataset, train_policy, write_dataset, write_eval_csv,
    EgoSelector, EncoderConfig, FilterConfig, PolicyArtifact, PolicyTrainConfig, Window,
};
use crate::qlearn::{
    self, run_episode, write_metrics_csv, Encoding, EpisodeParams, LearnConfig, MetricsBucket,
    QTable, RngStreams, TraceRow, METRICS_HEADER,
};
use crate::rsu::{self, RsuConfig};
use crate::world::{Event, RewardConfig, RoadConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NO_RESULT: u8 = 3;

pub const TRACE_HEADER: &str =
    "run,t,lane,pos,speed,scan0,scan1,scan2,scan3,scan4,scan5,scan6,action,reward,event";
pub const REJECTIONS_HEADER: &str = "trajectory_id,clause,detail";
pub const HISTORY_HEADER: &str = "epoch,train_mse,validation_mse";

#[derive(Debug, Parser)]
#[command(name = "drivelab", version, about = "Driving-policy learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tabular Q-learning agent on the two-lane road.
    SimTrain(SimTrainArgs),
    /// Greedy rollouts of a saved Q-table with a per-step trace.
    SimEval(SimEvalArgs),
    /// Turn an FCD log into a dataset of positive merge sequences.
    Ingest(IngestArgs),
    /// Fit the LSTM policy to a dataset.
    ImitateTrain(ImitateTrainArgs),
    /// Predicted-vs-actual report for a policy artifact.
    ImitateEval(ImitateEvalArgs),
    /// Serve a policy artifact to vehicles inside the geofence.
    RsuServe(RsuServeArgs),
    /// Request the policy from an RSU.
    RsuFetch(RsuFetchArgs),
    /// Rerun a job from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SimTrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub episodes: Option<u64>,
    #[arg(long)]
    pub v2v: bool,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Independent seeds trained in parallel, one output file per seed.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// JSON with optional `road`, `rewards` and `learn` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "metrics.csv")]
    pub metrics_out: PathBuf,
    /// Defaults to the metrics path with a `.qtable.json` extension.
    #[arg(long)]
    pub qtable_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimEvalArgs {
    #[arg(long)]
    pub qtable: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: u32,
    /// JSON with optional `road` and `rewards` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "trace.csv")]
    pub trace_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub xml: PathBuf,
    /// `id:<glob>` or `lane:<prefix>`.
    #[arg(long, default_value = "id:ego*")]
    pub ego: String,
    /// Inclusive time window `start:end`.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<Window>,
    #[arg(long)]
    pub filter_config: Option<PathBuf>,
    /// JSON encoder settings.
    #[arg(long)]
    pub encoder_config: Option<PathBuf>,
    #[arg(long, default_value = "dataset.jsonl")]
    pub out: PathBuf,
    /// Defaults to the dataset path with a `.rejections.csv` extension.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImitateTrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "policy.json")]
    pub artifact_out: PathBuf,
    /// Defaults to the artifact path with a `.history.csv` extension.
    #[arg(long)]
    pub history_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImitateEvalArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "eval.csv")]
    pub csv_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RsuServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub artifact: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RsuFetchArgs {
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub id: String,
    #[arg(long, allow_negative_numbers = true)]
    pub x: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub y: f64,
    /// Seconds.
    #[arg(long, default_value_t = 5.0)]
    pub timeout: f64,
    #[arg(long, default_value = "policy.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs into this directory instead of their recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_window(s: &str) -> std::result::Result<Window, String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected start:end, got `{s}`"))?;
    let start: f64 = a.trim().parse().map_err(|e| format!("bad start: {e}"))?;
    let end: f64 = b.trim().parse().map_err(|e| format!("bad end: {e}"))?;
    if !(start <= end) {
        return Err(format!("window start {start} exceeds end {end}"));
    }
    Ok(Window { start, end })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    /// Fully resolved job, defaults filled in.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Where the manifest for a run with this primary output lives.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut s = primary.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn redirect(path: &mut PathBuf, dir: &Path) {
    if let Some(name) = path.file_name() {
        *path = dir.join(name);
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::file(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::file(path, e))
}

/// A resolved, replayable unit of work.
pub trait Job: Serialize + DeserializeOwned {
    const NAME: &'static str;
    fn seeds(&self) -> Vec<u64>;
    /// Output files, primary first.
    fn outputs(&self) -> Vec<PathBuf>;
    fn redirect(&mut self, dir: &Path);
    fn execute(&self) -> Result<u8>;
}

/// Run a job and, when it produced its outputs, record its manifest.
pub fn run_job<J: Job>(job: &J) -> Result<u8> {
    let code = job.execute()?;
    if code == EXIT_OK {
        let outputs = job.outputs();
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: J::NAME.into(),
            seeds: job.seeds(),
            outputs: outputs.clone(),
            config: serde_json::to_value(job)?,
        };
        let path = manifest_path(&outputs[0]);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))?;
    }
    Ok(code)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub road: RoadConfig,
    pub rewards: RewardConfig,
    pub learn: LearnConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTrainJob {
    pub road: RoadConfig,
    pub rewards: RewardConfig,
    /// `seed` is ignored when `seeds` holds more than one entry.
    pub learn: LearnConfig,
    pub seeds: Vec<u64>,
    pub metrics_out: PathBuf,
    pub qtable_out: PathBuf,
}

impl SimTrainJob {
    pub fn from_args(a: &SimTrainArgs) -> Result<Self> {
        let mut cfg: SimConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => SimConfig::default(),
        };
        if let Some(n) = a.episodes {
            cfg.learn.episodes = n;
        }
        if a.v2v {
            cfg.learn.v2v = true;
        }
        if let Some(s) = a.seed {
            cfg.learn.seed = s;
        }
        let seeds = match &a.seeds {
            Some(list) if !list.is_empty() => list.clone(),
            _ => vec![cfg.learn.seed],
        };
        let job = SimTrainJob {
            road: cfg.road,
            rewards: cfg.rewards,
            learn: cfg.learn,
            seeds,
            qtable_out: a
                .qtable_out
                .clone()
                .unwrap_or_else(|| sibling(&a.metrics_out, "qtable.json")),
            metrics_out: a.metrics_out.clone(),
        };
        job.validate()?;
        Ok(job)
    }

    fn validate(&self) -> Result<()> {
        self.road.validate()?;
        self.learn.validate()?;
        if self.learn.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(Error::Config("--seeds has duplicates".into()));
        }
        Ok(())
    }

    fn multi(&self) -> bool {
        self.seeds.len() > 1
    }

    /// Per-seed output paths: `m.csv` becomes `m.seed7.csv`.
    pub fn seed_paths(&self, seed: u64) -> (PathBuf, PathBuf) {
        let tag = |p: &Path| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            let name = match p.extension() {
                Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
                None => format!("{stem}.seed{seed}"),
            };
            p.with_file_name(name)
        };
        (tag(&self.metrics_out), tag(&self.qtable_out))
    }
}

impl Job for SimTrainJob {
    const NAME: &'static str = "sim-train";

    fn seeds(&self) -> Vec<u64> {
        self.seeds.clone()
    }

    fn outputs(&self) -> Vec<PathBuf> {
        let mut out = vec![self.metrics_out.clone()];
        if self.multi() {
            for &s in &self.seeds {
                let (m, q) = self.seed_paths(s);
                out.push(m);
                out.push(q);
            }
        } else {
            out.push(self.qtable_out.clone());
        }
        out
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.metrics_out, dir);
        redirect(&mut self.qtable_out, dir);
    }

    fn execute(&self) -> Result<u8> {
        self.validate()?;
        let results: Vec<Result<(QTable, Vec<MetricsBucket>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .seeds
                .iter()
                .map(|&seed| {
                    let learn = LearnConfig {
                        seed,
                        ..self.learn.clone()
                    };
                    scope.spawn(move || qlearn::train(&self.road, &self.rewards, &learn))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });

        let mut merged = Vec::new();
        for (&seed, result) in self.seeds.iter().zip(results) {
            let (table, buckets) = result?;
            let last = buckets.last().expect("at least one bucket");
            println!(
                "seed {seed}: {} episodes, final bucket crash {:.3} quick {:.3} mean steps to goal {}",
                self.learn.episodes,
                last.crash_rate,
                last.quick_rate,
                last.avg_time_to_goal
                    .map_or("n/a".to_string(), |v| format!("{v:.2}"))
            );
            let (metrics, qtable) = if self.multi() {
                self.seed_paths(seed)
            } else {
                (self.metrics_out.clone(), self.qtable_out.clone())
            };
            let mut w = create(&metrics)?;
            write_metrics_csv(&mut w, &buckets)?;
            finish(w, &metrics)?;
            table.save(&qtable)?;
            merged.push((seed, buckets));
        }

        if self.multi() {
            let mut w = create(&self.metrics_out)?;
            writeln!(w, "seed,{METRICS_HEADER}")?;
            for (seed, buckets) in &merged {
                let mut body = Vec::new();
                write_metrics_csv(&mut body, buckets)?;
                for line in String::from_utf8_lossy(&body).lines().skip(1) {
                    writeln!(w, "{seed},{line}")?;
                }
            }
            finish(w, &self.metrics_out)?;
        }
        Ok(EXIT_OK)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub road: RoadConfig,
    pub rewards: RewardConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEvalJob {
    pub road: RoadConfig,
    pub rewards: RewardConfig,
    pub qtable: PathBuf,
    pub seed: u64,
    pub runs: u32,
    pub trace_out: PathBuf,
}

impl SimEvalJob {
    pub fn from_args(a: &SimEvalArgs) -> Result<Self> {
        let cfg: EnvConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => EnvConfig::default(),
        };
        cfg.road.validate()?;
        Ok(SimEvalJob {
            road: cfg.road,
            rewards: cfg.rewards,
            qtable: a.qtable.clone(),
            seed: a.seed,
            runs: a.runs,
            trace_out: a.trace_out.clone(),
        })
    }
}

pub fn write_trace_csv<W: Write>(mut w: W, run: u32, rows: &[TraceRow]) -> std::io::Result<()> {
    for r in rows {
        write!(w, "{run},{},{},{},{}", r.t, r.lane, r.pos, r.speed)?;
        for d in r.scan {
            write!(w, ",{d}")?;
        }
        writeln!(w, ",{},{},{}", r.action.index(), r.reward, r.event.as_str())?;
    }
    Ok(())
}

impl Job for SimEvalJob {
    const NAME: &'static str = "sim-eval";

    fn seeds(&self) -> Vec<u64> {
        vec![self.seed]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.trace_out.clone()]
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.trace_out, dir);
    }

    fn execute(&self) -> Result<u8> {
        let mut table = QTable::load(&self.qtable)?;
        let params = EpisodeParams::greedy(Encoding::from_v2v(table.v2v));
        let mut rngs = RngStreams::new(self.seed);
        let mut w = create(&self.trace_out)?;
        writeln!(w, "{TRACE_HEADER}")?;
        let (mut goals, mut failures, mut steps) = (0, 0, 0u64);
        for run in 0..self.runs {
            let mut rows = Vec::new();
            let stats = run_episode(
                &self.road,
                &self.rewards,
                &mut table,
                &params,
                &mut rngs,
                Some(&mut rows),
            )?;
            write_trace_csv(&mut w, run, &rows)?;
            steps += u64::from(stats.steps);
            match stats.terminal {
                Event::Goal => goals += 1,
                e if e.is_failure() => failures += 1,
                _ => {}
            }
        }
        finish(w, &self.trace_out)?;
        println!(
            "{} runs: {goals} goal, {failures} crash/bump, {} timeout, {:.2} mean steps",
            self.runs,
            self.runs - goals - failures,
            steps as f64 / f64::from(self.runs)
        );
        Ok(EXIT_OK)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestJob {
    pub xml: PathBuf,
    pub ego: String,
    pub window: Option<Window>,
    pub filter: FilterConfig,
    pub encoder: EncoderConfig,
    pub out: PathBuf,
    pub report_out: PathBuf,
}

impl IngestJob {
    pub fn from_args(a: &IngestArgs) -> Result<Self> {
        EgoSelector::parse(&a.ego)?;
        let filter: FilterConfig = match &a.filter_config {
            Some(p) => read_json(p)?,
            None => FilterConfig::default(),
        };
        let encoder: EncoderConfig = match &a.encoder_config {
            Some(p) => read_json(p)?,
            None => EncoderConfig::default(),
        };
        filter.validate()?;
        encoder.validate()?;
        Ok(IngestJob {
            xml: a.xml.clone(),
            ego: a.ego.clone(),
            window: a.window,
            filter,
            encoder,
            report_out: a
                .report_out
                .clone()
                .unwrap_or_else(|| sibling(&a.out, "rejections.csv")),
            out: a.out.clone(),
        })
    }
}

impl Job for IngestJob {
    const NAME: &'static str = "ingest";

    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone(), self.report_out.clone()]
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.out, dir);
        redirect(&mut self.report_out, dir);
    }

    fn execute(&self) -> Result<u8> {
        let text = fs::read_to_string(&self.xml).map_err(|e| Error::file(&self.xml, e))?;
        let log = parse_fcd(&text)?;
        let selector = EgoSelector::parse(&self.ego)?;
        let report = ingest(&log, &selector, self.window, &self.filter, &self.encoder)?;
        write_dataset(&self.out, &report.samples)?;
        let mut w = create(&self.report_out)?;
        writeln!(w, "{REJECTIONS_HEADER}")?;
        for (id, v) in report.verdicts.iter().filter(|(_, v)| !v.is_positive()) {
            writeln!(w, "{id},{},{v}", v.clause())?;
        }
        finish(w, &self.report_out)?;
        println!(
            "{} trajectories: {} positive ({} samples), {} rejected",
            report.verdicts.len(),
            report.positives(),
            report.samples.len(),
            report.verdicts.len() - report.positives()
        );
        Ok(EXIT_OK)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImitateTrainJob {
    pub dataset: PathBuf,
    pub train: PolicyTrainConfig,
    pub artifact_out: PathBuf,
    pub history_out: PathBuf,
}

impl ImitateTrainJob {
    pub fn from_args(a: &ImitateTrainArgs) -> Result<Self> {
        let mut train: PolicyTrainConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => PolicyTrainConfig::default(),
        };
        if let Some(e) = a.epochs {
            train.fit.epochs = e;
        }
        if let Some(s) = a.seed {
            train.seed = s;
            train.fit.seed = s;
        }
        Ok(ImitateTrainJob {
            dataset: a.dataset.clone(),
            train,
            history_out: a
                .history_out
                .clone()
                .unwrap_or_else(|| sibling(&a.artifact_out, "history.csv")),
            artifact_out: a.artifact_out.clone(),
        })
    }
}

impl Job for ImitateTrainJob {
    const NAME: &'static str = "imitate-train";

    fn seeds(&self) -> Vec<u64> {
        vec![self.train.seed]
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.artifact_out.clone(), self.history_out.clone()]
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.artifact_out, dir);
        redirect(&mut self.history_out, dir);
    }

    fn execute(&self) -> Result<u8> {
        let samples = read_dataset(&self.dataset)?;
        let trained = train_policy(&samples, &self.train)?;
        trained.artifact.save(&self.artifact_out)?;
        let h = &trained.history;
        let mut w = create(&self.history_out)?;
        writeln!(w, "{HISTORY_HEADER}")?;
        for (i, t) in h.train.iter().enumerate() {
            let v = h.validation.get(i).map(f64::to_string).unwrap_or_default();
            writeln!(w, "{},{t},{v}", i + 1)?;
        }
        finish(w, &self.history_out)?;
        println!(
            "{} sequences ({} train, {} validation), {} epochs, final train MSE {}",
            samples.len(),
            trained.train_ids.len(),
            trained.validation_ids.len(),
            h.epochs(),
            h.train.last().map_or("n/a".into(), |v| format!("{v:.3e}"))
        );
        Ok(EXIT_OK)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImitateEvalJob {
    pub artifact: PathBuf,
    pub dataset: PathBuf,
    pub csv_out: PathBuf,
}

impl Job for ImitateEvalJob {
    const NAME: &'static str = "imitate-eval";

    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.csv_out.clone()]
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.csv_out, dir);
    }

    fn execute(&self) -> Result<u8> {
        let artifact = PolicyArtifact::load(&self.artifact)?;
        let samples = read_dataset(&self.dataset)?;
        let report = evaluate_policy(&artifact, &samples)?;
        let mut w = create(&self.csv_out)?;
        write_eval_csv(&mut w, &report.rows)?;
        finish(w, &self.csv_out)?;
        println!("speed_rmse {}", report.speed_rmse);
        println!("angle_rmse {}", report.angle_rmse);
        Ok(EXIT_OK)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsuFetchJob {
    pub endpoint: String,
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub timeout: f64,
    pub out: PathBuf,
}

impl Job for RsuFetchJob {
    const NAME: &'static str = "rsu-fetch";

    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }

    fn outputs(&self) -> Vec<PathBuf> {
        vec![self.out.clone()]
    }

    fn redirect(&mut self, dir: &Path) {
        redirect(&mut self.out, dir);
    }

    fn execute(&self) -> Result<u8> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(Error::Config(format!(
                "timeout must be positive, got {}",
                self.timeout
            )));
        }
        let got = rsu::fetch(
            &self.endpoint,
            &self.id,
            self.x,
            self.y,
            Duration::from_secs_f64(self.timeout),
        )?;
        match got {
            Some(artifact) => {
                artifact.save(&self.out)?;
                println!("policy written to {}", self.out.display());
                Ok(EXIT_OK)
            }
            None => {
                println!(
                    "no policy: ({}, {}) is outside the geofence",
                    self.x, self.y
                );
                Ok(EXIT_NO_RESULT)
            }
        }
    }
}

fn rsu_serve(a: &RsuServeArgs) -> Result<u8> {
    let mut cfg: RsuConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RsuConfig::default(),
    };
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    if let Some(p) = &a.artifact {
        cfg.artifact = p.clone();
    }
    cfg.validate()?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst))
            .map_err(|e| Error::Config(format!("cannot install signal handler: {e}")))?;
    }
    let handle = rsu::start(&cfg)?;
    println!("listening on {}", handle.local_addr());
    std::io::stdout().flush()?;
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    let stats = handle.shutdown()?;
    println!(
        "served {} policies, {} outside, {} errors, {} timeouts",
        stats.policies, stats.outside, stats.errors, stats.timeouts
    );
    Ok(EXIT_OK)
}

fn replay(a: &ReplayArgs) -> Result<u8> {
    let m = RunManifest::load(&a.manifest)?;
    fn go<J: Job>(m: &RunManifest, dir: Option<&Path>) -> Result<u8> {
        let mut job: J = serde_json::from_value(m.config.clone())
            .map_err(|e| Error::Config(format!("manifest config: {e}")))?;
        if let Some(d) = dir {
            job.redirect(d);
        }
        run_job(&job)
    }
    let dir = a.out_dir.as_deref();
    match m.subcommand.as_str() {
        SimTrainJob::NAME => go::<SimTrainJob>(&m, dir),
        SimEvalJob::NAME => go::<SimEvalJob>(&m, dir),
        IngestJob::NAME => go::<IngestJob>(&m, dir),
        ImitateTrainJob::NAME => go::<ImitateTrainJob>(&m, dir),
        ImitateEvalJob::NAME => go::<ImitateEvalJob>(&m, dir),
        RsuFetchJob::NAME => go::<RsuFetchJob>(&m, dir),
        other => Err(Error::Config(format!("cannot replay subcommand `{other}`"))),
    }
}

pub fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::SimTrain(a) => run_job(&SimTrainJob::from_args(a)?),
        Command::SimEval(a) => run_job(&SimEvalJob::from_args(a)?),
        Command::Ingest(a) => run_job(&IngestJob::from_args(a)?),
        Command::ImitateTrain(a) => run_job(&ImitateTrainJob::from_args(a)?),
        Command::ImitateEval(a) => run_job(&ImitateEvalJob {
            artifact: a.artifact.clone(),
            dataset: a.dataset.clone(),
            csv_out: a.csv_out.clone(),
        }),
        Command::RsuServe(a) => rsu_serve(a),
        Command::RsuFetch(a) => run_job(&RsuFetchJob {
            endpoint: a.endpoint.clone(),
            id: a.id.clone(),
            x: a.x,
            y: a.y,
            timeout: a.timeout,
            out: a.out.clone(),
        }),
        Command::Replay(a) => replay(a),
    }
}

/// Config errors are usage errors; everything else is a runtime failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args`, run, report errors on stderr and return the exit code.
pub fn main_with<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
