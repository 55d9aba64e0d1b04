//! Experiment orchestration: configuration, seed pools, persistence.
//!
//! Output layout under the output root:
//!
//! ```text
//! {name}-observer/observer.obs, report.json, manifest.json
//! {name}-{agent}/seed{n}/metrics.csv, features.csv, paths.csv,
//!                        beliefs_last.csv, heatmap_{a}-{b}.svg, ep{k}.pol, ep{k}.obs
//! {name}-{agent}/summary.csv, map.txt, manifest.json
//! {name}-pirate/pirate.csv, manifest.json
//! ```

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{load_config, ConfigError, ExperimentConfig, LoadedConfig, PolicyInit};

use crate::agents::{am_rollout, clone_policy, honest_rollout, AgentError, AgentParams, EpisodeRecord, PolicySpec};
use crate::autodiff::ParamVector;
use crate::checkpoint;
use crate::demp::{DempError, DempLearner};
use crate::gridworld::{optimal_q_tables, GridMap, QTables, Trajectory};
use crate::metrics::{self, FeatureRow, MetricRow, MetricsError};
use crate::observers::{BoltzmannObserver, GoalPosterior, LearnableObserver, Observer, ObserverError, PretrainReport};
use crate::protocol::{
    capture_rate, run_rdpp, Agent, AgentKind, AgentSnapshot, AmAgent, CaptureCount, DempAgent, HonestAgent, NaiveAgent,
    ObserverKind, ProtocolError, RdppConfig,
};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Demp(#[from] DempError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("{path}: checkpoint layout {header:?} does not fit this configuration")]
    BadCheckpoint { path: String, header: Vec<u32> },
    #[error("every seed of {run_id} failed; first error: {first}")]
    AllSeedsFailed { run_id: String, first: String },
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, loaded: &mut LoadedConfig) {
        if let Some(s) = self.seed {
            loaded.config.experiment.seed = s;
        }
    }

    pub fn out_root(&self, loaded: &LoadedConfig) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        match &loaded.config.experiment.out {
            Some(o) => loaded.base_dir().join(o),
            None => PathBuf::from("runs"),
        }
    }

    pub fn pool(&self) -> rayon::ThreadPool {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs.filter(|j| *j > 0) {
            b = b.num_threads(j);
        }
        b.build().expect("thread pool")
    }
}

pub fn run_id(cfg: &ExperimentConfig, agent: AgentKind) -> String {
    format!("{}-{}", cfg.experiment.name, agent)
}

pub fn observer_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}-observer", cfg.experiment.name))
}

pub fn pirate_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!("{}-pirate", cfg.experiment.name))
}

pub fn seed_dir(root: &Path, cfg: &ExperimentConfig, agent: AgentKind, seed: u64) -> PathBuf {
    root.join(run_id(cfg, agent)).join(format!("seed{seed}"))
}

/// Files written so far, relative to one directory.
#[derive(Debug, Default, Clone)]
pub struct FileIndex {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl FileIndex {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
        let path = self.root.join(rel.as_ref());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.push(rel.as_ref().to_path_buf());
        Ok(path)
    }

    pub fn extend(&mut self, prefix: &Path, other: FileIndex) {
        self.files.extend(other.files.into_iter().map(|f| prefix.join(f)));
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub seed: u64,
    pub streams: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub code_version: String,
    pub rng: String,
    pub seeds: Vec<SeedStreams>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<FileEntry>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn seed_streams(seed: u64) -> SeedStreams {
    let named = [
        ("observer_init", streams::OBSERVER_INIT),
        ("pretrain_data", streams::PRETRAIN_DATA),
        ("pretrain_shuffle", streams::PRETRAIN_SHUFFLE),
        ("policy_init", streams::POLICY_INIT),
        ("clone", streams::CLONE),
        ("demos", streams::DEMOS),
        ("rollout", streams::ROLLOUT),
        ("prefix", streams::PREFIX),
        ("pirate", streams::PIRATE),
    ];
    SeedStreams {
        seed,
        streams: named.iter().map(|(n, s)| (n.to_string(), *s)).collect(),
    }
}

/// Writes `manifest.json` into the index root, listing every indexed file.
pub fn write_manifest(
    index: &FileIndex,
    command: &str,
    loaded: &LoadedConfig,
    seeds: &[u64],
    started: u64,
) -> Result<PathBuf, HarnessError> {
    let mut files = Vec::with_capacity(index.files.len());
    let mut sorted = index.files.clone();
    sorted.sort();
    sorted.dedup();
    for rel in sorted {
        let path = index.root.join(&rel);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        files.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: bytes.len() as u64,
            sha256: config::sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_path: loaded.path.display().to_string(),
        config_hash: loaded.hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        rng: "ChaCha8, seed_from_u64(seed), set_stream(stream)".into(),
        seeds: seeds.iter().map(|s| seed_streams(*s)).collect(),
        started_unix: started,
        finished_unix: now_unix(),
        files,
    };
    let path = index.root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

/// Either observer, with access to learnable parameters for checkpoints.
#[derive(Debug, Clone)]
pub enum AnyObserver {
    Boltzmann(BoltzmannObserver),
    Learnable(LearnableObserver),
}

impl AnyObserver {
    pub fn checkpoint(&self) -> Option<(Vec<u32>, &ParamVector)> {
        match self {
            Self::Boltzmann(_) => None,
            Self::Learnable(o) => Some((o.header(), o.params())),
        }
    }
}

impl Observer for AnyObserver {
    fn goal_count(&self) -> usize {
        match self {
            Self::Boltzmann(o) => o.goal_count(),
            Self::Learnable(o) => o.goal_count(),
        }
    }

    fn predict(&self, prefix: &Trajectory) -> Result<GoalPosterior, ObserverError> {
        match self {
            Self::Boltzmann(o) => o.predict(prefix),
            Self::Learnable(o) => o.predict(prefix),
        }
    }

    fn beliefs_along(&self, traj: &Trajectory) -> Result<Vec<GoalPosterior>, ObserverError> {
        match self {
            Self::Boltzmann(o) => o.beliefs_along(traj),
            Self::Learnable(o) => o.beliefs_along(traj),
        }
    }

    fn observe(&mut self, traj: &Trajectory, goal: usize) -> Result<Option<f64>, ObserverError> {
        match self {
            Self::Boltzmann(o) => o.observe(traj, goal),
            Self::Learnable(o) => o.observe(traj, goal),
        }
    }
}

/// Default location of the pretrained observer for this configuration.
pub fn observer_checkpoint_path(root: &Path, loaded: &LoadedConfig) -> PathBuf {
    match &loaded.config.observer.checkpoint {
        Some(c) => loaded.base_dir().join(c),
        None => observer_dir(root, &loaded.config).join("observer.obs"),
    }
}

pub fn load_observer_file(
    path: &Path,
    map: &GridMap,
    cfg: &ExperimentConfig,
) -> Result<LearnableObserver, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint(path.display().to_string()));
    }
    let (header, phi) = checkpoint::load(path).map_err(io_err(path))?;
    let obs = LearnableObserver::from_checkpoint(map, &header, phi, cfg.observer.eta).map_err(|_| {
        HarnessError::BadCheckpoint {
            path: path.display().to_string(),
            header: header.clone(),
        }
    })?;
    Ok(obs.with_target(cfg.observer.update.into()))
}

/// The observer an RDPP run starts from.
pub fn initial_observer(root: &Path, loaded: &LoadedConfig, q: &QTables) -> Result<AnyObserver, HarnessError> {
    match loaded.config.experiment.observer {
        ObserverKind::Boltzmann => Ok(AnyObserver::Boltzmann(BoltzmannObserver::new(q.clone()))),
        ObserverKind::Learnable => Ok(AnyObserver::Learnable(load_observer_file(
            &observer_checkpoint_path(root, loaded),
            &loaded.map,
            &loaded.config,
        )?)),
    }
}

/// Demonstrations the learning agents are cloned from.
pub fn demonstrations(
    cfg: &ExperimentConfig,
    map: &GridMap,
    q: &QTables,
    seed: u64,
) -> Result<Vec<Trajectory>, AgentError> {
    let n = cfg.policy.demos;
    match cfg.policy.init {
        PolicyInit::Random => Ok(Vec::new()),
        PolicyInit::Honest => Ok(vec![honest_rollout(map)?; n]),
        PolicyInit::Am => {
            let mut r = rng::stream(seed, streams::DEMOS);
            (0..n)
                .map(|_| am_rollout(map, q, &cfg.policy.am_config(), &mut r))
                .collect()
        }
    }
}

/// Shared starting point of the Naive and DeMP agents for one seed.
pub fn initial_policy(
    cfg: &ExperimentConfig,
    map: &GridMap,
    q: &QTables,
    seed: u64,
) -> Result<(PolicySpec, AgentParams), AgentError> {
    let spec = PolicySpec::new(cfg.policy.hidden);
    let mut params = AgentParams::init(&spec, &mut rng::stream(seed, streams::POLICY_INIT));
    if cfg.policy.init != PolicyInit::Random {
        let demos = demonstrations(cfg, map, q, seed)?;
        params.theta = clone_policy(
            &spec,
            &params.theta,
            map,
            &demos,
            &cfg.policy.clone_config(),
            &mut rng::stream(seed, streams::CLONE),
        )?;
    }
    Ok((spec, params))
}

pub fn build_agent(
    kind: AgentKind,
    cfg: &ExperimentConfig,
    q: &QTables,
    init: Option<&(PolicySpec, AgentParams)>,
) -> Result<Box<dyn Agent + Send>, HarnessError> {
    let policy = || init.cloned().expect("learning agents need an initial policy");
    Ok(match kind {
        AgentKind::Honest => Box::new(HonestAgent),
        AgentKind::Am => Box::new(AmAgent::new(q.clone(), cfg.policy.am_config())),
        AgentKind::Naive => {
            let (spec, params) = policy();
            Box::new(NaiveAgent::new(spec, params, cfg.learner))
        }
        AgentKind::Demp => {
            let (spec, params) = policy();
            Box::new(DempAgent::new(DempLearner::new(spec, params, cfg.learner, cfg.meta)?))
        }
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), MetricsError>) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn paths_csv(records: &[EpisodeRecord]) -> Vec<u8> {
    let mut s = String::from("episode,reached_goal,cells,actions\n");
    for r in records {
        let cells: Vec<String> = r
            .trajectory
            .cells()
            .iter()
            .map(|c| format!("{}:{}", c.x, c.y))
            .collect();
        let actions: String = r
            .trajectory
            .steps
            .iter()
            .map(|st| b"UDLR"[st.action.index()] as char)
            .collect();
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.episode,
            r.trajectory.reached_goal,
            cells.join(" "),
            actions
        ));
    }
    s.into_bytes()
}

/// Outcome of one (agent, seed) run.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub records: Vec<EpisodeRecord>,
    pub files: FileIndex,
}

/// One agent against a fresh observer for one seed, with all per-seed outputs.
pub fn run_seed(
    root: &Path,
    loaded: &LoadedConfig,
    kind: AgentKind,
    seed: u64,
    q: &QTables,
    init: Option<&(PolicySpec, AgentParams)>,
) -> Result<SeedRun, HarnessError> {
    let cfg = &loaded.config;
    let map = &loaded.map;
    let dir = seed_dir(root, cfg, kind, seed);
    let mut files = FileIndex::new(&dir);
    let mut observer = initial_observer(root, loaded, q)?;
    let mut agent = build_agent(kind, cfg, q, init)?;
    let rdpp = RdppConfig {
        episodes: cfg.experiment.episodes,
        prefix: cfg.prefix_rule(),
        seed,
    };
    let ckpt = cfg.checkpoint_episodes();
    let mut saved: Vec<(String, Vec<u8>)> = Vec::new();
    let records = run_rdpp(map, &rdpp, agent.as_mut(), &mut observer, |rec, a, o| {
        if ckpt.binary_search(&rec.episode).is_ok() {
            if let Some((header, phi)) = o.checkpoint() {
                saved.push((format!("ep{}.obs", rec.episode), checkpoint::encode(&header, phi)));
            }
            if let (Some(theta), Some((spec, _))) = (a.policy(), init) {
                let header: Vec<u32> = spec.actor.sizes.iter().map(|s| *s as u32).collect();
                saved.push((format!("ep{}.pol", rec.episode), checkpoint::encode(&header, &theta)));
            }
        }
        Ok(())
    })?;
    for (name, bytes) in saved {
        files.write(name, &bytes)?;
    }

    let id = run_id(cfg, kind);
    let rule = cfg.experiment.ldp_rule;
    let rows: Vec<MetricRow> = records
        .iter()
        .map(|r| MetricRow::from_record(&id, seed, kind.name(), map, r, rule))
        .collect();
    files.write("metrics.csv", &csv_bytes(|b| metrics::write_metrics(b, &rows))?)?;
    let n = cfg.experiment.n_waypoints;
    let feats: Vec<FeatureRow> = records
        .iter()
        .map(|r| FeatureRow {
            run_id: id.clone(),
            seed,
            episode: r.episode,
            features: metrics::path_features(&r.trajectory, n, map.width(), map.height()),
        })
        .collect();
    files.write("features.csv", &csv_bytes(|b| metrics::write_features(b, n, &feats))?)?;
    files.write("paths.csv", &paths_csv(&records))?;
    if let Some(last) = records.last() {
        let goal = map.true_goal_index();
        let mut s = String::from("t,p_true\n");
        for (t, b) in last.beliefs.iter().enumerate() {
            s.push_str(&format!("{},{:?}\n", t + 1, b.p(goal)));
        }
        files.write("beliefs_last.csv", s.as_bytes())?;
    }
    for (a, b) in metrics::default_windows(records.len()) {
        let h = metrics::visit_heatmap(map, &records, a, b)?;
        let last = records.iter().rfind(|r| r.episode <= b).map(|r| &r.trajectory);
        let title = format!("{} episodes {a}-{b}", kind.name());
        files.write(format!("heatmap_{a}-{b}.svg"), h.to_svg(map, &title, last).as_bytes())?;
    }
    Ok(SeedRun {
        seed,
        rows,
        records,
        files,
    })
}

/// Per-episode mean and standard deviation across seeds.
pub fn summary_csv(runs: &[&[MetricRow]]) -> Vec<u8> {
    let mut s = String::from(
        "episode,seeds,p_true_mean,p_true_std,cost_ratio_mean,cost_ratio_std,steps_after_ldp_mean,steps_after_ldp_std,reached_goal_mean\n",
    );
    let k = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    for i in 0..k {
        let at: Vec<&MetricRow> = runs.iter().filter_map(|r| r.get(i)).collect();
        let col = |f: fn(&MetricRow) -> f64| metrics::mean_std(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
        let p = col(|r| r.p_true);
        let c = col(|r| r.cost_ratio);
        let l = col(|r| r.steps_after_ldp as f64);
        let g = col(|r| r.reached_goal as u8 as f64);
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            at[0].episode,
            at.len(),
            p.mean,
            p.std,
            c.mean,
            c.std,
            l.mean,
            l.std,
            g.mean
        ));
    }
    s.into_bytes()
}

/// Result of `cmd_run` for one agent kind.
#[derive(Debug)]
pub struct AgentRun {
    pub agent: AgentKind,
    pub dir: PathBuf,
    pub seeds: Vec<SeedRun>,
    pub failures: Vec<(u64, String)>,
}

pub fn cmd_pretrain(loaded: &LoadedConfig, ov: &Overrides) -> Result<PretrainReport, HarnessError> {
    let started = now_unix();
    let cfg = &loaded.config;
    let root = ov.out_root(loaded);
    let dir = observer_dir(&root, cfg);
    let seed = cfg.experiment.seed;
    let report = ov.pool().install(|| {
        let mut obs = LearnableObserver::new(&loaded.map, cfg.observer.hidden, cfg.observer.eta, seed);
        let report = obs.pretrain(&loaded.map, &cfg.pretrain_spec(), seed)?;
        Ok::<_, HarnessError>((obs, report))
    })?;
    let (obs, report) = report;
    let mut files = FileIndex::new(&dir);
    files.write("observer.obs", &checkpoint::encode(&obs.header(), obs.params()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    files.write("report.json", json.as_bytes())?;
    write_manifest(&files, "pretrain", loaded, &[seed], started)?;
    Ok(report)
}

pub fn cmd_run(loaded: &LoadedConfig, ov: &Overrides) -> Result<Vec<AgentRun>, HarnessError> {
    let started = now_unix();
    let cfg = &loaded.config;
    let root = ov.out_root(loaded);
    let q = optimal_q_tables(&loaded.map);
    let agents = cfg.experiment.agents.clone();
    // fail fast on a missing observer before spawning workers
    initial_observer(&root, loaded, &q)?;
    let seeds = cfg.seeds();
    let per_seed: Vec<Vec<Result<SeedRun, HarnessError>>> = ov.pool().install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let init = if agents.iter().any(AgentKind::learns) {
                    match initial_policy(cfg, &loaded.map, &q, seed) {
                        Ok(i) => Some(i),
                        Err(e) => return agents.iter().map(|_| Err(HarnessError::Agent(e.clone()))).collect(),
                    }
                } else {
                    None
                };
                agents
                    .iter()
                    .map(|&kind| run_seed(&root, loaded, kind, seed, &q, init.as_ref()))
                    .collect()
            })
            .collect()
    });

    let mut columns: Vec<Vec<Result<SeedRun, HarnessError>>> = agents.iter().map(|_| Vec::new()).collect();
    for row in per_seed {
        for (col, r) in columns.iter_mut().zip(row) {
            col.push(r);
        }
    }
    let mut out = Vec::new();
    for (kind, results) in agents.iter().zip(columns) {
        let id = run_id(cfg, *kind);
        let dir = root.join(&id);
        let mut index = FileIndex::new(&dir);
        let mut ok = Vec::new();
        let mut failures = Vec::new();
        for (seed, r) in seeds.iter().zip(results) {
            match r {
                Ok(run) => {
                    index.extend(Path::new(&format!("seed{seed}")), run.files.clone());
                    ok.push(run);
                }
                Err(e) => {
                    eprintln!("{id} seed {seed}: {e}");
                    index.write(format!("seed{seed}/error.txt"), format!("{e}\n").as_bytes())?;
                    failures.push((*seed, e.to_string()));
                }
            }
        }
        index.write("map.txt", loaded.map.to_text().as_bytes())?;
        let rows: Vec<&[MetricRow]> = ok.iter().map(|r| r.rows.as_slice()).collect();
        index.write("summary.csv", &summary_csv(&rows))?;
        write_manifest(&index, "run", loaded, &seeds, started)?;
        if ok.is_empty() {
            return Err(HarnessError::AllSeedsFailed {
                run_id: id,
                first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
            });
        }
        out.push(AgentRun {
            agent: *kind,
            dir,
            seeds: ok,
            failures,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PirateRow {
    pub agent: String,
    pub snapshot_episode: usize,
    pub trials: usize,
    pub captures: usize,
    pub rate: f64,
}

fn load_policy(path: &Path, cfg: &ExperimentConfig) -> Result<(PolicySpec, ParamVector), HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingCheckpoint(path.display().to_string()));
    }
    let (header, theta) = checkpoint::load(path).map_err(io_err(path))?;
    let spec = PolicySpec::new(cfg.policy.hidden);
    let want: Vec<u32> = spec.actor.sizes.iter().map(|s| *s as u32).collect();
    if header != want || theta.len() != spec.actor.param_count() {
        return Err(HarnessError::BadCheckpoint {
            path: path.display().to_string(),
            header,
        });
    }
    Ok((spec, theta))
}

/// Capture counts for one agent at one snapshot, summed over seeds.
pub fn pirate_cell(
    root: &Path,
    loaded: &LoadedConfig,
    kind: AgentKind,
    snapshot: usize,
    q: &QTables,
) -> Result<CaptureCount, HarnessError> {
    let cfg = &loaded.config;
    let mut total = CaptureCount::default();
    for seed in cfg.seeds() {
        let dir = seed_dir(root, cfg, kind, seed);
        let observer = match cfg.experiment.observer {
            ObserverKind::Boltzmann => AnyObserver::Boltzmann(BoltzmannObserver::new(q.clone())),
            ObserverKind::Learnable => AnyObserver::Learnable(load_observer_file(
                &dir.join(format!("ep{snapshot}.obs")),
                &loaded.map,
                cfg,
            )?),
        };
        let agent = match kind {
            AgentKind::Honest => AgentSnapshot::Honest,
            AgentKind::Am => AgentSnapshot::Am(q.clone(), cfg.policy.am_config()),
            AgentKind::Naive | AgentKind::Demp => {
                let (spec, theta) = load_policy(&dir.join(format!("ep{snapshot}.pol")), cfg)?;
                AgentSnapshot::Policy(spec, theta)
            }
        };
        let trial_seed = seed ^ ((snapshot as u64) << 32);
        let c = capture_rate(&loaded.map, &agent, &observer, cfg.pirate.trials, trial_seed)?;
        total = total.merge(c);
    }
    Ok(total)
}

pub fn cmd_pirate(loaded: &LoadedConfig, ov: &Overrides) -> Result<Vec<PirateRow>, HarnessError> {
    let started = now_unix();
    let cfg = &loaded.config;
    let root = ov.out_root(loaded);
    let q = optimal_q_tables(&loaded.map);
    let mut rows = Vec::new();
    ov.pool().install(|| -> Result<(), HarnessError> {
        for kind in &cfg.experiment.agents {
            for &s in &cfg.pirate.snapshots {
                let c = pirate_cell(&root, loaded, *kind, s, &q)?;
                if c.trials > 0 {
                    rows.push(PirateRow {
                        agent: kind.name().to_string(),
                        snapshot_episode: s,
                        trials: c.trials,
                        captures: c.captures,
                        rate: c.rate(),
                    });
                }
            }
        }
        Ok(())
    })?;
    let mut files = FileIndex::new(&pirate_dir(&root, cfg));
    files.write("pirate.csv", &pirate_csv(&rows))?;
    write_manifest(&files, "pirate", loaded, &cfg.seeds(), started)?;
    Ok(rows)
}

pub fn pirate_csv(rows: &[PirateRow]) -> Vec<u8> {
    let mut s = String::from("agent,snapshot_episode,trials,captures,rate\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:?}\n",
            r.agent, r.snapshot_episode, r.trials, r.captures, r.rate
        ));
    }
    s.into_bytes()
}
