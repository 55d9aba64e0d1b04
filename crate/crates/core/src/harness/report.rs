//! Plots regenerated from the CSV outputs of one or more runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{io_err, HarnessError};
use crate::gridworld::{load_map, Action, Cell, GridMap, Step, Trajectory};
use crate::metrics::{self, MetricRow, MetricsError, CURVE_WINDOW};
use crate::svg::{self, Series};

/// Episodes at the end of a run summarized by the bar charts.
pub const TAIL: usize = 10;

/// One `{name}-{agent}` directory as read back from disk.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    /// Per seed: p_true after each step of the final episode.
    pub beliefs: Vec<Vec<f64>>,
    /// Per seed: every trajectory, in episode order.
    pub paths: Vec<Vec<(usize, Trajectory)>>,
    pub map: Option<GridMap>,
}

fn is_run_dir(dir: &Path) -> bool {
    seed_dirs(dir).map(|s| !s.is_empty()).unwrap_or(false)
}

fn seed_dirs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<(u64, PathBuf)> = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let n = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("seed"));
        if let Some(seed) = n.and_then(|n| n.parse().ok()) {
            if p.join("metrics.csv").is_file() {
                out.push((seed, p));
            }
        }
    }
    out.sort();
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

/// Expands each argument to run directories: a run directory itself, or
/// an output root holding several.
pub fn discover(dirs: &[PathBuf]) -> Result<Vec<PathBuf>, HarnessError> {
    let mut runs = Vec::new();
    for d in dirs {
        if is_run_dir(d) {
            runs.push(d.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(io_err(d))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_run_dir(p))
            .collect();
        children.sort();
        if children.is_empty() {
            return Err(HarnessError::MissingCheckpoint(
                d.join("seed*/metrics.csv").display().to_string(),
            ));
        }
        runs.extend(children);
    }
    Ok(runs)
}

fn read_beliefs(path: &Path) -> Result<Vec<f64>, MetricsError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MetricsError::MalformedCsv {
        row: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |m: String| MetricsError::MalformedCsv { row: i + 1, message: m };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let p = rec.get(1).ok_or_else(|| bad("short row".into()))?;
        out.push(p.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?);
    }
    Ok(out)
}

/// Parses `paths.csv`: `episode,reached_goal,cells,actions`, cells as
/// space-separated `x:y`, actions as one `U`/`D`/`L`/`R` letter per step.
pub fn read_paths(text: &str) -> Result<Vec<(usize, Trajectory)>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |m: String| MetricsError::MalformedCsv { row: i + 1, message: m };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad("expected 4 columns".into()));
        }
        let episode: usize = rec[0]
            .parse()
            .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        let reached: bool = rec[1]
            .parse()
            .map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?;
        let cells = rec[2]
            .split_whitespace()
            .map(|c| {
                let (x, y) = c.split_once(':').ok_or_else(|| bad(format!("bad cell {c}")))?;
                let x = x.parse().map_err(|_| bad(format!("bad cell {c}")))?;
                let y = y.parse().map_err(|_| bad(format!("bad cell {c}")))?;
                Ok(Cell { x, y })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let actions = rec[3]
            .chars()
            .map(|c| match c {
                'U' => Ok(Action::Up),
                'D' => Ok(Action::Down),
                'L' => Ok(Action::Left),
                'R' => Ok(Action::Right),
                _ => Err(bad(format!("bad action {c}"))),
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        if cells.len() != actions.len() + 1 || cells.windows(2).any(|w| w[0].manhattan(w[1]) > 1) {
            return Err(bad("cells and actions do not form a path".into()));
        }
        let steps = cells
            .iter()
            .zip(&actions)
            .map(|(c, a)| Step { cell: *c, action: *a })
            .collect();
        let t = Trajectory {
            steps,
            terminal: *cells.last().unwrap(),
            episode,
            reached_goal: reached,
        };
        out.push((episode, t));
    }
    Ok(out)
}

pub fn load_run(dir: &Path) -> Result<RunData, HarnessError> {
    let mut data = RunData {
        dir: dir.to_path_buf(),
        rows: Vec::new(),
        beliefs: Vec::new(),
        paths: Vec::new(),
        map: None,
    };
    for s in seed_dirs(dir).map_err(io_err(dir))? {
        let m = s.join("metrics.csv");
        let f = std::fs::File::open(&m).map_err(io_err(&m))?;
        data.rows.extend(metrics::read_metrics(f)?);
        let b = s.join("beliefs_last.csv");
        if b.is_file() {
            data.beliefs.push(read_beliefs(&b)?);
        }
        let p = s.join("paths.csv");
        if p.is_file() {
            let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
            data.paths.push(read_paths(&text)?);
        }
    }
    let mp = dir.join("map.txt");
    if mp.is_file() {
        let text = std::fs::read_to_string(&mp).map_err(io_err(&mp))?;
        data.map = load_map(&text).ok();
    }
    Ok(data)
}

/// Rows grouped by agent, then by seed, each seed's rows in episode order.
fn by_agent(runs: &[RunData]) -> BTreeMap<String, BTreeMap<u64, Vec<&MetricRow>>> {
    let mut out: BTreeMap<String, BTreeMap<u64, Vec<&MetricRow>>> = BTreeMap::new();
    for r in runs.iter().flat_map(|r| &r.rows) {
        out.entry(r.agent.clone())
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    for seeds in out.values_mut() {
        for rows in seeds.values_mut() {
            rows.sort_by_key(|r| r.episode);
        }
    }
    out
}

/// Mean over seeds at each index, using the seeds that reach that index.
fn mean_by_index(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| metrics::mean_std(&series.iter().filter_map(|s| s.get(i).copied()).collect::<Vec<_>>()).mean)
        .collect()
}

/// Smoothed mean P(G*) per episode, one series per agent.
pub fn deceptiveness_svg(runs: &[RunData]) -> String {
    let series: Vec<Series> = by_agent(runs)
        .into_iter()
        .map(|(agent, seeds)| {
            let per_seed: Vec<Vec<f64>> = seeds
                .values()
                .map(|rows| rows.iter().map(|r| r.p_true).collect())
                .collect();
            let episodes: Vec<f64> = seeds
                .values()
                .max_by_key(|r| r.len())
                .unwrap()
                .iter()
                .map(|r| r.episode as f64)
                .collect();
            let smooth = metrics::trailing_mean(&mean_by_index(&per_seed), CURVE_WINDOW);
            Series {
                label: agent,
                points: episodes.into_iter().zip(smooth).collect(),
            }
        })
        .collect();
    svg::line_chart("Deceptiveness", "episode", "P(true goal)", &series, Some((0.0, 1.0)))
}

/// P(G*) along the final path, averaged over seeds, one series per run.
pub fn belief_svg(runs: &[RunData]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .filter(|r| !r.beliefs.is_empty())
        .map(|r| Series {
            label: r
                .rows
                .first()
                .map(|x| x.agent.clone())
                .unwrap_or_else(|| dir_label(&r.dir)),
            points: mean_by_index(&r.beliefs)
                .into_iter()
                .enumerate()
                .map(|(t, p)| ((t + 1) as f64, p))
                .collect(),
        })
        .collect();
    svg::line_chart(
        "Belief along the final path",
        "step",
        "P(true goal)",
        &series,
        Some((0.0, 1.0)),
    )
}

fn dir_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Per agent: mean and std over seeds of each seed's mean over its last
/// `TAIL` episodes.
pub fn tail_bars(runs: &[RunData], f: fn(&MetricRow) -> f64) -> Vec<(String, f64, f64)> {
    by_agent(runs)
        .into_iter()
        .map(|(agent, seeds)| {
            let per_seed: Vec<f64> = seeds
                .values()
                .map(|rows| {
                    let tail = &rows[rows.len().saturating_sub(TAIL)..];
                    metrics::mean_std(&tail.iter().map(|r| f(r)).collect::<Vec<_>>()).mean
                })
                .collect();
            let m = metrics::mean_std(&per_seed);
            (agent, m.mean, m.std)
        })
        .collect()
}

/// Writes every report plot into `out` and returns their paths.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<Vec<PathBuf>, HarnessError> {
    let run_dirs = discover(dirs)?;
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let out = match out {
        Some(o) => o.to_path_buf(),
        None => dirs.first().cloned().unwrap_or_default().join("report"),
    };
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), HarnessError> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(io_err(&p))?;
        written.push(p);
        Ok(())
    };
    put("deceptiveness.svg".into(), deceptiveness_svg(&runs))?;
    put("belief.svg".into(), belief_svg(&runs))?;
    let cost = tail_bars(&runs, |r| r.cost_ratio);
    put(
        "cost.svg".into(),
        svg::bar_chart("Path cost ratio (last 10 episodes)", "cost ratio", &cost),
    )?;
    let ldp = tail_bars(&runs, |r| r.steps_after_ldp as f64);
    put(
        "ldp.svg".into(),
        svg::bar_chart("Steps after LDP (last 10 episodes)", "steps", &ldp),
    )?;
    for r in &runs {
        let Some(map) = &r.map else { continue };
        if r.paths.is_empty() {
            continue;
        }
        let k = r.paths.iter().map(Vec::len).max().unwrap_or(0);
        let label = dir_label(&r.dir);
        for (a, b) in metrics::default_windows(k) {
            let trajs = r
                .paths
                .iter()
                .flat_map(|s| s.iter().filter(|(e, _)| (a..=b).contains(e)).map(|(_, t)| t));
            let h = metrics::heatmap_of(map, trajs);
            let last = r.paths[0].iter().rfind(|(e, _)| *e <= b).map(|(_, t)| t);
            let title = format!("{label} episodes {a}-{b}");
            put(format!("heatmap_{label}_{a}-{b}.svg"), h.to_svg(map, &title, last))?;
        }
    }
    Ok(written)
}
