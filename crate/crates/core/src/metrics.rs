//! Evaluation metrics and CSV exports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::EpisodeRecord;
use crate::gridworld::{GridMap, Trajectory};
use crate::observers::{GoalPosterior, Observer, ObserverError};
use crate::svg;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("episode window {0}..={1} is empty or outside the run")]
    EmptyWindow(usize, usize),
    #[error("malformed csv at row {row}: {message}")]
    MalformedCsv { row: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

/// When the observer counts as having recognized the true goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LdpRule {
    /// The true goal is the posterior argmax (ties to the lowest index).
    #[default]
    Argmax,
    /// The true goal holds more than half the probability mass.
    Dominance,
}

impl LdpRule {
    pub fn recognized(&self, posterior: &GoalPosterior, goal: usize) -> bool {
        match self {
            Self::Argmax => posterior.argmax() == goal,
            Self::Dominance => posterior.p(goal) > 0.5,
        }
    }
}

/// Steps after the last deceptive point.
///
/// `beliefs[t]` is the posterior after `t + 1` steps. The last deceptive
/// point is the last step at which the true goal is not recognized; the
/// result is the number of steps after it, i.e. the length of the trailing
/// run of recognized steps. Recognized everywhere gives `T`, never gives 0.
pub fn steps_after_ldp(beliefs: &[GoalPosterior], goal: usize, rule: LdpRule) -> usize {
    beliefs.iter().rev().take_while(|b| rule.recognized(b, goal)).count()
}

/// Trajectory length over the shortest start-to-goal distance.
pub fn cost_ratio(map: &GridMap, traj: &Trajectory) -> f64 {
    let d = map.distances_from(map.start())[map.index(map.true_goal())].unwrap_or(0);
    if d == 0 {
        return 1.0;
    }
    traj.len() as f64 / d as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub agent: String,
    pub episode: usize,
    pub p_true: f64,
    pub cost_ratio: f64,
    pub steps_after_ldp: usize,
    pub reached_goal: bool,
    pub traj_len: usize,
}

impl MetricRow {
    pub fn from_record(
        run_id: &str,
        seed: u64,
        agent: &str,
        map: &GridMap,
        record: &EpisodeRecord,
        rule: LdpRule,
    ) -> Self {
        let goal = map.true_goal_index();
        Self {
            run_id: run_id.to_string(),
            seed,
            agent: agent.to_string(),
            episode: record.episode,
            p_true: record.posterior.p(goal),
            cost_ratio: cost_ratio(map, &record.trajectory),
            steps_after_ldp: steps_after_ldp(&record.beliefs, goal, rule),
            reached_goal: record.trajectory.reached_goal,
            traj_len: record.trajectory.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub series: Vec<f64>,
    /// Trailing mean over up to `window` episodes.
    pub smoothed: Vec<f64>,
}

pub const CURVE_WINDOW: usize = 10;

pub fn trailing_mean(series: &[f64], window: usize) -> Vec<f64> {
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            let w = &series[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// P(G*) per episode.
pub fn deceptiveness_curve(records: &[EpisodeRecord], goal: usize) -> Curve {
    let series: Vec<f64> = records.iter().map(|r| r.posterior.p(goal)).collect();
    let smoothed = trailing_mean(&series, CURVE_WINDOW);
    Curve { series, smoothed }
}

/// P(G* | first t steps) for `t = 1..=T`.
pub fn belief_along_path<O: Observer + ?Sized>(
    traj: &Trajectory,
    observer: &O,
    goal: usize,
) -> Result<Vec<f64>, MetricsError> {
    Ok(observer.beliefs_along(traj)?.iter().map(|b| b.p(goal)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitHeatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major visit counts of the cells each step starts from.
    pub counts: Vec<usize>,
}

impl VisitHeatmap {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|i| self.counts[*i] > 0).collect()
    }

    pub fn to_svg(&self, map: &GridMap, title: &str, overlay: Option<&Trajectory>) -> String {
        let blocked: Vec<bool> = (0..map.cell_count()).map(|i| !map.is_free(map.cell_at(i))).collect();
        let path: Option<Vec<(usize, usize)>> = overlay.map(|t| t.cells().iter().map(|c| (c.x, c.y)).collect());
        svg::grid_heatmap(title, self.width, self.height, &self.counts, &blocked, path.as_deref())
    }
}

/// Visits over episodes `first..=last` (1-based).
pub fn visit_heatmap(
    map: &GridMap,
    records: &[EpisodeRecord],
    first: usize,
    last: usize,
) -> Result<VisitHeatmap, MetricsError> {
    let chosen: Vec<&Trajectory> = records
        .iter()
        .filter(|r| (first..=last).contains(&r.episode))
        .map(|r| &r.trajectory)
        .collect();
    if first == 0 || first > last || chosen.is_empty() {
        return Err(MetricsError::EmptyWindow(first, last));
    }
    Ok(heatmap_of(map, chosen))
}

pub fn heatmap_of<'a>(map: &GridMap, trajs: impl IntoIterator<Item = &'a Trajectory>) -> VisitHeatmap {
    let mut counts = vec![0; map.cell_count()];
    for t in trajs {
        for s in &t.steps {
            counts[map.index(s.cell)] += 1;
        }
    }
    VisitHeatmap {
        width: map.width(),
        height: map.height(),
        counts,
    }
}

/// Quarters of `1..=k` (fewer windows when `k < 4`).
pub fn default_windows(k: usize) -> Vec<(usize, usize)> {
    let n = k.min(4);
    (0..n).map(|i| (i * k / n + 1, (i + 1) * k / n)).collect()
}

/// Positions at `n` equally spaced arc-length fractions of the cell path,
/// as `(x / width, y / height)` pairs.
pub fn path_features(traj: &Trajectory, n: usize, width: usize, height: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two waypoints");
    let cells = traj.cells();
    let mut cum = vec![0.0];
    for w in cells.windows(2) {
        let d = (w[0].x as f64 - w[1].x as f64).abs() + (w[0].y as f64 - w[1].y as f64).abs();
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let s = total * i as f64 / (n - 1) as f64;
        let (x, y) = if total == 0.0 {
            (cells[0].x as f64, cells[0].y as f64)
        } else {
            let j = cum.partition_point(|c| *c < s).clamp(1, cells.len() - 1);
            let seg = cum[j] - cum[j - 1];
            let f = if seg == 0.0 { 0.0 } else { (s - cum[j - 1]) / seg };
            let (a, b) = (cells[j - 1], cells[j]);
            (
                a.x as f64 + f * (b.x as f64 - a.x as f64),
                a.y as f64 + f * (b.y as f64 - a.y as f64),
            )
        };
        out.push(x / width as f64);
        out.push(y / height as f64);
    }
    out
}

pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub features: Vec<f64>,
}

fn csv_err(row: usize, e: impl std::fmt::Display) -> MetricsError {
    MetricsError::MalformedCsv {
        row,
        message: e.to_string(),
    }
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "run_id",
            "seed",
            "agent",
            "episode",
            "p_true",
            "cost_ratio",
            "steps_after_ldp",
            "reached_goal",
            "traj_len",
        ])
        .map_err(|e| csv_err(0, e))?;
    }
    for (i, r) in rows.iter().enumerate() {
        w.serialize(r).map_err(|e| csv_err(i + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| csv_err(i + 1, e)))
        .collect()
}

pub fn write_features<W: Write>(out: W, n_waypoints: usize, rows: &[FeatureRow]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["run_id".to_string(), "seed".into(), "episode".into()];
    head.extend((0..2 * n_waypoints).map(|i| format!("f{i}")));
    w.write_record(&head).map_err(|e| csv_err(0, e))?;
    for (i, r) in rows.iter().enumerate() {
        if r.features.len() != 2 * n_waypoints {
            return Err(csv_err(i + 1, "feature width does not match header"));
        }
        let mut rec = vec![r.run_id.clone(), r.seed.to_string(), r.episode.to_string()];
        rec.extend(r.features.iter().map(|f| ryu_like(*f)));
        w.write_record(&rec).map_err(|e| csv_err(i + 1, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
fn ryu_like(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_features<R: Read>(input: R) -> Result<Vec<FeatureRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let width = r.headers().map_err(|e| csv_err(0, e))?.len();
    if width < 3 {
        return Err(csv_err(0, "missing columns"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| csv_err(row, e))?;
        let num = |j: usize| rec.get(j).ok_or_else(|| csv_err(row, "short row"));
        out.push(FeatureRow {
            run_id: num(0)?.to_string(),
            seed: num(1)?.parse().map_err(|e| csv_err(row, e))?,
            episode: num(2)?.parse().map_err(|e| csv_err(row, e))?,
            features: (3..width)
                .map(|j| num(j)?.parse::<f64>().map_err(|e| csv_err(row, e)))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[cfg(test)]
mod tests;
