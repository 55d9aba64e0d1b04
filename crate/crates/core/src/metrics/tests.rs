use super::*;
use crate::agents::honest_rollout;
use crate::gridworld::{bundled, optimal_q_tables, Cell};
use crate::observers::BoltzmannObserver;
use proptest::prelude::*;

fn post(p: &[f64]) -> GoalPosterior {
    GoalPosterior::new(p.to_vec()).unwrap()
}

fn record(episode: usize, trajectory: Trajectory, posterior: GoalPosterior) -> EpisodeRecord {
    let beliefs = vec![posterior.clone(); trajectory.len()];
    EpisodeRecord {
        episode,
        prefix: trajectory.prefix(1.min(trajectory.len())),
        trajectory,
        posterior,
        env_return: 0.0,
        deceptive_reward: 0.0,
        kl: 0.0,
        episode_loss: None,
        beliefs,
    }
}

fn straight(n: usize) -> Trajectory {
    let cells: Vec<Cell> = (0..=n).map(|x| Cell::new(x, 0)).collect();
    Trajectory::from_cells(&cells, true)
}

#[test]
fn uniform_posteriors_give_flat_curve() {
    let recs: Vec<_> = (1..=7)
        .map(|k| record(k, straight(3), GoalPosterior::uniform(3)))
        .collect();
    let c = deceptiveness_curve(&recs, 1);
    assert_eq!(c.series.len(), 7);
    assert_eq!(c.smoothed.len(), 7);
    for v in c.series.iter().chain(&c.smoothed) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn trailing_mean_examples() {
    assert_eq!(trailing_mean(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    assert_eq!(trailing_mean(&[], 10), Vec::<f64>::new());
}

#[test]
fn beliefs_along_paths() {
    let map = GridMap::parse(bundled::GRID15).unwrap();
    let q = optimal_q_tables(&map);
    let obs = BoltzmannObserver::new(q);
    for g in 0..map.goal_count() {
        let m = map.clone().with_true_goal(g).unwrap();
        let path = honest_rollout(&m).unwrap();
        let b = belief_along_path(&path, &obs, g).unwrap();
        assert_eq!(b.len(), path.len());
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        // on an optimal path the true goal ends with the largest probability
        let last = obs.predict(&path).unwrap();
        assert!((0..m.goal_count()).all(|o| last.p(g) >= last.p(o) - 1e-12));
        let one = belief_along_path(&path.prefix(1), &obs, g).unwrap();
        assert_eq!(one.len(), 1);
    }
}

#[test]
fn ldp_conventions() {
    let yes = post(&[0.1, 0.8, 0.1]);
    let no = post(&[0.6, 0.3, 0.1]);
    assert_eq!(steps_after_ldp(&vec![yes.clone(); 9], 1, LdpRule::Argmax), 9);
    assert_eq!(steps_after_ldp(&vec![no.clone(); 9], 1, LdpRule::Argmax), 0);
    // recognized from index T-3 on, after a deceptive stretch
    let t = 10;
    let seq: Vec<_> = (0..t)
        .map(|i| if i >= t - 3 || i == 2 { yes.clone() } else { no.clone() })
        .collect();
    let s = steps_after_ldp(&seq, 1, LdpRule::Argmax);
    assert_eq!(s, 3);
    assert_eq!(s + (t - s), t);
    // ties go to the lowest index
    let tie = post(&[0.4, 0.4, 0.2]);
    assert_eq!(steps_after_ldp(&[tie.clone()], 0, LdpRule::Argmax), 1);
    assert_eq!(steps_after_ldp(&[tie], 1, LdpRule::Argmax), 0);
    // dominance needs a majority
    let plural = post(&[0.2, 0.45, 0.35]);
    assert_eq!(steps_after_ldp(&[plural.clone()], 1, LdpRule::Argmax), 1);
    assert_eq!(steps_after_ldp(&[plural], 1, LdpRule::Dominance), 0);
}

#[test]
fn honest_cost_ratio_is_one() {
    for name in ["grid15", "grid49", "grid100", "pirate49"] {
        let base = GridMap::parse(bundled::by_name(name).unwrap()).unwrap();
        for g in 0..base.goal_count() {
            let m = base.clone().with_true_goal(g).unwrap();
            assert_eq!(cost_ratio(&m, &honest_rollout(&m).unwrap()), 1.0);
        }
    }
}

#[test]
fn heatmap_counts_and_windows() {
    let map = GridMap::parse("S....0\n......\n.....1\n").unwrap();
    let line = straight(5);
    let recs = vec![record(1, line.clone(), GoalPosterior::uniform(2))];
    let h = visit_heatmap(&map, &recs, 1, 1).unwrap();
    for x in 0..6 {
        assert_eq!(h.counts[map.index(Cell::new(x, 0))], usize::from(x < 5));
    }
    assert_eq!(h.total(), line.len());
    assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 5);
    assert!(matches!(
        visit_heatmap(&map, &recs, 2, 3),
        Err(MetricsError::EmptyWindow(2, 3))
    ));
    assert!(matches!(
        visit_heatmap(&map, &recs, 0, 1),
        Err(MetricsError::EmptyWindow(0, 1))
    ));
    let svg = h.to_svg(&map, "visits", Some(&line));
    assert!(svg.contains("stroke-dasharray"));
    assert_eq!(svg, h.to_svg(&map, "visits", Some(&line)));
}

#[test]
fn window_quarters() {
    assert_eq!(default_windows(100), vec![(1, 25), (26, 50), (51, 75), (76, 100)]);
    assert_eq!(default_windows(2), vec![(1, 1), (2, 2)]);
    assert_eq!(default_windows(6), vec![(1, 1), (2, 3), (4, 4), (5, 6)]);
    assert!(default_windows(0).is_empty());
}

#[test]
fn path_feature_examples() {
    let t = straight(10);
    assert_eq!(path_features(&t, 2, 20, 10), vec![0.0, 0.0, 0.5, 0.0]);
    let f = path_features(&t, 5, 20, 10);
    let xs: Vec<f64> = f.chunks(2).map(|p| p[0] * 20.0).collect();
    assert_eq!(xs, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
    assert!(f.chunks(2).all(|p| p[1] == 0.0));
    assert_eq!(feature_distance(&f, &path_features(&t, 5, 20, 10)), 0.0);
    let still = Trajectory::empty_at(Cell::new(3, 4));
    assert_eq!(path_features(&still, 3, 10, 10), vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
}

#[test]
fn empty_metrics_csv_has_header() {
    let mut buf = Vec::new();
    write_metrics(&mut buf, &[]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.trim_end(),
        "run_id,seed,agent,episode,p_true,cost_ratio,steps_after_ldp,reached_goal,traj_len"
    );
    assert!(read_metrics(text.as_bytes()).unwrap().is_empty());
}

#[test]
fn malformed_csv_reports_row() {
    let text = "run_id,seed,agent,episode,p_true,cost_ratio,steps_after_ldp,reached_goal,traj_len\n\
                r,0,am,1,0.5,1.2,3,true,12\n\
                r,0,am,two,0.5,1.2,3,true,12\n";
    match read_metrics(text.as_bytes()) {
        Err(MetricsError::MalformedCsv { row, .. }) => assert_eq!(row, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn mean_std_example() {
    let m = mean_std(&[1.0, 3.0]);
    assert_eq!((m.mean, m.std), (2.0, 1.0));
    assert!(mean_std(&[]).mean.is_nan());
}

fn metric_row() -> impl Strategy<Value = MetricRow> {
    (
        "[a-z0-9_-]{1,8}",
        any::<u64>(),
        prop::sample::select(vec!["honest", "am", "naive", "demp"]),
        1usize..1000,
        0.0f64..=1.0,
        1.0f64..10.0,
        0usize..200,
        any::<bool>(),
        0usize..400,
    )
        .prop_map(
            |(run_id, seed, agent, episode, p_true, cost_ratio, s, reached_goal, traj_len)| MetricRow {
                run_id,
                seed,
                agent: agent.to_string(),
                episode,
                p_true,
                cost_ratio,
                steps_after_ldp: s,
                reached_goal,
                traj_len,
            },
        )
}

proptest! {
    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(metric_row(), 0..20)) {
        let mut a = Vec::new();
        write_metrics(&mut a, &rows).unwrap();
        let back = read_metrics(a.as_slice()).unwrap();
        prop_assert_eq!(&back, &rows);
        let mut b = Vec::new();
        write_metrics(&mut b, &back).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn features_csv_round_trips(
        vals in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 0..10),
        seed in any::<u64>(),
    ) {
        let rows: Vec<FeatureRow> = vals
            .into_iter()
            .enumerate()
            .map(|(i, features)| FeatureRow { run_id: "r".into(), seed, episode: i + 1, features })
            .collect();
        let mut a = Vec::new();
        write_features(&mut a, 3, &rows).unwrap();
        let back = read_features(a.as_slice()).unwrap();
        prop_assert_eq!(&back, &rows);
        let mut b = Vec::new();
        write_features(&mut b, 3, &back).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn heatmap_mass_is_conserved(lens in prop::collection::vec(0usize..6, 1..8)) {
        let map = GridMap::parse("S.....0\n.......\n......1\n").unwrap();
        let recs: Vec<_> = lens
            .iter()
            .enumerate()
            .map(|(i, n)| record(i + 1, straight(*n), GoalPosterior::uniform(2)))
            .collect();
        let h = visit_heatmap(&map, &recs, 1, recs.len()).unwrap();
        prop_assert_eq!(h.total(), lens.iter().sum::<usize>());
    }

    #[test]
    fn ldp_plus_steps_after_is_length(ps in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let beliefs: Vec<_> = ps.iter().map(|p| post(&[1.0 - p, *p])).collect();
        let s = steps_after_ldp(&beliefs, 1, LdpRule::Argmax);
        prop_assert!(s <= beliefs.len());
        let ldp = beliefs.len() - s;
        if ldp > 0 {
            prop_assert!(beliefs[ldp - 1].argmax() != 1);
        }
        prop_assert!(beliefs[ldp..].iter().all(|b| b.argmax() == 1));
    }
}
