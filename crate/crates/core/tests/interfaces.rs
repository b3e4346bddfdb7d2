//! The exported CSV and JSON files, read back the way a plotting script would.

use std::collections::BTreeMap;

use covsteer::export::{beliefs_csv, ellipses_csv, sigma_points_csv, trajectories_csv, PolicyFile};
use covsteer::montecarlo::McSettings;
use covsteer::{
    duffing_model, greedy_steer, simulate_closed_loop, DuffingParams, GaussianBelief, GreedyConfig, GreedyRun,
};
use nalgebra::{DMatrix, DVector};

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(text: &str) -> Self {
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').map(str::to_string).collect::<Vec<_>>();
        let rows = lines
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        for r in &rows {
            assert_eq!(r.len(), header.len());
        }
        Self { header, rows }
    }

    fn col(&self, name: &str) -> usize {
        self.header
            .iter()
            .position(|h| h == name)
            .unwrap_or_else(|| panic!("no column {name}"))
    }

    fn f(&self, row: usize, name: &str) -> f64 {
        self.rows[row][self.col(name)].parse().unwrap()
    }

    fn vector(&self, row: usize, prefix: &str, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| self.f(row, &format!("{prefix}_{}", i + 1)))
    }

    fn matrix(&self, row: usize, prefix: &str, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| self.f(row, &format!("{prefix}_{}{}", i + 1, j + 1)))
    }
}

fn scenario() -> (GreedyRun, GaussianBelief, GaussianBelief, f64) {
    let model = duffing_model(DuffingParams::default()).unwrap();
    let b0 = GaussianBelief::from_slices(&[0.0, 0.0], &[6.25, 0.0, 0.0, 4.0]).unwrap();
    let goal = GaussianBelief::from_slices(&[0.0, 0.0], &[1.5625, 0.0, 0.0, 1.0]).unwrap();
    let cfg = GreedyConfig::new(40, goal.clone());
    let alpha = cfg.alpha;
    (greedy_steer(&model, &b0, &cfg).unwrap(), b0, goal, alpha)
}

#[test]
fn beliefs_read_back_exactly() {
    let (run, _, _, _) = scenario();
    let table = Table::parse(&beliefs_csv(&run));
    assert_eq!(table.rows.len(), run.beliefs.len());
    for (row, b) in run.beliefs.iter().enumerate() {
        assert_eq!(table.f(row, "t") as usize, row);
        assert_eq!(&table.vector(row, "mu", 2), b.mean());
        assert_eq!(&table.matrix(row, "sigma", 2), b.cov());
    }
}

#[test]
fn sigma_points_reproduce_predicted_means() {
    let (run, _, _, _) = scenario();
    let table = Table::parse(&sigma_points_csv(&run));
    let mut by_stage: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for row in 0..table.rows.len() {
        by_stage.entry(table.f(row, "t") as usize).or_default().push(row);
    }
    assert_eq!(by_stage.len(), run.beliefs.len());
    for (t, rows) in &by_stage {
        assert_eq!(rows.len(), 5);
        let weighted: DVector<f64> = rows
            .iter()
            .map(|&r| table.vector(r, "x", 2) * table.f(r, "gamma"))
            .fold(DVector::zeros(2), |a, b| a + b);
        let err = (weighted - run.beliefs[*t].mean()).amax();
        assert!(err < 1e-9, "stage {t}: {err:e}");
    }
}

#[test]
fn ellipses_describe_beliefs_and_sigma_points() {
    let (run, b0, goal, alpha) = scenario();
    let table = Table::parse(&ellipses_csv(&run, &goal, alpha));
    let kinds: Vec<&str> = table.rows.iter().map(|r| r[table.col("kind")].as_str()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "belief").count(), run.beliefs.len());
    for kind in ["goal", "sigma_initial", "sigma_goal"] {
        assert_eq!(kinds.iter().filter(|k| **k == kind).count(), 1, "{kind}");
    }
    let row = kinds.iter().position(|k| *k == "sigma_initial").unwrap();
    let center = table.vector(row, "center", 2);
    let shape_inv = table.matrix(row, "shape", 2).try_inverse().unwrap();
    let level = table.f(row, "level");
    // The non-central sigma points lie on the boundary.
    for p in run.sigma_sets[0].points.iter().skip(1) {
        let d = p - &center;
        let q = (d.transpose() * &shape_inv * &d)[(0, 0)];
        assert!((q - level).abs() < 1e-9 * level.max(1.0), "{q} vs {level}");
    }
    let goal_row = kinds.iter().position(|k| *k == "goal").unwrap();
    assert_eq!(&table.matrix(goal_row, "shape", 2), goal.cov());
    assert_eq!(table.f(goal_row, "level"), 1.0);
    assert_eq!(&table.vector(0, "center", 2), b0.mean());
}

#[test]
fn policy_json_round_trips_and_drives_simulation() {
    let (run, b0, _, _) = scenario();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    PolicyFile::from_run(&run).write(&path).unwrap();
    let back = PolicyFile::read(&path).unwrap();
    assert_eq!(back.laws().unwrap(), run.laws);
    assert_eq!(back.initial_belief.to_belief().unwrap(), b0);
    assert_eq!(&back.terminal_belief.to_belief().unwrap(), run.terminal());

    let model = duffing_model(DuffingParams::default()).unwrap();
    let mut settings = McSettings::new(64, 5);
    settings.trajectories = 3;
    let (report, trajectories) = simulate_closed_loop(&model, &back.laws().unwrap(), &b0, &settings).unwrap();
    assert_eq!(report.valid, 64);
    let table = Table::parse(&trajectories_csv(&trajectories, report.start_stage));
    assert_eq!(table.header, ["sample", "t", "x_1", "x_2"]);
    assert_eq!(table.rows.len(), 3 * 41);
}
