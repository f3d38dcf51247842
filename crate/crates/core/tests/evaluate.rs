mod common;

use common::*;
use mgda::augment::ReachCheck;
use mgda::data::{OfflineDataset, TabularPolicy};
use mgda::env::{phi, Cell, MazeKind, MazeSpec, Move};
use mgda::evaluate::{
    bootstrap_ci, exact_occupancy, has_stitching_gap, make_in_distribution_pairs, make_stitching_pairs, rollout_success,
    EvalPair, PairKind, Theorem2Config,
};
use mgda::policy::Policy;
use mgda::pipeline;
use mgda::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bootstrap_intervals() {
    let xs: Vec<f64> = (0..100).map(|k| f64::from(u8::from(k % 2 == 0))).collect();
    let (lo, hi) = bootstrap_ci(&xs, 1000, 0.95, 7);
    assert_eq!((lo, hi), bootstrap_ci(&xs, 1000, 0.95, 7));
    // The binomial standard error at p = 0.5, n = 100 is 0.05.
    assert!((lo - 0.40).abs() <= 0.02 && (hi - 0.60).abs() <= 0.02, "[{lo}, {hi}]");
    assert!(lo <= 0.5 && 0.5 <= hi);
    assert_eq!(bootstrap_ci(&[1.0; 30], 1000, 0.95, 0), (1.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let v: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        let (l, h) = bootstrap_ci(&v, 200, 0.95, 3);
        assert!(l <= m && m <= h);
    }
}

#[test]
fn rollouts_count_the_start_state() {
    let spec = spec("umaze", MazeKind::Continuous);
    let p = Policy::new(&spec, &[8], 0);
    let g = spec.cell_goal(spec.free_cells()[0]);
    let start = mgda::env::State::at_rest(g.0[0] + 0.1, g.0[1]);
    let pairs = vec![
        EvalPair {
            start,
            goal: g,
            kind: PairKind::InDistribution,
        };
        5
    ];
    let r = rollout_success(&p, &spec, &pairs, 10, 0.5, 0).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert_eq!((r.ci_low, r.ci_high), (1.0, 1.0));
    assert!(r.steps.iter().all(|s| *s == Some(0)));
    assert_eq!(r, rollout_success(&p, &spec, &pairs, 10, 0.5, 0).unwrap());
}

#[test]
fn stitching_pairs_span_legs_and_are_certified() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 100, 4);
    let spec = ds.maze.clone();
    let pairs = make_stitching_pairs(&spec, &ds, 100, 0.5, 1).unwrap();
    assert_eq!(pairs.len(), 100);
    let legs: Vec<Vec<Cell>> = ds.legs.iter().map(|l| l.cells(&spec)).collect();
    for p in &pairs {
        assert_eq!(p.kind, PairKind::Stitching);
        let (a, b) = (spec.goal_cell(&phi(&p.start)).unwrap(), spec.goal_cell(&p.goal).unwrap());
        assert!(legs[0].contains(&a) && !legs[1].contains(&a));
        assert!(legs[1].contains(&b) && !legs[0].contains(&b));
        assert!(spec.bfs_reachable(&phi(&p.start), &p.goal).unwrap().reachable);
        assert!(has_stitching_gap(&ds, &phi(&p.start), &p.goal, 0.5));
    }
    let ind = make_in_distribution_pairs(&ds, 50, 0.5, 2).unwrap();
    assert!(ind.iter().all(|p| phi(&p.start).dist(&p.goal) >= 0.5));

    let single: Vec<_> = ds.by_controller(0).map(|(_, t)| t.clone()).collect();
    let one_leg = OfflineDataset::new(spec.clone(), 0, vec![ds.legs[0].clone()], single).unwrap();
    assert!(matches!(make_stitching_pairs(&spec, &one_leg, 10, 0.5, 1), Err(Error::Config(_))));
}

fn random_policy(spec: &MazeSpec, rng: &mut ChaCha8Rng) -> TabularPolicy {
    let table: Vec<[f64; 5]> = (0..spec.rows() * spec.cols())
        .map(|_| {
            let w: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let s: f64 = w.iter().sum();
            w.map(|x| x / s)
        })
        .collect();
    let cols = spec.cols();
    TabularPolicy::new(spec, "random", |c| table[c.j * cols + c.i]).unwrap()
}

#[test]
fn occupancies_are_probability_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in ["grid5", "grid5_wall", "two_room", "umaze", "medium"] {
        let spec = spec(name, MazeKind::Discrete);
        for gamma in [0.5, 0.9, 0.99] {
            let occ = exact_occupancy(&spec, &random_policy(&spec, &mut rng), gamma).unwrap();
            for &c in &occ.cells {
                let rows = std::iter::once(occ.state(c)).chain(Move::ALL.iter().map(|m| occ.sa(c, *m)));
                for row in rows {
                    assert!(row.iter().all(|v| *v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
    let cont = spec("umaze", MazeKind::Continuous);
    let grid = spec("umaze", MazeKind::Discrete);
    let p = TabularPolicy::new(&grid, "stay", |_| [0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(matches!(exact_occupancy(&cont, &p, 0.9), Err(Error::Unsupported(_))));
}

#[test]
fn corridor_occupancy_is_geometric() {
    let spec = MazeSpec::parse("corridor", "#######\n#.....#\n#######\n", MazeKind::Discrete).unwrap();
    let gamma: f64 = 0.9;
    let right = TabularPolicy::new(&spec, "right", |_| [0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let occ = exact_occupancy(&spec, &right, gamma).unwrap();
    let cells: Vec<Cell> = (1..=5).map(|i| Cell::new(i, 1)).collect();
    assert_eq!(spec.shift(cells[0], Move::Right), cells[1]);
    let row = occ.state(cells[0]);
    for (t, c) in cells.iter().enumerate() {
        let expected = if t < 4 { (1.0 - gamma) * gamma.powi(t as i32) } else { gamma.powi(4) };
        let got = row[occ.index_of(*c).unwrap()];
        assert!((got - expected).abs() < 1e-12, "cell {t}: {got} vs {expected}");
    }
}

#[test]
fn reachability_filter_tightens_the_walled_oracle() {
    let base = Theorem2Config {
        maze: "grid5_wall".into(),
        n_traj: 1000,
        n_samples: 50_000,
        ..Default::default()
    };
    let dcfg = mgda::dynmodel::DynamicsConfig::default();
    let filtered = pipeline::theorem2(&base, &dcfg, Some(base.clusters)).unwrap();
    let open = Theorem2Config {
        reach_check: ReachCheck::Disabled,
        ..base
    };
    let unfiltered = pipeline::theorem2(&open, &dcfg, Some(open.clusters)).unwrap();
    assert!(
        filtered.max_deviation <= unfiltered.max_deviation,
        "filtered {} vs unfiltered {}",
        filtered.max_deviation,
        unfiltered.max_deviation
    );
}
