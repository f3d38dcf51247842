mod common;

use common::*;
use mgda::cluster::{cluster_diameters, kmeans_fit, ClusterIndex, Point};
use mgda::data::{collect, default_legs, is_wall_contact, CollectConfig, transition_tuples, wall_stress_dataset, Transition};
use mgda::dynmodel::{
    estimate_local_lipschitz, fit_dynamics, split_by_trajectory, verify_theorem1, DynamicsConfig, DynamicsModel,
    Featurizer, TrainMode, TrainReport,
};
use mgda::env::{phi, Action, MazeKind, State};
use mgda::numerics::{Activation, Matrix, Mlp};
use mgda::stats::{mean, percentile, variance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

fn quick_config() -> DynamicsConfig {
    DynamicsConfig {
        epochs: 10,
        ..Default::default()
    }
}

#[test]
fn open_space_dynamics_are_learned_and_stay_projected() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 60, 1);
    let tuples = transition_tuples(&ds);
    let (train, held) = split_by_trajectory(&tuples, 5);
    let (m, slack) = fit_dynamics(&ds.maze, &train, &quick_config()).unwrap();
    assert_eq!(slack.logits.len(), train.len());
    assert!(slack.sigma().iter().all(|s| *s > 0.0 && *s < 1.0));

    // Away from walls the point maze is linear in (v, f), so held-out
    // residuals are small.
    let free: Vec<Transition> = held
        .into_iter()
        .filter(|t| {
            let next = ds.maze.step(&t.state, &t.action).unwrap();
            let (State::Point { vel, .. }, State::Point { vel: v2, .. }) = (t.state, next) else { unreachable!() };
            let Action::Force(f) = t.action else { unreachable!() };
            (0..2).all(|k| (v2[k] - (vel[k] + f[k] * ds.maze.dt)).abs() < 1e-12)
        })
        .collect();
    let r = m.residuals(&free);
    assert!(percentile(&r, 0.5) < 1e-2, "median held-out residual {}", percentile(&r, 0.5));

    for w in m.net.weights() {
        assert!(jacobi_singular_values(w)[0] <= m.lambda * 1.001);
    }
    let hist = &m.report.loss_history;
    assert!(hist.last().unwrap() < &hist[0]);
    assert!(m.report.epsilon >= 0.0);
}

#[test]
fn fitting_is_deterministic_and_checkpoints_round_trip() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 10, 2);
    let tuples = transition_tuples(&ds);
    let cfg = DynamicsConfig {
        epochs: 2,
        ..Default::default()
    };
    let (a, _) = fit_dynamics(&ds.maze, &tuples, &cfg).unwrap();
    let (b, _) = fit_dynamics(&ds.maze, &tuples, &cfg).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    a.save(&p).unwrap();
    assert_eq!(DynamicsModel::load(&p).unwrap(), a);
}

#[test]
fn grid_model_memorizes_and_certifies() {
    let spec = spec("two_room", MazeKind::Discrete);
    let cfg = CollectConfig {
        n_traj: 40,
        noise: 0.0,
        seed: 3,
        ..Default::default()
    };
    let ds = collect(&spec, &default_legs(&spec).unwrap(), &cfg).unwrap();
    let tuples = transition_tuples(&ds);
    let dcfg = DynamicsConfig {
        epochs: 200,
        ..Default::default()
    };
    let (m, _) = fit_dynamics(&ds.maze, &tuples, &dcfg).unwrap();
    let r = m.residuals(&tuples);
    let worst = r.iter().copied().fold(0.0, f64::max);
    assert!(worst < 0.1, "largest train residual {worst}");
    let cert = verify_theorem1(&m, &ds.maze, &tuples, 1.0, 1.0, 0).unwrap();
    assert_eq!(cert.bound_violation_rate, 0.0);
    assert!(verify_theorem1(&m, &ds.maze, &[], 1.0, 1.0, 0).is_err());
}

fn linear_model(gain: f64) -> DynamicsModel {
    let mut w = Matrix::zeros(2, 6);
    w.set(0, 0, gain);
    w.set(1, 1, gain);
    let net = Mlp::from_parts(vec![w], vec![vec![0.0; 2]], Activation::Relu).unwrap();
    DynamicsModel {
        net,
        featurizer: Featurizer::Continuous {
            mean: [0.0; 6],
            std: [1.0; 6],
        },
        lambda: 1.0,
        mode: TrainMode::Lipschitz,
        report: TrainReport {
            epsilon: 0.0,
            layer_norms: vec![gain],
            loss_history: vec![],
        },
    }
}

#[test]
fn local_lipschitz_estimates() {
    let spec = spec("umaze", MazeKind::Continuous);
    let ds = small_dataset("umaze", MazeKind::Continuous, 10, 4);
    let probes: Vec<(State, Action)> = transition_tuples(&ds).iter().map(|t| (t.state, t.action)).collect();
    let m = linear_model(0.7);
    let d = estimate_local_lipschitz(&m, &spec, &probes, 0.1, 32, 1).unwrap();
    assert!((d - 0.7).abs() <= 0.05, "estimate {d}");
    assert!(d <= m.certificate_bound() + 1e-12);
    let z = DynamicsModel::zeros(Featurizer::fit(&spec, &probes), &[8], 1.0);
    assert_eq!(estimate_local_lipschitz(&z, &spec, &probes, 0.1, 32, 1).unwrap(), 0.0);
    assert!(estimate_local_lipschitz(&m, &spec, &probes, 0.0, 32, 1).is_err());
}

#[test]
fn nearby_states_predict_within_the_certificate() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 20, 5);
    let (m, _) = fit_dynamics(&ds.maze, &transition_tuples(&ds), &quick_config()).unwrap();
    let Featurizer::Continuous { std, .. } = m.featurizer else { unreachable!() };
    // The bound holds in standardized coordinates; convert to state units.
    let min_std = std[..4].iter().copied().fold(f64::INFINITY, f64::min);
    let bound = m.lambda.powi(m.net.num_layers() as i32) / min_std;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in transition_tuples(&ds).iter().step_by(7) {
        let State::Point { pos, vel } = t.state else { unreachable!() };
        let d = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
        let s2 = State::Point {
            pos: [pos[0] + d[0], pos[1] + d[1]],
            vel,
        };
        let (p, q) = (m.predict_displacement(&t.state, &t.action), m.predict_displacement(&s2, &t.action));
        assert!(norm(&[p[0] - q[0], p[1] - q[1]]) <= bound * norm(&d) + 1e-12);
    }
}

/// One-sided Welch test that `a` has the smaller mean.
fn welch_p_less(a: &[f64], b: &[f64]) -> f64 {
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    StudentsT::new(0.0, 1.0, df).unwrap().cdf(t)
}

#[test]
fn slack_downweights_wall_contacts() {
    let spec = spec("medium", MazeKind::Discrete);
    let ds = wall_stress_dataset(&spec, 200, 50, 0.1, 7).unwrap();
    let tuples = transition_tuples(&ds);
    let (_, slack) = fit_dynamics(&spec, &tuples, &DynamicsConfig::default()).unwrap();
    let sigma = slack.sigma();
    let (mut contact, mut free) = (Vec::new(), Vec::new());
    for (t, s) in tuples.iter().zip(&sigma) {
        if is_wall_contact(t) {
            contact.push(*s);
        } else {
            free.push(*s);
        }
    }
    assert!(contact.len() > 100 && free.len() > 100);
    let p = welch_p_less(&contact, &free);
    assert!(p < 0.05, "contact sigma {} vs free {}, p = {p}", mean(&contact), mean(&free));
}

#[test]
fn zero_slack_penalty_is_refused() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 2, 0);
    let cfg = DynamicsConfig {
        alpha_slack: 0.0,
        ..Default::default()
    };
    assert!(fit_dynamics(&ds.maze, &transition_tuples(&ds), &cfg).is_err());
}

fn sse(points: &[Point], labels: &[usize], c: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..c {
        let members: Vec<&Point> = points.iter().zip(labels).filter(|(_, l)| **l == k).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let m = [
            members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64,
            members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64,
        ];
        total += members.iter().map(|p| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sum::<f64>();
    }
    total
}

#[test]
fn separated_blobs_match_brute_force_two_clustering() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let n = rng.random_range(4..=12);
        let radius = 0.5;
        let centres = [[0.0, 0.0], [10.0 * radius * 2.0 + 1.0, rng.random_range(-3.0..3.0)]];
        let points: Vec<Point> = (0..n)
            .map(|k| {
                let c = centres[if k < n / 2 { 0 } else { 1 }];
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = rng.random_range(0.0..radius);
                [c[0] + r * a.cos(), c[1] + r * a.sin()]
            })
            .collect();
        let mut best = (f64::INFINITY, 0u32);
        // Point 0 is fixed in cluster 0, so each split is counted once.
        for mask in 0..(1u32 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|k| if k > 0 && mask >> (k - 1) & 1 == 1 { 1 } else { 0 }).collect();
            if labels.iter().all(|l| *l == 0) {
                continue;
            }
            let s = sse(&points, &labels, 2);
            if s < best.0 {
                best = (s, mask);
            }
        }
        let km = kmeans_fit(&points, 2, 100, trial).unwrap();
        let same = |a: usize, b: usize| km.assignment[a] == km.assignment[b];
        for k in 0..n {
            assert_eq!(same(0, k), k < n / 2, "trial {trial}, point {k}");
        }
        assert!((sse(&points, &km.assignment, 2) - best.0).abs() < 1e-9);
        let w = km.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9);
        assert!(w);
    }
}

#[test]
fn cluster_index_properties() {
    let ds = small_dataset("umaze", MazeKind::Continuous, 30, 8);
    let ci = ClusterIndex::fit(&ds, 20, 100, 3).unwrap();
    assert_eq!(ci, ClusterIndex::fit(&ds, 20, 100, 3).unwrap());
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (traj, tr) in ds.trajectories.iter().enumerate() {
        for (t, s) in tr.states.iter().enumerate() {
            let k = ci.cluster_of(traj, t).unwrap();
            assert_eq!(ci.assign(&phi(s)), k);
            points.push(phi(s).0);
            labels.push(k);
        }
    }
    assert_eq!(ci.n_points(), points.len());
    let diam = cluster_diameters(&points, &labels, 20);
    for k in 0..20 {
        let members: Vec<&Point> = points.iter().zip(&labels).filter(|(_, l)| **l == k).map(|(p, _)| p).collect();
        if members.len() > 200 {
            continue;
        }
        let mut brute: f64 = 0.0;
        for a in &members {
            for b in &members {
                brute = brute.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        assert_eq!(ci.eps_k[k], brute);
        assert_eq!(diam[k], brute);
    }
    for (k, c) in ci.centroids.iter().enumerate() {
        assert_eq!(ci.assign(&mgda::env::Goal(*c)), k);
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ci.json");
    ci.save(&p).unwrap();
    assert_eq!(ClusterIndex::load(&p).unwrap(), ci);
}

#[test]
fn kmeans_edge_cases() {
    let pts: Vec<Point> = vec![[0.0, 0.0], [2.0, 0.0], [0.0, 0.0], [1.0, 3.0]];
    let one = kmeans_fit(&pts, 1, 10, 0).unwrap();
    assert!((one.centroids[0][0] - 0.75).abs() < 1e-12 && (one.centroids[0][1] - 0.75).abs() < 1e-12);
    assert!(kmeans_fit(&pts, 4, 10, 0).is_err());
    assert!(kmeans_fit(&pts, 0, 10, 0).is_err());
    let all = kmeans_fit(&pts, 3, 10, 0).unwrap();
    assert_eq!(all.assignment[0], all.assignment[2]);
}
