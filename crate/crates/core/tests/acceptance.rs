//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion, written straight to stdout so it shows even when output is
//! captured. The stitching criteria share one set of trained replicates.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use common::*;
use mgda::augment::{AugmentConfig, Augmenter, Strategy};
use mgda::cluster::ClusterIndex;
use mgda::config::RunConfig;
use mgda::data::{self, is_wall_contact, sample_relabeled, transition_tuples, wall_stress_dataset, OfflineDataset};
use mgda::dynmodel::{fit_dynamics, slack_objective, DynamicsConfig, DynamicsModel, TrainMode};
use mgda::env::{MazeKind, MazeSpec};
use mgda::evaluate::Theorem2Config;
use mgda::numerics::{Activation, Mlp};
use mgda::pipeline::{self, replicate_seed, Prepared, StrategyRun};
use mgda::policy::{weighted_nll, Policy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id} {}: {name} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Criterion 1

fn nll_fd_error(ds: &OfflineDataset, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = Augmenter::new(ds, None, None, AugmentConfig::default()).unwrap();
    let batch = aug.augment_batch(&sample_relabeled(ds, 6, None, &mut rng), &mut rng);
    let weights: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(0.1..2.0)).collect();
    let p = Policy::new(&ds.maze, &[12, 12], seed);
    let (_, tape) = weighted_nll(&p, &batch, &weights).unwrap();
    let fd = fd_gradient(&p.net, 1e-5, |net| {
        let q = Policy { net: net.clone(), ..p.clone() };
        weighted_nll(&q, &batch, &weights).unwrap().0
    });
    tape_rel_error(&tape, &fd)
}

fn slack_fd_error(seed: u64, mode: TrainMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (5, 6);
    let mut net = Mlp::new(&[d, 10, 10, 2], Activation::Relu, &mut rng);
    // Zero biases put a unit exactly on the ReLU kink whenever the layer
    // below is fully inactive, where the derivative is one-sided.
    for b in net.biases_mut() {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let slack: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let alpha = rng.random_range(0.01..1.0);
    let (_, tape, dslack) = slack_objective(&net, &x, &y, &slack, alpha, mode).unwrap();
    let h = 1e-5;
    let fd = fd_gradient(&net, h, |m| slack_objective(m, &x, &y, &slack, alpha, mode).unwrap().0);
    let fd_slack: Vec<f64> = (0..n)
        .map(|k| {
            let mut up = slack.clone();
            let mut down = slack.clone();
            up[k] += h;
            down[k] -= h;
            let f = |s: &[f64]| slack_objective(&net, &x, &y, s, alpha, mode).unwrap().0;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect();
    tape_rel_error(&tape, &fd).max(rel_error(&dslack, &fd_slack, 1e-8))
}

#[test]
fn c1_gradient_exactness() {
    let cont = small_dataset("umaze", MazeKind::Continuous, 10, 1);
    let disc = small_dataset("two_room", MazeKind::Discrete, 10, 1);
    let mut worst = [0.0f64; 4];
    for k in 0..100u64 {
        worst[0] = worst[0].max(nll_fd_error(&cont, k));
        worst[1] = worst[1].max(nll_fd_error(&disc, k));
        worst[2] = worst[2].max(slack_fd_error(k, TrainMode::Lipschitz));
        worst[3] = worst[3].max(slack_fd_error(k, TrainMode::Plain));
    }
    let pass = worst.iter().all(|e| *e < 1e-4);
    let detail = format!(
        "max relative error: policy continuous {:.1e}, policy discrete {:.1e}, dynamics slack {:.1e}, dynamics plain {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    verdict(1, "analytic gradients match central differences", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 2

#[test]
fn c2_lipschitz_projection() {
    let mut worst: f64 = 0.0;
    for (name, kind) in [("umaze", MazeKind::Continuous), ("two_room", MazeKind::Discrete)] {
        let ds = small_dataset(name, kind, 100, 2);
        let (model, _) = fit_dynamics(&ds.maze, &transition_tuples(&ds), &DynamicsConfig::default()).unwrap();
        for w in model.net.weights() {
            worst = worst.max(jacobi_singular_values(w)[0]);
        }
    }
    verdict(2, "every layer spectral norm <= 1.001 after fitting", worst <= 1.001, &format!("largest {worst:.6}"));
}

// ---------------------------------------------------------------------------
// Shared stitching replicates

fn stitching_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 5000;
    cfg.train.lr = 1e-3;
    cfg
}

struct Replicate {
    prep: Prepared,
    /// One run per entry of `Strategy::ALL`.
    runs: Vec<StrategyRun>,
}

impl Replicate {
    fn run(&self, st: Strategy) -> &StrategyRun {
        &self.runs[Strategy::ALL.iter().position(|s| *s == st).unwrap()]
    }
}

static REPLICATES: OnceLock<Vec<Replicate>> = OnceLock::new();

fn replicates() -> &'static [Replicate] {
    REPLICATES.get_or_init(|| {
        let cfg = stitching_config();
        (0..cfg.eval.seeds)
            .map(|k| {
                let prep = pipeline::prepare(&cfg, replicate_seed(cfg.seed, k)).unwrap();
                let runs = Strategy::ALL
                    .iter()
                    .map(|st| pipeline::run_strategy(&cfg, &prep, &prep.ds, *st, None).unwrap())
                    .collect();
                Replicate { prep, runs }
            })
            .collect()
    })
}

fn mean_success(st: Strategy) -> f64 {
    mean(replicates().iter().map(|r| r.run(st).stitching.success_rate))
}

// ---------------------------------------------------------------------------
// Criterion 3

#[test]
fn c3_theorem1_certificate() {
    let cfg = RunConfig::default();
    let spec = cfg.maze_spec().unwrap();
    let ds = pipeline::gen_data(&cfg, &spec, cfg.seed).unwrap();
    assert_eq!(ds.len(), 500);
    let fitted = pipeline::fit_and_certify(&spec, &ds, &cfg.dynamics, cfg.seed).unwrap();
    let c = &fitted.certificate;
    let detail = format!(
        "violation rate {:.4} on {} probes, epsilon {:.4}, K {:.2}, Delta {:.4}",
        c.bound_violation_rate, c.n_probes, c.epsilon, c.k_env, c.delta
    );
    verdict(3, "held-out bound violation rate <= 1%", c.bound_violation_rate <= 0.01, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 4

#[test]
fn c4_principle_audit() {
    let mut cfg = RunConfig {
        maze: "two_room".into(),
        kind: MazeKind::Discrete,
        ..Default::default()
    };
    cfg.data.noise = 0.0;
    cfg.cluster.clusters = Some(3);
    cfg.augment.eps_prob = 0.5;
    cfg.audit.n_draws = 10_000;
    let reports = pipeline::audit(&cfg).unwrap();
    let [sgda, tgda, mgda] = &reports[..] else { panic!("three reports expected") };
    let (sr, so) = (sgda.reachability.unwrap(), sgda.optimality.unwrap());
    let (tr, to) = (tgda.reachability.unwrap(), tgda.optimality.unwrap());
    let (md, mo, mr) = (mgda.diversity.unwrap(), mgda.optimality.unwrap(), mgda.reachability.unwrap());
    let pass = sr < 0.95 && so < 0.9 && tr < 0.95 && to >= 0.9 && md > 0.0 && mo >= 0.9 && mr >= 0.95;
    let detail = format!(
        "sgda reach {sr:.3} opt {so:.3}; tgda reach {tr:.3} opt {to:.3}; mgda div {md:.3} opt {mo:.3} reach {mr:.3}"
    );
    print!("{}", pipeline::audit_table(&reports));
    verdict(4, "audit marks match the expected pattern", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 5

#[test]
fn c5_goal_distribution_oracle() {
    let tcfg = Theorem2Config::default();
    let dcfg = DynamicsConfig::default();
    let clustered = pipeline::theorem2(&tcfg, &dcfg, Some(tcfg.clusters)).unwrap();
    let singleton = pipeline::theorem2(&tcfg, &dcfg, None).unwrap();
    let single_ok = singleton.max_deviation <= 3.0 * singleton.mc_standard_error;
    let pass = clustered.within_bound && single_ok && singleton.eps_k == 0.0;
    let detail = format!(
        "C={}: deviation {:.4} vs bound {:.4} (eps_k {:.3}, L1 {:.4}, se {:.4}); singleton: deviation {:.4} vs 3se {:.4}",
        clustered.clusters,
        clustered.max_deviation,
        clustered.bound,
        clustered.eps_k,
        clustered.l1,
        clustered.mc_standard_error,
        singleton.max_deviation,
        3.0 * singleton.mc_standard_error
    );
    verdict(5, "MGDA goal distribution within the oracle bound", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 6

#[test]
fn c6_stitching_improvement() {
    let [none, sgda, tgda, mgda] = Strategy::ALL.map(mean_success);
    let pass = mgda >= none + 0.10 && mgda >= sgda && mgda >= tgda;
    let detail = format!("seed-mean stitching success: none {none:.3}, sgda {sgda:.3}, tgda {tgda:.3}, mgda {mgda:.3}");
    verdict(6, "MGDA beats none by 10 points and matches SGDA and TGDA", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 7

#[test]
fn c7_data_size_versus_augmentation() {
    let cfg = stitching_config();
    let mut big_cfg = cfg.clone();
    big_cfg.data.n_traj = 4 * cfg.data.n_traj;
    let none_big = mean(replicates().iter().map(|r| {
        let big = pipeline::gen_data(&big_cfg, &r.prep.spec, r.prep.seed).unwrap();
        pipeline::run_strategy(&cfg, &r.prep, &big, Strategy::None, None)
            .unwrap()
            .stitching
            .success_rate
    }));
    let mgda = mean_success(Strategy::Mgda);
    let detail = format!("none with {} trajectories {none_big:.3}, mgda with {} {mgda:.3}", big_cfg.data.n_traj, cfg.data.n_traj);
    verdict(7, "MGDA on 1x data beats none on 4x data", none_big < mgda, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 8

#[test]
fn c8_projection_ablation() {
    let spec = MazeSpec::bundled("medium", MazeKind::Discrete).unwrap();
    let ds = wall_stress_dataset(&spec, 200, 50, 0.1, 0).unwrap();
    let contacts = transition_tuples(&ds).iter().filter(|t| is_wall_contact(t)).count();
    let projected_cfg = DynamicsConfig::default();
    let plain_cfg = DynamicsConfig {
        mode: TrainMode::Plain,
        ..Default::default()
    };
    let projected = pipeline::fit_and_certify(&spec, &ds, &projected_cfg, 0).unwrap().certificate;
    let plain = pipeline::fit_and_certify(&spec, &ds, &plain_cfg, 0).unwrap().certificate;

    let cfg = stitching_config();
    let plain_stitch = DynamicsConfig {
        mode: TrainMode::Plain,
        ..cfg.dynamics.clone()
    };
    let mgda_plain = mean(replicates().iter().map(|r| {
        let m = pipeline::fit_and_certify(&r.prep.spec, &r.prep.ds, &plain_stitch, r.prep.seed).unwrap();
        pipeline::run_strategy(&cfg, &r.prep, &r.prep.ds, Strategy::Mgda, Some(&m.model))
            .unwrap()
            .stitching
            .success_rate
    }));
    let mgda_projected = mean_success(Strategy::Mgda);
    let pass = projected.bound_violation_rate <= plain.bound_violation_rate && mgda_projected >= mgda_plain - 0.02;
    let detail = format!(
        "wall-stress violation rate projected {:.4} vs plain {:.4} ({contacts} contact transitions); mgda stitching projected {mgda_projected:.3} vs plain {mgda_plain:.3}",
        projected.bound_violation_rate, plain.bound_violation_rate
    );
    verdict(8, "projection with slack is no worse than plain regression", pass, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 9

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn cli_pipeline(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let settings = [
        "data.n_traj=40",
        "dynamics.epochs=3",
        "train.steps=100",
        "eval.n_pairs=10",
        "eval.seeds=1",
    ];
    let steps: [&[&str]; 5] = [
        &["gen-data"],
        &["fit-dynamics"],
        &["cluster"],
        &["--strategy", "mgda", "train"],
        &["eval"],
    ];
    for step in steps {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mgda"));
        cmd.arg("--out").arg(out);
        for s in settings {
            cmd.args(["--set", s]);
        }
        let status = cmd.args(step).output().unwrap().status;
        assert!(status.success(), "{step:?} exited with {status}");
    }
    snapshot(out)
}

#[test]
fn c9_determinism_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let first = cli_pipeline(&out);
    std::fs::remove_dir_all(&out).unwrap();
    let second = cli_pipeline(&out);
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let reruns_identical = first.len() >= 10 && first.keys().eq(second.keys()) && differing.is_empty();

    let ds = data::load(&out.join("dataset.jsonl")).unwrap();
    let p = dir.path().join("copy.jsonl");
    data::save(&ds, &p).unwrap();
    let model = DynamicsModel::load(&out.join("dynamics.json")).unwrap();
    model.save(&dir.path().join("m.json")).unwrap();
    let clusters = ClusterIndex::load(&out.join("clusters.json")).unwrap();
    clusters.save(&dir.path().join("c.json")).unwrap();
    let policy = Policy::load(&out.join("policy-mgda.json")).unwrap();
    policy.save(&dir.path().join("p.json")).unwrap();
    let round_trips = data::load(&p).unwrap() == ds
        && std::fs::read(&p).unwrap() == first["dataset.jsonl"]
        && DynamicsModel::load(&dir.path().join("m.json")).unwrap() == model
        && ClusterIndex::load(&dir.path().join("c.json")).unwrap() == clusters
        && Policy::load(&dir.path().join("p.json")).unwrap() == policy;

    let none: Vec<&StrategyRun> = replicates().iter().map(|r| r.run(Strategy::None)).collect();
    let in_dist = mean(none.iter().map(|r| r.in_distribution.success_rate));
    let loss_drops = none.iter().all(|r| r.log.final_loss < r.log.initial_loss);

    let pass = reruns_identical && round_trips && in_dist >= 0.9 && loss_drops;
    let detail = format!(
        "{} artifacts, differing {differing:?}; round trips {round_trips}; none in-distribution success {in_dist:.3}; training loss drops {loss_drops}",
        first.len()
    );
    verdict(9, "byte-identical reruns, save/load identity and imitation sanity", pass, &detail);
}
