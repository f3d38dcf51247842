//! End-to-end stages shared by the command line and the experiment tests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{audit_principles, AugmentConfig, Augmenter, PrincipleReport, Strategy};
use crate::cluster::ClusterIndex;
use crate::config::RunConfig;
use crate::data::{collect, default_legs, transition_tuples, OfflineDataset, Transition};
use crate::dynmodel::{fit_dynamics, split_by_trajectory, verify_theorem1, DynamicsConfig, DynamicsModel, LipschitzCertificate, SlackWeights};
use crate::env::{MazeKind, MazeSpec};
use crate::error::{Error, Result};
use crate::evaluate::{
    make_in_distribution_pairs, make_stitching_pairs, oracle_clusters, oracle_singleton_count, rollout_success, theorem2_check,
    EvalPair, EvalReport, OracleInstance, Theorem2Config, Theorem2Report,
};
use crate::policy::{train, Policy, TrainConfig, TrainLog};

/// Stage tags for `derive_seed`.
pub mod stage {
    pub const DATA: u64 = 1;
    pub const DYNAMICS: u64 = 2;
    pub const CLUSTER: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const PAIRS: u64 = 6;
    pub const BOOTSTRAP: u64 = 7;
    pub const AUDIT: u64 = 8;
    pub const PROBES: u64 = 9;
}

/// SplitMix64 of `master` mixed with `tag`, so each stage and replicate
/// gets an independent stream from one master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed of replicate `k`.
pub fn replicate_seed(master: u64, k: usize) -> u64 {
    derive_seed(master, 1000 + k as u64)
}

pub fn gen_data(cfg: &RunConfig, spec: &MazeSpec, seed: u64) -> Result<OfflineDataset> {
    let legs = default_legs(spec)?;
    let mut data = cfg.data.clone();
    data.seed = derive_seed(seed, stage::DATA);
    collect(spec, &legs, &data)
}

/// Keeps the first `n` trajectories. Trajectory `k` depends only on the
/// dataset seed and `k`, so a prefix is itself a valid smaller dataset.
pub fn prefix(ds: &OfflineDataset, n: usize) -> Result<OfflineDataset> {
    let n = n.min(ds.len());
    OfflineDataset::new(ds.maze.clone(), ds.seed, ds.legs.clone(), ds.trajectories[..n].to_vec())
}

/// Perturbation radius for the local Lipschitz estimate.
pub fn probe_radius(spec: &MazeSpec) -> f64 {
    match spec.kind {
        MazeKind::Continuous => 0.1 * spec.cell_size,
        MazeKind::Discrete => 1.0,
    }
}

pub const MAX_PROBES: usize = 1000;

/// Up to `MAX_PROBES` held-out transitions, evenly spaced.
pub fn probe_subset(held: &[Transition]) -> Vec<Transition> {
    if held.len() <= MAX_PROBES {
        return held.to_vec();
    }
    (0..MAX_PROBES).map(|k| held[k * held.len() / MAX_PROBES]).collect()
}

pub struct FittedModel {
    pub model: DynamicsModel,
    pub slack: SlackWeights,
    pub train: Vec<Transition>,
    pub certificate: LipschitzCertificate,
}

/// Fits on four fifths of the trajectories and certifies on probes from the
/// rest.
pub fn fit_and_certify(spec: &MazeSpec, ds: &OfflineDataset, dcfg: &DynamicsConfig, seed: u64) -> Result<FittedModel> {
    let tuples = transition_tuples(ds);
    let (train_set, held) = split_by_trajectory(&tuples, 5);
    let mut dcfg = dcfg.clone();
    dcfg.seed = derive_seed(seed, stage::DYNAMICS);
    let (model, slack) = fit_dynamics(spec, &train_set, &dcfg)?;
    let certificate = verify_theorem1(
        &model,
        spec,
        &probe_subset(&held),
        spec.lipschitz_constant(),
        probe_radius(spec),
        derive_seed(seed, stage::PROBES),
    )?;
    Ok(FittedModel {
        model,
        slack,
        train: train_set,
        certificate,
    })
}

pub fn fit_clusters(cfg: &RunConfig, ds: &OfflineDataset, seed: u64) -> Result<ClusterIndex> {
    ClusterIndex::fit(ds, cfg.clusters(), cfg.cluster.max_iters, derive_seed(seed, stage::CLUSTER))
}

/// Dataset, fitted prerequisites and evaluation pairs for one replicate.
pub struct Prepared {
    pub spec: MazeSpec,
    pub seed: u64,
    pub ds: OfflineDataset,
    pub fitted: FittedModel,
    pub clusters: ClusterIndex,
    pub stitching: Vec<EvalPair>,
    pub in_distribution: Vec<EvalPair>,
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let spec = cfg.maze_spec()?;
    let ds = gen_data(cfg, &spec, seed)?;
    prepare_with(cfg, &spec, ds, seed)
}

pub fn prepare_with(cfg: &RunConfig, spec: &MazeSpec, ds: OfflineDataset, seed: u64) -> Result<Prepared> {
    let fitted = fit_and_certify(spec, &ds, &cfg.dynamics, seed)?;
    let clusters = fit_clusters(cfg, &ds, seed)?;
    let pair_seed = derive_seed(seed, stage::PAIRS);
    let stitching = make_stitching_pairs(spec, &ds, cfg.eval.n_pairs, cfg.eval.delta, pair_seed)?;
    let in_distribution = make_in_distribution_pairs(&ds, cfg.eval.n_pairs, cfg.eval.delta, pair_seed ^ 1)?;
    Ok(Prepared {
        spec: spec.clone(),
        seed,
        ds,
        fitted,
        clusters,
        stitching,
        in_distribution,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub n_traj: usize,
    pub stitching: EvalReport,
    pub in_distribution: EvalReport,
    pub log: TrainLog,
}

/// Augmenter and training settings for one replicate of `strategy`.
pub fn seeded_configs(cfg: &RunConfig, strategy: Strategy, seed: u64) -> (AugmentConfig, TrainConfig) {
    let aug = AugmentConfig {
        strategy,
        seed: derive_seed(seed, stage::AUGMENT),
        ..cfg.augment.clone()
    };
    let tc = TrainConfig {
        seed: derive_seed(seed, stage::TRAIN),
        ..cfg.train.clone()
    };
    (aug, tc)
}

pub fn train_policy(
    cfg: &RunConfig,
    ds: &OfflineDataset,
    clusters: Option<&ClusterIndex>,
    model: Option<&DynamicsModel>,
    strategy: Strategy,
    seed: u64,
) -> Result<(Policy, TrainLog)> {
    let (acfg, tc) = seeded_configs(cfg, strategy, seed);
    let aug = Augmenter::new(ds, clusters, model, acfg)?;
    train(&aug, &cfg.weight, &tc)
}

pub fn evaluate_policy(
    cfg: &RunConfig,
    spec: &MazeSpec,
    policy: &Policy,
    stitching: &[EvalPair],
    in_distribution: &[EvalPair],
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let t_max = cfg.t_max(spec);
    let b = derive_seed(seed, stage::BOOTSTRAP);
    Ok((
        rollout_success(policy, spec, stitching, t_max, cfg.eval.delta, b)?,
        rollout_success(policy, spec, in_distribution, t_max, cfg.eval.delta, b ^ 1)?,
    ))
}

/// Trains `strategy` on `ds` and evaluates it on the replicate's pairs.
/// `model` replaces the replicate's fitted model when given. The replicate's
/// cluster index only describes `prep.ds`, so another dataset is accepted
/// for strategy `none` alone.
pub fn run_strategy(
    cfg: &RunConfig,
    prep: &Prepared,
    ds: &OfflineDataset,
    strategy: Strategy,
    model: Option<&DynamicsModel>,
) -> Result<StrategyRun> {
    if strategy != Strategy::None && ds.trajectories != prep.ds.trajectories {
        return Err(Error::Config(format!(
            "{strategy} needs the cluster index of its own dataset"
        )));
    }
    let model = model.unwrap_or(&prep.fitted.model);
    let (policy, log) = train_policy(cfg, ds, Some(&prep.clusters), Some(model), strategy, prep.seed)?;
    let (stitching, in_distribution) = evaluate_policy(cfg, &prep.spec, &policy, &prep.stitching, &prep.in_distribution, prep.seed)?;
    Ok(StrategyRun {
        strategy,
        seed: prep.seed,
        n_traj: ds.len(),
        stitching,
        in_distribution,
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_traj: usize,
    pub strategy: Strategy,
    pub mean_success: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_seed: Vec<f64>,
}

/// Dataset size by strategy grid of stitching success, averaged over
/// `eval.seeds` replicates. Pairs come from the largest dataset and are
/// shared by every size of a replicate.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepCell>> {
    let spec = cfg.maze_spec()?;
    let largest = *cfg.sweep.sizes.iter().max().expect("validated");
    let mut per: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); Strategy::ALL.len()]; cfg.sweep.sizes.len()];
    for k in 0..cfg.eval.seeds {
        let seed = replicate_seed(cfg.seed, k);
        let full = RunConfig {
            data: crate::data::CollectConfig {
                n_traj: largest,
                ..cfg.data.clone()
            },
            ..cfg.clone()
        };
        let ds_full = gen_data(&full, &spec, seed)?;
        let pair_seed = derive_seed(seed, stage::PAIRS);
        let stitching = make_stitching_pairs(&spec, &ds_full, cfg.eval.n_pairs, cfg.eval.delta, pair_seed)?;
        for (si, &n) in cfg.sweep.sizes.iter().enumerate() {
            let ds = prefix(&ds_full, n)?;
            let fitted = fit_and_certify(&spec, &ds, &cfg.dynamics, seed)?;
            let clusters = fit_clusters(cfg, &ds, seed)?;
            let in_distribution = make_in_distribution_pairs(&ds, cfg.eval.n_pairs, cfg.eval.delta, pair_seed ^ 1)?;
            let prep = Prepared {
                spec: spec.clone(),
                seed,
                ds,
                fitted,
                clusters,
                stitching: stitching.clone(),
                in_distribution,
            };
            for (ki, st) in Strategy::ALL.iter().enumerate() {
                let run = run_strategy(cfg, &prep, &prep.ds, *st, None)?;
                per[si][ki].push(run.stitching.success_rate);
            }
        }
    }
    let mut out = Vec::new();
    for (si, &n) in cfg.sweep.sizes.iter().enumerate() {
        for (ki, st) in Strategy::ALL.iter().enumerate() {
            let xs = &per[si][ki];
            let (lo, hi) = crate::evaluate::bootstrap_ci(xs, cfg.eval.resamples, 0.95, derive_seed(cfg.seed, stage::BOOTSTRAP));
            out.push(SweepCell {
                n_traj: n,
                strategy: *st,
                mean_success: crate::stats::mean(xs),
                ci_low: lo,
                ci_high: hi,
                per_seed: xs.clone(),
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut sizes: Vec<usize> = cells.iter().map(|c| c.n_traj).collect();
    sizes.dedup();
    let mut s = String::from("n_traj");
    for st in Strategy::ALL {
        s.push_str(&format!(",{st}"));
    }
    s.push('\n');
    for n in sizes {
        s.push_str(&n.to_string());
        for st in Strategy::ALL {
            let c = cells.iter().find(|c| c.n_traj == n && c.strategy == st).expect("full grid");
            s.push_str(&format!(",{:.4}", c.mean_success));
        }
        s.push('\n');
    }
    s
}

/// Principle audit of SGDA, TGDA and MGDA on the configured grid maze.
pub fn audit(cfg: &RunConfig) -> Result<Vec<PrincipleReport>> {
    let spec = cfg.maze_spec()?;
    if spec.kind != MazeKind::Discrete {
        return Err(Error::Config("audit needs kind = \"discrete\"".into()));
    }
    let ds = gen_data(cfg, &spec, cfg.seed)?;
    let fitted = fit_and_certify(&spec, &ds, &cfg.dynamics, cfg.seed)?;
    let clusters = fit_clusters(cfg, &ds, cfg.seed)?;
    [Strategy::Sgda, Strategy::Tgda, Strategy::Mgda]
        .par_iter()
        .map(|st| {
            let acfg = AugmentConfig {
                strategy: *st,
                seed: derive_seed(cfg.seed, stage::AUGMENT),
                ..cfg.augment.clone()
            };
            let aug = Augmenter::new(&ds, Some(&clusters), Some(&fitted.model), acfg)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(cfg.seed, stage::AUDIT));
            audit_principles(&aug, &spec, cfg.audit.n_draws, &mut rng)
        })
        .collect()
}

pub fn audit_table(reports: &[PrincipleReport]) -> String {
    let mut s = String::from(PrincipleReport::csv_header());
    s.push_str(",diversity_mark,optimality_mark,reachability_mark\n");
    for r in reports {
        let m = r.marks().map(|b| if b { "pass" } else { "fail" });
        s.push_str(&format!("{},{},{},{}\n", r.csv_row(), m[0], m[1], m[2]));
    }
    s
}

/// Builds the oracle instance, fits its dynamics model on transitions
/// before `t_use`, clusters with `clusters` (or singletons when absent) and
/// runs the distribution check.
pub fn theorem2(tcfg: &Theorem2Config, dcfg: &DynamicsConfig, clusters: Option<usize>) -> Result<Theorem2Report> {
    let inst = OracleInstance::build(tcfg)?;
    let tuples: Vec<Transition> = transition_tuples(&inst.dataset)
        .into_iter()
        .filter(|t| t.t < tcfg.t_use)
        .collect();
    let mut dcfg = dcfg.clone();
    dcfg.seed = derive_seed(tcfg.seed, stage::DYNAMICS);
    let (model, _) = fit_dynamics(&inst.spec, &tuples, &dcfg)?;
    let c = clusters.unwrap_or_else(|| oracle_singleton_count(&inst));
    let ci = oracle_clusters(&inst, c)?;
    theorem2_check(&inst, &ci, &model, THEOREM2_CONSTANT)
}

/// Constant in front of `eps_k * L1` in the pass/fail bound.
pub const THEOREM2_CONSTANT: f64 = 2.0;

pub fn certificate_text(c: &LipschitzCertificate) -> String {
    let norms: Vec<String> = c.layer_norms.iter().map(|n| format!("{n:.6}")).collect();
    format!(
        "epsilon = {:.6}\nk_env = {:.6}\ndelta = {:.6}\nbound_violation_rate = {:.6}\nn_probes = {}\nlayer_norms = [{}]\n",
        c.epsilon,
        c.k_env,
        c.delta,
        c.bound_violation_rate,
        c.n_probes,
        norms.join(", ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(0, stage::DATA);
        assert_ne!(a, derive_seed(0, stage::TRAIN));
        assert_ne!(a, derive_seed(1, stage::DATA));
        assert_eq!(a, derive_seed(0, stage::DATA));
    }

    #[test]
    fn prefix_is_a_dataset_prefix() {
        let cfg = RunConfig {
            data: crate::data::CollectConfig {
                n_traj: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        let spec = cfg.maze_spec().unwrap();
        let big = gen_data(&cfg, &spec, 3).unwrap();
        let small_cfg = RunConfig {
            data: crate::data::CollectConfig {
                n_traj: 4,
                ..cfg.data.clone()
            },
            ..cfg.clone()
        };
        let small = gen_data(&small_cfg, &spec, 3).unwrap();
        assert_eq!(prefix(&big, 4).unwrap().trajectories, small.trajectories);
    }
}
