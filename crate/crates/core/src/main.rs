use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mgda::augment::Strategy;
use mgda::cluster::ClusterIndex;
use mgda::config::RunConfig;
use mgda::data;
use mgda::dynmodel::{verify_theorem1, DynamicsModel};
use mgda::evaluate::{make_in_distribution_pairs, make_stitching_pairs, EvalReport};
use mgda::pipeline::{self, derive_seed, stage};
use mgda::policy::{Policy, WeightScheme};
use mgda::report::{bar_chart_svg, Bar, BarGroup, Manifest};

#[derive(Parser, Debug)]
#[command(name = "mgda", version, about = "Goal data augmentation workbench for maze navigation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    /// `uniform` or `discount`.
    #[arg(long = "weight-scheme", global = true)]
    weight_scheme: Option<String>,
    /// Dotted overrides such as `data.n_traj=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect the offline dataset.
    GenData {
        overrides: Vec<String>,
    },
    /// Fit the dynamics model and write its certificate.
    FitDynamics {
        overrides: Vec<String>,
    },
    /// Cluster dataset states in goal space.
    Cluster {
        overrides: Vec<String>,
    },
    /// Train a policy with the selected augmentation strategy.
    Train {
        overrides: Vec<String>,
    },
    /// Evaluate every trained policy in the output directory.
    Eval {
        overrides: Vec<String>,
    },
    /// Score SGDA, TGDA and MGDA against the augmentation principles.
    Audit {
        overrides: Vec<String>,
    },
    /// Check the dynamics certificate and the goal distribution oracle.
    Theorems {
        overrides: Vec<String>,
    },
    /// Success grid over dataset sizes and strategies.
    Sweep {
        overrides: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::FitDynamics { .. } => "fit-dynamics",
            Command::Cluster { .. } => "cluster",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Audit { .. } => "audit",
            Command::Theorems { .. } => "theorems",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData { overrides }
            | Command::FitDynamics { overrides }
            | Command::Cluster { overrides }
            | Command::Train { overrides }
            | Command::Eval { overrides }
            | Command::Audit { overrides }
            | Command::Theorems { overrides }
            | Command::Sweep { overrides } => overrides,
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<String> = cli.set.clone();
    overrides.extend(cli.command.overrides().iter().cloned());
    let mut cfg = base.with_overrides(&overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(s) = &cli.strategy {
        cfg.augment.strategy = Strategy::parse(s)?;
    }
    if let Some(w) = &cli.weight_scheme {
        let gamma = match cfg.weight {
            WeightScheme::Discount { gamma } => gamma,
            WeightScheme::Uniform => 0.99,
        };
        cfg.weight = WeightScheme::parse(w, gamma)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Ctx {
    cfg: RunConfig,
    manifest: Manifest,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// Path of a prerequisite, or an error naming the command that makes it.
    fn require(&mut self, name: &str, producer: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            return Err(mgda::Error::Config(format!(
                "{} not found; run {producer} first",
                p.display()
            ))
            .into());
        }
        self.manifest.add_input(&self.cfg.out, &p)?;
        Ok(p)
    }

    fn write(&mut self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.manifest.add_output(&self.cfg.out, &p)?;
        Ok(p)
    }

    fn record(&mut self, p: &Path) -> anyhow::Result<()> {
        self.manifest.add_output(&self.cfg.out, p)?;
        Ok(())
    }
}

fn load_dataset(ctx: &mut Ctx) -> anyhow::Result<data::OfflineDataset> {
    let p = ctx.require("dataset.jsonl", "gen-data")?;
    Ok(data::load(&p)?)
}

fn eval_row(strategy: &str, kind: &str, r: &EvalReport) -> String {
    format!(
        "{strategy},{kind},{:.4},{:.4},{:.4},{}\n",
        r.success_rate, r.ci_low, r.ci_high, r.n_episodes
    )
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().ok();
    }
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let command = cli.command.name();
    let manifest = Manifest::new(command, &cfg.to_toml());
    let mut ctx = Ctx { cfg, manifest };
    let spec = ctx.cfg.maze_spec()?;
    let seed = ctx.cfg.seed;
    match &cli.command {
        Command::GenData { .. } => {
            let ds = pipeline::gen_data(&ctx.cfg, &spec, seed)?;
            let p = ctx.path("dataset.jsonl");
            data::save(&ds, &p)?;
            ctx.record(&p)?;
            eprintln!("{} trajectories, {} transitions", ds.len(), ds.n_transitions());
        }
        Command::FitDynamics { .. } => {
            let ds = load_dataset(&mut ctx)?;
            let fitted = pipeline::fit_and_certify(&ds.maze, &ds, &ctx.cfg.dynamics, seed)?;
            let p = ctx.path("dynamics.json");
            fitted.model.save(&p)?;
            ctx.record(&p)?;
            let text = pipeline::certificate_text(&fitted.certificate);
            ctx.write("certificate.txt", &text)?;
            eprint!("{text}");
        }
        Command::Cluster { .. } => {
            let ds = load_dataset(&mut ctx)?;
            let ci = pipeline::fit_clusters(&ctx.cfg, &ds, seed)?;
            let p = ctx.path("clusters.json");
            ci.save(&p)?;
            ctx.record(&p)?;
            eprintln!("{} clusters, max diameter {:.3}", ci.n_clusters(), ci.max_eps());
        }
        Command::Train { .. } => {
            let ds = load_dataset(&mut ctx)?;
            let strategy = ctx.cfg.augment.strategy;
            let ci = match strategy {
                Strategy::Tgda | Strategy::Mgda => Some(ClusterIndex::load(&ctx.require("clusters.json", "cluster")?)?),
                _ => None,
            };
            let model = match strategy {
                Strategy::Mgda => Some(DynamicsModel::load(&ctx.require("dynamics.json", "fit-dynamics")?)?),
                _ => None,
            };
            let (policy, log) = pipeline::train_policy(&ctx.cfg, &ds, ci.as_ref(), model.as_ref(), strategy, seed)?;
            let p = ctx.path(&format!("policy-{strategy}.json"));
            policy.save(&p)?;
            ctx.record(&p)?;
            ctx.write(&format!("train-{strategy}.json"), &(serde_json::to_string_pretty(&log)? + "\n"))?;
            eprintln!(
                "loss {:.4} -> {:.4}, augmented {:.3}",
                log.initial_loss, log.final_loss, log.augmented_fraction
            );
        }
        Command::Eval { .. } => {
            let ds = load_dataset(&mut ctx)?;
            let pair_seed = derive_seed(seed, stage::PAIRS);
            let stitching = make_stitching_pairs(&spec, &ds, ctx.cfg.eval.n_pairs, ctx.cfg.eval.delta, pair_seed)?;
            let in_dist = make_in_distribution_pairs(&ds, ctx.cfg.eval.n_pairs, ctx.cfg.eval.delta, pair_seed ^ 1)?;
            let mut csv = String::from("strategy,pairs,success_rate,ci_low,ci_high,n_episodes\n");
            let mut bars_s = Vec::new();
            let mut bars_i = Vec::new();
            for st in Strategy::ALL {
                let name = format!("policy-{st}.json");
                if !ctx.path(&name).exists() {
                    continue;
                }
                let policy = Policy::load(&ctx.require(&name, "train")?)?;
                let (s, i) = pipeline::evaluate_policy(&ctx.cfg, &spec, &policy, &stitching, &in_dist, seed)?;
                csv.push_str(&eval_row(&st.to_string(), "stitching", &s));
                csv.push_str(&eval_row(&st.to_string(), "in_distribution", &i));
                let bar = |r: &EvalReport| Bar {
                    label: st.to_string(),
                    value: r.success_rate,
                    low: r.ci_low,
                    high: r.ci_high,
                };
                bars_s.push(bar(&s));
                bars_i.push(bar(&i));
                ctx.write(
                    &format!("eval-{st}.json"),
                    &(serde_json::to_string_pretty(&serde_json::json!({ "stitching": s, "in_distribution": i }))? + "\n"),
                )?;
            }
            if bars_s.is_empty() {
                return Err(mgda::Error::Config("no policy-*.json found; run train first".into()).into());
            }
            ctx.write("eval.csv", &csv)?;
            let svg = bar_chart_svg(
                &format!("{} success rate", spec.name),
                &[
                    BarGroup {
                        label: "stitching".into(),
                        bars: bars_s,
                    },
                    BarGroup {
                        label: "in-distribution".into(),
                        bars: bars_i,
                    },
                ],
            );
            ctx.write(&format!("eval-{}.svg", spec.name), &svg)?;
            eprint!("{csv}");
        }
        Command::Audit { .. } => {
            let reports = pipeline::audit(&ctx.cfg)?;
            let table = pipeline::audit_table(&reports);
            ctx.write("audit.csv", &table)?;
            eprint!("{table}");
        }
        Command::Theorems { .. } => {
            let ds_path = ctx.path("dataset.jsonl");
            let model_path = ctx.path("dynamics.json");
            if ds_path.exists() && model_path.exists() {
                let ds = load_dataset(&mut ctx)?;
                let model = DynamicsModel::load(&ctx.require("dynamics.json", "fit-dynamics")?)?;
                let tuples = data::transition_tuples(&ds);
                let (_, held) = mgda::dynmodel::split_by_trajectory(&tuples, 5);
                let cert = verify_theorem1(
                    &model,
                    &ds.maze,
                    &pipeline::probe_subset(&held),
                    ds.maze.lipschitz_constant(),
                    pipeline::probe_radius(&ds.maze),
                    derive_seed(seed, stage::PROBES),
                )?;
                let text = pipeline::certificate_text(&cert);
                ctx.write("theorem1.txt", &text)?;
                eprint!("{text}");
            } else {
                eprintln!("no dataset and dynamics model in the output directory; skipping the certificate");
            }
            let t = &ctx.cfg.theorem;
            let main = pipeline::theorem2(t, &ctx.cfg.dynamics, Some(t.clusters))?;
            let single = pipeline::theorem2(t, &ctx.cfg.dynamics, None)?;
            let mut csv = String::from("cell_i,cell_j,p_hat,p_one_step\n");
            for (k, c) in main.cells.iter().enumerate() {
                csv.push_str(&format!("{},{},{:.6},{:.6}\n", c.i, c.j, main.p_hat[k], main.p_one_step[k]));
            }
            ctx.write("theorem2.csv", &csv)?;
            ctx.write(
                "theorem2.json",
                &(serde_json::to_string_pretty(&serde_json::json!({ "clustered": main, "singleton": single }))? + "\n"),
            )?;
            eprintln!(
                "C={}: max deviation {:.4}, bound {:.4}, ratio {:.3}\nsingleton: max deviation {:.4}, 3 SE {:.4}",
                main.clusters,
                main.max_deviation,
                main.bound,
                main.ratio,
                single.max_deviation,
                3.0 * single.mc_standard_error
            );
        }
        Command::Sweep { .. } => {
            let cells = pipeline::sweep(&ctx.cfg)?;
            let csv = pipeline::sweep_csv(&cells);
            ctx.write("sweep.csv", &csv)?;
            ctx.write("sweep.json", &(serde_json::to_string_pretty(&cells)? + "\n"))?;
            let mut sizes: Vec<usize> = cells.iter().map(|c| c.n_traj).collect();
            sizes.dedup();
            let groups: Vec<BarGroup> = sizes
                .iter()
                .map(|n| BarGroup {
                    label: format!("{n} traj"),
                    bars: cells
                        .iter()
                        .filter(|c| c.n_traj == *n)
                        .map(|c| Bar {
                            label: c.strategy.to_string(),
                            value: c.mean_success,
                            low: c.ci_low,
                            high: c.ci_high,
                        })
                        .collect(),
                })
                .collect();
            ctx.write(
                &format!("sweep-{}.svg", spec.name),
                &bar_chart_svg(&format!("{} stitching success", spec.name), &groups),
            )?;
            eprint!("{csv}");
        }
    }
    ctx.manifest.write(&ctx.cfg.out)?;
    Ok(())
}

/// 1 for problems with the configuration or inputs, 2 for failures while
/// running.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mgda::Error>() {
        Some(
            mgda::Error::Config(_)
            | mgda::Error::Precondition(_)
            | mgda::Error::Dimension { .. }
            | mgda::Error::Parse { .. }
            | mgda::Error::InvalidTrajectory { .. }
            | mgda::Error::Unsupported(_),
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
