use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use props_core::baselines::GeneratorKind;
use props_core::harness::{self, RunConfig};
use props_core::par::ExecMode;
use props_core::plm::Adaptation;
use props_core::props::{rule_usage_stats, trace_records, GenCtx};
use props_core::theory::{self, GRID_NS, GRID_TKS, PUBLISHED_GRID};

#[derive(Parser)]
#[command(
    name = "props",
    version,
    about = "Conditional prompt generation experiments on a frozen model"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat TOML file with RunConfig fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// prefix, prefix_pp, trsf_p, s_trsf_p or props.
    #[arg(long, global = true)]
    generator: Option<GeneratorKind>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain, freeze and cache the shared model.
    PretrainPlm {
        /// Ignore a valid cache.
        #[arg(long)]
        force: bool,
    },
    /// Train a generator on the configured task for every seed.
    Train,
    /// Evaluate a saved generator on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rules N versus selections k on a two-task pair, next to theory.
    AblateKn {
        #[arg(long, value_delimiter = ',', default_values_t = GRID_NS.to_vec())]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3, 4, 5])]
        ks: Vec<usize>,
    },
    /// One rule per task under sparse selection.
    RuleSep,
    /// Target-pair transfer with 0, 2 and 3 bridge pairs.
    Bridge,
    /// Probability that some rule is never selected.
    Theory {
        /// Monte Carlo trials per cell (0 skips the check).
        #[arg(long, default_value_t = 0)]
        mc_trials: usize,
    },
    /// Rule usage of a saved generator on the test split.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the end-to-end loss.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(g) = c.generator {
        cfg.generator = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mode = if cli.common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    let cfg = load_config(&cli.common)?;
    let out = cfg.out_dir.clone();
    match cli.cmd {
        Cmd::PretrainPlm { force } => {
            let (model, summary) = if force {
                let (m, s) = harness::pretrain_plm(&cfg, mode)?;
                m.save_tagged(&cfg.plm_path, Some(&cfg.plm_hash()))?;
                (m, s)
            } else {
                harness::load_or_pretrain(&cfg, mode)?
            };
            println!(
                "model {} params={} copy_acc={:.4} bijection_acc={:.4} cached={}",
                summary.fingerprint,
                model.param_count(),
                summary.copy_accuracy,
                summary.bijection_accuracy,
                summary.from_cache
            );
            write_json(&out.join("plm_summary.json"), &summary)?;
        }
        Cmd::Train => {
            let plm = harness::load_frozen(&cfg)?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let report = harness::train(&cfg, &plm, mode, true)?;
            for s in &report.seeds {
                println!(
                    "seed {} exact_match={:.4} token_accuracy={:.4} best_epoch={}",
                    s.seed, s.test.exact_match, s.test.token_accuracy, s.best_epoch
                );
            }
            println!(
                "{} exact_match {:.4} ± {:.4}  token_accuracy {:.4} ± {:.4}",
                report.generator,
                report.exact_match.mean,
                report.exact_match.std,
                report.token_accuracy.mean,
                report.token_accuracy.std
            );
            write_json(&out.join("report.json"), &report)?;
        }
        Cmd::Eval { checkpoint } => {
            let plm = harness::load_frozen(&cfg)?;
            let gen = harness::load_generator(&checkpoint, &cfg, &plm)?;
            let data = harness::prepare_data(&cfg, gen.kind())?;
            let res = harness::evaluate(&plm, &gen, &Adaptation::all(plm.config()), &data.test, mode)?;
            let m = res.metrics;
            println!(
                "{} exact_match={:.4} token_accuracy={:.4} loss={:.4} n={}",
                gen.kind(),
                m.exact_match,
                m.token_accuracy,
                m.loss,
                m.n
            );
            let lines: Vec<String> = res
                .predictions
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?;
            write(&out.join("predictions.jsonl"), &(lines.join("\n") + "\n"))?;
            write_json(&out.join("eval.json"), &m)?;
        }
        Cmd::AblateKn { ns, ks } => {
            let plm = harness::load_frozen(&cfg)?;
            let report = harness::run_ablation_kn(&cfg, &plm, &ns, &ks, mode, &mut |s| eprintln!("{s}"))?;
            print!("{}", report.to_csv());
            write(&out.join("ablation_kn.csv"), &report.to_csv())?;
            write_json(&out.join("ablation_kn.json"), &report)?;
        }
        Cmd::RuleSep => {
            let plm = harness::load_frozen(&cfg)?;
            let report = harness::run_rule_separation(&cfg, &plm, mode, &mut |r| {
                eprintln!(
                    "seed {} epoch {} loss {:.4} valid_em {:.4}",
                    r.seed, r.epoch, r.train_loss, r.valid.exact_match
                )
            })?;
            print!("{}", report.to_csv());
            println!("separated in {} seeds", report.verdict());
            write(&out.join("rule_usage.csv"), &report.to_csv())?;
            write_json(&out.join("rule_sep.json"), &report)?;
        }
        Cmd::Bridge => {
            let plm = harness::load_frozen(&cfg)?;
            let report = harness::run_bridge(&cfg, &plm, mode, &mut |s| eprintln!("{s}"))?;
            print!("{}", report.to_csv());
            write(&out.join("bridge.csv"), &report.to_csv())?;
            write_json(&out.join("bridge.json"), &report)?;
        }
        Cmd::Theory { mc_trials } => {
            let table = theory::TheoryTable::default_grid();
            print!("{}", table.to_text());
            for (i, n) in GRID_NS.iter().enumerate() {
                for (j, tk) in GRID_TKS.iter().enumerate() {
                    let ours = theory::round2(table.cells[i][j]);
                    if ours != PUBLISHED_GRID[i][j] {
                        println!(
                            "N={n} Tk={tk}: computed {ours:.2}, published {:.2}",
                            PUBLISHED_GRID[i][j]
                        );
                    }
                    if mc_trials > 0 {
                        let est = 1.0 - theory::mc_coverage_oracle(*n, *tk, mc_trials, 1, mode);
                        let p = table.cells[i][j];
                        let se = (p * (1.0 - p) / mc_trials as f64).sqrt();
                        println!(
                            "N={n} Tk={tk}: exact {p:.6} monte carlo {est:.6} ({:.2} se)",
                            (est - p).abs() / se.max(1e-300)
                        );
                    }
                }
            }
            write(&out.join("theory.csv"), &table.to_csv())?;
        }
        Cmd::Stats { checkpoint } => {
            let plm = harness::load_frozen(&cfg)?;
            let gen = harness::load_generator(&checkpoint, &cfg, &plm)?;
            if gen.kind() != GeneratorKind::Props {
                bail!("rule usage needs a props generator, got {}", gen.kind());
            }
            let data = harness::prepare_data(&cfg, gen.kind())?;
            let res = harness::evaluate(&plm, &gen, &Adaptation::all(plm.config()), &data.test, mode)?;
            let usage = rule_usage_stats(
                cfg.n_rules,
                res.traces
                    .iter()
                    .flat_map(|(task, ts)| ts.iter().map(move |t| (task.as_str(), t))),
            );
            print!("{}", usage.to_csv());
            let run_id = checkpoint.display().to_string();
            let lines: Vec<String> = data
                .test
                .iter()
                .zip(&res.traces)
                .flat_map(|(ex, (task, ts))| trace_records(&run_id, task, ex.id, ts))
                .collect();
            write(&out.join("rule_usage.csv"), &usage.to_csv())?;
            write(&out.join("traces.jsonl"), &(lines.join("\n") + "\n"))?;
        }
        Cmd::Gradcheck { coords, tol } => {
            let plm = harness::load_frozen(&cfg)?;
            let data = harness::prepare_data(&cfg, cfg.generator)?;
            let ex = data.train.first().context("empty training split")?;
            let gen = harness::new_generator(&cfg, &plm, cfg.seeds[0])?;
            let ctx = GenCtx {
                seed: cfg.seeds[0],
                example_id: ex.id,
                noise: true,
            };
            let rep = harness::gradcheck_end_to_end(&plm, &gen, &Adaptation::all(plm.config()), ex, ctx, coords, 1)?;
            println!(
                "{} coordinates checked, max relative error {:.3e}",
                rep.checked, rep.max_rel_err
            );
            if rep.max_rel_err >= tol {
                bail!("gradient check failed: {:?}", rep.worst);
            }
        }
    }
    Ok(())
}
