use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gridtrack::coordination::{equivalence_trials, StepMode};
use gridtrack::grid::{load_case, Network};
use gridtrack::harness::{compare, run, sweep_tau, write_atomic, RunConfig, RunMode};
use gridtrack::scenario::{make_synthetic, Scenario};
use log::info;

/// Directory of the cases shipped with the library crate.
const BUNDLED_CASES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/cases");
const DEFAULT_CASE: &str = "t9d33x3.json";
/// Simulated seconds run when `--t-end` is omitted.
const DEFAULT_SPAN: f64 = 60.0;

#[derive(Parser, Debug)]
#[command(
    name = "gridtrack",
    version,
    about = "Track time-varying coupled transmission-distribution OPF"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic scenario for a case.
    GenScenario {
        #[arg(long, default_value = DEFAULT_CASE)]
        case: PathBuf,
        #[arg(long, default_value = "noon-peak")]
        shape: String,
        /// Relative multiplicative noise on every series.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output scenario file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one mode and write `<mode>.csv` and `<mode>.json`.
    Run(RunArgs),
    /// Run every mode on a shared oracle and report dominance.
    Compare(RunArgs),
    /// Check decentralized increments against the dense coupled solve.
    VerifyEquivalence {
        #[arg(long, default_value = "small.json")]
        case: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Sample time of the random states.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Mean tracking error per sampling period.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1,0.5")]
        values: Vec<f64>,
    },
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct RunArgs {
    #[arg(long, default_value = DEFAULT_CASE)]
    case: PathBuf,
    /// Scenario file; a smooth synthetic scenario seeded by `--seed` when
    /// omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "decentralized")]
    mode: RunMode,
    #[arg(long, default_value_t = 0.02)]
    tau: f64,
    /// Residual weight, `1 / tau` by default.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    no_prediction: bool,
    #[arg(long, default_value = "per-agent")]
    step_mode: StepMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Case paths that do not exist are looked up among the bundled cases.
fn resolve_case(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    let bundled = Path::new(BUNDLED_CASES).join(path);
    if bundled.exists() {
        bundled
    } else {
        path.to_path_buf()
    }
}

fn load_inputs(case: &Path, scenario: Option<&Path>, seed: u64) -> Result<(Network, Scenario)> {
    let net = load_case(resolve_case(case))?;
    let sc = match scenario {
        Some(p) => Scenario::load(p)?,
        None => make_synthetic(&net, "noon-peak", 0.0, seed)?,
    };
    sc.check_covers(&net)?;
    Ok((net, sc))
}

impl RunArgs {
    fn inputs(&self) -> Result<(Network, Scenario, RunConfig)> {
        let (net, sc) = load_inputs(&self.case, self.scenario.as_deref(), self.seed)?;
        let (start, end) = sc.horizon();
        let t0 = self.t0.unwrap_or(start);
        let t_end = self.t_end.unwrap_or((t0 + DEFAULT_SPAN).min(end));
        let cfg = RunConfig {
            alpha: self.alpha,
            seed: self.seed,
            prediction: !self.no_prediction,
            step_mode: self.step_mode,
            ..RunConfig::new(self.mode, self.tau, t0, t_end)
        };
        cfg.tracker().validate()?;
        Ok((net, sc, cfg))
    }

    fn out_dir(&self) -> Result<Option<&Path>> {
        if let Some(dir) = &self.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(self.out.as_deref())
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenario {
            case,
            shape,
            noise,
            seed,
            out,
        } => {
            let net = load_case(resolve_case(&case))?;
            let sc = make_synthetic(&net, &shape, noise, seed)?;
            sc.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Run(args) => {
            let (net, sc, cfg) = args.inputs()?;
            let record = run(&net, &sc, &cfg)?;
            if let Some(dir) = args.out_dir()? {
                let (csv, json) = record.write(dir)?;
                info!("wrote {} and {}", csv.display(), json.display());
            }
            println!("{}", serde_json::to_string_pretty(&record.summary)?);
        }
        Command::Compare(args) => {
            let (net, sc, cfg) = args.inputs()?;
            let cmp = compare(&net, &sc, &cfg)?;
            if let Some(dir) = args.out_dir()? {
                for r in &cmp.records {
                    r.write(dir)?;
                }
                write_atomic(
                    &dir.join("comparison.json"),
                    &serde_json::to_string_pretty(&cmp)?,
                )?;
            }
            for r in &cmp.records {
                println!(
                    "{:<14} mean objective {:.6}  mean rel err {:.3e}",
                    r.mode.name(),
                    r.summary.mean_objective,
                    r.summary.mean_rel_err
                );
            }
            println!(
                "dominance violations {}  mean reduction {:.3}%",
                cmp.dominance_violations,
                100.0 * cmp.mean_reduction
            );
        }
        Command::VerifyEquivalence {
            case,
            scenario,
            seed,
            trials,
            t,
        } => {
            let (net, sc) = load_inputs(&case, scenario.as_deref(), seed)?;
            let (start, end) = sc.horizon();
            let rep =
                equivalence_trials(&net, &sc, t.unwrap_or(0.5 * (start + end)), seed, trials)?;
            for (block, dev) in &rep.blocks {
                info!("{block}: {dev:.3e}");
            }
            println!(
                "{} max deviation {:.3e}",
                if rep.pass { "PASS" } else { "FAIL" },
                rep.max_deviation
            );
            if !rep.pass {
                anyhow::bail!("decentralized increments deviate from the coupled solve");
            }
        }
        Command::SweepTau { run, values } => {
            let (net, sc, cfg) = run.inputs()?;
            let points = sweep_tau(&net, &sc, &values, &cfg)?;
            for p in &points {
                match (p.mean_rel_err, &p.failure) {
                    (Some(e), _) => println!("tau {:<8} mean rel err {e:.3e}", p.tau),
                    (None, Some(f)) => println!("tau {:<8} failed: {f}", p.tau),
                    (None, None) => println!("tau {:<8} failed", p.tau),
                }
            }
            if let Some(dir) = run.out_dir()? {
                write_atomic(
                    &dir.join("sweep.json"),
                    &serde_json::to_string_pretty(&points)?,
                )?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDTRACK_LOG", "error"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // clap exits 0 for help and version, 2 for usage errors
        Err(e) => e.exit(),
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already embed their sources in the message
            let mut text = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !text.contains(&c) {
                    text = format!("{text}: {c}");
                }
            }
            eprintln!("error: {text}");
            let input = e.chain().any(|c| {
                c.downcast_ref::<gridtrack::Error>()
                    .is_some_and(|g| g.is_input_error())
                    || c.is::<std::io::Error>()
            });
            ExitCode::from(if input { 2 } else { 1 })
        }
    }
}
