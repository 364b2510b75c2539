//! `empc`: run, verify and calibrate Lyapunov-constrained economic MPC
//! scenarios.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use empc::harness::{write_csv, RunSummary};
use empc::nlp::compute_v_max;
use empc::scenario::{calibrate_kappa, run_all, CaseStudy, Scenario};
use empc::terminal::verify_terminal;
use empc::Error;

const EXIT_MONITOR: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_TERMINAL: u8 = 4;
const EXIT_CALIBRATION: u8 = 5;

#[derive(Parser)]
#[command(
    name = "empc",
    version,
    about = "Lyapunov-constrained economic MPC simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON; omitted means the built-in case study.
    scenario: Option<PathBuf>,
    /// Concurrent simulations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Offsets every sampling seed of the scenario.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Solver feasibility tolerance, also the monitor slack.
    #[arg(long)]
    feas_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every controller; writes one CSV per run and summary.json.
    Run(Common),
    /// Synthesize and verify terminal ingredients and print the V_max bound.
    Verify(Common),
    /// Bisect κ̄ so the alg1 total energy matches a target.
    CalibrateKappa {
        #[command(flatten)]
        common: Common,
        /// Target energy, kWh.
        #[arg(long, default_value_t = 240.3)]
        target_kwh: f64,
    },
    /// Print the optimal steady state.
    SteadyState(Common),
}

/// Error paired with the exit code it maps to.
struct Failure(u8, anyhow::Error);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Infeasible { .. } => EXIT_INFEASIBLE,
            Error::Synthesis(_) | Error::Verification(_) => EXIT_TERMINAL,
            Error::Calibration(_) => EXIT_CALIBRATION,
            _ => EXIT_USAGE,
        };
        Failure(code, e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure(EXIT_USAGE, e)
    }
}

fn load(common: &Common) -> Result<Scenario, Failure> {
    let mut s = match &common.scenario {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Scenario::from_json(&text)?
        }
        None => Scenario::default(),
    };
    if let Some(seed) = common.seed {
        s.sim.seed = seed;
    }
    if let Some(tol) = common.feas_tol {
        s.solver.feas_tol = tol;
    }
    if let Some(dir) = &common.out_dir {
        s.output_dir = Some(dir.display().to_string());
    }
    s.validate()?;
    Ok(s)
}

fn out_dir(s: &Scenario) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(s.output_dir.as_deref().unwrap_or("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(common: &Common) -> Result<u8, Failure> {
    let scenario = load(common)?;
    let dir = out_dir(&scenario)?;
    let case = CaseStudy::build(&scenario)?;
    let runs = run_all(&case, &scenario, common.jobs)?;
    let mut summaries = Vec::new();
    let mut code = 0;
    for (block, run) in scenario.controllers.iter().zip(runs) {
        let label = block.config().label();
        let run = match run {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{label}: {e}");
                code = code.max(Failure::from(e).0);
                continue;
            }
        };
        let path = dir.join(format!("{label}.csv"));
        let file =
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(std::io::BufWriter::new(file), &run.log, &run.report)?;
        let summary = RunSummary::new(&run.log, &run.report);
        println!(
            "{label:<10} {:>9.2} kWh  final ‖x−x_s‖ {:.4}  fallbacks {}  mandatory monitors {}",
            summary.total_kwh,
            summary.final_distance,
            summary.fallback_count,
            if summary.mandatory_passed {
                "pass"
            } else {
                "FAIL"
            }
        );
        if let Some(a) = &summary.abort {
            eprintln!("{label}: aborted at t = {}: {}", a.t, a.message);
            code = code.max(if a.infeasible {
                EXIT_INFEASIBLE
            } else {
                EXIT_MONITOR
            });
        } else if !summary.mandatory_passed {
            code = code.max(EXIT_MONITOR);
        }
        summaries.push(summary);
    }
    write_json(&dir.join("summary.json"), &summaries)?;
    // An infeasibility abort outranks a monitor failure.
    Ok(code)
}

fn cmd_verify(common: &Common) -> Result<u8, Failure> {
    let scenario = load(common)?;
    let case = CaseStudy::build(&scenario)?;
    let t = &case.terminal;
    let opts = scenario.terminal.options;
    let verdict = verify_terminal(
        &case.model,
        &case.costs,
        t,
        case.horizon,
        opts.n_samples,
        opts.seed.wrapping_add(scenario.sim.seed),
    )?;
    println!("K     = {:?}", empc::scalar::matrix_to_rows(&t.k_gain));
    println!("P     = {:?}", empc::scalar::matrix_to_rows(&t.p_matrix));
    println!("alpha = {:.6e}", t.alpha);
    println!(
        "margins: admissibility {:.3e}, invariance {:.3e}, decrease {:.3e} ({} samples)",
        verdict.admissibility_margin,
        verdict.invariance_margin,
        verdict.decrease_margin,
        verdict.n_samples
    );
    let v = compute_v_max(
        &case.model,
        &case.costs,
        t,
        case.horizon,
        scenario.v_max.n_samples,
        scenario.v_max.seed,
    )?;
    println!(
        "V_max = {:.6e} (largest of {} sampled feasible V^δ: {:.6e})",
        v.bound, v.n_feasible, v.sampled_max
    );
    if let Some(dir) = &scenario.output_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {dir}"))?;
        fs::write(Path::new(dir).join("terminal.json"), t.to_json()?)
            .context("writing terminal.json")?;
    }
    verdict.into_result()?;
    Ok(0)
}

fn cmd_calibrate(common: &Common, target: f64) -> Result<u8, Failure> {
    let mut scenario = load(common)?;
    let case = CaseStudy::build(&scenario)?;
    let c = calibrate_kappa(&case, &scenario, target)?;
    println!(
        "kappa_bar = {:.6} (alg1 total {:.3} kWh, target {:.3}, {} runs)",
        c.value, c.achieved, c.target, c.evaluations
    );
    scenario.costs.kappa_bar = c.value;
    let dir = out_dir(&scenario)?;
    let path = dir.join("calibrated_scenario.json");
    fs::write(&path, scenario.to_json()? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_steady_state(common: &Common) -> Result<u8, Failure> {
    let scenario = load(common)?;
    let model = scenario.model.build()?;
    let econ = scenario.costs.economic(model.n_x())?;
    let s = empc::equilibrium::solve_steady_state(&model, &econ)?;
    println!("x_s = {:?}", s.xs.as_slice());
    println!("u_s = {:?}", s.us.as_slice());
    println!("l_e(x_s, u_s) = {:.6}", s.cost);
    println!("residual = {:.3e}", s.residual);
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMPC_LOG_LEVEL", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Verify(c) => cmd_verify(c),
        Command::CalibrateKappa { common, target_kwh } => cmd_calibrate(common, *target_kwh),
        Command::SteadyState(c) => cmd_steady_state(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
