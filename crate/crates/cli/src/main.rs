//! `slackdyn` binary: power flow, time-domain scenario runs and slack
//! capability checks on JSON case files.
//!
//! Exit codes are stable API: 0 ok, 1 usage or file error, 2 power-flow
//! failure, 3 dynamic (mid-run) failure, 4 capability check failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};

use slackdyn_cli::case::{self, CaseDefinition, SlackModeDef};
use slackdyn_cli::csvio;
use slackdyn_cli::report::{self, OutcomeInfo, DEFAULT_TOL, STRONG_WINDOW};
use slackdyn_cli::svg;
use slackdyn_core::dynsim::RunOutcome;
use slackdyn_core::net::build_admittance;
use slackdyn_core::powerflow::{solve_powerflow_with, BusSchedule};
use slackdyn_core::slackcheck::{check_strong, check_weak, Verdict};
use slackdyn_core::Trajectory;

const EXIT_USAGE: u8 = 1;
const EXIT_PF: u8 = 2;
const EXIT_DYN: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "slackdyn",
    version,
    about = "Phasor-domain power system dynamics with slack capability analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the static power flow of a case and print the solution table.
    Powerflow {
        /// Case file (JSON).
        #[arg(long)]
        case: PathBuf,
        /// Override the slack mode of the case.
        #[arg(long, value_enum)]
        slack_mode: Option<SlackModeArg>,
        /// Participation factors: "equal" or a JSON file [{"bus":..,"k":..}].
        #[arg(long)]
        participation: Option<String>,
    },
    /// Integrate one or more scenarios and write trajectory artifacts.
    Run {
        #[arg(long)]
        case: PathBuf,
        /// Scenario name(s); "all" selects every scenario in the case.
        #[arg(long, required = true)]
        scenario: Vec<String>,
        /// Override the scenario horizon, s.
        #[arg(long)]
        t_end: Option<f64>,
        /// Override the integration step, s.
        #[arg(long)]
        dt: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write theta1.svg (bus 1 voltage phase angle vs time).
        #[arg(long)]
        plot: bool,
        /// Run up to N scenarios in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check slack capability of a written trajectory CSV.
    Check {
        /// Trajectory CSV produced by `slackdyn run`.
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, value_enum)]
        mode: CheckMode,
        /// Agreement/settling tolerance.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SlackModeArg {
    Single,
    Distributed,
    Dynamic,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckMode {
    Strong,
    Weak,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("SLACKDYN_LOG", "error"),
    )
    .format_timestamp(None)
    .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the error path with exit 0
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Powerflow { case, slack_mode, participation } => {
            cmd_powerflow(&case, slack_mode, participation.as_deref())
        }
        Command::Run { case, scenario, t_end, dt, out, plot, jobs } => {
            cmd_run(&case, &scenario, t_end, dt, &out, plot, jobs.max(1))
        }
        Command::Check { traj, mode, tol } => cmd_check(&traj, mode, tol),
    };
    ExitCode::from(code)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    eprintln!("error: {}", msg);
    code
}

fn load_case(path: &Path) -> Result<CaseDefinition, u8> {
    case::parse_case(path).map_err(|e| fail(EXIT_USAGE, e))
}

// ---------------------------------------------------------------- powerflow

fn cmd_powerflow(
    case_path: &Path,
    slack_mode: Option<SlackModeArg>,
    participation: Option<&str>,
) -> u8 {
    let case = match load_case(case_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let mode = slack_mode.map(|m| match m {
        SlackModeArg::Single => SlackModeDef::Single,
        SlackModeArg::Distributed => SlackModeDef::Distributed,
        SlackModeArg::Dynamic => SlackModeDef::Dynamic,
    });
    let mut spec = match case.slack_spec(mode) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    if let Some(part) = participation {
        match parse_participation(&case, part) {
            Ok(p) => spec.participation = p,
            Err(e) => return fail(EXIT_USAGE, e),
        }
    }
    let net = match case.network() {
        Ok(n) => n,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let (ybus, schedule) = match static_problem(&case, &net) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    info!("solving power flow for '{}' ({} buses)", case.meta.name, net.n_buses());
    let sol = match solve_powerflow_with(&net, &ybus, &schedule, &spec, 1e-10, 50) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_PF, e),
    };
    println!("case: {}", case.meta.name);
    println!("{:>5} {:>10} {:>12} {:>11} {:>11}", "bus", "v [pu]", "theta [rad]", "p [pu]", "q [pu]");
    for (i, b) in net.buses().iter().enumerate() {
        println!(
            "{:>5} {:>10.6} {:>12.8} {:>11.6} {:>11.6}",
            b.id, sol.v[i], sol.theta[i], sol.p_gen[i], sol.q_gen[i]
        );
    }
    println!("sigma_hat: {:.9} pu", sol.sigma_hat);
    println!("losses:    {:.9} pu", sol.losses);
    println!("iterations: {}", sol.iterations);
    0
}

/// Static schedule implied by the device set points; RLC loads enter as
/// constant shunt admittances stamped into a copy of the bus admittance
/// matrix, matching the dynamic initialization.
fn static_problem(
    case: &CaseDefinition,
    net: &slackdyn_core::Network,
) -> Result<(slackdyn_core::AdmittanceMatrix, Vec<BusSchedule>), case::CaseError> {
    use slackdyn_core::dynsim::Device;
    let devices = case.core_devices(net)?;
    let n = net.n_buses();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut pv: Vec<Option<f64>> = vec![None; n];
    for l in &case.loads {
        let i = net.index_of(l.bus).unwrap();
        p[i] -= l.p;
        q[i] -= l.q;
    }
    let mut ybus = build_admittance(net)?;
    for d in &devices {
        let bus = d.model().bus().and_then(|id| net.index_of(id));
        match d {
            Device::Machine(m) => {
                let i = bus.unwrap();
                let tau = m.governor.map(|g| g.tau_m_ref).unwrap_or(m.params.tau_m0);
                p[i] += tau * m.params.omega_n;
                pv[i] = Some(m.v_set);
            }
            Device::Gfm(g) => {
                let i = bus.unwrap();
                p[i] += g.params.p_ref;
                pv[i] = Some(g.v_set);
            }
            Device::Gfl(g) => {
                let i = bus.unwrap();
                p[i] += g.params.p0;
                q[i] += g.params.q0;
            }
            Device::IdealSlack(s) => {
                let i = bus.unwrap();
                p[i] += s.params.p0;
                pv[i] = Some(s.v_set);
            }
            Device::RlcLoad(r) => {
                let i = bus.unwrap();
                let w = r.omega_b;
                let z = num_complex_shunt(r.params.r, w * r.params.l, 1.0 / (w * r.params.c));
                ybus.m[(i, i)] += z;
            }
            Device::Agc(_) => {}
        }
    }
    let schedule = (0..n)
        .map(|i| match pv[i] {
            Some(v_set) => BusSchedule::Pv { p: p[i], v_set },
            None => BusSchedule::Pq { p: p[i], q: q[i] },
        })
        .collect();
    Ok((ybus, schedule))
}

fn num_complex_shunt(r: f64, xl: f64, xc: f64) -> num_complex::Complex64 {
    let z = num_complex::Complex64::new(r, xl - xc);
    1.0 / z
}

fn parse_participation(
    case: &CaseDefinition,
    arg: &str,
) -> Result<Vec<(usize, f64)>, String> {
    if arg == "equal" {
        return Ok(case.equal_participation());
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| format!("cannot read participation file '{}': {}", arg, e))?;
    #[derive(serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        bus: usize,
        k: f64,
    }
    let entries: Vec<Entry> =
        serde_json::from_str(&text).map_err(|e| format!("participation file: {}", e))?;
    Ok(entries.into_iter().map(|e| (e.bus, e.k)).collect())
}

// ---------------------------------------------------------------- run

struct ScenarioResult {
    name: String,
    code: u8,
}

fn cmd_run(
    case_path: &Path,
    scenarios: &[String],
    t_end: Option<f64>,
    dt: Option<f64>,
    out: &Path,
    plot: bool,
    jobs: usize,
) -> u8 {
    let case = match load_case(case_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let names: Vec<String> = if scenarios.len() == 1 && scenarios[0] == "all" {
        case.scenarios.iter().map(|s| s.name.clone()).collect()
    } else {
        scenarios.to_vec()
    };
    if names.is_empty() {
        return fail(EXIT_USAGE, "case defines no scenarios");
    }
    for n in &names {
        if case.scenario(n).is_none() {
            return fail(EXIT_USAGE, format!("scenario '{}' not found in case", n));
        }
    }
    if let Err(e) = std::fs::create_dir_all(out) {
        return fail(EXIT_USAGE, e);
    }
    let single = names.len() == 1;
    let mut results: Vec<ScenarioResult> = Vec::new();
    for chunk in names.chunks(jobs) {
        let chunk_results = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|name| {
                    let case = &case;
                    let dir = if single { out.to_path_buf() } else { out.join(name) };
                    s.spawn(move || ScenarioResult {
                        name: name.clone(),
                        code: run_one(case, name, t_end, dt, &dir, plot),
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect::<Vec<_>>()
        });
        results.extend(chunk_results);
    }
    let mut code = 0u8;
    for r in &results {
        // worst exit code wins; dynamic failure dominates check details
        code = code.max(r.code);
        debug!("scenario '{}' finished with code {}", r.name, r.code);
    }
    code
}

fn run_one(
    case: &CaseDefinition,
    name: &str,
    t_end: Option<f64>,
    dt: Option<f64>,
    dir: &Path,
    plot: bool,
) -> u8 {
    if let Err(e) = std::fs::create_dir_all(dir) {
        return fail(EXIT_USAGE, e);
    }
    let mut model = match case.build_model() {
        Ok(m) => m,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let spec = match case.slack_spec(None) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let (state0, _pf) = match model.initialize(&spec) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_PF, format!("initialization of '{}': {}", name, e)),
    };
    let scenario = case.scenario(name).unwrap().to_core(t_end, dt);
    info!(
        "running scenario '{}' to t={} s at dt={} s",
        scenario.name, scenario.t_end, scenario.dt
    );
    let result = match model.run(&state0, &scenario) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_DYN, e),
    };
    let diverged = matches!(result.outcome, RunOutcome::Diverged(_));
    if let RunOutcome::Diverged(f) = &result.outcome {
        eprintln!(
            "scenario '{}': Newton diverged at t={:.4} s after {} iterations (residual {:.3e})",
            name, f.t, f.iterations, f.residual_norm
        );
        for (bus, mis) in &f.worst_buses {
            eprintln!("  bus {:>3}: |P mismatch| = {:.4e} pu", bus, mis);
        }
    }
    // artifacts are written even for a partial trajectory
    let traj = &result.trajectory;
    if let Err(e) = csvio::write_trajectory(&dir.join("trajectory.csv"), traj) {
        return fail(EXIT_USAGE, e);
    }
    if let Err(e) = csvio::write_powersplit(&dir.join("powersplit.csv"), traj) {
        return fail(EXIT_USAGE, e);
    }
    let cap = report::analyze(
        traj,
        &report::model_candidates(&model),
        report::model_descriptor(&model),
        OutcomeInfo::from_run(&result.outcome),
        DEFAULT_TOL,
    );
    match serde_json::to_string_pretty(&cap) {
        Ok(json) => {
            if let Err(e) = std::fs::write(dir.join("capability.json"), json + "\n") {
                return fail(EXIT_USAGE, e);
            }
        }
        Err(e) => return fail(EXIT_USAGE, e),
    }
    if plot {
        if let Some(code) = write_theta_plot(dir, traj) {
            return code;
        }
    }
    println!(
        "scenario '{}': {} samples, verdict {:?}{}",
        name,
        traj.len(),
        cap.verdict,
        if diverged { " (diverged, partial trajectory)" } else { "" }
    );
    if diverged {
        EXIT_DYN
    } else {
        0
    }
}

fn write_theta_plot(dir: &Path, traj: &Trajectory) -> Option<u8> {
    let chan = if traj.index_of("bus1.theta").is_some() {
        "bus1.theta".to_string()
    } else {
        traj.names().iter().find(|n| n.ends_with(".theta"))?.clone()
    };
    let ys = traj.column(&chan)?;
    let series = [(chan.clone(), traj.times(), ys)];
    match svg::write_plot(
        &dir.join("theta1.svg"),
        "Voltage phase angle at bus 1",
        "t [s]",
        "theta [rad]",
        &series,
    ) {
        Ok(()) => None,
        Err(e) => Some(fail(EXIT_USAGE, e)),
    }
}

// ---------------------------------------------------------------- check

fn cmd_check(traj_path: &Path, mode: CheckMode, tol: f64) -> u8 {
    let traj = match csvio::read_trajectory(traj_path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let candidates = report::candidates_from_channels(&traj);
    if candidates.is_empty() {
        return fail(EXIT_USAGE, "no slack candidate channels in trajectory");
    }
    let rep = match mode {
        CheckMode::Strong => check_strong(&traj, &candidates, tol, STRONG_WINDOW),
        CheckMode::Weak => check_weak(&traj, &candidates, tol),
    };
    match rep {
        Ok(r) => {
            print!("{}", r.render_text());
            let ok = match mode {
                CheckMode::Strong => r.verdict == Verdict::Strong,
                // a strongly settling trajectory is also weakly capable
                CheckMode::Weak => matches!(r.verdict, Verdict::Weak | Verdict::Strong),
            };
            if ok {
                0
            } else {
                eprintln!("check failed: verdict {:?}", r.verdict);
                EXIT_CHECK
            }
        }
        Err(e) => {
            // analysis errors (no period, short trajectory) mean the claim
            // could not be established
            eprintln!("check failed: {}", e);
            EXIT_CHECK
        }
    }
}
