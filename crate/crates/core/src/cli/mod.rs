//! Command-line front end: configuration, the four commands and their artifacts.
//!
//! Every file is written to a temporary file in the output directory and
//! renamed into place, so an interrupted run leaves no partial artifact.

mod config;

pub use config::{
    parse_config, ControlConfig, EnsembleConfig, ExperimentConfig, Family, GridConfig, ModelConfig,
    OutputConfig, Placement, ScheduleFile, VerifyConfig,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dynamics::{solve_state, write_costates_csv, write_trajectory_csv};
use crate::error::Result;
use crate::pmp::{forward_backward_sweep, SweepReport};
use crate::scenarios;
use crate::verify::{
    check_conserved_pairing, coverage, fd_check_cdiff, fd_check_mugrad, particle_convergence_study,
    CheckReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Optimize,
    Verify,
    Converge,
}

/// Process exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// The sweep did not converge or a check failed; artifacts are still written.
    NotConverged,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::NotConverged => 2,
        }
    }
}

/// Result of a command: its status and the files it wrote.
#[derive(Debug)]
pub struct RunOutcome {
    pub status: Status,
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

struct Out {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut std::io::BufWriter<&mut std::fs::File>) -> std::io::Result<()>,
    ) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        {
            let mut w = std::io::BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        let path = self.dir.join(name);
        tmp.persist(&path).map_err(|e| e.error)?;
        self.written.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, |w| writeln!(w, "{text}"))
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, |w| w.write_all(text.as_bytes()))
    }
}

const PLOT_SCRIPT: &str = include_str!("plot.py");

fn write_history(out: &mut Out, report: &SweepReport) -> Result<()> {
    out.write("history.csv", |w| {
        writeln!(w, "# sweep history; columns: iteration, cost, residual")?;
        writeln!(w, "iteration,cost,residual")?;
        for (k, r) in report.residual_history.iter().enumerate() {
            // The cost history has one entry per accepted schedule.
            let c = report.cost_history[k.min(report.cost_history.len() - 1)];
            writeln!(w, "{k},{c:.16e},{r:.16e}")?;
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct SimulationSummary {
    total_cost: f64,
    running_cost: f64,
    terminal_cost: f64,
    max_violation: f64,
    substeps: usize,
}

#[derive(Serialize)]
struct VerifySummary {
    passed: bool,
    covered: Vec<String>,
    reports: Vec<CheckReport>,
}

/// Runs one command. `Err` means the run could not be carried out (exit code 1).
pub fn run_scenario(config: &ExperimentConfig, command: Command) -> Result<RunOutcome> {
    let mut out = Out::new(&config.output.directory)?;
    let (status, summary) = match command {
        Command::Simulate => {
            let sc = config.scenario(None)?;
            let model = sc.model.as_ref();
            let traj = solve_state(model, &sc.grid, &sc.mu0, &sc.schedule)?;
            let (_, indices) = config.initial_schedule(&sc.grid, &sc.dictionary)?;
            out.write("trajectory.csv", |w| write_trajectory_csv(&traj, w))?;
            out.json(
                "schedule.json",
                &ScheduleFile {
                    indices,
                    values: sc.schedule.values.clone(),
                },
            )?;
            let terminal = model.terminal(traj.final_state());
            let s = SimulationSummary {
                total_cost: terminal + traj.running_cost(),
                running_cost: traj.running_cost(),
                terminal_cost: terminal,
                max_violation: traj.max_violation(),
                substeps: traj.substeps.iter().sum(),
            };
            out.json("summary.json", &s)?;
            (Status::Success, format!("total cost {:.10e}", s.total_cost))
        }
        Command::Optimize => {
            let sc = config.scenario(None)?;
            let (_, indices) = config.initial_schedule(&sc.grid, &sc.dictionary)?;
            let init = indices.ok_or_else(|| {
                crate::Error::InvalidArgument(
                    "optimize needs an initial schedule drawn from the dictionary".into(),
                )
            })?;
            let res = forward_backward_sweep(
                sc.model.as_ref(),
                &sc.grid,
                &sc.mu0,
                &init,
                &sc.dictionary,
                &config.solver,
            )?;
            out.write("trajectory.csv", |w| {
                write_trajectory_csv(&res.trajectory, w)
            })?;
            out.write("costates.csv", |w| {
                write_costates_csv(&sc.grid, &sc.mu0.layout, &res.costates.costates, w)
            })?;
            out.json(
                "schedule.json",
                &ScheduleFile {
                    indices: Some(res.indices.clone()),
                    values: res.schedule.values.clone(),
                },
            )?;
            out.json("sweep_report.json", &res.report)?;
            write_history(&mut out, &res.report)?;
            if config.output.plot {
                out.text("plot.py", PLOT_SCRIPT)?;
            }
            let status = if res.report.converged {
                Status::Success
            } else {
                Status::NotConverged
            };
            let cost = res.report.cost_history.last().copied().unwrap_or(f64::NAN);
            (
                status,
                format!(
                    "{} after {} iterations, cost {cost:.10e}",
                    res.report.status, res.report.iterations
                ),
            )
        }
        Command::Verify => {
            let model = config.model()?;
            let v = &config.verify;
            let mut reports = vec![
                fd_check_cdiff(model.as_ref(), v.trials, v.seed),
                fd_check_mugrad(model.as_ref(), v.trials, v.seed.wrapping_add(1)),
            ];
            // Duality is checked on the fixed leader/follower needle problem.
            reports.push(check_conserved_pairing(
                scenarios::needle,
                &[250, 500, 1000],
                1e-6,
                1.9,
            ));
            let passed = reports.iter().all(|r| r.passed);
            let lines: Vec<String> = reports.iter().map(CheckReport::summary).collect();
            out.json(
                "verify_reports.json",
                &VerifySummary {
                    passed,
                    covered: coverage(&reports),
                    reports,
                },
            )?;
            let status = if passed {
                Status::Success
            } else {
                Status::NotConverged
            };
            (status, lines.join("\n"))
        }
        Command::Converge => {
            let sizes = &config.verify.sizes;
            for &n in sizes {
                config.scenario(Some(n))?;
            }
            let report = particle_convergence_study(
                |n| config.scenario(Some(n)).expect("checked above"),
                sizes,
            );
            out.json("convergence.json", &report)?;
            let status = if report.passed {
                Status::Success
            } else {
                Status::NotConverged
            };
            (status, report.summary())
        }
    };
    Ok(RunOutcome {
        status,
        artifacts: out.written,
        summary,
    })
}

/// Caps the worker pool at `CONVEXCTRL_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CONVEXCTRL_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            crate::Error::InvalidArgument(format!(
                "CONVEXCTRL_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
        if n == 0 {
            return Err(crate::Error::InvalidArgument(
                "CONVEXCTRL_THREADS must be >= 1".into(),
            ));
        }
        // A pool may already exist (e.g. in tests); the cap then stays as it was.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_in(dir: &Path, text: &str) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml_str(text, dir).unwrap();
        c.output.directory = dir.to_path_buf();
        c
    }

    #[test]
    fn simulate_with_zero_control_is_constant() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[model.leader_follower]\nkernel_ff = { amplitude = 0.0, width = 1.0 }\n\
                    kernel_lf = { amplitude = 0.0, width = 1.0 }\nkernel_fl = { amplitude = 0.0, width = 1.0 }\n\
                    kernel_ll = { amplitude = 0.0, width = 1.0 }\nrate_f = { amplitude = 0.0, width = 1.0 }\n\
                    rate_l = { amplitude = 0.0, width = 1.0 }\ncohesion = 0.0\n[grid]\nsteps = 5\n[ensemble]\nparticles = 3\n";
        let c = config_in(dir.path(), text);
        let r = run_scenario(&c, Command::Simulate).unwrap();
        assert_eq!(r.status, Status::Success);
        let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let rows: Vec<Vec<&str>> = csv
            .lines()
            .skip(2)
            .map(|l| l.split(',').collect())
            .collect();
        assert_eq!(rows.len(), 6 * 3);
        for r in &rows {
            let first = &rows[r[1].parse::<usize>().unwrap()];
            assert_eq!(r[2..], first[2..]);
        }
    }

    #[test]
    fn optimize_bang_writes_full_brake_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[model.leader_follower]\ndim = 1\ngoal = [0.0]\n\
                    kernel_ff = { amplitude = 0.0, width = 1.0 }\nkernel_lf = { amplitude = 0.0, width = 1.0 }\n\
                    kernel_fl = { amplitude = 0.0, width = 1.0 }\nkernel_ll = { amplitude = 0.0, width = 1.0 }\n\
                    rate_f = { amplitude = 0.0, width = 1.0 }\nrate_l = { amplitude = 0.0, width = 1.0 }\n\
                    h = { kind = \"constant\", value = 1.0 }\ncohesion = 0.0\n\
                    weights = { goal = 0.0, control = 0.0, terminal = 1.0 }\n\
                    [grid]\nt1 = 1.0\nsteps = 4\n\
                    [ensemble]\nstates = [{ x = [1.0], lam = [0.0, 1.0] }]\n\
                    [control]\ninit = 1\ndictionary = [{ kind = \"constant\", value = [-1.0] }, \
                    { kind = \"constant\", value = [0.0] }, { kind = \"constant\", value = [1.0] }]\n\
                    [solver]\ndamping = 1.0\n";
        let c = config_in(dir.path(), text);
        let r = run_scenario(&c, Command::Optimize).unwrap();
        assert_eq!(r.status, Status::Success, "{}", r.summary);
        let s: ScheduleFile = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("schedule.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(s.indices, Some(vec![0; 4]));
        assert!(s
            .values
            .iter()
            .all(|v| *v == crate::ControlValue::constant(vec![-1.0])));
        for f in [
            "trajectory.csv",
            "costates.csv",
            "sweep_report.json",
            "history.csv",
            "plot.py",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn exported_schedule_reproduces_the_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let c = config_in(
            dir.path(),
            "[grid]\nsteps = 20\n[ensemble]\nparticles = 4\n[control]\ninit = 5\n",
        );
        run_scenario(&c, Command::Simulate).unwrap();
        let first = std::fs::read(dir.path().join("trajectory.csv")).unwrap();
        let copy = dir.path().join("input.json");
        std::fs::copy(dir.path().join("schedule.json"), &copy).unwrap();
        let again = config_in(
            dir.path(),
            "[grid]\nsteps = 20\n[ensemble]\nparticles = 4\n[control]\nschedule_file = \"input.json\"\n",
        );
        run_scenario(&again, Command::Simulate).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("trajectory.csv")).unwrap(),
            first
        );
    }

    #[test]
    fn converge_reports_a_decreasing_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let c = config_in(
            dir.path(),
            "[grid]\nsteps = 50\n[verify]\nsizes = [4, 8, 16]\n[control]\ninit = 5\n",
        );
        let r = run_scenario(&c, Command::Converge).unwrap();
        assert!(dir.path().join("convergence.json").is_file());
        assert_eq!(r.status, Status::Success, "{}", r.summary);
    }
}
