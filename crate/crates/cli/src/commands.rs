//! The four commands: `train`, `verify`, `probe` and `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use contrast_lab::format::f64_17;
use contrast_lab::monitors::loglog_fit;
use contrast_lab::{
    ce_smoothness_check, descent_check, gradient_bound_probe, init_probe, perturbation_probe, smoothness_probe,
    theoretical_hyperparams, train, trajectory_check, Dataset, DescentContext, Error, GradientProbeConfig, HyperParams,
    InitProbeOptions, Outcome, Params, PerturbationProbeOptions, ProbeReport, ProblemSize, RngState, Shape,
    SmoothnessProbeOptions, TheoryConstants, TheorySchedule, TrainOptions, TrainRun,
};

use crate::artifacts::{emit_trace, emit_trace_long, write_json};
use crate::config::{ExperimentConfig, StepSize, DEFAULT_ITERATIONS};
use crate::error::{CliError, Context};
use crate::verify;

/// Iteration counts above this need an explicit `T` in the config.
pub const MAX_SCHEDULED_ITERATIONS: u128 = 10_000_000;
/// Trials used by the `ce` probe.
pub const CE_PROBE_TRIALS: usize = 100_000;
pub const CE_PROBE_K: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Verify,
    Probe,
    Sweep,
}

/// Exit codes: every check passed, some check failed, the command could not
/// run, or no check failed but at least one was inconclusive.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

#[derive(Clone, Debug)]
pub struct CommandOutcome {
    pub status: Outcome,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable report for the terminal.
    pub summary: String,
}

impl CommandOutcome {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            Outcome::Pass => EXIT_PASS,
            Outcome::Fail => EXIT_FAIL,
            Outcome::Inconclusive => EXIT_INCONCLUSIVE,
        }
    }
}

pub fn combine(statuses: impl IntoIterator<Item = Outcome>) -> Outcome {
    let mut out = Outcome::Pass;
    for s in statuses {
        match s {
            Outcome::Fail => return Outcome::Fail,
            Outcome::Inconclusive => out = Outcome::Inconclusive,
            Outcome::Pass => {}
        }
    }
    out
}

/// Dataset, initial encoders and step sizes derived from a config.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub data: Dataset,
    pub query: Params,
    pub key: Params,
    pub hp: HyperParams,
    /// Closed-form schedule for this size; its radii drive the trajectory check.
    pub schedule: TheorySchedule,
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let root = config.root_rng();
        let data = Dataset::generate_separated(&root.child("data"), config.n, config.b, config.delta_min, None)
            .context(|| format!("generating n={} points in b={} with delta_min={}", config.n, config.b, config.delta_min))?;
        let shape = Shape::new(config.depth, config.m, config.d, config.b)
            .context(|| format!("encoder shape L={} m={} d={} b={}", config.depth, config.m, config.d, config.b))?;
        let query = Params::init(&root.child("query"), shape).context(|| "initializing query encoder".into())?;
        let key = Params::init(&root.child("key"), shape).context(|| "initializing key encoder".into())?;
        let size = ProblemSize {
            n: config.n,
            k: config.k,
            depth: config.depth,
            width: config.m,
            output_dim: config.d,
            delta: data.delta(),
            epsilon: config.epsilon,
        };
        let (c_step, c_iterations) = match config.step_size {
            StepSize::Theoretical { c_step, c_iterations } => (c_step, c_iterations),
            StepSize::Practical { .. } => (1.0, 1.0),
        };
        let constants = TheoryConstants {
            step: c_step,
            iterations: c_iterations,
            ball: config.c_ball,
        };
        let schedule = theoretical_hyperparams(&size, &constants).context(|| "theoretical schedule".into())?;
        let (eta, gamma, iterations) = match config.step_size {
            StepSize::Practical { eta, gamma } => (eta, gamma, config.iterations.unwrap_or(DEFAULT_ITERATIONS)),
            StepSize::Theoretical { .. } => {
                let iterations = match config.iterations {
                    Some(t) => t,
                    None if schedule.iterations <= MAX_SCHEDULED_ITERATIONS => schedule.iterations as usize,
                    None => {
                        return Err(CliError::Config {
                            field: "T".into(),
                            message: format!(
                                "theoretical schedule asks for T = {} iterations; set \"T\" to run a truncated schedule",
                                schedule.iterations
                            ),
                        })
                    }
                };
                (schedule.eta, schedule.gamma, iterations)
            }
        };
        let hp = HyperParams {
            k: config.k,
            eta,
            gamma,
            iterations,
            epsilon: config.epsilon,
            estimation: config.estimation(),
        };
        Ok(Self {
            data,
            query,
            key,
            hp,
            schedule,
        })
    }

    pub fn train_options(config: &ExperimentConfig) -> TrainOptions {
        TrainOptions {
            early_stop: config.early_stop,
            spectral_every: config.spectral_every,
            record_wall_clock: config.record_wall_clock,
        }
    }

    pub fn run_training(&self, config: &ExperimentConfig) -> contrast_lab::Result<TrainRun> {
        train(&self.query, &self.key, &self.data, &self.hp, &Self::train_options(config))
    }
}

fn schedule_json(s: &TheorySchedule) -> serde_json::Value {
    json!({"eta": s.eta, "gamma": s.gamma, "iterations": s.iterations as f64, "omega": s.omega, "tau": s.tau})
}

fn write_params(path: &Path, params: &Params, provenance: RngState) -> Result<(), CliError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    params.write_binary(&mut out, Some(provenance))?;
    std::io::Write::flush(&mut out)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Run one command, writing artifacts under `out`.
pub fn run_command(command: Command, config: &ExperimentConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    config.validate()?;
    ensure_dir(out)?;
    match command {
        Command::Train => run_train(config, out),
        Command::Verify => run_verify(config, out),
        Command::Probe => run_probe(config, out),
        Command::Sweep => run_sweep(config, out),
    }
}

/// Train, then write the trace, final parameters, dataset and a summary.
/// A diverging run still leaves its partial trace and summary on disk.
pub fn run_train(config: &ExperimentConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    let exp = Experiment::build(config)?;
    train_into(config, &exp, out).map(|(outcome, _)| outcome)
}

fn train_into(config: &ExperimentConfig, exp: &Experiment, out: &Path) -> Result<(CommandOutcome, TrainRun), CliError> {
    ensure_dir(out)?;
    let mut artifacts = Vec::new();
    let data_path = out.join("data.json");
    fs::write(&data_path, exp.data.to_json() + "\n")?;
    artifacts.push(data_path);
    let hyper = json!({"eta": exp.hp.eta, "gamma": exp.hp.gamma, "T": exp.hp.iterations, "k": exp.hp.k, "estimation": exp.hp.estimation});
    let run = match exp.run_training(config) {
        Ok(run) => run,
        Err(Error::Divergence { t, detail, trace }) => {
            let trace_path = out.join("trace.csv");
            emit_trace(&trace, &trace_path)?;
            let summary_path = out.join("summary.json");
            let payload = json!({
                "hyperparams": hyper,
                "schedule": schedule_json(&exp.schedule),
                "diverged": {"t": t, "detail": detail},
                "records": trace.records.len(),
            });
            write_json(&summary_path, config, "summary", &payload)?;
            return Err(CliError::Core {
                context: format!("training (partial trace in {})", trace_path.display()),
                source: Error::Divergence { t, detail, trace },
            });
        }
        Err(e) => {
            return Err(CliError::Core {
                context: format!("training with L={} m={} n={} k={}", config.depth, config.m, config.n, config.k),
                source: e,
            })
        }
    };
    let trace_path = out.join("trace.csv");
    emit_trace(&run.trace, &trace_path)?;
    artifacts.push(trace_path);
    let long_path = out.join("trace_long.csv");
    emit_trace_long(&run.trace, &long_path)?;
    artifacts.push(long_path);
    let root = config.root_rng();
    for (name, params, stream) in [("query.params", &run.query, "query"), ("key.params", &run.key, "key")] {
        let path = out.join(name);
        write_params(&path, params, root.child(stream))?;
        artifacts.push(path);
    }
    let records = &run.trace.records;
    let first = records.first().expect("trace holds t = 0");
    let last = records.last().expect("trace holds t = 0");
    let payload = json!({
        "hyperparams": hyper,
        "schedule": schedule_json(&exp.schedule),
        "records": records.len(),
        "stopped_early": run.trace.stopped_early,
        "initial_loss": first.loss,
        "final_loss": last.loss,
        "initial_loss_vec_norm": first.loss_vec_norm,
        "final_loss_vec_norm": last.loss_vec_norm,
        "running_average_loss_vec": run.trace.running_average_loss_vec(),
        "final_traj_w_fro": last.traj_w_fro,
        "final_traj_theta_fro": last.traj_theta_fro,
    });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, config, "summary", &payload)?;
    artifacts.push(summary_path);
    let summary = format!(
        "trained T={} ({} records, {}): loss {} -> {}, running average |l| {}\n",
        exp.hp.iterations,
        records.len(),
        run.trace.estimation,
        f64_17(first.loss),
        f64_17(last.loss),
        f64_17(run.trace.running_average_loss_vec()),
    );
    Ok((
        CommandOutcome {
            status: Outcome::Pass,
            artifacts,
            summary,
        },
        run,
    ))
}

fn report_outcome(reports: &[ProbeReport], artifacts: Vec<PathBuf>) -> CommandOutcome {
    let mut summary = String::new();
    for r in reports {
        summary.push_str(&r.render_table());
        summary.push('\n');
    }
    let status = combine(reports.iter().map(|r| r.status));
    let _ = writeln!(summary, "overall: {status:?}");
    CommandOutcome {
        status,
        artifacts,
        summary,
    }
}

/// Every oracle-equivalence suite on the fixed verification instance,
/// seeded from the config.
pub fn run_verify(config: &ExperimentConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    let reports = verify::run_all(config.seed).context(|| format!("verification suites (seed {})", config.seed))?;
    let path = out.join("verify.json");
    write_json(&path, config, "reports", &reports)?;
    Ok(report_outcome(&reports, vec![path]))
}

fn probe_rng(config: &ExperimentConfig, name: &str) -> RngState {
    config.root_rng().child("probe").child(name)
}

/// Probes that run on a single width.
fn width_probes(config: &ExperimentConfig) -> Vec<&str> {
    config.probes.iter().map(String::as_str).filter(|p| !matches!(*p, "gradient" | "ce")).collect()
}

fn selected<'a>(config: &'a ExperimentConfig, names: &[&str]) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for p in &config.probes {
        if names.contains(&p.as_str()) && !out.contains(&p.as_str()) {
            out.push(p);
        }
    }
    out
}

/// Width-independent probes: gradient scaling across `m_grid` and the
/// softplus bound.
fn global_probe(config: &ExperimentConfig, name: &str) -> Result<ProbeReport, CliError> {
    match name {
        "gradient" => {
            let probe = GradientProbeConfig {
                n: config.n,
                k: config.k,
                depth: config.depth,
                output_dim: config.d,
                input_dim: config.b,
                delta_min: config.delta_min,
                widths: config.m_grid.clone(),
                estimation: config.estimation(),
                ..GradientProbeConfig::default()
            };
            gradient_bound_probe(&probe, &probe_rng(config, name)).context(|| format!("gradient probe over m_grid {:?}", config.m_grid))
        }
        "ce" => ce_smoothness_check(&probe_rng(config, name), CE_PROBE_TRIALS, CE_PROBE_K).context(|| "ce probe".into()),
        other => unreachable!("{other} is not a global probe"),
    }
}

/// Probes on the config's width. Descent and trajectory share one training run.
fn local_probes(config: &ExperimentConfig, exp: &Experiment, names: &[&str], run: Option<&TrainRun>) -> Result<Vec<ProbeReport>, CliError> {
    let mut trained: Option<TrainRun> = None;
    let mut reports = Vec::new();
    for &name in names {
        let ctx = || format!("{name} probe at m={}", config.m);
        let report = match name {
            "init" => init_probe(&exp.query, &exp.key, &exp.data, &InitProbeOptions::default(), None, &probe_rng(config, name))
                .context(ctx)?,
            "smoothness" => smoothness_probe(
                &exp.query,
                &exp.key,
                &exp.data,
                &exp.hp,
                &SmoothnessProbeOptions::default(),
                &probe_rng(config, name),
            )
            .context(ctx)?,
            "perturbation" => perturbation_probe(&exp.query, &exp.data, &PerturbationProbeOptions::default(), &probe_rng(config, name))
                .context(ctx)?,
            "descent" | "trajectory" => {
                let run = match run {
                    Some(r) => r,
                    None => {
                        if trained.is_none() {
                            trained = Some(exp.run_training(config).context(ctx)?);
                        }
                        trained.as_ref().expect("just trained")
                    }
                };
                if name == "descent" {
                    let dctx = DescentContext {
                        n: config.n,
                        d: config.d,
                        m: config.m,
                        delta: exp.data.delta(),
                    };
                    descent_check(&run.trace, &dctx).context(ctx)?
                } else {
                    trajectory_check(&run.trace, exp.schedule.omega, exp.schedule.tau).context(ctx)?
                }
            }
            other => unreachable!("{other} is not a width probe"),
        };
        reports.push(report);
    }
    Ok(reports)
}

fn write_reports(config: &ExperimentConfig, reports: &[ProbeReport], names: &[&str], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for (name, report) in names.iter().zip(reports) {
        let path = out.join(format!("probe_{name}.json"));
        write_json(&path, config, "report", report)?;
        paths.push(path);
    }
    Ok(paths)
}

/// The selected probes, one `probe_<name>.json` each.
pub fn run_probe(config: &ExperimentConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    let exp = Experiment::build(config)?;
    let locals = width_probes(config);
    let mut names = selected(config, &locals);
    let mut reports = local_probes(config, &exp, &names, None)?;
    for name in selected(config, &["gradient", "ce"]) {
        reports.push(global_probe(config, name)?);
        names.push(name);
    }
    let artifacts = write_reports(config, &reports, &names, out)?;
    Ok(report_outcome(&reports, artifacts))
}

/// Header of `scaling.csv`.
pub const SCALING_HEADER: &str = "m,grad_w_fro_sq,grad_theta_fro_sq,loss_vec_norm,initial_loss,final_loss";

struct WidthResult {
    m: usize,
    grad_w_sq: f64,
    grad_theta_sq: f64,
    loss_vec_norm: f64,
    initial_loss: f64,
    final_loss: f64,
    reports: Vec<ProbeReport>,
    artifacts: Vec<PathBuf>,
}

fn sweep_width(config: &ExperimentConfig, m: usize, out: &Path) -> Result<WidthResult, CliError> {
    let mut sub = config.clone();
    sub.m = m;
    let dir = out.join(format!("m_{m}"));
    let exp = Experiment::build(&sub)?;
    let (trained, run) = train_into(&sub, &exp, &dir)?;
    let names = width_probes(&sub);
    let names = selected(&sub, &names);
    let reports = local_probes(&sub, &exp, &names, Some(&run))?;
    let mut artifacts = trained.artifacts;
    artifacts.extend(write_reports(&sub, &reports, &names, &dir)?);
    let first = &run.trace.records[0];
    let last = run.trace.records.last().expect("non-empty trace");
    Ok(WidthResult {
        m,
        grad_w_sq: first.grad_w_fro.powi(2),
        grad_theta_sq: first.grad_theta_fro.powi(2),
        loss_vec_norm: first.loss_vec_norm,
        initial_loss: first.loss,
        final_loss: last.loss,
        reports,
        artifacts,
    })
}

/// Train and probe every width of `m_grid` (one subdirectory each, run in
/// parallel), then write `scaling.csv`: one row per width followed by the
/// log-log slope and R² of each column against `m`.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<CommandOutcome, CliError> {
    let mut results = config
        .m_grid
        .par_iter()
        .map(|&m| sweep_width(config, m, out))
        .collect::<Result<Vec<_>, CliError>>()?;
    results.sort_by_key(|r| r.m);

    let mut csv = String::from(SCALING_HEADER);
    csv.push('\n');
    for r in &results {
        let values = [r.grad_w_sq, r.grad_theta_sq, r.loss_vec_norm, r.initial_loss, r.final_loss];
        let _ = writeln!(csv, "{},{}", r.m, values.map(f64_17).join(","));
    }
    let ms: Vec<f64> = results.iter().map(|r| r.m as f64).collect();
    let columns: [(&str, Vec<f64>); 5] = [
        ("grad_w_fro_sq", results.iter().map(|r| r.grad_w_sq).collect()),
        ("grad_theta_fro_sq", results.iter().map(|r| r.grad_theta_sq).collect()),
        ("loss_vec_norm", results.iter().map(|r| r.loss_vec_norm).collect()),
        ("initial_loss", results.iter().map(|r| r.initial_loss).collect()),
        ("final_loss", results.iter().map(|r| r.final_loss).collect()),
    ];
    let fits: Vec<Option<(f64, f64)>> = columns
        .iter()
        .map(|(name, ys)| loglog_fit(name, &ms, ys).ok().map(|f| (f.slope, f.r_squared)))
        .collect();
    let cell = |v: Option<f64>| v.map(f64_17).unwrap_or_default();
    let _ = writeln!(csv, "slope,{}", fits.iter().map(|f| cell(f.map(|x| x.0))).collect::<Vec<_>>().join(","));
    let _ = writeln!(csv, "r_squared,{}", fits.iter().map(|f| cell(f.map(|x| x.1))).collect::<Vec<_>>().join(","));
    let scaling_path = out.join("scaling.csv");
    fs::write(&scaling_path, &csv)?;

    let mut artifacts = vec![scaling_path];
    let mut reports = Vec::new();
    for r in results {
        artifacts.extend(r.artifacts);
        reports.extend(r.reports);
    }
    let globals = selected(config, &["gradient", "ce"]);
    let mut global_reports = Vec::new();
    for &name in &globals {
        global_reports.push(global_probe(config, name)?);
    }
    artifacts.extend(write_reports(config, &global_reports, &globals, out)?);
    reports.extend(global_reports);
    let mut outcome = report_outcome(&reports, artifacts);
    outcome.summary = format!("{csv}\n{}", outcome.summary);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.n = 4;
        c.k = 2;
        c.m = 16;
        c.d = 4;
        c.b = 4;
        c.iterations = Some(3);
        c
    }

    #[test]
    fn combine_prefers_fail_then_inconclusive() {
        use Outcome::*;
        assert_eq!(combine([Pass, Pass]), Pass);
        assert_eq!(combine([Pass, Inconclusive]), Inconclusive);
        assert_eq!(combine([Inconclusive, Fail, Pass]), Fail);
        assert_eq!(combine([]), Pass);
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_command(Command::Train, &small(), dir.path()).unwrap();
        assert_eq!(outcome.exit_code(), EXIT_PASS);
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 1 + 4);
        for f in ["query.params", "key.params", "summary.json", "data.json", "trace_long.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let mut file = fs::File::open(dir.path().join("query.params")).unwrap();
        let (q, provenance) = Params::read_binary(&mut file).unwrap();
        assert_eq!(q.shape().width, 16);
        assert_eq!(provenance, Some(RngState::new(0).child("query")));
    }

    #[test]
    fn zero_iterations_is_an_error() {
        let mut c = small();
        c.iterations = Some(0);
        let dir = tempfile::tempdir().unwrap();
        let err = run_command(Command::Train, &c, dir.path()).unwrap_err();
        assert!(err.to_string().contains("T must be ≥ 1"), "{err}");
    }

    #[test]
    fn divergence_leaves_partial_trace() {
        let mut c = small();
        c.step_size = StepSize::Practical { eta: 1e200, gamma: 1e200 };
        let dir = tempfile::tempdir().unwrap();
        let err = run_command(Command::Train, &c, dir.path()).unwrap_err();
        assert!(err.to_string().contains("diverged"), "{err}");
        assert!(fs::read_to_string(dir.path().join("trace.csv")).unwrap().lines().count() >= 2);
        let summary = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        assert!(summary.contains("\"diverged\""));
    }

    #[test]
    fn theoretical_schedule_needs_override_when_huge() {
        let mut c = small();
        c.n = 8;
        c.iterations = None;
        c.step_size = StepSize::Theoretical { c_step: 1.0, c_iterations: 1.0 };
        let err = Experiment::build(&c).err().expect("schedule is far above the cap");
        assert!(err.to_string().contains("set \"T\""), "{err}");
        c.iterations = Some(2);
        let exp = Experiment::build(&c).unwrap();
        assert_eq!(exp.hp.iterations, 2);
        assert_eq!(exp.hp.eta, exp.schedule.eta);
    }

    #[test]
    fn probe_writes_one_file_per_probe() {
        let mut c = small();
        c.probes = vec!["trajectory".into(), "descent".into()];
        let dir = tempfile::tempdir().unwrap();
        let outcome = run_command(Command::Probe, &c, dir.path()).unwrap();
        assert_eq!(outcome.artifacts.len(), 2);
        assert!(dir.path().join("probe_descent.json").exists());
        assert!(dir.path().join("probe_trajectory.json").exists());
    }

    #[test]
    fn sweep_table_has_row_per_width_and_summary() {
        let mut c = small();
        c.probes = vec!["trajectory".into()];
        c.m_grid = vec![32, 8, 16];
        let dir = tempfile::tempdir().unwrap();
        run_command(Command::Sweep, &c, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SCALING_HEADER);
        assert_eq!(lines.len(), 1 + 3 + 2);
        assert!(lines[1].starts_with("8,") && lines[3].starts_with("32,"));
        assert!(lines[4].starts_with("slope,") && lines[5].starts_with("r_squared,"));
        for m in [8, 16, 32] {
            assert!(dir.path().join(format!("m_{m}/trace.csv")).exists());
            assert!(dir.path().join(format!("m_{m}/probe_trajectory.json")).exists());
        }
    }
}
