//! Command-line front end (`hacpass`).
//!
//! Subcommands: `certify`, `sweep`, `simulate`, `verify`. Every subcommand
//! reads one network config, writes its outputs under `--out-dir` (default
//! from `HAC_OUT_DIR`, else the working directory) and emits exactly one
//! `<command>_manifest.json`.
//!
//! Exit codes: 0 success or feasible, 1 infeasible or violated, 2 usage or
//! config error, 3 numerical failure.

use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certify::{check_conditions, gain_frontier, synthesize_certificate, Certificate, CertificateReport, OperatingEnvelope, MARGIN_NAMES};
use crate::netsim::{
    load_config, run_scenario, EventAction, InverterSite, NetworkConfig, NetworkError, ScenarioOptions, SimError, SimEvent,
    DEFAULT_DT, DEFAULT_T_END,
};
use crate::smallsignal::{equilibrium, equilibrium_with_resistive_load, linearize, log_grid, sweep};
use crate::verify::{run_seeds, InputSpec, SeedResult, DEFAULT_TOL_FACTOR};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VIOLATED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "hacpass", version, about = "Incremental-passivity toolkit for hybrid-angle-controlled inverters")]
pub struct Cli {
    /// Directory for all outputs.
    #[arg(long, env = "HAC_OUT_DIR", default_value = ".", global = true)]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the decentralized passivity certificate of every inverter.
    Certify(CertifyArgs),
    /// Sweep the IFP/OFP indices of one inverter's linearization.
    Sweep(SweepArgs),
    /// Simulate the network through its disturbance events.
    Simulate(SimulateArgs),
    /// Check the dissipation inequality on random trajectory pairs.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GainOverrides {
    /// Override the angle/DC-voltage gain η (rad/(V·s)).
    #[arg(long)]
    pub eta: Option<f64>,
    /// Override the half-angle gain γ (rad/s).
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Synthesize a certificate even where the config provides one.
    #[arg(long)]
    pub synthesize: bool,
    /// Only certify this inverter (name or 1-based index).
    #[arg(long)]
    pub inverter: Option<String>,
    #[command(flatten)]
    pub gains: GainOverrides,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub eps2: Option<f64>,
    /// Envelope bound on the reference DC voltage (V).
    #[arg(long)]
    pub v_dc_bar_max: Option<f64>,
    /// Envelope bound on the reference AC current norm (A).
    #[arg(long)]
    pub i_ac_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Inverter name or 1-based index.
    #[arg(long)]
    pub inverter: String,
    #[arg(long, default_value_t = 0.1)]
    pub omega_min: f64,
    #[arg(long, default_value_t = 1e4)]
    pub omega_max: f64,
    #[arg(long, default_value_t = 400)]
    pub points: usize,
    /// Explicit comma-separated grid (rad/s); replaces the log grid.
    #[arg(long, value_delimiter = ',')]
    pub omegas: Option<Vec<f64>>,
    /// Operating-point load current in per unit of the inverter rating.
    #[arg(long, default_value_t = 0.5)]
    pub load_pu: f64,
    #[command(flatten)]
    pub gains: GainOverrides,
    /// Output CSV name inside the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    #[arg(long, default_value_t = DEFAULT_T_END)]
    pub t_end: f64,
    /// Event `load:<bus>:<multiplier>@<t>` or `idc:<inverter>:<delta A>@<t>`;
    /// replaces the config's events when given.
    #[arg(long)]
    pub event: Vec<String>,
    /// Keep every n-th integration step in the CSV.
    #[arg(long, default_value_t = 20)]
    pub sample_every: usize,
    /// Trajectory CSV name inside the output directory.
    #[arg(long, default_value = "trajectory.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Inverter name or 1-based index.
    #[arg(long)]
    pub inverter: String,
    /// Number of seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_start: u64,
    /// Storage weight λ; defaults to the config or synthesized certificate.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 50e-6)]
    pub dt: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t_end: f64,
    /// Use smooth DC reference steps instead of DC tones.
    #[arg(long)]
    pub adversarial: bool,
    #[arg(long, default_value_t = DEFAULT_TOL_FACTOR)]
    pub tol_factor: f64,
    #[command(flatten)]
    pub gains: GainOverrides,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Reproducibility record written by every run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: String,
    /// `None` when the config file could not be read.
    pub config_sha256: Option<String>,
    pub tool_version: String,
    /// Resolved network and inverter parameters in SI units; `None` when
    /// the config did not load.
    pub resolved: Option<NetworkConfig>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub exit_code: u8,
    pub outputs: Vec<String>,
    pub details: serde_json::Value,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct Loaded {
    sha256: String,
    cfg: NetworkConfig,
}

fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = load_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded { sha256: hex::encode(Sha256::digest(&bytes)), cfg })
}

/// Joins a relative output name onto the output directory, refusing paths
/// that would escape it.
fn output_path(out_dir: &Path, name: &Path) -> Result<PathBuf, CliError> {
    let escapes = name
        .components()
        .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir));
    if escapes || name.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("output `{}` must be a relative path inside --out-dir", name.display())));
    }
    Ok(out_dir.join(name))
}

fn select_inverter(cfg: &NetworkConfig, key: &str) -> Result<usize, CliError> {
    if let Some(k) = cfg.inverter_by_name(key) {
        return Ok(k);
    }
    match key.parse::<usize>() {
        Ok(n) if n >= 1 && n <= cfg.inverters.len() => Ok(n - 1),
        _ => Err(CliError::Usage(format!(
            "unknown inverter `{key}` (have {})",
            cfg.inverters.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn apply_gain_overrides(site: &mut InverterSite, o: &GainOverrides) -> Result<(), CliError> {
    if let Some(eta) = o.eta {
        site.gains.eta = eta;
    }
    if let Some(gamma) = o.gamma {
        site.gains.gamma = gamma;
    }
    site.gains.validate().map_err(|e| CliError::Usage(format!("{}: {e}", site.name)))
}

/// Parses `load:<bus>:<multiplier>@<t>` or `idc:<inverter>:<delta>@<t>`.
pub fn parse_event(spec: &str, cfg: &NetworkConfig) -> Result<SimEvent, CliError> {
    let bad = || CliError::Usage(format!("bad event `{spec}`; expected load:<bus>:<mult>@<t> or idc:<inverter>:<delta>@<t>"));
    let (body, time) = spec.split_once('@').ok_or_else(bad)?;
    let time: f64 = time.trim().parse().map_err(|_| bad())?;
    let parts: Vec<&str> = body.split(':').collect();
    if parts.len() != 3 || !time.is_finite() {
        return Err(bad());
    }
    let value: f64 = parts[2].trim().parse().map_err(|_| bad())?;
    let action = match parts[0] {
        "load" => EventAction::LoadScale { bus: parts[1].parse().map_err(|_| bad())?, multiplier: value },
        "idc" => EventAction::InputStep { inverter: select_inverter(cfg, parts[1])?, delta: value },
        _ => return Err(bad()),
    };
    Ok(SimEvent { time, action })
}

struct Outcome {
    exit_code: u8,
    outputs: Vec<PathBuf>,
    details: serde_json::Value,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let arg_strings = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, arg_strings) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and writes its manifest.
pub fn execute(cli: &Cli, args: Vec<String>) -> Result<u8, CliError> {
    let started = unix_now();
    let (name, config) = match &cli.command {
        Command::Certify(a) => ("certify", &a.config),
        Command::Sweep(a) => ("sweep", &a.config),
        Command::Simulate(a) => ("simulate", &a.config),
        Command::Verify(a) => ("verify", &a.config),
    };
    fs::create_dir_all(&cli.out_dir)?;
    let (outcome, error, sha256, resolved) = match load(config) {
        Ok(loaded) => {
            let result = match &cli.command {
                Command::Certify(a) => cmd_certify(&loaded.cfg, a, &cli.out_dir),
                Command::Sweep(a) => cmd_sweep(&loaded.cfg, a, &cli.out_dir),
                Command::Simulate(a) => cmd_simulate(&loaded.cfg, a, &cli.out_dir),
                Command::Verify(a) => cmd_verify(&loaded.cfg, a, &cli.out_dir),
            };
            let (outcome, error) = match result {
                Ok(o) => (o, None),
                Err((partial, e)) => (partial, Some(e)),
            };
            (outcome, error, Some(loaded.sha256), Some(loaded.cfg))
        }
        Err(e) => {
            let (outcome, e) = fail(e);
            (outcome, Some(e), None, None)
        }
    };
    let exit_code = error.as_ref().map_or(outcome.exit_code, |e| e.exit_code());
    let manifest_path = cli.out_dir.join(format!("{name}_manifest.json"));
    let mut outputs: Vec<String> = outcome.outputs.iter().map(|p| p.display().to_string()).collect();
    outputs.push(manifest_path.display().to_string());
    let manifest = RunManifest {
        command: name.to_string(),
        args,
        config_path: config.display().to_string(),
        config_sha256: sha256,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        resolved,
        started_unix_s: started,
        finished_unix_s: unix_now(),
        exit_code,
        outputs,
        details: outcome.details,
    };
    write_json(&manifest_path, &manifest)?;
    match error {
        Some(e) => Err(e),
        None => Ok(exit_code),
    }
}

type CmdResult = Result<Outcome, (Outcome, CliError)>;

fn fail(e: CliError) -> (Outcome, CliError) {
    (Outcome { exit_code: e.exit_code(), outputs: Vec::new(), details: serde_json::Value::Null }, e)
}

#[derive(Debug, Serialize)]
struct CertifyEntry {
    name: String,
    source: &'static str,
    feasible: bool,
    certificate: Option<Certificate>,
    report: Option<CertificateReport>,
    reason: Option<String>,
    /// Largest η keeping the synthesis feasible at this γ.
    eta_frontier: f64,
}

fn cmd_certify(cfg: &NetworkConfig, a: &CertifyArgs, out_dir: &Path) -> CmdResult {
    let indices: Vec<usize> = match &a.inverter {
        Some(key) => vec![select_inverter(cfg, key).map_err(fail)?],
        None => (0..cfg.inverters.len()).collect(),
    };
    let mut entries = Vec::new();
    for k in indices {
        let mut site = cfg.inverters[k].clone();
        apply_gain_overrides(&mut site, &a.gains).map_err(fail)?;
        let mut envelope = site.envelope;
        if let Some(v) = a.v_dc_bar_max {
            envelope.v_dc_bar_max = v;
        }
        if let Some(i) = a.i_ac_max {
            envelope.i_ac_norm_max = i;
        }
        let envelope = OperatingEnvelope::new(envelope.v_dc_bar_max, envelope.i_ac_norm_max)
            .map_err(|e| fail(CliError::Usage(e.to_string())))?;
        let (p, g) = (&site.params, &site.gains);
        let (base, source, reason) = match (site.certificate.filter(|_| !a.synthesize), synthesize_certificate(p, g, &envelope)) {
            (Some(c), _) => (Some(Certificate { envelope, ..c }), "config", None),
            (None, Ok(c)) => (Some(c), "synthesized", None),
            (None, Err(e)) => (None, "synthesized", Some(e.to_string())),
        };
        let overridden = a.lambda.is_some() || a.eps1.is_some() || a.eps2.is_some();
        let cert = match base {
            Some(c) => Some(Certificate {
                lambda: a.lambda.unwrap_or(c.lambda),
                eps1: a.eps1.unwrap_or(c.eps1),
                eps2: a.eps2.unwrap_or(c.eps2),
                ..c
            }),
            None => match (a.lambda, a.eps1, a.eps2) {
                (Some(lambda), Some(eps1), Some(eps2)) => Some(Certificate { lambda, eps1, eps2, envelope }),
                _ => None,
            },
        };
        let source = if overridden { "override" } else { source };
        let cert = match cert {
            Some(c) => {
                c.validate().map_err(|e| fail(CliError::Usage(format!("{}: {e}", site.name))))?;
                Some(c)
            }
            None => None,
        };
        let report = cert.as_ref().map(|c| check_conditions(p, g, c));
        let feasible = report.is_some_and(|r| r.feasible);
        let reason = match (&report, reason) {
            (Some(r), _) if !r.feasible => Some(match r.first_violation() {
                Some(i) => format!("violated: {}", MARGIN_NAMES[i]),
                None => "AC shunt conductance must be > 0".to_string(),
            }),
            (Some(_), _) => None,
            (None, reason) => reason,
        };
        let frontier = gain_frontier(p, &envelope, g.gamma);
        match &report {
            Some(r) => println!(
                "{}: {} (min eig Q = {:.6e}, margins [{:.4e}, {:.4e}, {:.4e}])",
                site.name,
                if feasible { "feasible" } else { "INFEASIBLE" },
                r.q_min_eig,
                r.margins[0],
                r.margins[1],
                r.margins[2]
            ),
            None => println!("{}: INFEASIBLE ({})", site.name, reason.as_deref().unwrap_or("no certificate")),
        }
        entries.push(CertifyEntry {
            name: site.name.clone(),
            source,
            feasible,
            certificate: cert,
            report,
            reason,
            eta_frontier: frontier,
        });
    }
    let all = entries.iter().all(|e| e.feasible);
    let path = out_dir.join("certify_report.json");
    write_json(&path, &entries).map_err(fail)?;
    Ok(Outcome {
        exit_code: if all { EXIT_OK } else { EXIT_VIOLATED },
        outputs: vec![path],
        details: serde_json::json!({ "all_feasible": all }),
    })
}

fn cmd_sweep(cfg: &NetworkConfig, a: &SweepArgs, out_dir: &Path) -> CmdResult {
    let k = select_inverter(cfg, &a.inverter).map_err(fail)?;
    let mut site = cfg.inverters[k].clone();
    apply_gain_overrides(&mut site, &a.gains).map_err(fail)?;
    if !(a.load_pu >= 0.0 && a.load_pu.is_finite()) {
        return Err(fail(CliError::Usage(format!("--load-pu {} must be >= 0", a.load_pu))));
    }
    let grid = match &a.omegas {
        Some(w) => w.clone(),
        None => {
            if !(a.omega_min > 0.0 && a.omega_max >= a.omega_min) || a.points == 0 {
                return Err(fail(CliError::Usage("need 0 < omega-min <= omega-max and points >= 1".into())));
            }
            log_grid(a.omega_min, a.omega_max, a.points)
        }
    };
    let (p, g) = (&site.params, &site.gains);
    let guess = equilibrium_with_resistive_load(p, g, a.load_pu * site.rating.current());
    let eq = equilibrium(p, g, &guess.input_eq).map_err(|e| fail(CliError::Numerical(e.to_string())))?;
    let ss = linearize(p, g, &eq);
    let result = sweep(&ss, &grid).map_err(|e| fail(CliError::Usage(e.to_string())))?;
    for gap in &result.gaps {
        eprintln!("warning: sweep gap at ω = {:e} rad/s: {}", gap.omega, gap.reason);
    }
    let name = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("sweep_{}.csv", site.name)));
    let path = output_path(out_dir, &name).map_err(fail)?;
    result.write_csv(fs::File::create(&path).map_err(|e| fail(e.into()))?).map_err(|e| fail(e.into()))?;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let (ifp_min, ofp_min) = (min(&result.ifp), min(&result.ofp));
    let positive = result.gaps.is_empty() && ifp_min > 0.0 && ofp_min > 0.0;
    println!("{}: {} points, min IFP = {ifp_min:.6e}, min OFP = {ofp_min:.6e}, gaps = {}", site.name, grid.len(), result.gaps.len());
    Ok(Outcome {
        exit_code: if positive { EXIT_OK } else { EXIT_VIOLATED },
        outputs: vec![path],
        details: serde_json::json!({
            "inverter": site.name,
            "points": grid.len(),
            "min_ifp": ifp_min,
            "min_ofp": ofp_min,
            "gaps": result.gaps,
            "equilibrium": { "v_dc": eq.v_dc_eq, "theta": eq.theta_eq, "i_dc_ref": eq.input_eq.i_dc_ref },
        }),
    })
}

fn cmd_simulate(cfg: &NetworkConfig, a: &SimulateArgs, out_dir: &Path) -> CmdResult {
    if !(a.dt > 0.0 && a.dt.is_finite() && a.t_end > 0.0 && a.t_end.is_finite()) || a.sample_every == 0 {
        return Err(fail(CliError::Usage("need dt > 0, t-end > 0 and sample-every >= 1".into())));
    }
    let path = output_path(out_dir, &a.out).map_err(fail)?;
    let events: Vec<SimEvent> = if a.event.is_empty() {
        cfg.events.clone()
    } else {
        let mut ev = a.event.iter().map(|s| parse_event(s, cfg)).collect::<Result<Vec<_>, _>>().map_err(fail)?;
        ev.sort_by(|x, y| x.time.total_cmp(&y.time));
        ev
    };
    for e in &events {
        let steps = e.time / a.dt;
        if e.time < 0.0 || (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(fail(CliError::Usage(format!("event at t = {} s is not a multiple of dt = {} s", e.time, a.dt))));
        }
        if e.time > a.t_end {
            eprintln!("warning: event at t = {} s is beyond t-end = {} s and is skipped", e.time, a.t_end);
        }
    }
    let opts = ScenarioOptions { dt: a.dt, t_end: a.t_end, sample_every: a.sample_every };
    let result = match run_scenario(cfg, &events, opts) {
        Ok(r) => r,
        Err(NetworkError::Sim(SimError::Diverged { time, last_time, last_state })) => {
            let dump = out_dir.join("divergence.json");
            let detail = serde_json::json!({ "time": time, "last_time": last_time, "last_state": last_state });
            write_json(&dump, &detail).map_err(fail)?;
            let e = CliError::Numerical(format!("state diverged at t = {time} s; last finite state in {}", dump.display()));
            return Err((Outcome { exit_code: EXIT_NUMERICAL, outputs: vec![dump], details: detail }, e));
        }
        Err(e @ (NetworkError::Sim(SimError::OffGridEvent { .. })
        | NetworkError::Sim(SimError::BadEvent(_))
        | NetworkError::Sim(SimError::UnsortedEvents(_))
        | NetworkError::StepTooLarge { .. }
        | NetworkError::NoJunctionCapacitance { .. })) => return Err(fail(CliError::Usage(e.to_string()))),
        Err(e) => return Err(fail(CliError::Numerical(e.to_string()))),
    };
    result
        .trajectory
        .write_csv(fs::File::create(&path).map_err(|e| fail(e.into()))?)
        .map_err(|e| fail(e.into()))?;
    let s = result.settling;
    println!(
        "settling from t = {} s: peak {:.4e}, final {:.4e}, ratio {:.3e} ({})",
        s.from_time,
        s.peak,
        s.final_value,
        s.ratio,
        if s.settled { "settled" } else { "NOT settled" }
    );
    for bp in &result.pre_event_load_power {
        println!("pre-event load at bus {}: {:.4} MW, {:.4} MVAr", bp.bus, bp.p_w / 1e6, bp.q_var / 1e6);
    }
    Ok(Outcome {
        exit_code: if s.settled { EXIT_OK } else { EXIT_VIOLATED },
        outputs: vec![path],
        details: serde_json::json!({
            "dt": a.dt,
            "t_end": a.t_end,
            "sample_every": a.sample_every,
            "events": events,
            "skipped_events": result.skipped_events,
            "settling": s,
            "pre_event_load_power": result.pre_event_load_power,
            "steady_state": { "i_dc_ref": result.steady.i_dc_ref, "residual": result.steady.residual },
        }),
    })
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    inverter: String,
    lambda: f64,
    spec: InputSpec,
    passed: usize,
    failed: usize,
    worst_slack_over_tol: f64,
    seeds: Vec<SeedResult>,
}

fn cmd_verify(cfg: &NetworkConfig, a: &VerifyArgs, out_dir: &Path) -> CmdResult {
    if a.seeds == 0 {
        return Err(fail(CliError::Usage("--seeds must be >= 1".into())));
    }
    let k = select_inverter(cfg, &a.inverter).map_err(fail)?;
    let mut site = cfg.inverters[k].clone();
    apply_gain_overrides(&mut site, &a.gains).map_err(fail)?;
    let (p, g) = (&site.params, &site.gains);
    let lambda = match (a.lambda, site.certificate) {
        (Some(l), _) => l,
        (None, Some(c)) => c.lambda,
        (None, None) => synthesize_certificate(p, g, &site.envelope)
            .map(|c| c.lambda)
            .map_err(|e| fail(CliError::Usage(format!("{}: no certificate to take λ from ({e}); pass --lambda", site.name))))?,
    };
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(fail(CliError::Usage(format!("lambda {lambda} must be > 0"))));
    }
    let spec = InputSpec {
        dt: a.dt,
        t_end: a.t_end,
        adversarial: a.adversarial,
        ..InputSpec::for_rating(site.rating.power, site.rating.voltage_ll, g.v_dc_star)
    };
    let seeds: Vec<u64> = (a.seed_start..a.seed_start + a.seeds).collect();
    let results = run_seeds(p, g, &spec, lambda, &seeds, a.tol_factor).map_err(|e| match e {
        crate::verify::VerifyError::Sim(s) => fail(CliError::Numerical(s.to_string())),
        other => fail(CliError::Usage(other.to_string())),
    })?;
    let failed = results.iter().filter(|r| !r.report.passed).count();
    let worst = results.iter().map(|r| -r.report.slack / r.report.tol).fold(f64::NEG_INFINITY, f64::max);
    for r in results.iter().filter(|r| !r.report.passed) {
        println!("seed {}: VIOLATED, slack {:.6e} J, tol {:.6e} J", r.seed, r.report.slack, r.report.tol);
    }
    if results.iter().any(|r| r.report.outside_region) {
        eprintln!("warning: some runs left |δθ| < 2π; their storage is outside the validated region");
    }
    println!("{}: {} of {} seeds satisfy the dissipation inequality (λ = {lambda:e})", site.name, seeds.len() - failed, seeds.len());
    let summary = VerifySummary {
        inverter: site.name.clone(),
        lambda,
        spec,
        passed: seeds.len() - failed,
        failed,
        worst_slack_over_tol: worst,
        seeds: results,
    };
    let path = out_dir.join(format!("verify_{}.json", site.name));
    write_json(&path, &summary).map_err(fail)?;
    Ok(Outcome {
        exit_code: if failed == 0 { EXIT_OK } else { EXIT_VIOLATED },
        outputs: vec![path],
        details: serde_json::json!({ "passed": summary.passed, "failed": failed, "lambda": lambda }),
    })
}
