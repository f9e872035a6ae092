//! Command-line entry point. Exit codes: 0 success or robust, 1 non-robust
//! verdict, 2 usage or configuration error.

use std::fmt::Write as _;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::PolicyKind;
use crate::config::{named_matrix, ExperimentConfig};
use crate::dynamics::{integrate_di, DiAdversary};
use crate::engine::{estimate_rate_constant, run_seeds, write_csv, SimConfig, Trajectory};
use crate::error::{Error, Result};
use crate::model::{GroundTruth, ObservationMatrix};
use crate::net::{client_loop, serve, ClientOptions, ServeOptions};
use crate::robustness::{check_robust_d1, check_robust_exact, check_robust_sampled, RobustnessVerdict, EXACT_LIMIT};
use crate::scalar::dist;

/// Overrides `output.directory` from the config file.
pub const OUTPUT_DIR_ENV: &str = "SIGNFED_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_ROBUST: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "signfed", version, about = "Asynchronous adversary-tolerant federated mean estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decide the robustness condition for a matrix and adversary bound.
    Check(CheckArgs),
    /// Run a configured experiment for every seed.
    Simulate(SimulateArgs),
    /// Run an experiment for several adversary counts.
    Sweep(SweepArgs),
    /// Serve the live asynchronous mode.
    Serve(ServeArgs),
    /// Act as one node of the live asynchronous mode.
    Client(ClientArgs),
    /// Integrate the limiting differential inclusion.
    Di(DiArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Built-in matrix name or a file with one comma or space separated row per line.
    #[arg(long)]
    pub matrix: String,
    #[arg(long)]
    pub m: usize,
    /// Use the randomised checker (required when p > 12).
    #[arg(long)]
    pub sampled: bool,
    #[arg(long, default_value_t = 64)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory; overrides the config file and the environment.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Adversary counts, e.g. `0,2,3`.
    #[arg(long, default_value = "")]
    pub adversaries: String,
    /// Sweep the configured seeds only, as a single group.
    #[arg(long)]
    pub seeds_only: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub bind: String,
    /// Write the applied-update log (JSON lines) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ClientArgs {
    #[arg(long)]
    pub node: usize,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub connect: String,
    /// Artificial delay before each answer, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    pub delay_ms: f64,
}

#[derive(Debug, Args)]
pub struct DiArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Adversary selection: `worst`, `zero` or a constant in [-1, 1].
    #[arg(long, default_value = "worst")]
    pub adversary: String,
    /// Write the path as CSV here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(cli.command, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn dispatch(command: Command, out: &mut impl Write) -> Result<i32> {
    match command {
        Command::Check(args) => cmd_check(&args, out),
        Command::Simulate(args) => cmd_simulate(&args, out),
        Command::Sweep(args) => cmd_sweep(&args, out),
        Command::Serve(args) => cmd_serve(&args, out),
        Command::Client(args) => cmd_client(&args, out),
        Command::Di(args) => cmd_di(&args, out),
    }
}

/// A built-in name, or a text file of rows.
pub fn load_matrix(source: &str) -> Result<ObservationMatrix<f64>> {
    if let Ok(a) = named_matrix(source) {
        return Ok(a);
    }
    let path = Path::new(source);
    if !path.exists() {
        return named_matrix(source);
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| {
                    Error::InvalidConfig(format!("{}:{}: {s:?}: {e}", path.display(), lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    ObservationMatrix::new(rows)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn report_verdict(v: &RobustnessVerdict<f64>, method: &str, out: &mut impl Write) -> Result<i32> {
    if v.robust {
        writeln!(out, "robust, margin {:.9} ({method})", v.margin)?;
        return Ok(EXIT_OK);
    }
    let mut line = format!("not robust, margin {:.9} ({method})", v.margin);
    if let Some(w) = &v.witness {
        let _ = write!(line, "; witness x = {}, K = {:?}", fmt_vec(&w.x), w.k);
    }
    writeln!(out, "{line}")?;
    Ok(EXIT_NOT_ROBUST)
}

pub fn cmd_check(args: &CheckArgs, out: &mut impl Write) -> Result<i32> {
    let a = load_matrix(&args.matrix)?;
    if args.m >= a.p() {
        return Err(Error::AdversaryCount { m: args.m, p: a.p() });
    }
    if a.d() == 1 {
        let weights: Vec<f64> = a.rows().iter().map(|r| r[0]).collect();
        return report_verdict(&check_robust_d1(&weights, args.m), "closed form", out);
    }
    if args.sampled {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let v = check_robust_sampled(&a, args.m, args.trials, &mut rng);
        return report_verdict(&v, "sampled", out);
    }
    if a.p() > EXACT_LIMIT {
        return Err(Error::TooLarge {
            p: a.p(),
            limit: EXACT_LIMIT,
        });
    }
    report_verdict(&check_robust_exact(&a, args.m)?, "exact", out)
}

fn output_dir(config: &ExperimentConfig, flag: &OutputArgs) -> PathBuf {
    if let Some(dir) = &flag.output {
        return dir.clone();
    }
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    config.output.directory.clone()
}

/// Write `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn trajectory_csv(traj: &Trajectory<f64>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(traj, &mut buf)?;
    Ok(buf)
}

/// Per-run figures reported by `simulate` and `sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub final_err: f64,
    pub median_first_decade: Option<f64>,
    pub median_last_decade: Option<f64>,
    pub rate_constant: Option<f64>,
    pub max_norm: f64,
}

/// Rate constants are taken over `n >= min(1000, N / 2)`.
pub fn summarize(traj: &Trajectory<f64>, mu: &[f64]) -> RunSummary {
    let n = traj.iterations;
    let n_min = 1000.min(n / 2).max(1);
    RunSummary {
        seed: traj.seed,
        final_err: dist(&traj.final_state.x, mu),
        median_first_decade: traj.median_err_between(1, 10),
        median_last_decade: traj.median_err_between(n / 10, n),
        rate_constant: estimate_rate_constant(traj, n_min).ok(),
        max_norm: traj.probe.max_full,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

const SUMMARY_HEADER: &str = "group,adversaries,seed,final_err,median_first_decade,median_last_decade,rate_constant,max_norm";

fn summary_line(group: &str, k: usize, s: &RunSummary) -> String {
    format!(
        "{group},{k},{},{:.12e},{},{},{},{:.12e}",
        s.seed,
        s.final_err,
        opt(s.median_first_decade),
        opt(s.median_last_decade),
        opt(s.rate_constant),
        s.max_norm
    )
}

struct Group {
    name: String,
    adversaries: usize,
    config: SimConfig<f64>,
}

/// Run every group over every seed, writing `<group>/seed_<s>.csv`,
/// `manifest.csv` and `summary.csv` under `dir`.
fn run_groups(groups: &[Group], seeds: &[u64], dir: &Path, out: &mut impl Write) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("group,adversaries,seed,path\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for g in groups {
        let runs = run_seeds(&g.config, seeds)?;
        for traj in &runs {
            let rel = format!("{}/seed_{}.csv", g.name, traj.seed);
            write_atomic(&dir.join(&rel), &trajectory_csv(traj)?)?;
            let _ = writeln!(manifest, "{},{},{},{rel}", g.name, g.adversaries, traj.seed);
            let s = summarize(traj, g.config.spec.mu());
            let line = summary_line(&g.name, g.adversaries, &s);
            let _ = writeln!(summary, "{line}");
            writeln!(out, "{line}")?;
        }
    }
    write_atomic(&dir.join("manifest.csv"), manifest.as_bytes())?;
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let sim = cfg.sim_config()?;
    let dir = output_dir(&cfg, &args.out);
    writeln!(out, "{SUMMARY_HEADER}")?;
    let group = Group {
        name: "run".into(),
        adversaries: sim.spec.adversaries().len(),
        config: sim,
    };
    run_groups(&[group], &cfg.run.seeds, &dir, out)?;
    Ok(EXIT_OK)
}

/// Comma separated adversary counts; blanks are ignored.
pub fn parse_counts(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::InvalidConfig(format!("adversary count {s:?}: {e}")))
        })
        .collect()
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let dir = output_dir(&cfg, &args.out);
    let groups = if args.seeds_only {
        let sim = cfg.sim_config()?;
        vec![Group {
            name: "seeds".into(),
            adversaries: sim.spec.adversaries().len(),
            config: sim,
        }]
    } else {
        let counts = parse_counts(&args.adversaries)?;
        if counts.is_empty() {
            return Err(Error::InvalidConfig("nothing to sweep".into()));
        }
        counts
            .into_iter()
            .map(|k| {
                Ok(Group {
                    name: format!("adversaries_{k}"),
                    adversaries: k,
                    config: cfg.with_adversary_count(k).sim_config()?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    writeln!(out, "{SUMMARY_HEADER}")?;
    run_groups(&groups, &cfg.run.seeds, &dir, out)?;
    Ok(EXIT_OK)
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("cannot resolve {addr:?}")))
}

fn serve_options(cfg: &ExperimentConfig) -> ServeOptions {
    ServeOptions {
        timeout: Duration::from_millis(cfg.net.timeout_ms),
        max_in_flight: cfg.net.max_in_flight,
        window: cfg.net.window_ms.map(Duration::from_millis),
        ..ServeOptions::default()
    }
}

pub fn cmd_serve(args: &ServeArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let sim = cfg.sim_config()?;
    let listener = TcpListener::bind(resolve(&args.bind)?)?;
    writeln!(out, "listening on {}", listener.local_addr()?)?;
    out.flush()?;
    let outcome = serve(&sim, listener, &serve_options(&cfg))?;
    let dir = output_dir(&cfg, &args.out);
    let path = dir.join(format!("serve_seed_{}.csv", sim.seed));
    write_atomic(&path, &trajectory_csv(&outcome.trajectory)?)?;
    if let Some(log_path) = &args.log {
        let mut text = String::new();
        for u in &outcome.log {
            text.push_str(&serde_json::to_string(u).expect("updates serialize"));
            text.push('\n');
        }
        write_atomic(log_path, text.as_bytes())?;
    }
    writeln!(
        out,
        "applied {} updates in {:.3}s; final err {:.6e}; trajectory {}",
        outcome.stats.applied,
        outcome.elapsed.as_secs_f64(),
        outcome.trajectory.final_err(sim.spec.mu()),
        path.display()
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_client(args: &ClientArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let sim = cfg.sim_config()?;
    sim.matrix.check_node(args.node)?;
    let policy = if sim.spec.adversaries().contains(args.node) {
        cfg.problem.policy.clone()
    } else {
        PolicyKind::Honest
    };
    if !(args.delay_ms.is_finite() && args.delay_ms >= 0.0) {
        return Err(Error::InvalidConfig("delay must be non-negative".into()));
    }
    let opts = ClientOptions {
        delay: Duration::from_secs_f64(args.delay_ms / 1e3),
        ..ClientOptions::default()
    };
    let stats = client_loop(args.node, policy, &sim, resolve(&args.connect)?, &opts)?;
    writeln!(out, "node {} answered {} queries", args.node, stats.answered)?;
    Ok(EXIT_OK)
}

fn parse_selection(s: &str) -> Result<DiAdversary<f64>> {
    match s {
        "worst" => Ok(DiAdversary::Worst),
        "zero" => Ok(DiAdversary::Zero),
        other => match other.parse::<f64>() {
            Ok(v) if (-1.0..=1.0).contains(&v) => Ok(DiAdversary::Constant(v)),
            _ => Err(Error::InvalidConfig(format!(
                "adversary selection {other:?}: expected worst, zero or a number in [-1, 1]"
            ))),
        },
    }
}

pub fn cmd_di(args: &DiArgs, out: &mut impl Write) -> Result<i32> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let sim = cfg.sim_config()?;
    let selection = parse_selection(&args.adversary)?;
    let truth = GroundTruth::new(&sim.spec, &sim.matrix)?;
    let path = integrate_di(
        &sim.x0,
        &sim.matrix,
        &truth,
        |_, x| selection.lambdas(&sim.matrix, &truth, x),
        args.dt,
        args.steps,
    )?;
    let mut text = String::from("t");
    for k in 0..sim.matrix.d() {
        let _ = write!(text, ",x{k}");
    }
    text.push_str(",err\n");
    for (k, x) in path.iter().enumerate() {
        let _ = write!(text, "{:.15e}", k as f64 * args.dt);
        for v in x {
            let _ = write!(text, ",{v:.15e}");
        }
        let _ = writeln!(text, ",{:.15e}", dist(x, sim.spec.mu()));
    }
    match &args.csv {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(EXIT_OK)
}
