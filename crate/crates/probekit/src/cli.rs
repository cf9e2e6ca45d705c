//! The `probekit` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Ipv4Addr, TcpListener};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probekit_core::budget::{
    simulate_cpu_budget, simulate_memory_budget, BudgetConfig, BudgetResource, KsmModel, ProfileCount, ResourceProfile,
};
use probekit_core::controller::{run_campaign, CampaignPolicy, NodeRegistry, SimExecutor};
use probekit_core::probe::{ProbeMethod, ProbeSpec};
use probekit_core::sim::{SimNetwork, SimTopology};
use probekit_core::trace::{run_trace_with, TraceError};
use probekit_core::rate::RateLimiter;
use probekit_core::time::VirtualClock;

use crate::agent::{serve, ServeConfig};
use crate::formats::{load_node_config, load_profiles, load_schedule, load_topology};
use crate::remote::{run_campaign_live, RemoteExecutor};
use crate::report::{hop_rows, write_rows, CpuRow, MemoryRow, ReportBundle, Records, Summary};

#[derive(Debug, Parser)]
#[command(name = "probekit", version, about = "Traceroute probing, measurement agents, campaigns and budget simulation")]
struct Cli {
    /// Seed for every simulated random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write a report bundle (or, for `report`, the rendering) here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run one trace and print a line per hop.
    Trace(TraceArgs),
    /// Measurement agent.
    Agent {
        #[command(subcommand)]
        command: AgentCmd,
    },
    /// Deployment campaigns.
    Controller {
        #[command(subcommand)]
        command: ControllerCmd,
    },
    /// Fixed-budget instance packing.
    Sim {
        #[command(subcommand)]
        command: SimCmd,
    },
    /// Verify a report bundle and render it.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum AgentCmd {
    /// Accept commands on a TCP endpoint until told to quit.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum ControllerCmd {
    /// Dispatch every scheduled event and report the outcomes.
    Run(RunArgs),
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    Memory(SimArgs),
    Cpu(SimArgs),
}

#[derive(Debug, Clone, PartialEq)]
enum Backend {
    Sim(PathBuf),
    Raw,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("sim", path)) if !path.is_empty() => Ok(Backend::Sim(path.into())),
            None if s == "raw" => Ok(Backend::Raw),
            _ => Err("expected `sim:FILE` or `raw`".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ExecutorArg {
    Sim(PathBuf),
    Remote,
}

impl FromStr for ExecutorArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            Some(("sim", path)) if !path.is_empty() => Ok(ExecutorArg::Sim(path.into())),
            None if s == "remote" => Ok(ExecutorArg::Remote),
            _ => Err("expected `sim:FILE` or `remote`".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Method {
    IcmpEcho,
    Udp,
}

impl From<Method> for ProbeMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::IcmpEcho => ProbeMethod::IcmpEcho,
            Method::Udp => ProbeMethod::Udp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Policy {
    Wait,
    Discard,
}

#[derive(Debug, Args)]
struct SpecArgs {
    #[arg(long, value_enum, default_value_t = Method::IcmpEcho)]
    method: Method,
    #[arg(long, default_value_t = probekit_core::probe::DEFAULT_MAX_TTL)]
    max_ttl: u8,
    #[arg(long, default_value_t = probekit_core::probe::DEFAULT_ATTEMPTS)]
    attempts: u8,
    #[arg(long, default_value_t = probekit_core::probe::DEFAULT_PPS)]
    pps: f64,
    #[arg(long, default_value_t = probekit_core::probe::DEFAULT_GAP_LIMIT)]
    gap_limit: u8,
    #[arg(long, default_value_t = probekit_core::probe::DEFAULT_FLOW_ID)]
    flow_id: u16,
}

impl SpecArgs {
    fn spec(&self, target: Ipv4Addr) -> ProbeSpec {
        ProbeSpec {
            target,
            method: self.method.into(),
            max_ttl: self.max_ttl,
            attempts_per_hop: self.attempts,
            pps: self.pps,
            gap_limit: self.gap_limit,
            flow_id: self.flow_id,
        }
    }
}

#[derive(Debug, Args)]
struct TraceArgs {
    /// `sim:TOPOLOGY.toml` or `raw`.
    #[arg(long)]
    backend: Backend,
    /// Defaults to the topology's destination.
    target: Option<Ipv4Addr>,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    listen: String,
    /// Agent-wide probe rate cap.
    #[arg(long)]
    pps: f64,
    /// `sim:TOPOLOGY.toml` or `raw`.
    #[arg(long)]
    backend: Backend,
    #[arg(long, default_value_t = 1)]
    max_parallel: usize,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long, value_enum)]
    policy: Policy,
    /// `sim:PROFILES.toml` or `remote`.
    #[arg(long)]
    executor: ExecutorArg,
    /// Scale each simulated phase by a seeded factor in [1-J, 1+J].
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Simulated executor: also trace this topology on every execution.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Remote executor: shell command run as the deploy step.
    #[arg(long)]
    deploy_command: Option<String>,
    /// Also write the records as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    profiles: PathBuf,
    /// Only these profiles (repeatable); all by default.
    #[arg(long = "profile")]
    only: Vec<String>,
    #[arg(long, default_value_t = 1024.0)]
    budget_mb: f64,
    #[arg(long, default_value_t = 0.25)]
    cap: f64,
    #[arg(long, default_value_t = 16.0)]
    cores: f64,
    #[arg(long, default_value_t = probekit_core::budget::DEFAULT_LAUNCH_GAP_S)]
    gap_s: f64,
    #[arg(long, default_value_t = probekit_core::budget::DEFAULT_RUN_DURATION_S)]
    run_s: f64,
    /// Peak-memory window after launch; defaults to each profile's boot_exec_time_s.
    #[arg(long)]
    boot_window_s: Option<f64>,
    /// Enable page merging, e.g. `scan=1000` or `scan=1000,page_kb=4`.
    #[arg(long)]
    ksm: Option<KsmArg>,
    /// Write the sampled timelines as CSV here.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
struct KsmArg(KsmModel);

impl FromStr for KsmArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut model = KsmModel::new(f64::NAN);
        for part in s.split(',') {
            let (k, v) = part.split_once('=').ok_or("expected key=value")?;
            let v: f64 = v.parse().map_err(|_| format!("bad number `{v}`"))?;
            match k {
                "scan" => model.scan_rate_pages_per_s = v,
                "page_kb" => model.page_size_kb = v,
                _ => return Err(format!("unknown key `{k}`")),
            }
        }
        if model.scan_rate_pages_per_s.is_nan() {
            return Err("scan=RATE is required".into());
        }
        Ok(KsmArg(model))
    }
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Bundle written by `--out` of another subcommand.
    bundle: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Runtime(m)) = &f;
            eprintln!("probekit: {m}");
            f.code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Cmd::Trace(a) => cmd_trace(cli, a),
        Cmd::Agent {
            command: AgentCmd::Serve(a),
        } => cmd_serve(a),
        Cmd::Controller {
            command: ControllerCmd::Run(a),
        } => cmd_campaign(cli, a),
        Cmd::Sim { command } => match command {
            SimCmd::Memory(a) => cmd_sim(cli, a, BudgetResource::Memory),
            SimCmd::Cpu(a) => cmd_sim(cli, a, BudgetResource::Cpu),
        },
        Cmd::Report(a) => cmd_report(cli, a),
    }
}

fn sim_topology(cli: &Cli, backend: &Backend) -> Result<SimTopology, Failure> {
    match backend {
        Backend::Raw => Err(runtime("raw backend unavailable in this build; use sim:FILE")),
        Backend::Sim(path) => {
            let mut topo = load_topology(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if let Some(seed) = cli.seed {
                topo.seed = seed;
            }
            Ok(topo)
        }
    }
}

fn write_bundle(cli: &Cli, bundle: &ReportBundle) -> Result<(), Failure> {
    if let Some(path) = &cli.out {
        let mut w = create(path)?;
        bundle.write(&mut w).and_then(|_| w.flush()).map_err(runtime)?;
    }
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(runtime)?;
    writeln!(out).map_err(runtime)
}

fn cmd_trace(cli: &Cli, a: &TraceArgs) -> Result<(), Failure> {
    let topo = sim_topology(cli, &a.backend)?;
    let spec = a.spec.spec(a.target.unwrap_or(topo.destination));
    spec.validate().map_err(usage)?;
    let pacer = RateLimiter::new(spec.pps).map_err(usage)?;
    let mut net = SimNetwork::new(topo);
    let outcome = run_trace_with(spec, &mut net, VirtualClock::new(), pacer, |_| {});
    let (result, failure) = match outcome {
        Ok(r) => (r, None),
        Err(TraceError::Aborted(a)) => (a.partial, Some(runtime(a.error))),
        Err(e @ TraceError::InvalidSpec(_)) => return Err(usage(e)),
    };

    let mut out = io::stdout().lock();
    match cli.format {
        Format::Json => {
            for hop in &result.hops {
                serde_json::to_writer(&mut out, hop).map_err(runtime)?;
                writeln!(out).map_err(runtime)?;
            }
        }
        Format::Csv => write_rows(&mut out, hop_rows(0, &result)).map_err(runtime)?,
    }
    drop(out);
    write_bundle(cli, &ReportBundle::from_records(Records::Trace(vec![result])))?;
    failure.map_or(Ok(()), Err)
}

fn cmd_serve(a: &ServeArgs) -> Result<(), Failure> {
    let net = match &a.backend {
        Backend::Raw => return Err(runtime("raw backend unavailable in this build; use sim:FILE")),
        Backend::Sim(path) => {
            SimNetwork::new(load_topology(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?)
        }
    };
    let cfg = ServeConfig {
        max_parallel: a.max_parallel,
        pps: a.pps,
    };
    if a.max_parallel == 0 || !(a.pps.is_finite() && a.pps > 0.0) {
        return Err(usage("--pps must be positive and --max-parallel at least 1"));
    }
    let listener = TcpListener::bind(&a.listen).map_err(|e| runtime(format!("bind {}: {e}", a.listen)))?;
    let addr = listener.local_addr().map_err(runtime)?;
    println!("listening on {addr}");
    io::stdout().flush().map_err(runtime)?;
    serve(listener, cfg, net).map_err(runtime)
}

fn cmd_campaign(cli: &Cli, a: &RunArgs) -> Result<(), Failure> {
    let nodes = load_node_config(&read_text(&a.nodes)?).map_err(|e| usage(format!("{}: {e}", a.nodes.display())))?;
    let schedule =
        load_schedule(&read_text(&a.schedule)?).map_err(|e| usage(format!("{}: {e}", a.schedule.display())))?;
    let policy = match a.policy {
        Policy::Wait => CampaignPolicy::Wait,
        Policy::Discard => CampaignPolicy::Discard,
    };
    let records = match &a.executor {
        ExecutorArg::Sim(path) => {
            let profiles = load_profiles(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let known: HashSet<&str> = profiles.iter().map(|p| p.name.as_str()).collect();
            if let Some(ev) = schedule.events().iter().find(|e| !known.contains(e.profile.as_str())) {
                return Err(usage(format!("schedule uses unknown profile `{}`", ev.profile)));
            }
            if !(0.0..=1.0).contains(&a.jitter) {
                return Err(usage("--jitter must be within [0, 1]"));
            }
            let mut exec = SimExecutor::new(profiles).with_jitter(a.jitter, cli.seed.unwrap_or(0));
            if let Some(t) = &a.topology {
                let topo = sim_topology(cli, &Backend::Sim(t.clone()))?;
                let spec = ProbeSpec::new(topo.destination);
                exec = exec.with_trace(SimNetwork::new(topo), spec);
            }
            let mut registry = NodeRegistry::new(nodes).map_err(usage)?;
            run_campaign(&schedule, &mut registry, policy, exec)
        }
        ExecutorArg::Remote => {
            let exec = RemoteExecutor {
                deploy_command: a.deploy_command.clone(),
                ..RemoteExecutor::new()
            };
            run_campaign_live(&schedule, nodes, policy, exec).map_err(usage)?
        }
    };

    let mut bundle = ReportBundle::from_records(Records::Campaign(records));
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        bundle.write_csv(&mut w).map_err(runtime)?;
        w.flush().map_err(runtime)?;
        bundle.csv.push(path.display().to_string());
    }
    write_bundle(cli, &bundle)?;
    match cli.format {
        Format::Json => print_json(&bundle.summary),
        Format::Csv => bundle.write_csv(io::stdout().lock()).map_err(runtime),
    }
}

fn cmd_sim(cli: &Cli, a: &SimArgs, resource: BudgetResource) -> Result<(), Failure> {
    let all = load_profiles(&read_text(&a.profiles)?).map_err(|e| usage(format!("{}: {e}", a.profiles.display())))?;
    let profiles: Vec<&ResourceProfile> = if a.only.is_empty() {
        all.iter().collect()
    } else {
        a.only
            .iter()
            .map(|name| {
                all.iter()
                    .find(|p| &p.name == name)
                    .ok_or_else(|| usage(format!("unknown profile `{name}`")))
            })
            .collect::<Result<_, _>>()?
    };
    if profiles.is_empty() {
        return Err(usage("no profiles to simulate"));
    }
    let budget = BudgetConfig {
        launch_gap_s: a.gap_s,
        run_duration_s: a.run_s,
        boot_window_s: a.boot_window_s,
        ksm: a.ksm.map(|k| k.0),
        ..BudgetConfig::new(a.budget_mb, a.cap, a.cores)
    };
    budget.validate().map_err(usage)?;

    let mut counts = Vec::new();
    let mut timeline: Option<csv::Writer<BufWriter<File>>> = match &a.timeline {
        Some(p) => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(p)?);
            let headers: &[&str] = match resource {
                BudgetResource::Memory => <MemoryRow as crate::report::CsvHeaders>::HEADERS,
                BudgetResource::Cpu => <CpuRow as crate::report::CsvHeaders>::HEADERS,
            };
            w.write_record(headers).map_err(runtime)?;
            Some(w)
        }
        None => None,
    };
    for p in profiles {
        let n = match resource {
            BudgetResource::Memory => {
                let run = simulate_memory_budget(p, &budget).map_err(usage)?;
                if let Some(w) = &mut timeline {
                    for s in &run.timeline {
                        w.serialize(MemoryRow::new(&p.name, s)).map_err(runtime)?;
                    }
                }
                run.instance_count
            }
            BudgetResource::Cpu => {
                let run = simulate_cpu_budget(p, &budget).map_err(usage)?;
                if let Some(w) = &mut timeline {
                    for s in &run.timeline {
                        w.serialize(CpuRow::new(&p.name, s)).map_err(runtime)?;
                    }
                }
                run.instance_count
            }
        };
        counts.push(ProfileCount {
            profile: p.name.clone(),
            instance_count: n,
        });
    }
    if let Some(mut w) = timeline {
        w.flush().map_err(runtime)?;
    }

    let mut bundle = ReportBundle::from_records(Records::Sim(resource, counts));
    if let Some(p) = &a.timeline {
        bundle.csv.push(p.display().to_string());
    }
    write_bundle(cli, &bundle)?;
    match cli.format {
        Format::Json => print_json(&bundle.summary),
        Format::Csv => bundle.write_csv(io::stdout().lock()).map_err(runtime),
    }
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<(), Failure> {
    let file = File::open(&a.bundle).map_err(|e| usage(format!("{}: {e}", a.bundle.display())))?;
    let bundle = ReportBundle::read(BufReader::new(file)).map_err(|e| match e {
        crate::report::ReportError::SummaryMismatch => runtime(format!("{}: {e}", a.bundle.display())),
        other => usage(format!("{}: {other}", a.bundle.display())),
    })?;
    let mut sink: Box<dyn Write> = match &cli.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    match cli.format {
        Format::Json => {
            let summary = match &bundle.summary {
                Summary::Trace(s) => serde_json::to_value(s),
                Summary::Campaign(s) => serde_json::to_value(s),
                Summary::Sim(s) => serde_json::to_value(s),
            }
            .map_err(runtime)?;
            serde_json::to_writer_pretty(&mut sink, &summary).map_err(runtime)?;
            writeln!(sink).map_err(runtime)?;
        }
        Format::Csv => bundle.write_csv(&mut sink).map_err(runtime)?,
    }
    sink.flush().map_err(runtime)
}
