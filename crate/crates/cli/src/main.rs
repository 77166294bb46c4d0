use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qkd_relay::audit::{audit_dir, AuditError};
use qkd_relay::simharness::{
    bundled, bundled_names, bundled_text, load_scenario, node_config_text, run_node, run_sim, summary_text, to_toml,
    write_bundle, NodeConfig, NodeRunError, Scenario, SimError, SimOptions,
};
use qkd_relay::telemetry::{export_csv, export_lines, parse_lines, TelemetryStore};

const EXIT_INPUT: u8 = 1;
const EXIT_FAILED: u8 = 2;

#[derive(Parser)]
#[command(name = "qkdrelay", version, about = "Trusted-node QKD key relay: simulate, run nodes, export and audit")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run a scenario in the discrete-event simulator and write a report bundle.
    Sim {
        /// Bundled scenario name or path to a scenario file.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Virtual seconds to simulate.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        compress: Option<f64>,
    },
    /// Run one node of a real-mode network over TCP.
    Node {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        compress: Option<f64>,
        /// Shared start instant, ms since the Unix epoch. All nodes of one
        /// run must agree on it.
        #[arg(long)]
        epoch_ms: Option<u64>,
    },
    /// Write a scenario file and one node config per node.
    ScenarioInit {
        /// Bundled scenario to start from.
        #[arg(default_value = "epb_table1")]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        compress: Option<f64>,
        /// List the bundled scenarios and exit.
        #[arg(long)]
        list: bool,
    },
    /// Convert the telemetry of a run into per-series CSV or merged line protocol.
    Export {
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Only export this measurement (repeatable).
        #[arg(long)]
        measurement: Vec<String>,
    },
    /// Check a run's key ledgers, wire logs and network-key tables.
    Audit { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Lp,
}

struct Failure {
    code: u8,
    msg: String,
}

fn input(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, msg: msg.into() }
}

fn resolve_scenario(arg: &str) -> Result<(Scenario, String), Failure> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(text) = bundled_text(arg) {
            return Ok((bundled(arg).expect("bundled"), text.to_string()));
        }
        if path.extension().is_some() || arg.contains('/') {
            return Err(input(format!("scenario file {} not found", path.display())));
        }
        return Err(input(format!(
            "{arg}: no such scenario file or bundled scenario (bundled: {})",
            bundled_names().collect::<Vec<_>>().join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let sc = load_scenario(&text).map_err(|errs| input(format!("{}:\n  {}", path.display(), errs.join("\n  "))))?;
    Ok((sc, text))
}

fn apply_overrides(sc: &mut Scenario, seed: Option<u64>, duration: Option<f64>, compress: Option<f64>) -> Result<(), Failure> {
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = duration {
        if !(d >= 0.0 && d.is_finite()) {
            return Err(input("--duration must be a non-negative number of seconds"));
        }
        sc.duration_s = d;
    }
    if let Some(c) = compress {
        if !(c >= 1.0 && c.is_finite()) {
            return Err(input("--compress must be at least 1"));
        }
        sc.time_compression = c;
    }
    let text = to_toml(sc);
    load_scenario(&text).map_err(|errs| input(format!("scenario after overrides:\n  {}", errs.join("\n  "))))?;
    Ok(())
}

fn cmd_sim(
    scenario: &str,
    seed: Option<u64>,
    duration: Option<f64>,
    out: Option<PathBuf>,
    compress: Option<f64>,
) -> Result<(), Failure> {
    let (mut sc, mut text) = resolve_scenario(scenario)?;
    if seed.is_some() || duration.is_some() || compress.is_some() {
        apply_overrides(&mut sc, seed, duration, compress)?;
        text = to_toml(&sc);
    }
    let out = out.unwrap_or_else(|| PathBuf::from(format!("sim-{}-{}", sc.name, sc.seed)));
    let report = run_sim(&sc, &SimOptions::default()).map_err(|e: SimError| Failure { code: EXIT_FAILED, msg: e.to_string() })?;
    write_bundle(&out, &report, &text).map_err(|e| input(format!("writing {}: {e}", out.display())))?;
    print!("{}", summary_text(&report.summary));
    println!("bundle written to {}", out.display());
    Ok(())
}

fn cmd_node(
    config: &Path,
    seed: Option<u64>,
    duration: Option<f64>,
    compress: Option<f64>,
    epoch_ms: Option<u64>,
) -> Result<(), Failure> {
    let mut cfg = NodeConfig::load(config).map_err(|e| input(format!("{}: {e}", config.display())))?;
    apply_overrides(&mut cfg.scenario, seed, duration, compress)?;
    if let Some(e) = epoch_ms {
        cfg.epoch_ms = e;
    }
    let name = cfg.name();
    let s = run_node(cfg).map_err(|e| match e {
        NodeRunError::Config(_) => input(e.to_string()),
        other => Failure { code: EXIT_FAILED, msg: other.to_string() },
    })?;
    let hs: Vec<String> = s.triggers.iter().map(|t| t.h.to_string()).collect();
    println!(
        "{name}: virtual end {:.1} s, {} network keys, transfers started {} h = [{}], resumed {}",
        s.virtual_end_s,
        s.nk_records,
        s.triggers.len(),
        hs.join(", "),
        s.resumed
    );
    println!("{name}: network key set digest {}", s.nk_set_digest);
    Ok(())
}

fn cmd_scenario_init(
    name: &str,
    out: &Path,
    seed: Option<u64>,
    duration: Option<f64>,
    compress: Option<f64>,
) -> Result<(), Failure> {
    let (mut sc, _) = resolve_scenario(name)?;
    apply_overrides(&mut sc, seed, duration, compress)?;
    fs::create_dir_all(out).map_err(|e| input(format!("{}: {e}", out.display())))?;
    let write = |file: &str, text: &str| fs::write(out.join(file), text).map_err(|e| input(format!("{}: {e}", out.join(file).display())));
    write("scenario.toml", &to_toml(&sc))?;
    for k in 0..sc.nodes.len() as u32 {
        let node = &sc.nodes[k as usize].name;
        write(&format!("node-{node}.toml"), &node_config_text(&sc, k, out, "scenario.toml"))?;
        println!("{}", out.join(format!("node-{node}.toml")).display());
    }
    println!("{}", out.join("scenario.toml").display());
    Ok(())
}

fn lp_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    let single = dir.join("telemetry.lp");
    if single.is_file() {
        files.push(single);
    }
    if let Ok(rd) = fs::read_dir(dir.join("telemetry")) {
        files.extend(rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "lp")));
    }
    files.sort();
    if files.is_empty() {
        return Err(input(format!("{}: no telemetry.lp or telemetry/*.lp found", dir.display())));
    }
    Ok(files)
}

fn cmd_export(run_dir: &Path, out: &Path, format: Format, measurements: &[String]) -> Result<(), Failure> {
    let mut store = TelemetryStore::new();
    for path in lp_files(run_dir)? {
        let text = fs::read_to_string(&path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let points = parse_lines(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
        let mut part = TelemetryStore::new();
        for p in points {
            if measurements.is_empty() || measurements.contains(&p.measurement) {
                part.record(p).map_err(|e| input(format!("{}: {e}", path.display())))?;
            }
        }
        store.absorb(part);
    }
    fs::create_dir_all(out).map_err(|e| input(format!("{}: {e}", out.display())))?;
    let mut n = 0;
    match format {
        Format::Lp => {
            fs::write(out.join("telemetry.lp"), export_lines(store.points())).map_err(|e| input(e.to_string()))?;
            n = 1;
        }
        Format::Csv => {
            for key in store.keys() {
                let points: Vec<_> = store.series(key).collect();
                let path = out.join(format!("{}.csv", key.label()));
                fs::write(&path, export_csv(points.iter().copied())).map_err(|e| input(format!("{}: {e}", path.display())))?;
                n += 1;
            }
        }
    }
    println!("{} points, {n} files written to {}", store.len(), out.display());
    Ok(())
}

fn cmd_audit(dir: &Path) -> Result<(), Failure> {
    let rep = audit_dir(dir).map_err(|e| match e {
        AuditError::Missing(_) | AuditError::Io { .. } | AuditError::Malformed { .. } => input(e.to_string()),
    })?;
    println!("nodes {}", rep.nodes.join(" "));
    println!("usage events {}  frames scanned {}", rep.usage_events, rep.frames_scanned);
    println!("network keys lost to detected faults {}", rep.shortfall);
    for r in &rep.reuse {
        println!("REUSE {r}");
    }
    for c in &rep.cleartext {
        println!("CLEARTEXT {c}");
    }
    for m in &rep.nk_mismatch {
        println!("MISMATCH {m}");
    }
    if rep.is_clean() {
        println!("audit clean");
        Ok(())
    } else {
        Err(Failure { code: EXIT_FAILED, msg: "audit failed".to_string() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.verb {
        Verb::Sim { scenario, seed, duration, out, compress } => cmd_sim(&scenario, seed, duration, out, compress),
        Verb::Node { config, seed, duration, compress, epoch_ms } => cmd_node(&config, seed, duration, compress, epoch_ms),
        Verb::ScenarioInit { name, out, seed, duration, compress, list } => {
            if list {
                for n in bundled_names() {
                    println!("{n}");
                }
                Ok(())
            } else {
                cmd_scenario_init(&name, &out, seed, duration, compress)
            }
        }
        Verb::Export { run_dir, out, format, measurement } => cmd_export(&run_dir, &out, format, &measurement),
        Verb::Audit { dir } => cmd_audit(&dir),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qkdrelay: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
