//! Command-line front end: runs scenario files or the bundled experiments,
//! sweeps one parameter across values, and exposes the identifier codec and
//! the duty-cycle power model for quick inspection.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wiploc_core::codec::{self, FecCodebook, OrthogonalCodebook, Payload};
use wiploc_core::energy::{duty_cycle_power_mw, optimal_sample_period_ms, DutyParams, PowerProfile};
use wiploc_core::protocol::Mode;
use wiploc_core::simcore::{
    analyze, run, sweep_point, write_energy_csv, write_report, write_trace, MetricsReport,
    Scenario, SimOutput, SweepParam, SweepPoint,
};

/// Experiments compiled into the binary, addressable by bare name.
const BUNDLED: &[(&str, &str)] = &[
    ("dz", include_str!("../../../experiments/dz.toml")),
    ("rl-1anchor", include_str!("../../../experiments/rl-1anchor.toml")),
    ("rl-2anchor", include_str!("../../../experiments/rl-2anchor.toml")),
    ("rl-3anchor", include_str!("../../../experiments/rl-3anchor.toml")),
    ("sc-sweep", include_str!("../../../experiments/sc-sweep.toml")),
    ("cl-room", include_str!("../../../experiments/cl-room.toml")),
    ("cl-corridor", include_str!("../../../experiments/cl-corridor.toml")),
];

#[derive(Parser)]
#[command(
    name = "wiploc",
    version,
    about = "Discrete-event simulator for collision-tolerant, wirelessly powered indoor localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write trace.csv, report.txt, energy.csv.
    Run(RunArgs),
    /// Re-run a scenario across values of one parameter.
    Sweep(SweepArgs),
    /// Encode or decode identifier payloads.
    Codec {
        #[command(subcommand)]
        op: CodecOp,
    },
    /// Print the duty-cycle power model: closed-form optimum and a table.
    Energy(EnergyArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file path, or a bundled name (dz, rl-1anchor, rl-2anchor,
    /// rl-3anchor, sc-sweep, cl-room, cl-corridor).
    scenario: String,
    /// Override the scenario's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the protocol level: wiploc (room) or wiploc++ (cell).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Send bare identifier bytes instead of coded chips.
    #[arg(long)]
    no_codec: bool,
    /// Override the number of rounds at each position.
    #[arg(long)]
    rounds: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Output directory for trace.csv, report.txt, energy.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Parameter to vary: anchor-count, sample-period (alias t-c),
    /// capture-threshold, or tx-power.
    #[arg(long)]
    param: String,
    /// Comma-separated values, one run per value.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Also write per-value files under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run sweep points on worker threads instead of sequentially.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum CodecOp {
    /// Print the chip payload of one identifier as lowercase hex.
    Encode {
        id: usize,
        /// Codebook order exponent (2^k codes of 2^k chips).
        #[arg(long, default_value_t = 4)]
        k: u32,
    },
    /// List every identifier found in a hex payload, as "id distance".
    Decode {
        hex: String,
        #[arg(long, default_value_t = 4)]
        k: u32,
    },
}

#[derive(Args)]
struct EnergyArgs {
    /// Localization round period t_m (ms).
    #[arg(long = "t-m", default_value_t = 1000.0)]
    t_m: f64,
    /// Power profile the schedule runs on.
    #[arg(long, value_enum, default_value_t = ProfileArg::Wpa)]
    profile: ProfileArg,
    /// Sampling-period table step (ms).
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// Sampling-period table upper bound (ms).
    #[arg(long, default_value_t = 100.0)]
    max: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Wpa,
    Mobile,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "wiploc" => Ok(Mode::RoomLevel),
        "wiploc++" => Ok(Mode::CellLevel),
        other => Err(format!("expected wiploc or wiploc++, got {other:?}")),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Codec { op } => cmd_codec(op),
        Command::Energy(args) => cmd_energy(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Scenario loading
// ---------------------------------------------------------------------------

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario> {
    let mut sc = resolve_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    if let Some(mode) = args.mode {
        sc.mode = mode;
    }
    if args.no_codec {
        sc.protocol.no_codec = true;
    }
    if let Some(rounds) = args.rounds {
        sc.rounds_per_position = rounds;
    }
    sc.validate()?;
    Ok(sc)
}

fn resolve_scenario(arg: &str) -> Result<Scenario> {
    let direct = Path::new(arg);
    if direct.is_file() {
        return Ok(Scenario::from_path(direct)?);
    }
    let with_ext = direct.with_extension("toml");
    if with_ext.is_file() {
        return Ok(Scenario::from_path(&with_ext)?);
    }
    let stem = direct.file_stem().and_then(|s| s.to_str()).unwrap_or(arg);
    if let Some((_, text)) = BUNDLED.iter().find(|(name, _)| *name == stem) {
        return Ok(Scenario::from_toml_str(text)?);
    }
    let names: Vec<&str> = BUNDLED.iter().map(|(name, _)| *name).collect();
    bail!("{arg:?} is neither a scenario file nor a bundled name (bundled: {})", names.join(", "))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<()> {
    let sc = load_scenario(&args.scenario)?;
    let output = run(&sc)?;
    let report = analyze(&sc, &output)?;
    write_output_files(&args.out, &sc, &output, &report)?;
    let mut stdout = io::stdout().lock();
    write_report(&mut stdout, &report)?;
    writeln!(stdout, "\nwrote {}", args.out.join("{trace,report,energy}").display())?;
    Ok(())
}

fn write_output_files(
    dir: &Path,
    sc: &Scenario,
    output: &SimOutput,
    report: &MetricsReport,
) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let trace_path = dir.join("trace.csv");
    let mut trace = BufWriter::new(File::create(&trace_path)?);
    write_trace(&mut trace, output)?;
    trace.flush()?;

    let mut energy = BufWriter::new(File::create(dir.join("energy.csv"))?);
    write_energy_csv(&mut energy, sc, output)?;
    energy.flush()?;

    let mut rep = BufWriter::new(File::create(dir.join("report.txt"))?);
    write_report(&mut rep, report)?;
    rep.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = load_scenario(&args.scenario)?;
    let param: SweepParam = args.param.parse()?;
    let points = if args.parallel {
        run_points_parallel(&base, param, &args.values)?
    } else {
        args.values
            .iter()
            .enumerate()
            .map(|(i, &v)| sweep_point(&base, param, v, i))
            .collect::<wiploc_core::Result<Vec<_>>>()?
    };

    let mut stdout = io::stdout().lock();
    writeln!(stdout, "sweep of {} over {}", base.name, args.param)?;
    for p in &points {
        let acc = p
            .report
            .mean_accuracy
            .map_or_else(|| "-".to_string(), |a| format!("{:.1}%", a * 100.0));
        let duty = p
            .duty_power_mw
            .map_or_else(String::new, |mw| format!("  duty_power {mw:.6} mW"));
        writeln!(
            stdout,
            "value {:8}  prr {:5.1}%  accuracy {acc}{duty}",
            p.value,
            p.report.mean_prr * 100.0
        )?;
    }

    if let Some(out) = &args.out {
        fs::create_dir_all(out)
            .with_context(|| format!("cannot create output directory {}", out.display()))?;
        let mut summary = BufWriter::new(File::create(out.join("sweep.csv"))?);
        writeln!(summary, "value,mean_prr,mean_accuracy,pooled_prr,duty_power_mw")?;
        for p in &points {
            let acc = p.report.mean_accuracy.map_or_else(String::new, |a| format!("{a:.6}"));
            let duty = p.duty_power_mw.map_or_else(String::new, |mw| format!("{mw:.6}"));
            writeln!(
                summary,
                "{},{:.6},{},{:.6},{}",
                p.value, p.report.mean_prr, acc, p.report.pooled_prr, duty
            )?;
        }
        summary.flush()?;
        for p in &points {
            let sub = out.join(format!("{}-{}", args.param, p.value));
            let sc = wiploc_core::simcore::apply_sweep(&base, param, p.value)?;
            write_output_files(&sub, &sc, &p.output, &p.report)?;
        }
        writeln!(stdout, "wrote {}", out.display())?;
    }
    Ok(())
}

/// Fans the points across one thread each; results keep input order.
fn run_points_parallel(
    base: &Scenario,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<SweepPoint>> {
    thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| scope.spawn(move || sweep_point(base, param, v, i)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow!("sweep worker panicked"))?.map_err(Into::into))
            .collect()
    })
}

// ---------------------------------------------------------------------------
// codec
// ---------------------------------------------------------------------------

fn cmd_codec(op: CodecOp) -> Result<()> {
    match op {
        CodecOp::Encode { id, k } => {
            let orth = OrthogonalCodebook::new(k)?;
            let fec = FecCodebook::new(k)?;
            let payload = codec::encode(id, &orth, &fec)?;
            println!("{}", payload.to_hex()?);
        }
        CodecOp::Decode { hex, k } => {
            let orth = OrthogonalCodebook::new(k)?;
            let fec = FecCodebook::new(k)?;
            let payload = Payload::from_hex(&hex)?;
            for hit in codec::decode(&payload, &orth, &fec)? {
                println!("{} {}", hit.id, hit.distance);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// energy
// ---------------------------------------------------------------------------

fn cmd_energy(args: EnergyArgs) -> Result<()> {
    let profile = match args.profile {
        ProfileArg::Wpa => PowerProfile::wirelessly_powered(),
        ProfileArg::Mobile => PowerProfile::mobile(),
    };
    let base = DutyParams { measure_interval_ms: args.t_m, ..DutyParams::default() };
    base.validate()?;
    if !args.step.is_finite() || args.step <= 0.0 || args.max < args.step {
        bail!("table bounds need step > 0 and max >= step");
    }

    println!(
        "profile: tx {} mW, rx {} mW, adc {} mW, wfi {} mW",
        profile.tx_mw, profile.rx_mw, profile.adc_mw, profile.wfi_mw
    );
    let optimum = optimal_sample_period_ms(&profile, &base)?;
    println!("closed-form optimal sample period: {optimum:.4} ms");
    println!("{:>10}  {:>10}", "t_c_ms", "avg_mw");

    let steps = (args.max / args.step).round() as usize;
    let mut best: Option<(f64, f64)> = None;
    let mut rows = Vec::with_capacity(steps);
    for i in 1..=steps {
        let t_c = i as f64 * args.step;
        let duty = DutyParams { sample_period_ms: t_c, ..base };
        match duty_cycle_power_mw(&profile, &duty) {
            Ok(mw) => {
                if best.is_none_or(|(_, b)| mw < b) {
                    best = Some((t_c, mw));
                }
                rows.push((t_c, Some(mw)));
            }
            Err(_) => rows.push((t_c, None)),
        }
    }
    for (t_c, mw) in rows {
        match mw {
            Some(mw) => {
                let mark = if best.is_some_and(|(bt, _)| bt == t_c) { "  <- minimum" } else { "" };
                println!("{t_c:>10.1}  {mw:>10.6}{mark}");
            }
            None => println!("{t_c:>10.1}  infeasible"),
        }
    }
    Ok(())
}
