use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use edgemoe::scenario::{compare, RunOutput, RunReport, Scenario};

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_BAND: u8 = 4;

#[derive(Parser)]
#[command(name = "edgemoe", version, about = "Plan and simulate MoE inference across edge servers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Overrides the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into an existing output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Validate (and plan, for `run`) without writing outputs.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Scenarios run concurrently by `run`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the workload's routing trace.
    Trace { scenario: PathBuf },
    /// Plan placement and precisions.
    Plan { scenario: PathBuf },
    /// Plan (unless fixed) and simulate every sweep point.
    Run {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
    /// Ratios between two reports: latency B/A and throughput A/B.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Accepted latency ratio range, `LO,HI`.
        #[arg(long, value_parser = parse_band)]
        latency_band: Option<(f64, f64)>,
        /// Accepted throughput ratio range, `LO,HI`.
        #[arg(long, value_parser = parse_band)]
        throughput_band: Option<(f64, f64)>,
    },
    /// Summarize a report.
    Report { report: PathBuf },
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo <= hi) {
        return Err(format!("empty band [{lo}, {hi}]"));
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<edgemoe::Error>() {
        Some(edgemoe::Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        Some(edgemoe::Error::Io(_)) => 1,
        Some(_) => EXIT_VALIDATION,
        None if e.downcast_ref::<Refusal>().is_some() => EXIT_VALIDATION,
        None => 1,
    }
}

#[derive(Debug)]
struct Refusal(String);

impl std::fmt::Display for Refusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refusal {}

fn dispatch(cli: &Cli) -> anyhow::Result<u8> {
    let g = &cli.global;
    match &cli.command {
        Command::Trace { scenario } => cmd_trace(g, scenario),
        Command::Plan { scenario } => cmd_plan(g, scenario),
        Command::Run { scenarios } => cmd_run(g, scenarios),
        Command::Compare {
            a,
            b,
            latency_band,
            throughput_band,
        } => cmd_compare(g, a, b, *latency_band, *throughput_band),
        Command::Report { report } => cmd_report(report),
    }
}

fn load(path: &Path) -> anyhow::Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn out_dir(g: &Global, s: &Scenario) -> PathBuf {
    g.out
        .clone()
        .or_else(|| s.output_dir.as_ref().map(|d| s.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Creates `dir`, refusing a non-empty existing one unless forced.
fn prepare(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        return Err(Refusal(format!("{} exists; pass --force to overwrite", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &impl serde::Serialize) -> anyhow::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn cmd_trace(g: &Global, path: &Path) -> anyhow::Result<u8> {
    let s = load(path)?;
    let seed = g.seed.unwrap_or(s.seed);
    let trace = s.trace(seed)?;
    println!("requests: {}", trace.requests.len());
    println!("tokens: {}", trace.token_count());
    if g.dry_run {
        return Ok(0);
    }
    let dir = out_dir(g, &s);
    prepare(&dir, g.force)?;
    write(&dir.join("trace.json"), &trace.to_json()?)?;
    Ok(0)
}

fn cmd_plan(g: &Global, path: &Path) -> anyhow::Result<u8> {
    let s = load(path)?;
    let seed = g.seed.unwrap_or(s.seed);
    let profile = s.profile(seed)?;
    let d = s.deploy(&profile)?;
    println!("expected_latency_s: {:.6}", d.objective.expected_latency_s);
    println!("expected_cross_transitions: {:.6}", d.objective.expected_cross_transitions);
    println!("objective: {:.6}", d.objective.value());
    for (server, experts) in &d.placement.assignment {
        println!("server {server}: {} experts", experts.len());
    }
    if g.dry_run {
        return Ok(0);
    }
    let dir = out_dir(g, &s);
    prepare(&dir, g.force)?;
    write(&dir.join("placement.json"), &pretty(&d.placement.to_json_value())?)?;
    write(&dir.join("quant.json"), &pretty(&d.quant)?)?;
    Ok(0)
}

fn cmd_run(g: &Global, paths: &[PathBuf]) -> anyhow::Result<u8> {
    let scenarios = paths.iter().map(|p| load(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let dirs: Vec<PathBuf> = if scenarios.len() == 1 {
        vec![out_dir(g, &scenarios[0])]
    } else {
        let root = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        paths
            .iter()
            .map(|p| root.join(p.file_stem().unwrap_or_default()))
            .collect()
    };
    if g.dry_run {
        for s in &scenarios {
            let seed = g.seed.unwrap_or(s.seed);
            let d = s.deploy(&s.profile(seed)?)?;
            println!("{}: objective {:.6}", s.name, d.objective.value());
        }
        return Ok(0);
    }
    for d in &dirs {
        prepare(d, g.force)?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(g.jobs.max(1)).build()?;
    let results: Vec<anyhow::Result<RunOutput>> = pool.install(|| {
        use rayon::prelude::*;
        scenarios
            .par_iter()
            .map(|s| Ok(s.run(g.seed.unwrap_or(s.seed))?))
            .collect()
    });
    for ((s, dir), out) in scenarios.iter().zip(&dirs).zip(results) {
        let out = out?;
        write_run(dir, &out)?;
        for b in &out.report.buckets {
            println!(
                "{} in={} out={}: avg_latency_s={:.6} throughput={:.3} tok/s",
                s.name, b.input, b.output, b.report.avg_latency_s, b.report.avg_generation_throughput
            );
        }
    }
    Ok(0)
}

fn write_run(dir: &Path, out: &RunOutput) -> anyhow::Result<()> {
    write(&dir.join("report.json"), &out.report.to_json()?)?;
    write(&dir.join("placement.json"), &pretty(&out.deployment.placement.to_json_value())?)?;
    write(&dir.join("quant.json"), &pretty(&out.deployment.quant)?)?;

    let mut lat = csv::Writer::from_path(dir.join("latency.csv"))?;
    lat.write_record([
        "bucket_input",
        "bucket_output",
        "request",
        "input_len",
        "output_len",
        "arrival_s",
        "prefill_end_s",
        "completion_s",
        "latency_s",
    ])?;
    let mut thr = csv::Writer::from_path(dir.join("throughput.csv"))?;
    thr.write_record(["bucket_input", "bucket_output", "second", "tokens"])?;
    for b in &out.report.buckets {
        for r in &b.report.request_records {
            lat.write_record([
                b.input.to_string(),
                b.output.to_string(),
                r.id.to_string(),
                r.input_len.to_string(),
                r.output_len.to_string(),
                r.arrival_s.to_string(),
                r.prefill_end_s.to_string(),
                r.completion_s.to_string(),
                r.latency().to_string(),
            ])?;
        }
        for (sec, n) in b.report.throughput_series() {
            thr.write_record([b.input.to_string(), b.output.to_string(), sec.to_string(), n.to_string()])?;
        }
    }
    lat.flush()?;
    thr.flush()?;

    if out.events.iter().any(|e| !e.is_empty()) {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("events.jsonl"))?);
        for (i, events) in out.events.iter().enumerate() {
            for e in events {
                let mut v = serde_json::to_value(e)?;
                v["bucket"] = i.into();
                serde_json::to_writer(&mut f, &v)?;
                f.write_all(b"\n")?;
            }
        }
        f.flush()?;
    }
    Ok(())
}

fn read_report(path: &Path) -> anyhow::Result<RunReport> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunReport::from_json(&bytes).with_context(|| format!("parsing {}", path.display()))?)
}

fn in_band(v: f64, band: Option<(f64, f64)>) -> bool {
    band.is_none_or(|(lo, hi)| v >= lo && v <= hi)
}

fn cmd_compare(
    g: &Global,
    a: &Path,
    b: &Path,
    latency_band: Option<(f64, f64)>,
    throughput_band: Option<(f64, f64)>,
) -> anyhow::Result<u8> {
    let rows = compare(&read_report(a)?, &read_report(b)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["input", "output", "latency_ratio", "throughput_ratio", "in_band"])?;
    let mut ok = true;
    for r in &rows {
        let pass = in_band(r.latency_ratio, latency_band) && in_band(r.throughput_ratio, throughput_band);
        ok &= pass;
        w.write_record([
            r.input.to_string(),
            r.output.to_string(),
            format!("{:.6}", r.latency_ratio),
            format!("{:.6}", r.throughput_ratio),
            pass.to_string(),
        ])?;
    }
    let table = w.into_inner()?;
    std::io::stdout().write_all(&table)?;
    if let Some(dir) = &g.out {
        if !g.dry_run {
            prepare(dir, g.force)?;
            write(&dir.join("compare.csv"), &table)?;
        }
    }
    if rows.is_empty() {
        bail!("no sweep points to compare");
    }
    Ok(if ok { 0 } else { EXIT_BAND })
}

fn cmd_report(path: &Path) -> anyhow::Result<u8> {
    let r = read_report(path)?;
    println!("scenario: {}  seed: {}", r.scenario, r.seed);
    println!(
        "expected latency {:.6} s, expected crossings {:.6}",
        r.objective.expected_latency_s, r.objective.expected_cross_transitions
    );
    println!("input,output,avg_latency_s,p95_latency_s,throughput,hit_rate,crossings,quality");
    for b in &r.buckets {
        let s = &b.report;
        println!(
            "{},{},{:.6},{:.6},{:.3},{:.4},{:.4},{:.6}",
            b.input,
            b.output,
            s.avg_latency_s,
            s.p95_latency_s,
            s.avg_generation_throughput,
            s.paging.hit_rate,
            s.traffic.crossing_frequency,
            s.quality_score
        );
    }
    Ok(0)
}
