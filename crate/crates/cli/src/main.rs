use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chainscale::config::{apply_overrides, documented_keys, ScenarioConfig};
use chainscale::election::analysis::{
    autorecovery_failure, chainscale_autorecovery_bound, committee_failure_exact_hypergeometric,
    committee_failure_weighted,
};
use chainscale::metrics::{write_report, write_summary, MetricsReport};
use chainscale::orchestrator::run_experiment;
use chainscale::recovery::{monte_carlo_recovery, McElection, McParams, WeightedPopulation};
use chainscale::types::default_liveness_threshold;
use chainscale::{Error, Exec};

#[derive(Parser, Debug)]
#[command(name = "chainscale", version, about = "Sidechain-sharding storage market simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set committee.size=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run sidechain work on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write observations and report files.
    #[command(after_long_help = config_help())]
    Run(Common),
    /// Run a comparison system on the same scenario.
    #[command(after_long_help = config_help())]
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        system: BaselineSystem,
        #[arg(long)]
        shards: Option<u32>,
    },
    /// Committee failure probabilities.
    Analyze(AnalyzeArgs),
    /// Monte Carlo time-to-recover.
    RecoverMc(McArgs),
    /// Run a grid of scenarios, one report per point.
    #[command(after_long_help = config_help())]
    Sweep {
        #[command(flatten)]
        common: Common,
        /// KEY=V1,V2,... (repeatable; points are the cartesian product).
        /// `subchains=n` sets the topology to nP1M1D.
        #[arg(long = "param", value_name = "KEY=V1,V2")]
        params: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum BaselineSystem {
    Single,
    Sharded,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Population size.
    #[arg(long, default_value_t = 8000)]
    n: u64,
    /// Misbehaving miners in the population.
    #[arg(long, default_value_t = 2000)]
    m: u64,
    #[arg(long, default_value_t = 500)]
    s_c: u64,
    #[arg(long, default_value_t = 2)]
    kappa: u64,
    /// Absent votes that stall a committee; 0 uses the size-based default.
    #[arg(long, default_value_t = 0)]
    theta_l: u64,
    /// Sidechains covered by the union bound.
    #[arg(long, default_value_t = 3)]
    chains: u64,
    /// Per-class seats for the weighted calculator, comma separated.
    #[arg(long, value_delimiter = ',')]
    quotas: Vec<u64>,
    /// Per-class misbehaving rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ElectionArg {
    Random,
    Weighted,
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long, default_value_t = 10_000)]
    n: u64,
    #[arg(long, default_value_t = 0.25)]
    p_lazy: f64,
    #[arg(long, default_value_t = 0.25)]
    p_malicious: f64,
    #[arg(long, default_value_t = 100)]
    s_c: u64,
    #[arg(long, default_value_t = 2)]
    kappa: u64,
    /// Absent votes that stall a committee; 0 uses the size-based default.
    #[arg(long, default_value_t = 0)]
    theta_l: u64,
    #[arg(long, default_value_t = 5.0)]
    step_in_minutes: f64,
    #[arg(long, default_value_t = 10_000)]
    runs: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    election: ElectionArg,
    /// Percent of each committee drawn from the high-score class.
    #[arg(long, default_value_t = 60)]
    w: u64,
    /// Misbehaving percent inside the high-score class.
    #[arg(long, default_value_t = 15)]
    a: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn config_help() -> String {
    let mut s = String::from("Config keys (default):\n");
    for (k, v) in documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("  committee.quotas.<module> = per-class seats, e.g. [30, 20]\n");
    s.push_str("  events = list of {kind, module, sub, round, offset, duration | depth}\n");
    s
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn load(common: &Common, extra: &[String]) -> Result<ScenarioConfig, Error> {
    let base = match &common.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut all = common.overrides.clone();
    all.extend_from_slice(extra);
    let mut cfg = apply_overrides(&base, &all)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec_of(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn run_one(cfg: &ScenarioConfig, exec: Exec, out: &Path) -> Result<MetricsReport, Error> {
    let result = run_experiment(cfg, exec)?;
    result.store.write_observations(out)?;
    write_report(&result.report, out)?;
    Ok(result.report)
}

fn print_report(r: &MetricsReport) {
    println!(
        "{}: throughput {:.3} tx/round, confirmation {:.2} s, storage {:.4} MB, ctr {:.2}%",
        r.run_id, r.throughput, r.confirmation_time_s, r.storage_mb, r.ctr_percent
    );
}

fn cmd_run(common: &Common, extra: &[String]) -> Result<(), Error> {
    let cfg = load(common, extra)?;
    let report = run_one(&cfg, exec_of(common), &common.out)?;
    print_report(&report);
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<(), Error> {
    if a.s_c == 0 || a.m > a.n {
        return Err(Error::config("s_c", "need s_c > 0 and m <= n"));
    }
    let theta = match a.theta_l {
        0 => default_liveness_threshold(a.s_c as usize) as u64,
        t => t,
    };
    let mut rows: Vec<(String, f64)> = Vec::new();
    let single = committee_failure_exact_hypergeometric(a.n, &[a.m], &[a.s_c], theta)?;
    rows.push(("committee_failure_random".into(), single));
    let auto = autorecovery_failure(a.n, a.m, a.s_c, a.kappa, theta)?;
    rows.push(("autorecovery_failure".into(), auto));
    rows.push(("chainscale_bound".into(), chainscale_autorecovery_bound(a.chains, auto)));
    if !a.quotas.is_empty() || !a.p.is_empty() {
        if a.quotas.len() != a.p.len() {
            return Err(Error::config("quotas", "needs one rate per class in --p"));
        }
        rows.push(("committee_failure_weighted".into(), committee_failure_weighted(&a.quotas, &a.p, theta)?));
    }
    println!("theta_l = {theta}");
    for (k, v) in &rows {
        println!("{k:<28} {v:e}");
    }
    if let Some(path) = &a.csv {
        let mut f = fs::File::create(path).map_err(Error::from)?;
        writeln!(f, "quantity,probability").map_err(Error::from)?;
        for (k, v) in &rows {
            writeln!(f, "{k},{v:e}").map_err(Error::from)?;
        }
    }
    Ok(())
}

fn recover_mc(a: &McArgs) -> Result<(), Error> {
    let theta = match a.theta_l {
        0 => default_liveness_threshold(a.s_c as usize) as u64,
        t => t,
    };
    let mut p = McParams {
        n: a.n,
        p_lazy: a.p_lazy,
        p_malicious: a.p_malicious,
        s_c: a.s_c,
        kappa: a.kappa,
        theta_l: theta,
        step_in_minutes: a.step_in_minutes,
        runs: a.runs,
        seed: a.seed,
        election: McElection::Random,
    };
    let tag = match a.election {
        ElectionArg::Random => "random".to_string(),
        ElectionArg::Weighted => {
            p.election = McElection::Weighted(WeightedPopulation::two_class(a.n, p.misbehaving(), a.s_c, a.w, a.a)?);
            format!("w{}a{}", a.w, a.a)
        }
    };
    let report = monte_carlo_recovery(&p, Exec::Parallel)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let path = a.out.join(format!("recover_mc_{tag}_s{}.csv", a.seed));
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["run", "failed_before_success", "recovery_minutes"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for (i, (f, m)) in report.failed_before_success.iter().zip(&report.recovery_minutes).enumerate() {
        w.write_record([i.to_string(), f.to_string(), m.to_string()])
            .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(Error::from)?;
    println!(
        "{tag}: mean recovery {:.4} min, all-fail rate {:e}, {} runs -> {}",
        report.mean_minutes,
        report.all_fail_rate,
        a.runs,
        path.display()
    );
    Ok(())
}

/// Expand `--param` specs into labelled override lists.
fn sweep_points(params: &[String]) -> Result<Vec<(String, Vec<String>)>, Error> {
    let mut points = vec![(String::new(), Vec::new())];
    for spec in params {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(spec.clone(), "sweep parameter must look like key=v1,v2"))?;
        let key = key.trim();
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(key, "no values given"));
        }
        let mut next = Vec::new();
        for (label, ovs) in &points {
            for v in &values {
                let mut ovs = ovs.clone();
                if key == "subchains" {
                    ovs.push(format!("topology=\"{v}P1M1D\""));
                } else {
                    ovs.push(format!("{key}={v}"));
                }
                let part = format!("{key}={v}");
                let label = if label.is_empty() { part } else { format!("{label}_{part}") };
                next.push((label, ovs));
            }
        }
        points = next;
    }
    Ok(points)
}

fn sweep(common: &Common, params: &[String], jobs: usize) -> Result<(), Error> {
    let points = sweep_points(params)?;
    let configs: Vec<(String, ScenarioConfig)> = points
        .into_iter()
        .map(|(label, ovs)| load(common, &ovs).map(|c| (label, c)))
        .collect::<Result<_, _>>()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport, Error>>>> = Mutex::new(vec![None; configs.len()]);
    let exec = if jobs > 1 { Exec::Sequential } else { exec_of(common) };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((label, cfg)) = configs.get(i) else { break };
                let r = run_one(cfg, exec, &common.out.join(label));
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut reports = Vec::new();
    for r in results.into_inner().expect("results lock").into_iter().flatten() {
        reports.push(r?);
    }
    for r in &reports {
        print_report(r);
    }
    write_summary(&reports, &common.out.join("summary.csv"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Command::Run(common) => cmd_run(common, &[]),
        Command::Baseline { common, system, shards } => {
            let mut extra = vec![format!(
                "system=\"{}\"",
                match system {
                    BaselineSystem::Single => "single",
                    BaselineSystem::Sharded => "sharded",
                }
            )];
            if let Some(n) = shards {
                extra.push(format!("shards={n}"));
            }
            cmd_run(common, &extra)
        }
        Command::Analyze(a) => analyze(a),
        Command::RecoverMc(a) => recover_mc(a),
        Command::Sweep { common, params, jobs } => sweep(common, params, *jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
