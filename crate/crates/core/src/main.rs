use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use xlirs::config::RunConfig;
use xlirs::omp::residual_history_table;
use xlirs::pipeline::{
    complexity_report, dbv, derive_seed, rows_to_csv, run_ce_frame, run_track, sweep_pilots, sweep_snr, trial_truth, two_column, Algo,
    Counters, Setup,
};
use xlirs::spvbi::trace_table;

#[derive(Parser)]
#[command(name = "xlirs", version, about = "Near-field XL-IRS channel estimation and tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding `sweep.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `sweep.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict to one algorithm; sweeps run all three otherwise.
    #[arg(long, global = true)]
    algo: Option<Algo>,
    /// Trial count, overriding `sweep.trials`.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// One channel-estimation frame.
    Estimate,
    /// An estimation frame followed by tracking frames.
    Track,
    /// Estimation NMSE over the configured SNR axis.
    SweepSnr,
    /// Tracking NMSE over the configured pilot counts.
    SweepPilots,
    /// Fast oracle and property checks.
    Selftest,
    /// Operation counts of one estimation frame.
    Complexity,
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
    seed: u64,
    algo: Option<Algo>,
    quiet: bool,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.sweep.seed = s;
        }
        if let Some(t) = c.trials {
            cfg.sweep.trials = t;
        }
        cfg.validate()?;
        let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.sweep.output_dir));
        Ok(Self { hash: cfg.hash(), seed: cfg.sweep.seed, cfg, out, algo: c.algo, quiet: c.quiet })
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        let text = if body.starts_with("# config-hash:") { body.to_string() } else { format!("# config-hash: {}\n{body}", self.hash) };
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn algos(&self) -> Vec<Algo> {
        self.algo.map_or_else(|| vec![Algo::Tscet, Algo::Omp, Algo::TompSs], |a| vec![a])
    }
}

fn estimate(ctx: &Ctx) -> Result<()> {
    let setup = Setup::new(&ctx.cfg)?;
    let algo = ctx.algo.unwrap_or(Algo::Tscet);
    let truth = trial_truth(&setup, ctx.seed)?;
    let r = run_ce_frame(&setup, &truth, derive_seed(ctx.seed, 100, 0), algo, true)?;
    ctx.write("residual_history.txt", &residual_history_table(&r.coarse.history))?;
    if !r.kl_trace.is_empty() {
        ctx.write("kl_trace.txt", &trace_table(&r.kl_trace))?;
    }
    let active = r.estimate.active.iter().filter(|a| **a).count();
    let summary = format!(
        "algorithm {algo}\nseed {}\npilots {}\nnmse {:.9e}\nnmse_db {:.4}\nactive_atoms {active}\ndoppler_hz {:.6}\n",
        ctx.seed,
        r.pilots,
        r.nmse,
        dbv(r.nmse),
        r.estimate.doppler
    );
    let path = ctx.write("estimate.txt", &summary)?;
    ctx.say(format!("{algo}: NMSE {:.2} dB with {active} atoms ({})", dbv(r.nmse), path.display()));
    Ok(())
}

fn track(ctx: &Ctx) -> Result<()> {
    let setup = Setup::new(&ctx.cfg)?;
    let algo = ctx.algo.unwrap_or(Algo::Tscet);
    let sw = &ctx.cfg.sweep;
    let r = run_track(&setup, ctx.seed, algo, sw.frames, setup.scenario().pilots_ct, sw.track_nonideal)?;
    let rows = r.nmse.iter().enumerate().map(|(t, x)| ((t + 1) as f64, *x));
    let path = ctx.write("track_nmse.txt", &two_column(&ctx.hash, "frame nmse", rows))?;
    for (t, x) in r.nmse.iter().enumerate() {
        ctx.say(format!("frame {:>2}: NMSE {:.2} dB", t + 1, dbv(*x)));
    }
    ctx.say(format!("{algo}: TNMSE {:.2} dB ({})", dbv(r.tnmse), path.display()));
    Ok(())
}

fn sweep(ctx: &Ctx, pilots: bool) -> Result<()> {
    let rows = if pilots { sweep_pilots(&ctx.cfg, &ctx.algos())? } else { sweep_snr(&ctx.cfg, &ctx.algos())? };
    let name = if pilots { "sweep_pilots.csv" } else { "sweep_snr.csv" };
    let path = ctx.write(name, &rows_to_csv(&rows, &ctx.hash))?;
    for r in &rows {
        ctx.say(format!("{} {:>5} {:<7} {:8.2} dB ± {:.2} ({} trials, {} failed)", r.axis, r.value, r.algo, r.nmse_db, r.stderr_db, r.trials, r.failures));
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn complexity(ctx: &Ctx) -> Result<()> {
    let setup = Setup::new(&ctx.cfg)?;
    let truth = trial_truth(&setup, ctx.seed)?;
    let r = run_ce_frame(&setup, &truth, derive_seed(ctx.seed, 100, 0), Algo::Tscet, true)?;
    let report = complexity_report(&setup, &Counters::merged(&[r.counters]));
    let path = ctx.write("complexity.txt", &report)?;
    ctx.say(report.trim_end());
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn selftest(ctx: &Ctx) -> bool {
    let mut ok = true;
    for (c, secs) in xlirs::selftest::run_all() {
        ok &= c.pass;
        ctx.say(format!("{} {:<24} {:>7.3}s  {}", if c.pass { "PASS" } else { "FAIL" }, c.name, secs, c.detail));
    }
    ok
}

fn run(cli: &Cli) -> Result<bool> {
    let ctx = Ctx::new(&cli.common)?;
    match cli.command {
        Command::Estimate => estimate(&ctx)?,
        Command::Track => track(&ctx)?,
        Command::SweepSnr => sweep(&ctx, false)?,
        Command::SweepPilots => sweep(&ctx, true)?,
        Command::Complexity => complexity(&ctx)?,
        Command::Selftest => return Ok(selftest(&ctx)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
