use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rankaware::bench::{format_report, read_csv, sweep_with, write_csv, RunConfig, SweepParam};
use rankaware::cost::{cross_cost, rdcn_param_count, Accounting, CostReport, CrossVariant};
use rankaware::model::{model_cost, Architecture, CrossKind, ModelSpec};
use rankaware::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "rankaware", version, about = "Rank-aware multi-candidate scoring: verify, count, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Fm,
    Fc,
    Cross,
    Attention,
    Model,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Dlrm,
    Dcn,
    Attn,
}

#[derive(Clone, Copy, ValueEnum)]
enum CrossArg {
    Dcnv2,
    Rdcn,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    K,
    M,
}

/// Model fields shared by `flops` and `bench`; flags override `--spec`.
#[derive(clap::Args)]
struct SpecArgs {
    /// JSON model spec used as the base
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',')]
    fc_units: Option<Vec<usize>>,
    #[arg(long)]
    cross_layers: Option<usize>,
    #[arg(long, value_enum)]
    cross_variant: Option<CrossArg>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SpecArgs {
    fn build(&self, k: Option<usize>, m: Option<usize>) -> Result<ModelSpec> {
        let mut spec = match &self.spec {
            Some(path) => load_spec(path)?,
            None => ModelSpec::default(),
        };
        if let Some(a) = self.arch {
            spec.architecture = match a {
                ArchArg::Dlrm => Architecture::Dlrm,
                ArchArg::Dcn => Architecture::Dcn,
                ArchArg::Attn => Architecture::Attn,
            };
        }
        if let Some(c) = self.cross_variant {
            spec.cross_variant = match c {
                CrossArg::Dcnv2 => CrossKind::Dcnv2,
                CrossArg::Rdcn => CrossKind::Rdcn,
            };
        }
        spec.k = k.unwrap_or(spec.k);
        spec.m = m.unwrap_or(spec.m);
        spec.d = self.d.unwrap_or(spec.d);
        spec.n = self.n.unwrap_or(spec.n);
        spec.cross_layers = self.cross_layers.unwrap_or(spec.cross_layers);
        spec.seed = self.seed.unwrap_or(spec.seed);
        if let Some(u) = &self.fc_units {
            spec.fc_units = u.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run equivalence and FLOP-audit suites; exits nonzero on any failure
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Closed-form MAC counts, vanilla against rank-aware
    Flops {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Context width of a standalone cross stack (arch dcn)
        #[arg(long, requires = "dt")]
        dc: Option<u64>,
        /// Target width of a standalone cross stack (arch dcn)
        #[arg(long, requires = "dc")]
        dt: Option<u64>,
        /// Per-candidate cost as N grows without bound
        #[arg(long)]
        amortized: bool,
    },
    /// Closed-loop throughput sweep of both variants
    Bench {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_enum)]
        sweep: SweepArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Value of the parameter not being swept
        #[arg(long)]
        fixed: Option<usize>,
        #[arg(long, default_value_t = 64)]
        concurrency: usize,
        #[arg(long, default_value_t = 10.0)]
        duration_secs: f64,
        #[arg(long, default_value_t = 2.0)]
        warmup_secs: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized-RPS table from a bench CSV
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load_spec(path: &Path) -> Result<ModelSpec> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn print_table(rows: &[(String, CostReport)]) {
    println!(
        "{:<14} {:>16} {:>16} {:>16} {:>9}",
        "component", "vanilla", "rank_aware", "savings", "saved"
    );
    for (name, r) in rows {
        println!(
            "{:<14} {:>16} {:>16} {:>16} {:>8.2}%",
            name,
            r.vanilla_macs,
            r.rank_aware_macs,
            r.savings_macs,
            100.0 * r.savings_fraction
        );
    }
}

fn run_verify(suite: SuiteArg, seed: u64) -> Result<bool> {
    let suite = match suite {
        SuiteArg::Fm => Suite::Fm,
        SuiteArg::Fc => Suite::Fc,
        SuiteArg::Cross => Suite::Cross,
        SuiteArg::Attention => Suite::Attention,
        SuiteArg::Model => Suite::Model,
        SuiteArg::All => Suite::All,
    };
    let reports = verify::run(suite, seed)?;
    println!(
        "{:<10} {:>6} {:>14} {:>14} {:>8}  result",
        "suite", "cases", "max_rel_err", "oracle_err", "tol"
    );
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<10} {:>6} {:>14.3e} {:>14.3e} {:>8.0e}  {}",
            r.suite,
            r.cases,
            r.max_rel_err,
            r.max_oracle_err,
            r.tolerance,
            if r.pass() { "PASS" } else { "FAIL" }
        );
        for f in r.failures.iter().take(5) {
            println!("    {f}");
        }
        ok &= r.pass();
    }
    Ok(ok)
}

fn run_flops(spec: &SpecArgs, k: Option<usize>, m: Option<usize>, dc: Option<u64>, dt: Option<u64>, amortized: bool) -> Result<()> {
    let accounting = if amortized { Accounting::Amortized } else { Accounting::PerRequest };
    if let (Some(dc), Some(dt)) = (dc, dt) {
        let base = spec.build(k, m)?;
        if base.architecture != Architecture::Dcn {
            bail!("--dc/--dt apply to --arch dcn only");
        }
        let (n, l) = (base.n as u64, base.cross_layers as u64);
        let mut rows = Vec::new();
        for (name, v) in [
            ("dcnv2_first", CrossVariant::Dcnv2FirstLayer),
            ("rdcn", CrossVariant::Rdcn),
            ("rdcn_ablated", CrossVariant::RdcnAblated),
        ] {
            rows.push((name.to_string(), cross_cost(n, dc, dt, l, v, accounting)?));
        }
        println!("cross stack d_c={dc} d_t={dt} L={l}, {}", rows[0].1.mode);
        print_table(&rows);
        let (rdcn, dcnv2, saving) = rdcn_param_count(dc, dt);
        println!("weights per layer: dcnv2 {dcnv2}, rdcn {rdcn}, saving {saving}");
        return Ok(());
    }
    let spec = spec.build(k, m)?;
    let cost = model_cost(&spec, accounting)?;
    println!(
        "{:?} k={} m={} d={} fc={:?}, {}",
        spec.architecture, spec.k, spec.m, spec.d, spec.fc_units, cost.total.mode
    );
    let mut rows = cost.components.clone();
    rows.push(("total".to_string(), cost.total));
    print_table(&rows);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    spec: &SpecArgs,
    sweep: SweepArg,
    values: &[usize],
    fixed: Option<usize>,
    config: RunConfig,
    out: &Path,
) -> Result<()> {
    let (param, base) = match sweep {
        SweepArg::K => (SweepParam::K, spec.build(values.first().copied(), fixed)?),
        SweepArg::M => (SweepParam::M, spec.build(fixed, values.first().copied())?),
    };
    eprintln!(
        "sweeping {param} over {values:?}: {:?} k={} m={} d={} n={} fc={:?}, {} workers, {}s + {}s warmup",
        base.architecture, base.k, base.m, base.d, base.n, base.fc_units, config.concurrency, config.duration_s, config.warmup_s
    );
    let records = sweep_with(&base, param, values, &config, |r| {
        eprintln!("  {param}={:<4} {:<10} {:>12.1} rps  p99 {:>10.1} us", r.value, r.variant, r.rps, r.p99_us);
    })?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&records, BufWriter::new(file))?;
    print!("{}", format_report(&records));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { suite, seed } => run_verify(suite, seed),
        Command::Flops { spec, k, m, dc, dt, amortized } => run_flops(&spec, k, m, dc, dt, amortized).map(|_| true),
        Command::Bench {
            spec,
            sweep,
            values,
            fixed,
            concurrency,
            duration_secs,
            warmup_secs,
            out,
        } => {
            let config = RunConfig {
                concurrency,
                duration_s: duration_secs,
                warmup_s: warmup_secs,
            };
            run_bench(&spec, sweep, &values, fixed, config, &out).map(|_| true)
        }
        Command::Report { input } => File::open(&input)
            .with_context(|| format!("opening {}", input.display()))
            .and_then(|f| Ok(read_csv(BufReader::new(f))?))
            .map(|records| {
                print!("{}", format_report(&records));
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
