use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use blockfed::config::{ExperimentConfig, Variant};
use blockfed::error::{Error, Result};
use blockfed::memory;
use blockfed::report::{self, JsonlWriter, SummaryRow};
use blockfed::sim::{load_dataset, Simulation, Summary};

#[derive(Parser)]
#[command(
    name = "blockfed",
    version,
    about = "Memory-constrained federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment: metrics.jsonl, summary.csv, warnings.jsonl.
    Run(Common),
    /// Run several variants over several seeds: compare.csv plus per-run metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated variants (e2e, naive_pt, blockfed, blockfed_wo_ca, blockfed_wo_pc).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Per-round, per-block dependence probe: hsic_plane.csv.
    HsicPlane(Common),
    /// Analytic per-stage memory: mem_report.csv.
    MemReport(Common),
    /// Run the built-in gradient checks.
    GradCheck,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training; 0 picks the core count.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        for w in cfg.validate()? {
            warn!("{w}");
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok((cfg, out))
    }
}

fn run_one(cfg: &ExperimentConfig, threads: usize, dir: &Path, variant: &str) -> Result<SummaryRow> {
    let mut sim = Simulation::new(cfg, threads)?;
    let mut metrics_out = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
    let metrics = sim.run_with(|m| {
        info!("round {} stage {} accuracy {:.4}", m.round, m.stage, m.accuracy);
        metrics_out.write(m)
    })?;
    metrics_out.finish()?;
    report::write_jsonl(&dir.join("warnings.jsonl"), &sim.take_warnings())?;
    let row = SummaryRow::new(variant, cfg, &Summary::from_metrics(&metrics));
    report::write_summary_csv(&dir.join("summary.csv"), std::slice::from_ref(&row))?;
    Ok(row)
}

fn variant_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.plan.mode {
        blockfed::harmonizer::Mode::Blockfed => "blockfed",
        blockfed::harmonizer::Mode::NaivePt => "naive_pt",
        blockfed::harmonizer::Mode::E2e => "e2e",
    }
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let row = run_one(&cfg, c.threads, &out, variant_name(&cfg))?;
            println!(
                "final accuracy {:.4}, mean of last 10 rounds {:.4}",
                row.final_accuracy, row.mean_last10_accuracy
            );
        }
        Command::Compare {
            common,
            seeds,
            variants,
        } => {
            let (base, out) = common.load()?;
            let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds };
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| {
                        Variant::parse(v)
                            .ok_or_else(|| Error::Config(vec![format!("--variants: unknown variant `{v}`")]))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let mut seen = std::collections::BTreeSet::new();
            for v in &variants {
                for s in &seeds {
                    if !seen.insert((v.name(), *s)) {
                        return Err(Error::Config(vec![format!(
                            "variant {} with seed {s} is listed twice; both runs would write {}",
                            v.name(),
                            out.join(format!("{}_seed{s}", v.name())).display()
                        )]));
                    }
                }
            }
            let mut rows = Vec::new();
            for v in &variants {
                for &s in &seeds {
                    let mut cfg = v.apply(&base);
                    cfg.seed = s;
                    let dir = out.join(format!("{}_seed{s}", v.name()));
                    let row = run_one(&cfg, common.threads, &dir, v.name())?;
                    println!(
                        "{:<16} seed {s:<6} final {:.4}  last-10 mean {:.4}",
                        v.name(),
                        row.final_accuracy,
                        row.mean_last10_accuracy
                    );
                    rows.push(row);
                }
            }
            report::write_summary_csv(&out.join("compare.csv"), &rows)?;
        }
        Command::HsicPlane(c) => {
            let (cfg, out) = c.load()?;
            let mut sim = Simulation::new(&cfg, c.threads)?;
            let metrics = sim.run()?;
            report::write_plane_csv(&out.join("hsic_plane.csv"), &metrics)?;
            report::write_jsonl(&out.join("warnings.jsonl"), &sim.take_warnings())?;
        }
        Command::MemReport(c) => {
            let (cfg, out) = c.load()?;
            // fail on an unreadable dataset before reporting anything
            load_dataset(&cfg)?;
            let sim = Simulation::new(&cfg, 1)?;
            let r = memory::reduction_report(sim.spec(), sim.partition(), &sim.stage_options(), cfg.fl.batch_size)?;
            for row in report::mem_rows(&r) {
                println!(
                    "stage {}: {} bytes ({:.2}% below full)",
                    row.stage, row.total_bytes, row.reduction_pct
                );
            }
            report::write_mem_csv(&out.join("mem_report.csv"), &r)?;
        }
        Command::GradCheck => {
            let outcomes = blockfed::gradcheck::run_suite(&blockfed::gradcheck::builtin_suite());
            return report::grad_check_report(&outcomes, &mut std::io::stdout()).map_err(Error::from);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
