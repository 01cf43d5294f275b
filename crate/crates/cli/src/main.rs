use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sfada_core::config::{parse_ablate, Overrides, RunConfig};
use sfada_core::harness::{self, FeatureData, RunReport, Variant};
use sfada_core::{Error, Result};

/// Source-free active domain adaptation experiments.
///
/// Settings come from built-in defaults, then `--config`, then flags.
#[derive(Parser)]
#[command(name = "sfada", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Toggle a component, e.g. `mixup=false`. Repeatable.
    #[arg(long = "ablate", value_name = "KEY=BOOL", value_parser = parse_ablate_arg)]
    ablate: Vec<(String, bool)>,
    /// Fraction of the target set labelled over all rounds.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let o = Overrides { seed: self.seed, budget: self.budget, rounds: self.rounds, ablate: self.ablate.clone() };
        RunConfig::resolve(self.config.as_deref(), &o)
    }
}

fn parse_ablate_arg(s: &str) -> std::result::Result<(String, bool), String> {
    parse_ablate(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Export the datasets and train the source model.
    PretrainSource(Common),
    /// Train the feature generator against the frozen source classifier.
    TrainGenerator(Common),
    /// Active selection and adaptation from the stage-1 checkpoints.
    Adapt(Common),
    /// Score the adapted model and write report.json.
    Evaluate(Common),
    /// All of the above in order.
    RunAll(Common),
    /// Tabulate several report.json files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write comparison.csv and comparison.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump features of a dataset under a checkpoint to features_<tag>.csv.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        data: DataArg,
        #[arg(long)]
        tag: String,
    },
    /// Run an ablation table over several seeds.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Seeds 0..N (offset by --seed when given).
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_enum, default_value = "lpda")]
        table: Table,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DataArg {
    Source,
    Target,
    Generated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    /// Component ladder plus random selection and threshold-only labels.
    Lpda,
    /// Pseudo-label switches.
    Spmis,
    All,
}

fn print_report(r: &RunReport, out: &Path) {
    let e = &r.final_eval;
    let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
    println!(
        "{}: acc {:.4} (source only {:.4}) macro-F1 {:.4} kappa {} QWK {} AUC {}",
        r.label,
        e.accuracy,
        r.source_only.accuracy,
        e.macro_f1,
        f(e.kappa),
        f(e.qwk),
        f(e.macro_auc)
    );
    println!(
        "oracle labels {} of {}; report in {}",
        r.selection.oracle_distinct_calls,
        r.selection.total_budget,
        out.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainSource(c) => {
            let s = harness::stage_pretrain_source(&c.resolve()?, &c.out)?;
            println!(
                "source train accuracy {:.4}; adjacent cosine {:.4}, classes 0/K-1 {:.4}",
                s.source_train_accuracy, s.adjacent_similarity, s.far_similarity
            );
        }
        Command::TrainGenerator(c) => {
            let s = harness::stage_train_generator(&c.resolve()?, &c.out)?;
            println!("generator accuracy {:.4}", s.generator_accuracy.unwrap_or(f64::NAN));
        }
        Command::Adapt(c) => {
            let s = harness::stage_adapt(&c.resolve()?, &c.out)?;
            let last = s.epochs.last().map_or(f64::NAN, |e| e.accuracy);
            println!("adapted over {} epochs, final accuracy {last:.4}", s.epochs.len());
        }
        Command::Evaluate(c) => print_report(&harness::stage_evaluate(&c.resolve()?, &c.out)?, &c.out),
        Command::RunAll(c) => print_report(&harness::run_all(&c.resolve()?, &c.out)?, &c.out),
        Command::Compare { reports, out } => {
            let loaded = reports.iter().map(|p| RunReport::load(p)).collect::<Result<Vec<_>>>()?;
            let cmp = harness::compare(&loaded)?;
            print!("{}", cmp.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
                let mut hashes: Vec<&str> = loaded.iter().map(|r| r.config_hash.as_str()).collect();
                hashes.dedup();
                let seeds: Vec<String> = loaded.iter().map(|r| r.seed.to_string()).collect();
                let header = format!(
                    "# config_hash={} seed={} dataset_hash={}",
                    hashes.join(","),
                    seeds.join(","),
                    cmp.dataset_hash
                );
                for (name, body) in
                    [("comparison.csv", format!("{header}\n{}", cmp.to_csv())), ("comparison.txt", cmp.to_text())]
                {
                    let p = dir.join(name);
                    std::fs::write(&p, body).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?;
                }
            }
        }
        Command::ExportFeatures { common, checkpoint, data, tag } => {
            let data = match data {
                DataArg::Source => FeatureData::Source,
                DataArg::Target => FeatureData::Target,
                DataArg::Generated => FeatureData::Generated,
            };
            let p = harness::stage_export_features(&common.resolve()?, &common.out, &checkpoint, data, &tag)?;
            println!("wrote {}", p.display());
        }
        Command::Grid { common, seeds, table } => {
            let base = common.resolve()?;
            let first = common.seed.unwrap_or(0);
            let seeds: Vec<u64> = (first..first + seeds).collect();
            let mut variants: Vec<Variant> = Vec::new();
            if matches!(table, Table::Lpda | Table::All) {
                variants.extend(harness::lpda_variants());
                variants.push(harness::random_selection_variant());
                variants.push(harness::threshold_only_variant());
            }
            if matches!(table, Table::Spmis | Table::All) {
                variants.extend(harness::spmis_variants());
            }
            let g = harness::run_grid(&base, &seeds, &variants, Some(&common.out), |m| eprintln!("{m}"))?;
            print!("{}", harness::compare(&g.reports())?.to_text());
            println!("grid took {:.0}s", g.wall_secs);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
