use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use teir::bench::{build_benchmark, gen_benchmark, Split};
use teir::config::RunConfig;
use teir::gradcheck::{grad_check, Corruption, GradCheckConfig};
use teir::harness::{evaluate_run, run_sequence, RunData, RunDir};
use teir::metrics::{average_recall, forgetting, Direction};
use teir::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "teir", version, about = "Continual language learning for a frozen dual encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Continual,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual benchmark.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a continual (or joint) training sequence.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; generated in memory from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        teir_init: Option<OnOff>,
        #[arg(long, value_enum)]
        teir_reg: Option<OnOff>,
        #[arg(long)]
        oracle_vocab: bool,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the evaluation matrix of a run from its checkpoints.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Write AR/F tables, diagnostics and plots of a run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add DELTA to the analytic gradient at (ROW, COL) before comparing.
        #[arg(long, value_name = "ROW,COL,DELTA", hide = true)]
        corrupt: Option<String>,
    },
}

fn overrides(set: &[String]) -> teir::Result<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(kv.as_str(), "override must look like key=value"))
        })
        .collect()
}

fn load_config(args: &ConfigArgs, extra: Vec<(String, String)>) -> teir::Result<RunConfig> {
    let mut ov = overrides(&args.set)?;
    ov.extend(extra);
    RunConfig::load(args.config.as_deref(), &ov)
}

fn print_summary(eval: &teir::metrics::EvalMatrix) {
    let Some(j) = eval.last_complete_row() else { return };
    for dir in [Direction::ImageToText, Direction::TextToImage] {
        let ar = average_recall(eval, j, dir).map_or("-".into(), |v| format!("{v:.2}"));
        let f = forgetting(eval, j, dir).map_or("-".into(), |v| format!("{v:.2}"));
        println!("{dir} AR={ar} F={f}");
    }
}

fn run(cli: Cli) -> teir::Result<ExitCode> {
    match cli.cmd {
        Command::GenData { cfg, out } => {
            let cfg = load_config(&cfg, Vec::new())?;
            let manifest = gen_benchmark(&cfg.bench, &out)?;
            println!(
                "dataset {}: {} languages ({}), {} images, {}/{}/{} train/val/test",
                out.display(),
                manifest.languages.len(),
                manifest.languages.join(","),
                cfg.bench.n_images(),
                cfg.bench.n_train,
                cfg.bench.n_val,
                cfg.bench.n_test
            );
        }
        Command::Train {
            cfg,
            data,
            out,
            teir_init,
            teir_reg,
            oracle_vocab,
            mode,
            seed,
        } => {
            let on_off = |v: OnOff| match v {
                OnOff::On => "on",
                OnOff::Off => "off",
            };
            let mut extra = Vec::new();
            if let Some(v) = teir_init {
                extra.push(("train.teir_init".into(), on_off(v).into()));
            }
            if let Some(v) = teir_reg {
                extra.push(("train.teir_reg".into(), on_off(v).into()));
            }
            if oracle_vocab {
                extra.push(("vocab.oracle".into(), "true".into()));
            }
            if let Some(m) = mode {
                let m = match m {
                    ModeArg::Continual => "continual",
                    ModeArg::Joint => "joint",
                };
                extra.push(("train.mode".into(), m.into()));
            }
            if let Some(s) = seed {
                extra.push(("train.seed".into(), s.to_string()));
            }
            let cfg = load_config(&cfg, extra)?;
            let data = match data {
                Some(dir) => RunData::load(&cfg, &dir)?,
                None => RunData::from_benchmark(&cfg, &build_benchmark(&cfg.bench)?),
            };
            let artifacts = run_sequence(&cfg, &data, Some(&out))?;
            println!("run written to {}", out.display());
            print_summary(&artifacts.eval);
        }
        Command::Eval { run, data, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let eval = evaluate_run(&run, &data, split)?;
            let path = RunDir::new(&run).root.join(format!("eval_{split}.csv"));
            eval.save(&path)?;
            println!("evaluation written to {}", path.display());
            print_summary(&eval);
        }
        Command::Report { run, out } => {
            for path in teir::report::write_report(&run, &out)? {
                println!("{}", path.display());
            }
        }
        Command::GradCheck { seed, corrupt } => {
            let corrupt = corrupt.as_deref().map(parse_corruption).transpose()?;
            let report = grad_check(&GradCheckConfig {
                seed,
                corrupt,
                ..GradCheckConfig::default()
            })?;
            if report.passed() {
                println!("grad-check ok: {} entries, worst {}", report.checked, report.worst);
            } else {
                println!("grad-check failed: worst {}", report.worst);
                return Err(Error::Numeric(format!(
                    "gradient mismatch at row {} col {}: rel_err={:.3e} > {:.0e}",
                    report.worst.row, report.worst.col, report.worst.rel_err, report.tolerance
                )));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_corruption(s: &str) -> teir::Result<Corruption> {
    let bad = || Error::config("corrupt", format!("expected ROW,COL,DELTA, got `{s}`"));
    let parts: Vec<&str> = s.split(',').collect();
    let [row, col, delta] = parts[..] else { return Err(bad()) };
    Ok(Corruption {
        row: row.trim().parse().map_err(|_| bad())?,
        col: col.trim().parse().map_err(|_| bad())?,
        delta: delta.trim().parse().map_err(|_| bad())?,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Runtime => 2,
        ErrorClass::Io => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEIR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
