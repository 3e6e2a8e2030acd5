use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nas_mdl::commands::{cmd_compare, cmd_finetune, cmd_pretrain, cmd_search_and_finetune, with_jobs};
use nas_mdl::config::ExperimentConfig;
use nas_mdl::report::cmd_report;
use nas_mdl::Error;

#[derive(Parser)]
#[command(name = "nas-mdl", version, about = "Searched adapters for multi-domain learning over a frozen trunk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; domains run in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root; overrides MDL_OUT and the config.
    #[arg(long, env = "MDL_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithTrunk {
    #[command(flatten)]
    common: Common,
    /// Trunk checkpoint; defaults to <out>/trunk.ckpt.
    #[arg(long)]
    trunk: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the trunk on the anchor domain, freeze it and save a checkpoint.
    Pretrain(Common),
    /// Search structures and plugging locations, then finetune, per domain.
    Search(WithTrunk),
    /// Finetune stored structures and masks again from fresh parameters.
    Finetune(WithTrunk),
    /// Compare plugging strategies at the searched budget.
    Compare(WithTrunk),
    /// Tables, CSV files and charts from an output root.
    Report {
        /// Output root holding `results/`.
        #[arg(long, env = "MDL_OUT")]
        out: PathBuf,
    },
}

fn setup(c: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = setup(&c)?;
            let info = with_jobs(c.jobs, || cmd_pretrain(&cfg, &out))??;
            println!("anchor accuracy {:.4}", info.anchor_accuracy);
            println!("trunk checksum {}", info.checksum);
            println!("wrote {}", out.join(nas_mdl::commands::TRUNK_FILE).display());
        }
        Command::Search(t) => {
            let (cfg, out) = setup(&t.common)?;
            let s = with_jobs(t.common.jobs, || cmd_search_and_finetune(&cfg, &out, t.trunk.as_deref()))??;
            for d in &s.domains {
                println!("{:<20} acc {:.4}  ada.param {:>6.2}%  masks {}", d.domain, d.mean_accuracy, d.mean_adapter_params_percent, d.masks.join(","));
            }
            println!("average accuracy {:.4}", s.average_accuracy);
            print_written(&out, "results");
        }
        Command::Finetune(t) => {
            let (cfg, out) = setup(&t.common)?;
            let recs = with_jobs(t.common.jobs, || cmd_finetune(&cfg, &out, t.trunk.as_deref()))??;
            for r in &recs {
                let accs: Vec<String> = r.runs.iter().map(|x| format!("{:.4}", x.test_accuracy)).collect();
                println!("{:<20} acc {}", r.domain, accs.join(","));
            }
            print_written(&out, "finetune");
        }
        Command::Compare(t) => {
            let (cfg, out) = setup(&t.common)?;
            let rows = with_jobs(t.common.jobs, || cmd_compare(&cfg, &out, t.trunk.as_deref()))??;
            for r in &rows {
                println!(
                    "{:<20} {:<10} acc {:.4} ± {:.4}  ada.param {:>6.2}%",
                    r.domain,
                    r.strategy.name(),
                    r.mean_accuracy,
                    r.std_accuracy,
                    r.mean_adapter_params_percent
                );
            }
            print_written(&out, "compare");
        }
        Command::Report { out } => {
            let rep = cmd_report(&out)?;
            print!("{}", rep.table);
            for f in &rep.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn print_written(out: &Path, dir: &str) {
    println!("wrote {}", out.join(dir).display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("invalid arguments");
                eprintln!("error[code=CONFIG]: {}", first.trim_start_matches("error: "));
                return ExitCode::from(2);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[code={}]: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
