use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use capsctx::checks;
use capsctx::config::ModelConfig;
use capsctx::data::{load_dataset, load_manifest};
use capsctx::experiments;
use capsctx::model::{records_to_csv, train, CapsModel};
use capsctx::synth::{generate, SynthSpec};
use capsctx::CapsError;

#[derive(Parser)]
#[command(name = "capsctx", about = "Capsule network with CRF refinement and correlated decision capsules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic correlated multi-label corpus
    Synth {
        /// Generator spec file (key = value); defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a model and write metrics.csv plus a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest CSV
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Print the full default config and exit
        #[arg(long, default_value_t = false)]
        print_defaults: bool,
    },
    /// Evaluate a checkpoint on a manifest
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// One module name (default: all)
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the three-row ablation and emit comparison + convergence CSVs
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seed list
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code_for(err: &CapsError) -> u8 {
    match err {
        CapsError::Io(_) => 3,
        CapsError::Config(_) => 4,
        _ => 1,
    }
}

fn write_file(path: &std::path::Path, contents: &str) -> Result<(), CapsError> {
    std::fs::write(path, contents).map_err(|e| CapsError::Io(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<u8, CapsError> {
    match cli.command {
        Command::Synth { spec, out, n } => {
            let spec = match spec {
                Some(path) => SynthSpec::load(&path)?,
                None => SynthSpec::default(),
            };
            let manifest = generate(&spec, n, &out)?;
            println!("wrote {n} samples, manifest {}", manifest.display());
            Ok(0)
        }
        Command::Train { config, data, out, print_defaults } => {
            if print_defaults {
                print!("{}", ModelConfig::print_defaults());
                return Ok(0);
            }
            let cfg = ModelConfig::load(&config)?;
            let manifest = load_manifest(&data, cfg.j)?;
            let dataset = load_dataset(&manifest, cfg.j)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| CapsError::Io(format!("{}: {e}", out.display())))?;
            let mut model = CapsModel::new(cfg)?;
            let records = train(&mut model, &dataset, None, None)?;
            write_file(&out.join("metrics.csv"), &records_to_csv(&records))?;
            model.save(&out.join("model.ckpt"))?;
            if let Some(last) = records.iter().filter(|r| r.split == "train").next_back() {
                println!("final train mAP {} loss {}", last.map, last.loss);
            }
            Ok(0)
        }
        Command::Eval { checkpoint, data } => {
            let model = CapsModel::load(&checkpoint)?;
            let manifest = load_manifest(&data, model.cfg.j)?;
            let dataset = load_dataset(&manifest, model.cfg.j)?;
            let (report, loss) = model.evaluate(&dataset)?;
            println!("mAP {} loss {}", report.map, loss);
            if !report.classes_without_positives.is_empty() {
                println!("classes without positives, excluded: {:?}", report.classes_without_positives);
            }
            Ok(0)
        }
        Command::Gradcheck { module, tol, seed } => {
            let model_tol = tol.max(1e-3);
            let reports = match module {
                Some(name) => {
                    let t = if name == "model" { model_tol } else { tol };
                    vec![(name.clone(), checks::module_grad_check(&name, seed, t)?)]
                }
                None => checks::run_suite(seed, tol, model_tol)?,
            };
            let mut all_pass = true;
            for (name, report) in &reports {
                all_pass &= report.pass;
                println!(
                    "{name}: {} (max rel err {:.3e})",
                    if report.pass { "PASS" } else { "FAIL" },
                    report.max_rel_err
                );
                for note in &report.notes {
                    println!("  note: {note}");
                }
            }
            Ok(if all_pass { 0 } else { 1 })
        }
        Command::Ablate { config, data, seeds, out } => {
            let cfg = ModelConfig::load(&config)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CapsError::Config(format!("bad seed `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            if seeds.is_empty() {
                return Err(CapsError::Config("empty seed list".into()));
            }
            let manifest = load_manifest(&data, cfg.j)?;
            let dataset = load_dataset(&manifest, cfg.j)?;
            let (train_set, test_set) = experiments::split_dataset(&dataset);
            std::fs::create_dir_all(&out)
                .map_err(|e| CapsError::Io(format!("{}: {e}", out.display())))?;
            let results = experiments::run_ablation(&cfg, &train_set, &test_set, &seeds)?;
            write_file(&out.join("comparison.csv"), &experiments::comparison_csv(&results))?;
            write_file(&out.join("convergence.csv"), &experiments::convergence_csv(&results))?;
            for (name, mean) in experiments::row_means(&results) {
                println!("{name}: mean test mAP {mean}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits 2 on unknown flags
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
